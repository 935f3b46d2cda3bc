// Scratch experiment driver used while tuning desk-scale defaults.

use mdaqa::metrics::evaluate;
use mdaqa::model::{ModelConfig, QaModel};
use mdaqa::qa_task::{generate_corpus, DomainSpec, QASample};
use mdaqa::selftrain::{adapt, AdaptConfig};
use mdaqa::training::{train_source, OptimizerConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(42);
    let shift: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.6);

    let source_spec = DomainSpec {
        seed: seed * 10 + 1,
        ..DomainSpec::default()
    };
    let dev_spec = DomainSpec {
        seed: seed * 10 + 2,
        ..DomainSpec::default()
    };
    let target_spec = DomainSpec {
        shift,
        seed: seed * 10 + 3,
        ..DomainSpec::default()
    };
    let test_spec = DomainSpec {
        shift,
        seed: seed * 10 + 4,
        ..DomainSpec::default()
    };

    let train = generate_corpus(&source_spec, 2000).unwrap();
    let dev = generate_corpus(&dev_spec, 500).unwrap();
    let targets: Vec<QASample> = generate_corpus(&target_spec, 1000)
        .unwrap()
        .into_iter()
        .map(|s| s.without_answer())
        .collect();
    let test = generate_corpus(&test_spec, 500).unwrap();

    let mut model = QaModel::new(ModelConfig::default(), seed).unwrap();
    let opt = OptimizerConfig {
        seed,
        ..OptimizerConfig::default()
    };
    let (snap, log) = train_source(&mut model, &train, &opt).unwrap();
    let snap = snap.unwrap();
    println!(
        "epoch1 total={:.4} last total={:.4} active_fraction={:.3} [{:?}]",
        log[0].total,
        log.last().unwrap().total,
        log.last().unwrap().active_fraction,
        t0.elapsed()
    );
    let src_dev = evaluate(&model, &dev).unwrap();
    println!("source dev EM={:.2} F1={:.2}", src_dev.em, src_dev.f1);

    let base = evaluate(&model, &test).unwrap();
    println!("target test (no adaptation) EM={:.2} F1={:.2}", base.em, base.f1);

    let mut adapted = model.clone();
    let cfg = AdaptConfig {
        seed: seed + 500,
        ..AdaptConfig::default()
    };
    let rounds = adapt(&mut adapted, Some(&snap), &targets, &cfg, opt.lambda).unwrap();
    for r in &rounds {
        println!(
            "round {} n_pseudo={} qualified={:.3} mean_score={:.3} ce={:.4}",
            r.round, r.n_pseudo, r.qualified_fraction, r.mean_score, r.ce
        );
    }
    let after = evaluate(&adapted, &test).unwrap();
    println!(
        "target test (adapted)      EM={:.2} F1={:.2}  (delta EM {:+.2})",
        after.em,
        after.f1,
        after.em - base.em
    );

    // Mask stats
    let active = snap.active_kernels().len();
    println!(
        "snapshot active kernels {}/{} ; elapsed {:?}",
        active,
        snap.len(),
        t0.elapsed()
    );

    // Per-class breakdown: answer length x whether all boundary ids are
    // intact under the target permutation.
    let layout = test_spec.vocab_layout().unwrap();
    let fresh: std::collections::BTreeSet<u32> = layout
        .reserve_ids
        .iter()
        .cloned()
        .collect();
    let mut buckets: std::collections::BTreeMap<(usize, bool), (usize, usize, usize)> =
        Default::default();
    for (i, s) in test.iter().enumerate() {
        let gold = s.answer.unwrap();
        let len = gold.len();
        let start_id = s.context[gold.start].0;
        let end_id = s.context[gold.end].0;
        let intact = !fresh.contains(&start_id) && !fresh.contains(&end_id);
        let e = buckets.entry((len, intact)).or_default();
        e.0 += 1;
        e.1 += base.per_sample[i].em as usize;
        e.2 += after.per_sample[i].em as usize;
    }
    for ((len, intact), (n, em0, em1)) in buckets {
        println!(
            "len={len} intact={intact}: n={n} base_em={:.1} adapted_em={:.1}",
            100.0 * em0 as f64 / n as f64,
            100.0 * em1 as f64 / n as f64
        );
    }
}
