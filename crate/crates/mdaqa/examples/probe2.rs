// Scratch: per-round adaptation telemetry.

use mdaqa::metrics::evaluate;
use mdaqa::model::{ModelConfig, QaModel};
use mdaqa::qa_task::{generate_corpus, DomainSpec, QASample};
use mdaqa::selftrain::{adapt, AdaptConfig};
use mdaqa::training::{train_source, OptimizerConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let shift: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.6);

    let source_spec = DomainSpec { seed: seed * 10 + 1, ..DomainSpec::default() };
    let target_spec = DomainSpec { shift, seed: seed * 10 + 3, ..DomainSpec::default() };
    let test_spec = DomainSpec { shift, seed: seed * 10 + 4, ..DomainSpec::default() };

    let train = generate_corpus(&source_spec, 2000).unwrap();
    let targets: Vec<QASample> = generate_corpus(&target_spec, 1000)
        .unwrap()
        .into_iter()
        .map(|s| s.without_answer())
        .collect();
    let test = generate_corpus(&test_spec, 500).unwrap();

    let mut model = QaModel::new(ModelConfig::default(), seed).unwrap();
    let opt = OptimizerConfig { seed, ..OptimizerConfig::default() };
    let (snap, _) = train_source(&mut model, &train, &opt).unwrap();
    let snap = snap.unwrap();

    let layout = test_spec.vocab_layout().unwrap();
    let fresh: std::collections::BTreeSet<u32> = layout.reserve_ids.iter().cloned().collect();
    let bucket_eval = |model: &QaModel, label: &str| {
        let rep = evaluate(model, &test).unwrap();
        let mut buckets: std::collections::BTreeMap<(usize, bool), (usize, usize)> =
            Default::default();
        for (i, s) in test.iter().enumerate() {
            let gold = s.answer.unwrap();
            let intact = !fresh.contains(&s.context[gold.start].0)
                && !fresh.contains(&s.context[gold.end].0);
            let e = buckets.entry((gold.len().min(2), intact)).or_default();
            e.0 += 1;
            e.1 += rep.per_sample[i].em as usize;
        }
        let fmt: Vec<String> = buckets
            .iter()
            .map(|((l, i), (n, em))| {
                format!("len{}{} {:.0}%", l, if *i { "+" } else { "-" }, 100.0 * *em as f64 / *n as f64)
            })
            .collect();
        println!("{label}: EM={:.2} F1={:.2} [{}]", rep.em, rep.f1, fmt.join(" "));
    };

    bucket_eval(&model, "round 0");
    let cfg_one = AdaptConfig { rounds: 1, seed: seed + 500, ..AdaptConfig::default() };
    for r in 1..=5 {
        let log = adapt(&mut model, Some(&snap), &targets, &cfg_one, opt.lambda).unwrap();
        print!(
            "  n_pseudo={} qualified={:.3} ",
            log[0].n_pseudo, log[0].qualified_fraction
        );
        bucket_eval(&model, &format!("round {r}"));
    }

    // Inspect a few stuck samples: multi-token answers with fresh ids.
    let classify = |id: u32| -> &'static str {
        let orig = (0..layout.start_ids.len() * 0 + 200)
            .find(|&x| layout.remap(mdaqa::qa_task::TokenId(x as u32)).0 == id)
            .unwrap() as u32;
        if layout.start_ids.contains(&orig) {
            "S"
        } else if layout.body_ids.contains(&orig) {
            "B"
        } else if layout.end_ids.contains(&orig) {
            "E"
        } else if layout.filler_ids.contains(&orig) {
            "F"
        } else if layout.reserve_ids.contains(&orig) {
            "R"
        } else {
            "T"
        }
    };
    let mut shown = 0;
    for s in &test {
        let gold = s.answer.unwrap();
        if gold.len() < 2 {
            continue;
        }
        let intact = !fresh.contains(&s.context[gold.start].0)
            && !fresh.contains(&s.context[gold.end].0);
        if intact {
            continue;
        }
        let pred = mdaqa::selftrain::predict_span(&model, s).unwrap();
        let row: Vec<String> = s
            .context
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut c = classify(t.0).to_string();
                let fresh_mark = if fresh.contains(&t.0) { "*" } else { "" };
                c = format!("{c}{fresh_mark}");
                if i == gold.start || i == gold.end {
                    c = format!("[{c}]");
                }
                if i == pred.span.start || i == pred.span.end {
                    c = format!("({c})");
                }
                c
            })
            .collect();
        println!(
            "gold=({},{}) pred=({},{}) score={:.3}\n  {}",
            gold.start,
            gold.end,
            pred.span.start,
            pred.span.end,
            pred.score,
            row.join(" ")
        );
        shown += 1;
        if shown >= 5 {
            break;
        }
    }
}
// (appended) mask drift check runs via probe3
