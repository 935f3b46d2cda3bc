// Scratch: audit pseudo-label quality per round.

use mdaqa::model::{ModelConfig, QaModel};
use mdaqa::qa_task::{generate_corpus, DomainSpec, QASample};
use mdaqa::selftrain::{adapt, generate_pseudo_labels, AdaptConfig};
use mdaqa::training::{train_source, OptimizerConfig};

fn main() {
    let seed = 42u64;
    let shift = 0.6;
    let source_spec = DomainSpec { seed: seed * 10 + 1, ..DomainSpec::default() };
    let target_spec = DomainSpec { shift, seed: seed * 10 + 3, ..DomainSpec::default() };
    let train = generate_corpus(&source_spec, 2000).unwrap();
    let gold_targets = generate_corpus(&target_spec, 1000).unwrap();
    let targets: Vec<QASample> = gold_targets.iter().map(|s| s.without_answer()).collect();

    let mut model = QaModel::new(ModelConfig::default(), seed).unwrap();
    let opt = OptimizerConfig { seed, ..OptimizerConfig::default() };
    let (snap, _) = train_source(&mut model, &train, &opt).unwrap();
    let snap = snap.unwrap();

    let layout = target_spec.vocab_layout().unwrap();
    let fresh: std::collections::BTreeSet<u32> = layout.reserve_ids.iter().cloned().collect();
    let hapax: std::collections::BTreeSet<u32> = layout.hapax_ids().iter().cloned().collect();
    let answer_ids = layout.answer_token_ids();

    let audit = |model: &QaModel, label: &str| {
        let set = generate_pseudo_labels(model, &targets, 0.6).unwrap();
        let mut correct = 0;
        let mut singleton_wrong = 0;
        let mut other_wrong = 0;
        let mut wrong_on_intact = 0;
        let mut at_gold_start = 0;
        let mut at_gold_end = 0;
        let mut at_run_inside = 0;
        let mut elsewhere = 0;
        let mut else_classes: std::collections::BTreeMap<&str, usize> = Default::default();
        for e in &set.entries {
            let idx: usize = targets.iter().position(|t| t.id == e.sample.id).unwrap();
            let gold = gold_targets[idx].answer.unwrap();
            if e.span == gold {
                correct += 1;
            } else if e.span.start == e.span.end {
                singleton_wrong += 1;
                let p = e.span.start;
                if p == gold.start {
                    at_gold_start += 1;
                } else if p == gold.end {
                    at_gold_end += 1;
                } else if p > gold.start && p < gold.end {
                    at_run_inside += 1;
                } else {
                    elsewhere += 1;
                    let tok = gold_targets[idx].context[p].0;
                    let class = if hapax.contains(&tok) {
                        "hapax"
                    } else if answer_ids.contains(&tok) {
                        "answer-image"
                    } else if fresh.contains(&tok) {
                        "fresh-filler"
                    } else {
                        "plain-filler"
                    };
                    *else_classes.entry(class).or_insert(0usize) += 1;
                }
            } else {
                other_wrong += 1;
            }
            if e.span != gold {
                let s = &gold_targets[idx];
                let intact = !fresh.contains(&s.context[gold.start].0)
                    && !fresh.contains(&s.context[gold.end].0);
                if intact {
                    wrong_on_intact += 1;
                }
            }
        }
        println!(
            "{label}: |S^P|={} correct={} singleton_wrong={} (s:{at_gold_start} e:{at_gold_end} mid:{at_run_inside} else:{elsewhere}) other_wrong={} wrong_on_intact={}",
            set.entries.len(),
            correct,
            singleton_wrong,
            other_wrong,
            wrong_on_intact
        );
        println!("    else classes: {:?}", else_classes);
    };

    audit(&model, "round 0 labels");
    let cfg_one = AdaptConfig { rounds: 1, seed: seed + 500, ..AdaptConfig::default() };
    for r in 1..=5 {
        adapt(&mut model, Some(&snap), &targets, &cfg_one, opt.lambda).unwrap();
        audit(&model, &format!("after round {r}"));
    }
}
