// Scratch: mask drift during adaptation.

use mdaqa::model::{ModelConfig, QaModel};
use mdaqa::qa_task::{generate_corpus, DomainSpec, QASample};
use mdaqa::selftrain::{adapt, AdaptConfig};
use mdaqa::training::{train_source, OptimizerConfig};

fn main() {
    let seed = 42u64;
    let shift = 0.6;
    let source_spec = DomainSpec { seed: seed * 10 + 1, ..DomainSpec::default() };
    let target_spec = DomainSpec { shift, seed: seed * 10 + 3, ..DomainSpec::default() };
    let train = generate_corpus(&source_spec, 2000).unwrap();
    let targets: Vec<QASample> = generate_corpus(&target_spec, 1000)
        .unwrap()
        .into_iter()
        .map(|s| s.without_answer())
        .collect();
    let mut model = QaModel::new(ModelConfig::default(), seed).unwrap();
    let opt = OptimizerConfig { seed, ..OptimizerConfig::default() };
    let (snap, _) = train_source(&mut model, &train, &opt).unwrap();
    let snap = snap.unwrap();
    let hist = |v: &[f64], label: &str| {
        let mut bins = [0usize; 6];
        for &m in v {
            let b = if m < 0.01 { 0 } else if m < 0.2 { 1 } else if m < 0.5 { 2 }
                else if m < 0.8 { 3 } else if m < 0.99 { 4 } else { 5 };
            bins[b] += 1;
        }
        println!("{label}: <0.01:{} <0.2:{} <0.5:{} <0.8:{} <0.99:{} >=0.99:{}",
            bins[0], bins[1], bins[2], bins[3], bins[4], bins[5]);
    };
    hist(snap.values(), "mask after source");
    let cfg = AdaptConfig { seed: seed + 500, ..AdaptConfig::default() };
    adapt(&mut model, Some(&snap), &targets, &cfg, opt.lambda).unwrap();
    hist(model.mask.mask_values().data(), "mask after adapt ");
    // How many kernels changed bins?
    let before = snap.values();
    let after = model.mask.mask_values();
    let mut opened = 0;
    let mut closed = 0;
    for i in 0..before.len() {
        if before[i] < 0.5 && after.get(i) > 0.5 { opened += 1; }
        if before[i] > 0.5 && after.get(i) < 0.5 { closed += 1; }
    }
    println!("opened {opened} closed {closed}");
}
