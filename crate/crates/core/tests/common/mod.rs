#![allow(dead_code)]

use ordergate::backend::SyntheticBackend;
use ordergate::gate::GateItem;
use ordergate::rng::{below, seeded, unit};
use ordergate::synth::{ModelFamily, PotentialSpec};

pub const SIZES: [usize; 5] = [3, 8, 12, 24, 60];

/// Items of mixed length with random gold labels, each backed by its own
/// first-order model.
pub fn audit_fixture(count: usize, seed: u64) -> (SyntheticBackend, Vec<GateItem>) {
    let family = ModelFamily {
        support_min: 1,
        support_max: 4,
        a_range: 3.0,
        potential: PotentialSpec::new(1.0, 2.0, -1).unwrap(),
    };
    let mut r = seeded(seed, u64::MAX);
    let mut backend = SyntheticBackend::new();
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let n = SIZES[below(&mut r, SIZES.len() as u64) as usize];
        let id = format!("item{i:03}");
        backend.insert(id.clone(), family.sample(n, seed, i as u64).unwrap());
        let mut item = GateItem::new(id, (0..n).map(|c| format!("chunk {c} of item {i}")).collect());
        item.question = format!("question {i}?");
        item.gold = Some(if unit(&mut r) < 0.6 { "1" } else { "0" }.to_string());
        items.push(item);
    }
    (backend, items)
}
