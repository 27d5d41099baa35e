use std::collections::BTreeMap;

use molekit::data::{generate_dataset, interleave_tasks, pack_batches, GenConfig, SamplingPlan, TaskOracle};
use molekit::systems::encode_system;
use proptest::prelude::*;

/// Exhaustive validator: every index exactly once, no batch over the bound.
fn check_packing(sizes: &[usize], max: usize, batches: &[molekit::data::PackedBatch]) -> Result<(), String> {
    let mut seen = vec![0u32; sizes.len()];
    for b in batches {
        let total: usize = b.indices.iter().map(|&i| sizes[i]).sum();
        if total != b.n_atoms {
            return Err(format!("batch total {} recorded as {}", total, b.n_atoms));
        }
        if total > max {
            return Err(format!("overflow {total} > {max}"));
        }
        for &i in &b.indices {
            seen[i] += 1;
        }
    }
    match seen.iter().position(|&c| c != 1) {
        Some(i) => Err(format!("index {i} packed {} times", seen[i])),
        None => Ok(()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn packing_covers_without_overflow(sizes in prop::collection::vec(2usize..=32, 1..300), seed in any::<u64>()) {
        let batches = pack_batches(&sizes, 128, seed).unwrap();
        prop_assert!(check_packing(&sizes, 128, &batches).is_ok(), "{:?}", check_packing(&sizes, 128, &batches));
        // Utilization: all batches but the last opened are near full when sizes ≤ max/4.
        let total: usize = sizes.iter().sum();
        if total >= 10 * 128 {
            let util = total as f64 / (batches.len() * 128) as f64;
            prop_assert!(util >= 0.9, "utilization {util}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn interleave_frequencies_follow_plan(ratios in prop::collection::vec(1u32..6, 1..5), seed in any::<u64>(), sizes in prop::collection::vec(1usize..50, 5)) {
        let plan = SamplingPlan::new(ratios.iter().enumerate().map(|(i, r)| (format!("t{i}"), *r)).collect()).unwrap();
        let data: BTreeMap<String, usize> = (0..ratios.len()).map(|i| (format!("t{i}"), sizes[i])).collect();
        let window = 10 * plan.total() as usize;
        let stream = interleave_tasks(&data, &plan, 4 * window, seed).unwrap();
        for chunk in stream.chunks(window) {
            for (task, r) in &plan.ratios {
                let want = *r as f64 / plan.total() as f64;
                let got = chunk.iter().filter(|(t, _)| t == task).count() as f64 / chunk.len() as f64;
                prop_assert!((got - want).abs() <= 0.1 * want, "{task}: {got} vs {want}");
            }
        }
        prop_assert!(stream.iter().all(|(t, i)| *i < data[t]));
        prop_assert_eq!(&stream, &interleave_tasks(&data, &plan, 4 * window, seed).unwrap());
    }
}

#[test]
fn four_to_one_plan() {
    let plan: SamplingPlan = "a=4,b=1".parse().unwrap();
    let data = BTreeMap::from([("a".to_string(), 7), ("b".to_string(), 3)]);
    let stream = interleave_tasks(&data, &plan, 500, 1).unwrap();
    let frac = stream.iter().filter(|(t, _)| t == "a").count() as f64 / 500.0;
    assert!((frac - 0.8).abs() <= 0.08);
}

#[test]
fn packing_examples() {
    let b = pack_batches(&[5, 5, 5], 10, 0).unwrap();
    assert_eq!(b.len(), 2);
    let b = pack_batches(&[10], 10, 0).unwrap();
    assert_eq!(b, vec![molekit::data::PackedBatch { indices: vec![0], n_atoms: 10 }]);
}

#[test]
fn same_seed_same_dataset_bytes() {
    for task in ["lj-a", "lj-b", "morse"] {
        let oracle = TaskOracle::bundled(task).unwrap();
        let cfg = GenConfig { n_systems: 20, seed: 11, ..Default::default() };
        let enc = |v: Vec<molekit::AtomicSystem>| v.iter().map(encode_system).collect::<Vec<_>>().join("\n");
        assert_eq!(enc(generate_dataset(&oracle, &cfg).unwrap()), enc(generate_dataset(&oracle, &cfg).unwrap()));
    }
}

#[test]
fn oracle_forces_are_negative_gradient() {
    for task in ["lj-a", "lj-b", "morse"] {
        let oracle = TaskOracle::bundled(task).unwrap();
        let sys = generate_dataset(&oracle, &GenConfig { n_systems: 1, min_atoms: 10, max_atoms: 10, seed: 5, ..Default::default() }).unwrap().remove(0);
        let (_, f) = oracle.energy_forces(&sys).unwrap();
        let h = 1e-5;
        for i in 0..sys.len() {
            for c in 0..3 {
                let mut p = sys.clone();
                p.positions[i][c] += h;
                let mut q = sys.clone();
                q.positions[i][c] -= h;
                let fd = -(oracle.energy_forces(&p).unwrap().0 - oracle.energy_forces(&q).unwrap().0) / (2.0 * h);
                assert!((fd - f[i][c]).abs() <= 1e-8 * (1.0 + f[i][c].abs()), "{task} {i} {c}: {fd} vs {}", f[i][c]);
            }
        }
    }
}
