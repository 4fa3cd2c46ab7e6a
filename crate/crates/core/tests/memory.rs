use proptest::prelude::*;
use std::collections::BTreeMap;
use tcil_core::cil::class_quotas;
use tcil_core::{ClassId, ClassRange, Memory, Sample};

fn task_samples(classes: ClassRange, per_class: usize, tag: f64) -> Vec<Sample> {
    classes
        .iter()
        .flat_map(|c| (0..per_class).map(move |i| Sample::new(vec![tag, c.0 as f64, i as f64], c)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn memory_respects_quota_and_membership(
        capacity in 1usize..60,
        blocks in prop::collection::vec((1usize..4, 0usize..12), 1..6),
        seed in any::<u64>(),
    ) {
        let mut mem = Memory::new(capacity);
        let mut seen = 0usize;
        let mut offered: BTreeMap<ClassId, Vec<Sample>> = BTreeMap::new();
        for (t, &(width, per_class)) in blocks.iter().enumerate() {
            let classes = ClassRange::new(seen + 1, seen + width);
            let data = task_samples(classes, per_class, t as f64);
            for s in &data {
                offered.entry(s.y).or_default().push(s.clone());
            }
            mem.update(&data, classes, seed.wrapping_add(t as u64)).unwrap();
            seen += width;

            let quotas = class_quotas(capacity, seen);
            prop_assert!(mem.len() <= capacity);
            prop_assert_eq!(mem.classes_seen(), seen);
            let counts = mem.class_counts();
            for c in 1..=seen {
                let c = ClassId(c);
                let have = counts.get(&c).copied().unwrap_or(0);
                let avail = offered.get(&c).map_or(0, Vec::len);
                prop_assert_eq!(have, quotas[c.index()].min(avail));
            }
            for s in mem.exemplars() {
                prop_assert!(offered[&s.y].contains(s), "exemplar was never offered");
            }
            let labels: Vec<ClassId> = mem.exemplars().iter().map(|s| s.y).collect();
            prop_assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn quotas_split_remainder_to_lowest_classes() {
    assert_eq!(class_quotas(10, 4), vec![3, 3, 2, 2]);
    assert_eq!(class_quotas(100, 10), vec![10; 10]);
    assert_eq!(class_quotas(3, 5), vec![1, 1, 1, 0, 0]);
    assert_eq!(class_quotas(7, 1), vec![7]);
}

#[test]
fn update_is_deterministic_per_seed() {
    let mk = |seed| {
        let mut m = Memory::new(9);
        m.update(
            &task_samples(ClassRange::new(1, 2), 20, 0.0),
            ClassRange::new(1, 2),
            seed,
        )
        .unwrap();
        m.update(
            &task_samples(ClassRange::new(3, 4), 20, 1.0),
            ClassRange::new(3, 4),
            seed + 1,
        )
        .unwrap();
        m
    };
    assert_eq!(mk(4), mk(4));
    assert_ne!(mk(4).exemplars(), mk(5).exemplars());
}

#[test]
fn update_rejects_gaps_in_class_sequence() {
    let mut m = Memory::new(10);
    assert!(m
        .update(
            &task_samples(ClassRange::new(2, 3), 2, 0.0),
            ClassRange::new(2, 3),
            0
        )
        .is_err());
}
