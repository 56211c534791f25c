use std::collections::BTreeMap;

use proptest::prelude::*;
use slick_core::synthdata::{export_dataset, generate, generate_dataset, import_dataset, Taxonomy};

#[test]
fn invariant_sweep_over_a_thousand_scenes() {
    let tax = Taxonomy::default();
    for seed in 0..1000u64 {
        let difficulty = (seed % 11) as f64 / 10.0;
        let (h, w) = (32 + (seed % 3) as usize * 16, 32 + (seed % 5) as usize * 8);
        let s = generate(seed, h, w, &tax, difficulty).unwrap();
        if let Err(e) = s.check_invariants(&tax) {
            panic!("seed {seed} difficulty {difficulty}: {e}");
        }
    }
}

#[test]
fn co_occurrence_table_rebuilds_from_masks() {
    let tax = Taxonomy::default();
    let ds = generate_dataset(5, 200, 64, 64, &tax, 0.5).unwrap();
    let mut emitted = BTreeMap::new();
    let mut rebuilt = BTreeMap::new();
    for s in &ds.samples {
        for &a in &s.annotations {
            *emitted.entry(a).or_insert(0) += 1;
        }
        for a in s.annotations_from_masks() {
            *rebuilt.entry(a.expect("damage lies on a part")).or_insert(0) += 1;
        }
    }
    assert_eq!(emitted, rebuilt);
}

#[test]
fn difficulty_zero_has_no_occlusion() {
    let tax = Taxonomy::default();
    for seed in 0..50 {
        let s = generate(seed, 64, 64, &tax, 0.0).unwrap();
        assert_eq!(s.part_labels.len(), tax.parts.len());
    }
}

#[test]
fn hundred_sample_round_trip_keeps_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(2024, 100, 64, 64, &Taxonomy::default(), 0.4).unwrap();
    let before = ds.checksum();
    // Frozen from a reference run; changes only if the generator changes.
    assert_eq!(before, 0xccdb_4575_c0d7_00f7);
    assert_eq!(generate_dataset(2024, 100, 64, 64, &Taxonomy::default(), 0.4).unwrap().checksum(), before);
    export_dataset(&ds, dir.path()).unwrap();
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!(back.checksum(), before);
    assert_eq!(back, ds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn generation_is_a_function_of_the_seed(seed in any::<u64>(), d in 0.0f64..=1.0) {
        let tax = Taxonomy::default();
        let a = generate(seed, 40, 48, &tax, d).unwrap();
        let b = generate(seed, 40, 48, &tax, d).unwrap();
        prop_assert_eq!(a, b);
    }
}
