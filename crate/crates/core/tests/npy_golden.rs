//! Array store checks against externally produced golden files plus
//! randomized round trips.

use depthnav_core::npy::{read_npy, read_npz, write_npy, write_npz, ArrayRecord, Dtype};
use proptest::prelude::*;
use std::path::PathBuf;

fn golden(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../testdata/golden")
        .join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("missing golden file {}: {e}", path.display()))
}

#[test]
fn golden_f4_rank2_parses() {
    let record = read_npy(&golden("golden_f4_2d.npy")).unwrap();
    assert_eq!(record.dtype, Dtype::Float32LE);
    assert_eq!(record.shape, vec![3, 4]);
    let values = record.to_f64_values();
    assert_eq!(values.len(), 12);
    for (i, v) in values.iter().enumerate() {
        assert_eq!(*v, i as f64);
    }
}

#[test]
fn golden_f8_rank3_v2_parses() {
    let record = read_npy(&golden("golden_f8_3d_v2.npy")).unwrap();
    assert_eq!(record.dtype, Dtype::Float64LE);
    assert_eq!(record.shape, vec![2, 3, 2]);
    let values = record.to_f64_values();
    for (i, v) in values.iter().enumerate() {
        assert_eq!(*v, i as f64 * 0.5 + 0.25);
    }
}

#[test]
fn golden_npz_parses_both_entries_in_order() {
    let records = read_npz(&golden("golden_pair.npz")).unwrap();
    assert_eq!(records.len(), 2);

    assert_eq!(records[0].name, "depth");
    assert_eq!(records[0].dtype, Dtype::Float32LE);
    assert_eq!(records[0].shape, vec![9, 16]);
    let depth = records[0].to_f64_values();
    assert_eq!(depth[0], 0.0);
    assert_eq!(depth[9 * 16 - 1], 5.0);
    // Interior value of linspace(0, 5, 144), computed the same way.
    let expected = ((15.0f64 * (5.0 / 143.0)) as f32) as f64;
    assert!((depth[15] - expected).abs() < 1e-7);

    assert_eq!(records[1].name, "aux");
    assert_eq!(records[1].dtype, Dtype::Float64LE);
    assert_eq!(records[1].shape, vec![2, 2]);
    assert_eq!(records[1].to_f64_values(), vec![1.5, 2.5, 3.5, 4.5]);
}

fn record_strategy() -> impl Strategy<Value = ArrayRecord> {
    let dtype = prop_oneof![Just(Dtype::Float32LE), Just(Dtype::Float64LE)];
    let shape = prop_oneof![
        (1usize..=16, 1usize..=16).prop_map(|(a, b)| vec![a, b]),
        (1usize..=8, 1usize..=8, 1usize..=8).prop_map(|(a, b, c)| vec![a, b, c]),
    ];
    (dtype, shape, "[a-z][a-z0-9_]{0,8}").prop_flat_map(|(dtype, shape, name)| {
        let count = shape.iter().product::<usize>();
        proptest::collection::vec(-1.0e6f64..1.0e6, count).prop_map(move |values| {
            let mut data = Vec::new();
            match dtype {
                Dtype::Float32LE => {
                    for v in &values {
                        data.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                Dtype::Float64LE => {
                    for v in &values {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            ArrayRecord::new(name.clone(), dtype, shape.clone(), data).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn npy_round_trip_is_byte_stable(record in record_strategy()) {
        let bytes = write_npy(&record).unwrap();
        let mut back = read_npy(&bytes).unwrap();
        back.name = record.name.clone();
        prop_assert_eq!(&back, &record);
        prop_assert_eq!(write_npy(&back).unwrap(), bytes);
    }

    #[test]
    fn npz_round_trip_preserves_records(records in proptest::collection::vec(record_strategy(), 1..4)) {
        // Make names unique while keeping generated content.
        let records: Vec<ArrayRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.name = format!("{}_{i}", r.name);
                r
            })
            .collect();
        let bytes = write_npz(&records).unwrap();
        prop_assert_eq!(write_npz(&records).unwrap(), bytes.clone());
        let back = read_npz(&bytes).unwrap();
        prop_assert_eq!(back, records);
    }
}
