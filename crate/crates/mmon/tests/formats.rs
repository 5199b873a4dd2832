use mmon::dataset::{
    decode_panels, encode_panels, generate_range, read_dataset, write_dataset, DatasetError, FormatError, MANIFEST_FILE,
    PANELS_FILE,
};
use mmon::harness::{render_csv, render_report, split_dataset, ConfigAccuracy, MetricsRecord, ReportFormat, CSV_HEADER};
use mmon_core::Configuration;
use proptest::prelude::*;
use std::collections::BTreeSet;
use std::fs;

fn sample() -> mmon::dataset::Dataset {
    let mut ds = generate_range(Configuration::Grid2x2, 7, 0, 6, 40).unwrap();
    ds.extend(generate_range(Configuration::OutInGrid, 7, 0, 4, 40).unwrap());
    ds
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sample();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.instances, ds.instances);
    assert_eq!(back.rasters, ds.rasters);
    let again = tempfile::tempdir().unwrap();
    write_dataset(&back, again.path()).unwrap();
    for f in [MANIFEST_FILE, PANELS_FILE] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn corrupt_panels_are_rejected() {
    let bytes = encode_panels(&sample()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_panels(&bad), Err(FormatError::BadMagic(_))));
    assert!(matches!(decode_panels(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
    assert!(matches!(decode_panels(&bytes[..3]), Err(FormatError::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_panels(&long), Err(FormatError::TrailingBytes(1))));
}

#[test]
fn manifest_and_panels_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sample(), dir.path()).unwrap();
    let small = generate_range(Configuration::Center, 1, 0, 2, 40).unwrap();
    fs::write(dir.path().join(PANELS_FILE), encode_panels(&small).unwrap()).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Format(_))));
}

#[test]
fn tampered_meta_targets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sample(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let meta = &mut v["instances"][0]["meta"];
    let first = meta[0].as_u64().unwrap();
    meta[0] = serde_json::json!(1 - first);
    fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Format(_))));
}

#[test]
fn missing_directory_reports_its_path() {
    let err = read_dataset(std::path::Path::new("/nonexistent/mmon-data")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/mmon-data"));
}

#[test]
fn csv_report_has_one_row_per_accuracy() {
    let rec = MetricsRecord {
        experiment: "xfer:center->left_right".into(),
        mode: "meta".into(),
        per_config: vec![
            ConfigAccuracy { config: "center".into(), role: "in_config".into(), count: 500, accuracy: 0.61234 },
            ConfigAccuracy { config: "left_right".into(), role: "transfer".into(), count: 500, accuracy: 0.3 },
        ],
        mean_accuracy: 0.3,
        loss_history: vec![2.0, 1.5],
        seeds: vec![0],
        wall_time_secs: 12.0,
    };
    let csv = render_csv(std::slice::from_ref(&rec));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("0.6123"));
    let json: Vec<MetricsRecord> = serde_json::from_str(&render_report(std::slice::from_ref(&rec), ReportFormat::Json)).unwrap();
    assert_eq!(json, vec![rec]);
}

proptest! {
    #[test]
    fn split_partitions_the_input(n in 5usize..400, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (a, b, c) = split_dataset(&items, seed).unwrap();
        prop_assert_eq!(a.len(), n * 6 / 10);
        prop_assert_eq!(b.len(), n * 2 / 10);
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let all: BTreeSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split_dataset(&items, seed).unwrap(), (a, b, c));
    }
}
