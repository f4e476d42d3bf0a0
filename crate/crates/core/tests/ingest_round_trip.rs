//! Dataset formats: writing and re-reading preserves every record.

use agld::error::Error;
use agld::ingest::{parse_csv, parse_libsvm, synth_linear, synth_sparse, write_csv, write_libsvm, Dataset, LabelColumn};

fn dense_rows(ds: &Dataset) -> Vec<(f64, Vec<f64>)> {
    ds.rows().iter().map(|r| (r.label, r.features.to_dense(ds.dim()))).collect()
}

#[test]
fn libsvm_round_trip() {
    let ds = synth_sparse(300, 40, 0.1, 7).unwrap().data;
    let mut buf = Vec::new();
    write_libsvm(&ds, &mut buf).unwrap();
    let back = parse_libsvm(buf.as_slice(), Some(ds.dim())).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(dense_rows(&back), dense_rows(&ds));
}

#[test]
fn csv_round_trip() {
    let ds = synth_linear(120, 6, 0.5, 3).unwrap().data;
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let back = parse_csv(buf.as_slice(), &LabelColumn::Name("label".into())).unwrap();
    assert_eq!(dense_rows(&back), dense_rows(&ds));
}

#[test]
fn libsvm_reports_the_offending_line() {
    let text = "1 1:0.5 3:2\n-1 2:x\n";
    let err = parse_libsvm(text.as_bytes(), None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
}
