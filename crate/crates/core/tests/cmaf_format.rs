use cma_core::cmaf::{decode_store, encode_store, read_store, write_store};
use cma_core::numerics::Matrix;
use cma_core::{Error, FeatureRecord, FeatureStore, FormatError};
use proptest::prelude::*;

/// Byte-level CMAF writer that knows nothing about the library's encoder.
struct RawStore {
    bytes: Vec<u8>,
}

impl RawStore {
    fn header(magic: &[u8; 4], version: u32, d: u32, count: u64) -> Self {
        let mut bytes = magic.to_vec();
        bytes.extend(version.to_le_bytes());
        bytes.extend(d.to_le_bytes());
        bytes.extend(count.to_le_bytes());
        Self { bytes }
    }

    fn record(mut self, id: &[u8], label: u8, lt: u32, lm: u32, values: &[f32]) -> Self {
        self.bytes.extend((id.len() as u32).to_le_bytes());
        self.bytes.extend(id);
        self.bytes.push(label);
        self.bytes.extend(lt.to_le_bytes());
        self.bytes.extend(lm.to_le_bytes());
        for v in values {
            self.bytes.extend(v.to_le_bytes());
        }
        self
    }
}

fn decode_err(bytes: &[u8]) -> FormatError {
    match decode_store(bytes, "fixture") {
        Err(Error::Format(e)) => e,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn encoder_matches_independent_writer() {
    let store = FeatureStore::new(
        2,
        "s",
        vec![
            FeatureRecord::new(
                "r0",
                1,
                Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 8.0]]).unwrap(),
                Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap(),
            ),
            FeatureRecord::pooled("новость", 0, &[0.0, -0.0], &[1e-3, 7.0]).unwrap(),
        ],
    )
    .unwrap();
    let expected = RawStore::header(b"CMAF", 1, 2, 2)
        .record(b"r0", 1, 2, 1, &[1.5, -2.0, 0.25, 8.0, 3.0, 4.0])
        .record("новость".as_bytes(), 0, 1, 1, &[0.0, -0.0, 1e-3, 7.0])
        .bytes;
    assert_eq!(encode_store(&store).unwrap(), expected);
    let decoded = decode_store(&expected, "s").unwrap();
    assert_eq!(decoded.records()[1].text_tokens.data()[1].to_bits(), (-0.0f64).to_bits());
}

#[test]
fn bad_magic() {
    let bytes = RawStore::header(b"XXXX", 1, 2, 0).bytes;
    assert!(matches!(decode_err(&bytes), FormatError::BadMagic { found, .. } if &found == b"XXXX"));
}

#[test]
fn unsupported_version() {
    let bytes = RawStore::header(b"CMAF", 2, 2, 0).bytes;
    assert!(matches!(
        decode_err(&bytes),
        FormatError::UnsupportedVersion { found: 2, supported: 1 }
    ));
}

#[test]
fn truncated_header() {
    let bytes = RawStore::header(b"CMAF", 1, 2, 1).bytes;
    assert!(matches!(decode_err(&bytes[..15]), FormatError::Truncated { offset: 12, .. }));
}

#[test]
fn truncated_payload_names_the_record() {
    // Declares L_t = 2 but carries only one text row and no image row.
    let bytes = RawStore::header(b"CMAF", 1, 2, 1)
        .record(b"short", 0, 2, 1, &[1.0, 2.0])
        .bytes;
    match decode_err(&bytes) {
        FormatError::Truncated { context, .. } => {
            assert!(context.contains("record 0") && context.contains("text"), "{context}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_dimension() {
    let bytes = RawStore::header(b"CMAF", 1, 0, 0).bytes;
    assert!(matches!(decode_err(&bytes), FormatError::DimensionInconsistency(_)));
}

#[test]
fn duplicate_id() {
    let bytes = RawStore::header(b"CMAF", 1, 1, 3)
        .record(b"a", 0, 1, 1, &[1.0, 1.0])
        .record(b"b", 1, 1, 1, &[1.0, 1.0])
        .record(b"a", 1, 1, 1, &[1.0, 1.0])
        .bytes;
    assert!(matches!(
        decode_err(&bytes),
        FormatError::DuplicateId { id, record: 2 } if id == "a"
    ));
}

#[test]
fn invalid_label() {
    let bytes = RawStore::header(b"CMAF", 1, 1, 1)
        .record(b"a", 2, 1, 1, &[1.0, 1.0])
        .bytes;
    assert!(matches!(decode_err(&bytes), FormatError::InvalidLabel { value: 2, record: 0 }));
}

#[test]
fn invalid_utf8_id() {
    let bytes = RawStore::header(b"CMAF", 1, 1, 1)
        .record(&[0xff, 0xfe], 0, 1, 1, &[1.0, 1.0])
        .bytes;
    assert!(matches!(decode_err(&bytes), FormatError::InvalidId { record: 0 }));
}

#[test]
fn empty_sequence() {
    let bytes = RawStore::header(b"CMAF", 1, 1, 1)
        .record(b"a", 0, 1, 0, &[1.0])
        .bytes;
    assert!(matches!(
        decode_err(&bytes),
        FormatError::EmptySequence { record: 0, which: "image" }
    ));
}

#[test]
fn non_finite_value_reports_its_offset() {
    let bytes = RawStore::header(b"CMAF", 1, 2, 1)
        .record(b"a", 0, 1, 1, &[1.0, 2.0, f32::NAN, 4.0])
        .bytes;
    // 20 header bytes, 4 + 1 + 1 + 8 record header bytes, two text values.
    assert!(matches!(
        decode_err(&bytes),
        FormatError::NonFiniteValue { record: 0, offset: 42 }
    ));
}

#[test]
fn trailing_bytes() {
    let mut bytes = RawStore::header(b"CMAF", 1, 1, 1)
        .record(b"a", 0, 1, 1, &[1.0, 2.0])
        .bytes;
    bytes.extend([0, 0, 0]);
    assert!(matches!(
        decode_err(&bytes),
        FormatError::TrailingBytes { count: 3, .. }
    ));
}

#[test]
fn oversized_record_count_is_a_truncation_not_an_allocation() {
    let bytes = RawStore::header(b"CMAF", 1, 4, u64::MAX).bytes;
    assert!(matches!(decode_err(&bytes), FormatError::Truncated { .. }));
}

fn arb_record(d: usize) -> impl Strategy<Value = (String, u8, Vec<f32>, Vec<f32>)> {
    (
        "[a-zA-Z0-9_\\-é中]{1,12}",
        0u8..2,
        (1usize..4).prop_flat_map(move |l| prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), l * d)),
        (1usize..4).prop_flat_map(move |l| prop::collection::vec(-1e6f32..1e6, l * d)),
    )
}

fn arb_store() -> impl Strategy<Value = FeatureStore> {
    (1usize..6)
        .prop_flat_map(|d| (Just(d), prop::collection::vec(arb_record(d), 0..12)))
        .prop_map(|(d, raw)| {
            let mut seen = std::collections::HashSet::new();
            let records = raw
                .into_iter()
                .filter(|(id, ..)| seen.insert(id.clone()))
                .map(|(id, label, t, m)| {
                    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
                    let (lt, lm) = (t.len() / d, m.len() / d);
                    FeatureRecord::new(
                        id,
                        label,
                        Matrix::from_vec(lt, d, widen(t)).unwrap(),
                        Matrix::from_vec(lm, d, widen(m)).unwrap(),
                    )
                })
                .collect();
            FeatureStore::new(d, "prop", records).unwrap()
        })
}

fn bits(store: &FeatureStore) -> Vec<(String, u8, usize, usize, Vec<u64>)> {
    store
        .records()
        .iter()
        .map(|r| {
            let values = r
                .text_tokens
                .data()
                .iter()
                .chain(r.image_tokens.data())
                .map(|v| v.to_bits())
                .collect();
            (r.id.clone(), r.label, r.text_tokens.rows(), r.image_tokens.rows(), values)
        })
        .collect()
}

proptest! {
    #[test]
    fn file_round_trip_is_bitwise(store in arb_store()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.cmaf");
        write_store(&store, &path).unwrap();
        let back = read_store(&path).unwrap();
        prop_assert_eq!(back.dimension(), store.dimension());
        prop_assert_eq!(back.source_name(), "prop");
        prop_assert_eq!(bits(&back), bits(&store));
    }

    #[test]
    fn every_strict_prefix_is_rejected(store in arb_store()) {
        let bytes = encode_store(&store).unwrap();
        for cut in 0..bytes.len() {
            prop_assert!(decode_store(&bytes[..cut], "p").is_err());
        }
    }
}
