//! Bag files written by other tools must decode through the same reader.

use std::path::Path;

use firmil::bagstore::{read_bag, Bag};
use firmil::Error;

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/exported_slide.milb"))
}

#[test]
fn externally_written_bag_decodes() {
    let bag = read_bag(fixture()).unwrap();
    assert_eq!(bag.slide_id, "exported_slide");
    assert_eq!(bag.dim, 4);
    assert_eq!(bag.coords, vec![[0, 0], [224, 0], [0, 224]]);
    let expected: Vec<f32> = (0..3).flat_map(|i| (0..4).map(move |j| 0.5 * i as f32 + 0.25 * j as f32)).collect();
    assert_eq!(bag.embeddings, expected);
    assert_eq!(bag.label, None);
}

#[test]
fn byte_count_matches_header() {
    let bytes = std::fs::read(fixture()).unwrap();
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + 8 * n + 4 * n * dim);
    let bag = Bag::decode(&bytes, "x").unwrap();
    assert_eq!(bag.encoded_len(), bytes.len());
    assert_eq!(bag.encode().unwrap(), bytes);
}

#[test]
fn reserved_field_and_version_are_checked() {
    let bytes = std::fs::read(fixture()).unwrap();
    let mut v2 = bytes.clone();
    v2[4..6].copy_from_slice(&2u16.to_le_bytes());
    assert!(matches!(Bag::decode(&v2, "x"), Err(Error::UnsupportedVersion(2))));
    let mut extra = bytes;
    extra.extend_from_slice(&[0; 4]);
    assert!(matches!(Bag::decode(&extra, "x"), Err(Error::TrailingBytes(4))));
}
