//! Rendered images compared byte for byte with checked-in PGM files.
//! Run with `VIST_BLESS=1` to rewrite them after an intended change.

mod common;

use common::{golden_cases as cases, golden_dir as dir};
use vist_core::render::{read_pgm, to_pgm};

#[test]
fn images_match_golden_files() {
    let bless = std::env::var_os("VIST_BLESS").is_some();
    let cases = cases();
    assert!(cases.len() >= 10);
    let mut mismatched = Vec::new();
    for (name, img) in &cases {
        let path = dir().join(format!("{name}.pgm"));
        let bytes = to_pgm(img);
        if bless {
            std::fs::create_dir_all(dir()).unwrap();
            std::fs::write(&path, &bytes).unwrap();
            continue;
        }
        let want = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e} (run with VIST_BLESS=1)", path.display()));
        if want != bytes {
            mismatched.push(*name);
        }
    }
    assert!(mismatched.is_empty(), "differs from golden: {mismatched:?}");
}

#[test]
fn golden_files_parse_back() {
    for (name, img) in cases() {
        let (w, h, data) = read_pgm(&std::fs::read(dir().join(format!("{name}.pgm"))).unwrap()).unwrap();
        assert_eq!((w, h), (img.side, img.side), "{name}");
        assert_eq!(data.len(), w * h);
    }
}

#[test]
fn rendering_twice_is_identical() {
    let a: Vec<Vec<u8>> = cases().iter().map(|(_, i)| to_pgm(i)).collect();
    let b: Vec<Vec<u8>> = cases().iter().map(|(_, i)| to_pgm(i)).collect();
    assert_eq!(a, b);
}
