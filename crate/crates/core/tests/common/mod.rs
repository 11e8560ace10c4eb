//! Golden-file helpers. Set `FAME_BLESS=1` to (re)write goldens; otherwise a
//! missing golden is a failure.

#![allow(dead_code)]

use std::path::PathBuf;

use fame_core::{ften, Tensor};

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.ften"))
}

fn blessing() -> bool {
    std::env::var("FAME_BLESS").is_ok_and(|v| v == "1")
}

pub fn check_golden(name: &str, actual: &Tensor, tol: f64) {
    let path = golden_path(name);
    if blessing() {
        ften::write(&path, actual).unwrap();
        return;
    }
    let expected = ften::read(&path)
        .unwrap_or_else(|e| panic!("golden {name} unreadable ({e}); rerun with FAME_BLESS=1 to create it"));
    assert_eq!(expected.shape(), actual.shape(), "golden {name} shape");
    let diff = expected.max_abs_diff(actual).unwrap();
    assert!(diff <= tol, "golden {name} differs by {diff:e} (tolerance {tol:e})");
}

pub fn check_scalars(name: &str, values: &[f64], tol: f64) {
    check_golden(name, &Tensor::new(vec![values.len()], values.to_vec()).unwrap(), tol);
}
