use std::path::Path;

use crate::error::{Error, Result};

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Like [`fmt_f64`] but renders `None` and NaN as `NA`.
pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if !x.is_nan() => fmt_f64(x),
        _ => "NA".to_string(),
    }
}

/// Parses a field written by [`fmt_opt`].
pub fn parse_opt(field: &str) -> Option<f64> {
    match field.trim() {
        "NA" | "" => None,
        s => s.parse().ok(),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io { path: path.to_path_buf(), source };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Lower empirical `tau`-quantile: the `ceil(tau * n)`-th smallest value.
pub fn empirical_quantile(values: &[f64], tau: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((tau * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}
