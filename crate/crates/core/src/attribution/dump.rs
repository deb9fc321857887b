use std::path::{Path, PathBuf};

use super::{normalize, AttributionError, AttributionMatrix, NormDimension};

/// Suffix of the normalized companion of a matrix dump.
pub const NORM_SUFFIX: &str = ".norm.csv";

fn write_values(m: &AttributionMatrix, values: &[Vec<f64>], path: &Path) -> Result<(), AttributionError> {
    let io = |e: csv::Error| AttributionError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AttributionError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["token".to_string(), "start".into(), "end".into(), "step".into()];
    header.extend(m.segment_ids.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(io)?;
    for (j, tok) in m.tokens.iter().enumerate() {
        let mut rec = vec![tok.text.clone(), tok.start.to_string(), tok.end.to_string(), tok.step.to_string()];
        rec.extend(values.iter().map(|row| row[j].to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| AttributionError::Io(e.to_string()))
}

/// Writes one row per kept token with its S value for every segment, and
/// the normalized view next to it. Returns both paths.
pub fn write_matrix_csv(
    m: &AttributionMatrix,
    path: &Path,
    dimension: NormDimension,
) -> Result<(PathBuf, PathBuf), AttributionError> {
    write_values(m, &m.values, path)?;
    let stem = path.to_string_lossy();
    let norm_path = PathBuf::from(format!("{}{NORM_SUFFIX}", stem.strip_suffix(".csv").unwrap_or(&stem)));
    write_values(m, &normalize(&m.values, dimension).values, &norm_path)?;
    Ok((path.to_path_buf(), norm_path))
}
