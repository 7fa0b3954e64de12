//! Binary PGM (P5, maxval 255) reading and writing.
//!
//! Chosen as the one image format in the project: no dependencies, and
//! byte-exact files make golden tests possible.

use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

/// Write gray values in [0,1] as a P5 file, scaled to [0,255].
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut bytes = Vec::with_capacity(width * height + 32);
    bytes.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for &v in values {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a P5 file back into gray values in [0,1].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    parse_pgm(&raw).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn parse_pgm(raw: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut pos = 0;
    let mut next_token = || -> std::result::Result<String, String> {
        while pos < raw.len() {
            if raw[pos].is_ascii_whitespace() {
                pos += 1;
            } else if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if next_token()? != "P5" {
        return Err("not a P5 file".into());
    }
    let width: usize = next_token()?.parse().map_err(|_| "bad width")?;
    let height: usize = next_token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = next_token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if raw.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    let values = raw[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((width, height, values))
}

/// Write a PGM with per-image min/max contrast stretch, for heatmaps whose
/// natural range is tiny (e.g. attention mass spread over many pixels).
pub fn write_pgm_normalized(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled: Vec<f64> = values.iter().map(|&v| (v - lo) / span).collect();
    write_pgm(path, width, height, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let vals: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm(&path, 4, 3, &vals).unwrap();
        let (w, h, got) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in vals.iter().zip(&got) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn rejects_non_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
