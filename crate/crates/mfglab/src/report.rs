//! Artifact formatting: CSV tables, JSON records, and log-log slope fits.
//!
//! Every numeric artifact the runner emits goes through the helpers here so
//! identical runs produce byte-identical files. Floats are printed with 17
//! significant digits (enough to round-trip an f64 exactly), CSV rows use
//! CRLF line endings and a `.` decimal separator, and rows are written in the
//! deterministic order the experiments produce them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Formats a float with 17 significant digits in scientific notation.
pub fn g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a CSV file with the given header and rows.
///
/// Fields never contain commas, quotes or line breaks (they are numbers and
/// short identifiers), so no quoting is required.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header.join(",").as_bytes())?;
    w.write_all(b"\r\n")?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "row width must match header");
        w.write_all(row.join(",").as_bytes())?;
        w.write_all(b"\r\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a pretty-printed JSON artifact with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
///
/// Used to fit decay exponents `y ~ C x^s` from a handful of sizes. Points
/// with nonpositive `y` are dropped; fewer than two usable points give NaN.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn g17_round_trips_exactly() {
        for x in [
            1.0,
            -1.0 / 3.0,
            std::f64::consts::PI,
            1.2345678901234567e-8,
            (1.0f64 + 1.0 / std::f64::consts::E).exp(),
        ] {
            let s = g17(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
            assert!(s.contains('.') || s.contains('e'), "{s}");
        }
    }

    #[test]
    fn fit_recovers_exact_power_laws() {
        let xs = [4.0, 8.0, 16.0, 32.0];
        let ys: Vec<f64> = xs.iter().map(|&x: &f64| 3.0 * x.powf(-2.0)).collect();
        assert_abs_diff_eq!(fit_loglog(&xs, &ys), -2.0, epsilon = 1e-12);
        let flat: Vec<f64> = xs.iter().map(|_| 0.7).collect();
        assert_abs_diff_eq!(fit_loglog(&xs, &flat), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_handles_degenerate_inputs() {
        assert!(fit_loglog(&[4.0, 8.0], &[0.0, 0.0]).is_nan());
        assert!(fit_loglog(&[4.0], &[1.0]).is_nan());
    }

    #[test]
    fn csv_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![g17(1.0 / 3.0), "4".to_string()]];
        write_csv(&path, &["value", "m"], rows.clone()).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_csv(&path, &["value", "m"], rows).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("value,m\r\n"));
        assert!(text.ends_with("\r\n"));
    }
}
