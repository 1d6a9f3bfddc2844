//! Plain-text debug dumps: PGM (P2) for image planes and CSV for matrices.

use std::fmt::Write as _;
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Render the last two axes of `plane` (all leading extents must be 1) as an
/// ASCII PGM, linearly mapping `[min, max]` to `[0, 255]`.
pub fn to_pgm<T: Float>(plane: &Tensor<T>) -> Result<String> {
    let nd = plane.ndim();
    if nd < 2 || plane.shape()[..nd - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!(
            "pgm needs a single plane, got {:?}",
            plane.shape()
        )));
    }
    let (h, w) = (plane.shape()[nd - 2], plane.shape()[nd - 1]);
    let lo = plane.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64()));
    let hi = plane.data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in plane.data().chunks_exact(w) {
        let line: Vec<String> = row
            .iter()
            .map(|v| (((v.as_f64() - lo) / range) * 255.0).round().clamp(0.0, 255.0).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pgm<T: Float>(plane: &Tensor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_pgm(plane)?).map_err(|e| Error::io(path, e))
}

/// Comma-separated rows of a 2-d tensor.
pub fn to_csv<T: Float>(matrix: &Tensor<T>) -> Result<String> {
    let (_, n) = match matrix.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::shape(format!("csv dump needs a matrix, got {s:?}"))),
    };
    let mut out = String::new();
    for row in matrix.data().chunks_exact(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let t = Tensor::<f32>::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        let pgm = to_pgm(&t).unwrap();
        assert_eq!(pgm, "P2\n2 2\n255\n0 255\n128 255\n");
    }

    #[test]
    fn pgm_rejects_stacks() {
        assert!(to_pgm(&Tensor::<f32>::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn csv_rows() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.5, -3.0, 4.0]).unwrap();
        assert_eq!(to_csv(&t).unwrap(), "1,2.5\n-3,4\n");
    }
}
