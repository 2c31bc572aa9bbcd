//! Artifact writers: PGM image grids, CSV point clouds and loss curves.

use super::train::LossRow;
use crate::ndiff::Mat;
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Maps a pixel in `[0, 1]` to a byte, clamping outside values.
pub fn pixel_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (`P5`) bytes of images laid out in a grid of `cols` columns
/// with a one-pixel black border between tiles.
pub fn pgm_grid(images: &Mat, (h, w): (usize, usize), cols: usize) -> Result<Vec<u8>> {
    if images.ncols() != h * w {
        return Err(Error::shape("image rows", h * w, images.ncols()));
    }
    let n = images.nrows();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut pix = vec![0u8; gw * gh];
    for k in 0..n {
        let (r, c) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                let gy = 1 + r * (h + 1) + y;
                let gx = 1 + c * (w + 1) + x;
                pix[gy * gw + gx] = pixel_byte(images[[k, y * w + x]]);
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}

pub fn write_pgm_grid(path: &Path, images: &Mat, shape: (usize, usize), cols: usize) -> Result<()> {
    std::fs::write(path, pgm_grid(images, shape, cols)?)?;
    Ok(())
}

/// One sample per row with columns `x0, x1, ...`.
pub fn points_csv(states: &Mat) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..states.ncols()).map(|j| format!("x{j}")))?;
    for r in states.rows() {
        w.write_record(r.iter().map(|v| format!("{v:.6}")))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_points_csv(path: &Path, states: &Mat) -> Result<()> {
    std::fs::write(path, points_csv(states)?)?;
    Ok(())
}

/// Writes states as a PGM grid when an image shape is known, otherwise as
/// a CSV point cloud. Returns the path written.
pub fn emit_states(stem: &Path, states: &Mat, image_shape: Option<(usize, usize)>) -> Result<std::path::PathBuf> {
    match image_shape {
        Some(shape) => {
            let path = stem.with_extension("pgm");
            write_pgm_grid(&path, states, shape, 8)?;
            Ok(path)
        }
        None => {
            let path = stem.with_extension("csv");
            write_points_csv(&path, states)?;
            Ok(path)
        }
    }
}

pub fn loss_csv(curve: &[LossRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "total", "dsm_term", "kl_term", "grad_norm"])?;
    for r in curve {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.8e}", r.total),
            format!("{:.8e}", r.dsm_term),
            format!("{:.8e}", r.kl_term),
            format!("{:.8e}", r.grad_norm),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_loss_csv(path: &Path, curve: &[LossRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&loss_csv(curve)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pgm_header_and_pixels() {
        let img = array![[1.0, 0.0, 0.5, 2.0]];
        let bytes = pgm_grid(&img, (2, 2), 1).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let pix = &bytes[header.len()..];
        assert_eq!(pix.len(), 16);
        // tile starts at (1, 1) in a 4-wide grid
        assert_eq!(pix[5], 255);
        assert_eq!(pix[6], 0);
        assert_eq!(pix[9], 128);
        assert_eq!(pix[10], 255);
        assert!(pgm_grid(&img, (3, 3), 1).is_err());
    }

    #[test]
    fn csv_rows_match_samples() {
        let pts = array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        let text = String::from_utf8(points_csv(&pts).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "x0,x1");
        assert_eq!(lines[3], "4.000000,5.000000");
    }

    #[test]
    fn emit_picks_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = emit_states(&dir.path().join("a"), &array![[0.1, 0.2]], None).unwrap();
        assert_eq!(p.extension().unwrap(), "csv");
        let q = emit_states(&dir.path().join("b"), &array![[0.1, 0.2, 0.3, 0.4]], Some((2, 2))).unwrap();
        assert!(std::fs::read(q).unwrap().starts_with(b"P5"));
    }

    #[test]
    fn loss_curve_csv() {
        let rows = [LossRow { iteration: 0, total: 1.5, dsm_term: 1.0, kl_term: 50.0, grad_norm: 2.0 }];
        let text = String::from_utf8(loss_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("iteration,total,dsm_term,kl_term,grad_norm\n0,"));
    }
}
