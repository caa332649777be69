//! PNG renderings of heatmaps and scatter plots, plus CSV dumps of the
//! numbers behind them.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::autograd::Mat;
use crate::error::{Error, Result};

const CELL: u32 = 24;
const SIDE: u32 = 400;
const MARGIN: u32 = 10;

/// Diverging colour for a correlation in `[-1, 1]`: blue, white, red.
fn diverging(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(v), fade(v), 255])
    }
}

/// Square heatmap of a correlation matrix, one block per entry.
pub fn heatmap_image(m: &Mat) -> RgbImage {
    let (r, c) = m.dim();
    let mut img = RgbImage::new((c as u32).max(1) * CELL, (r as u32).max(1) * CELL);
    for ((i, j), &v) in m.indexed_iter() {
        let colour = diverging(v);
        for y in 0..CELL {
            for x in 0..CELL {
                img.put_pixel(j as u32 * CELL + x, i as u32 * CELL + y, colour);
            }
        }
    }
    img
}

/// Scatter of 2D point sets on a shared frame; set `k` uses `colours[k]`.
pub fn scatter_image(sets: &[&Mat], colours: &[[u8; 3]]) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIDE, SIDE, Rgb([255, 255, 255]));
    let all = sets.iter().flat_map(|m| m.rows().into_iter().map(|r| (r[0], r[1])).collect::<Vec<_>>());
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for (x, y) in all {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
    let usable = (SIDE - 2 * MARGIN) as f64;
    for (k, m) in sets.iter().enumerate() {
        let colour = Rgb(colours[k % colours.len()]);
        for row in m.rows() {
            let px = MARGIN as f64 + (row[0] - lo.0) / span(lo.0, hi.0) * usable;
            let py = MARGIN as f64 + (1.0 - (row[1] - lo.1) / span(lo.1, hi.1)) * usable;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (px as i64 + dx, py as i64 + dy);
                    if (0..SIDE as i64).contains(&x) && (0..SIDE as i64).contains(&y) {
                        img.put_pixel(x as u32, y as u32, colour);
                    }
                }
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Eval(format!("{}: {e}", path.display())))
}

/// Writes a matrix as CSV with the given column names.
pub fn write_matrix_csv(m: &Mat, header: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| Error::Eval(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v}"))).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_colours_follow_the_sign() {
        let m = ndarray::arr2(&[[1.0, -1.0], [0.0, 0.5]]);
        let img = heatmap_image(&m);
        assert_eq!(img.dimensions(), (2 * CELL, 2 * CELL));
        assert_eq!(*img.get_pixel(0, 0), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(CELL, 0), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(0, CELL), Rgb([255, 255, 255]));
    }

    #[test]
    fn figures_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = ndarray::arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let b = ndarray::arr2(&[[0.5, 0.2]]);
        let img = scatter_image(&[&a, &b], &[[200, 0, 0], [0, 0, 200]]);
        let path = dir.path().join("s.png");
        save_png(&img, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back, img);
        let csv = dir.path().join("m.csv");
        write_matrix_csv(&a, &["x".into(), "y".into()], &csv).unwrap();
        assert_eq!(std::fs::read_to_string(csv).unwrap(), "x,y\n0,0\n1,1\n");
    }
}
