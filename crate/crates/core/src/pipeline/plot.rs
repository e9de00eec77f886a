//! Minimal PNG line plots: axes, ticks, one polyline and markers per series.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::Result;

pub struct Series {
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

const MARGIN: i64 = 30;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=n {
        let x = x0 + (x1 - x0) * i / n;
        let y = y0 + (y1 - y0) * i / n;
        put(img, x, y, c);
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Write a `width × height` plot. Axis limits cover every finite point;
/// the y range always includes 0. Grid lines sit at round values.
pub fn line_plot(path: &Path, series: &[Series], width: u32, height: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        img.save(path)?;
        return Ok(());
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (w, h) = (width as i64, height as i64);
    let px = |x: f64| MARGIN + ((x - x0) / (x1 - x0) * (w - 2 * MARGIN) as f64).round() as i64;
    let py = |y: f64| h - MARGIN - ((y - y0) / (y1 - y0) * (h - 2 * MARGIN) as f64).round() as i64;

    let sx = nice_step(x1 - x0);
    let mut t = (x0 / sx).ceil() * sx;
    while t <= x1 + 1e-9 {
        line(&mut img, (px(t), MARGIN), (px(t), h - MARGIN), GRID);
        line(&mut img, (px(t), h - MARGIN), (px(t), h - MARGIN + 5), AXIS);
        t += sx;
    }
    let sy = nice_step(y1 - y0);
    let mut t = (y0 / sy).ceil() * sy;
    while t <= y1 + 1e-9 {
        line(&mut img, (MARGIN, py(t)), (w - MARGIN, py(t)), GRID);
        line(&mut img, (MARGIN - 5, py(t)), (MARGIN, py(t)), AXIS);
        t += sy;
    }
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);

    for s in series {
        let c = Rgb(s.color);
        let finite: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for pair in finite.windows(2) {
            line(&mut img, pair[0], pair[1], c);
        }
        for &(x, y) in &finite {
            for d in -2..=2 {
                put(&mut img, x + d, y, c);
                put(&mut img, x, y + d, c);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_are_round() {
        assert_eq!(nice_step(6.0), 2.0);
        assert_eq!(nice_step(0.9), 0.2);
        assert_eq!(nice_step(50.0), 10.0);
    }

    #[test]
    fn draws_series_color() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let s = Series {
            color: [255, 0, 0],
            points: vec![(-1.0, 0.5), (0.0, 2.0), (1.0, f64::NAN), (2.0, 1.0)],
        };
        line_plot(&p, &[s], 200, 120).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (200, 120));
        assert!(img.pixels().any(|q| q.0 == [255, 0, 0]));
    }
}
