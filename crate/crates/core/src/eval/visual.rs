use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::MetricCurve;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel mean of generated samples and the spread around it.
#[derive(Clone, Debug, PartialEq)]
pub struct Diversity {
    pub mean: Tensor<f32>,
    pub variance: Tensor<f32>,
}

/// Averages equally shaped samples; the variance is exactly zero wherever all
/// samples agree.
pub fn diversity_average(samples: &[Tensor<f32>]) -> Result<Diversity> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("no samples to average".into()))?;
    for s in samples {
        s.expect_shape(first.shape())?;
    }
    let n = samples.len() as f64;
    let mut mean = Vec::with_capacity(first.len());
    let mut variance = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let x0 = first.data()[i];
        if samples.iter().all(|s| s.data()[i] == x0) {
            mean.push(x0);
            variance.push(0.0);
            continue;
        }
        let m = samples.iter().map(|s| s.data()[i] as f64).sum::<f64>() / n;
        let v = samples.iter().map(|s| (s.data()[i] as f64 - m).powi(2)).sum::<f64>() / n;
        mean.push(m as f32);
        variance.push(v as f32);
    }
    Ok(Diversity {
        mean: Tensor::new(first.shape(), mean)?,
        variance: Tensor::new(first.shape(), variance)?,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Colour-wheel rendering of a `[2, H, W]` (d_row, d_col) flow as
/// `[H, W, 3]`: hue is direction, saturation is magnitude, zero is white.
///
/// `max_magnitude = None` scales by the largest vector in the field.
pub fn flow_to_color(flow: &Tensor<f32>, max_magnitude: Option<f64>) -> Result<Tensor<f32>> {
    if flow.shape().len() != 3 || flow.shape()[0] != 2 {
        return Err(Error::Shape(format!("flow must be [2, H, W], got {:?}", flow.shape())));
    }
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let (dr, dc) = flow.data().split_at(h * w);
    let mag: Vec<f64> = dr.iter().zip(dc).map(|(a, b)| (*a as f64).hypot(*b as f64)).collect();
    let scale = match max_magnitude {
        Some(m) => m,
        None => mag.iter().cloned().fold(0.0, f64::max),
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let sat = if scale > 0.0 { (mag[i] / scale).min(1.0) } else { 0.0 };
        let hue = ((dr[i] as f64).atan2(dc[i] as f64) + PI) / (2.0 * PI);
        out.extend(hsv_to_rgb(hue, sat, 1.0).map(|c| c as f32));
    }
    Tensor::new(&[h, w, 3], out)
}

/// One cell of an image grid.
pub enum Tile<'a> {
    /// `[1, H, W]` or `[3, H, W]` intensities in [0, 1].
    Chw(&'a Tensor<f32>),
    /// `[H, W, 3]` colours, as produced by [`flow_to_color`].
    Hwc(&'a Tensor<f32>),
}

impl Tile<'_> {
    fn size(&self) -> Result<(usize, usize)> {
        let s = match self {
            Tile::Chw(t) | Tile::Hwc(t) => t.shape(),
        };
        match (self, s) {
            (Tile::Chw(_), [1 | 3, h, w]) => Ok((*h, *w)),
            (Tile::Hwc(_), [h, w, 3]) => Ok((*h, *w)),
            _ => Err(Error::Shape(format!("unsupported tile shape {s:?}"))),
        }
    }

    fn rgb(&self, r: usize, c: usize) -> [u8; 3] {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self {
            Tile::Chw(t) => {
                let (ch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let at = |k: usize| q(t.data()[(k.min(ch - 1) * h + r) * w + c]);
                [at(0), at(1), at(2)]
            }
            Tile::Hwc(t) => {
                let w = t.shape()[1];
                let base = (r * w + c) * 3;
                [q(t.data()[base]), q(t.data()[base + 1]), q(t.data()[base + 2])]
            }
        }
    }
}

/// Writes rows of equally sized tiles as one PNG with a 1-pixel gutter.
pub fn save_grid(rows: &[Vec<Tile<'_>>], path: &Path) -> Result<()> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Precondition("empty grid".into()))?;
    let (h, w) = first.size()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut img = RgbImage::from_pixel(
        (cols * (w + 1) + 1) as u32,
        (rows.len() * (h + 1) + 1) as u32,
        Rgb([128, 128, 128]),
    );
    for (i, row) in rows.iter().enumerate() {
        for (j, tile) in row.iter().enumerate() {
            if tile.size()? != (h, w) {
                return Err(Error::Shape("grid tiles differ in size".into()));
            }
            for r in 0..h {
                for c in 0..w {
                    let x = (j * (w + 1) + 1 + c) as u32;
                    let y = (i * (h + 1) + 1 + r) as u32;
                    img.put_pixel(x, y, Rgb(tile.rgb(r, c)));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

const PLOT_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

/// Line plot of per-frame curves with shaded 95% bands; x is the predicted
/// frame index, y spans the data range. Axes are drawn without labels.
pub fn plot_curves(curves: &[&MetricCurve], path: &Path) -> Result<()> {
    let (w, h, margin) = (480u32, 320u32, 30u32);
    let len = curves
        .iter()
        .map(|c| c.per_frame.len())
        .max()
        .filter(|&l| l > 0)
        .ok_or_else(|| Error::Precondition("nothing to plot".into()))?;
    let lows = curves.iter().flat_map(|c| c.per_frame.iter().zip(&c.per_frame_ci95).map(|(m, e)| m - e));
    let highs = curves.iter().flat_map(|c| c.per_frame.iter().zip(&c.per_frame_ci95).map(|(m, e)| m + e));
    let lo = lows.fold(f64::INFINITY, f64::min);
    let hi = highs.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((w - 2 * margin) as f64, (h - 2 * margin) as f64);
    let x_of = |t: f64| margin as f64 + if len > 1 { t / (len - 1) as f64 * pw } else { pw / 2.0 };
    let y_of = |v: f64| (h - margin) as f64 - (v - lo) / span * ph;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for x in margin..=w - margin {
        img.put_pixel(x, h - margin, Rgb([0, 0, 0]));
    }
    for y in margin..=h - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    for (ci, c) in curves.iter().enumerate() {
        let color = PLOT_COLORS[ci % PLOT_COLORS.len()];
        let band = color.map(|v| ((v as u32 + 3 * 255) / 4) as u8);
        let at = |xs: f64, series: &dyn Fn(usize) -> f64| -> f64 {
            let t = xs.clamp(0.0, (c.per_frame.len() - 1) as f64);
            let (i, f) = (t.floor() as usize, t.fract());
            let j = (i + 1).min(c.per_frame.len() - 1);
            series(i) * (1.0 - f) + series(j) * f
        };
        for px in margin..=w - margin {
            let t = if len > 1 { (px - margin) as f64 / pw * (len - 1) as f64 } else { 0.0 };
            let mean = at(t, &|i| c.per_frame[i]);
            let err = at(t, &|i| c.per_frame_ci95[i]);
            let (top, bottom) = (y_of(mean + err).round() as u32, y_of(mean - err).round() as u32);
            for y in top.max(margin)..=bottom.min(h - margin - 1) {
                img.put_pixel(px, y, Rgb(band));
            }
        }
        for px in margin..w - margin {
            let t0 = if len > 1 { (px - margin) as f64 / pw * (len - 1) as f64 } else { 0.0 };
            let t1 = if len > 1 { (px + 1 - margin) as f64 / pw * (len - 1) as f64 } else { 0.0 };
            let (y0, y1) = (y_of(at(t0, &|i| c.per_frame[i])), y_of(at(t1, &|i| c.per_frame[i])));
            let (a, b) = (y0.min(y1).round() as u32, y0.max(y1).round() as u32);
            for y in a..=b {
                img.put_pixel(px, y.clamp(0, h - 1), Rgb(color));
            }
        }
        for t in 0..c.per_frame.len() {
            let (cx, cy) = (x_of(t as f64).round() as i64, y_of(c.per_frame[t]).round() as i64);
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    let (x, y) = (cx + dx, cy + dy);
                    if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                        img.put_pixel(x as u32, y as u32, Rgb(color));
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_flow(dr: f32, dc: f32) -> Tensor<f32> {
        Tensor::new(&[2, 2, 3], [vec![dr; 6], vec![dc; 6]].concat()).unwrap()
    }

    fn hue(rgb: &[f32]) -> f64 {
        let (r, g, b) = (rgb[0] as f64, rgb[1] as f64, rgb[2] as f64);
        (3f64.sqrt() * (g - b)).atan2(2.0 * r - g - b)
    }

    #[test]
    fn zero_flow_is_white() {
        let c = flow_to_color(&uniform_flow(0.0, 0.0), None).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn magnitude_changes_saturation_only() {
        let a = flow_to_color(&uniform_flow(1.0, 1.0), Some(4.0)).unwrap();
        let b = flow_to_color(&uniform_flow(2.0, 2.0), Some(4.0)).unwrap();
        assert!((hue(&a.data()[..3]) - hue(&b.data()[..3])).abs() < 1e-5);
        let min = |t: &Tensor<f32>| t.data()[..3].iter().cloned().fold(1.0f32, f32::min);
        assert!(min(&b) < min(&a));
    }

    #[test]
    fn opposite_flow_has_opposite_hue() {
        for (dr, dc) in [(1.0, 0.3), (-0.5, 2.0), (0.0, -1.0)] {
            let a = flow_to_color(&uniform_flow(dr, dc), Some(3.0)).unwrap();
            let b = flow_to_color(&uniform_flow(-dr, -dc), Some(3.0)).unwrap();
            let d = (hue(&a.data()[..3]) - hue(&b.data()[..3])).abs();
            assert!((d - PI).abs() < 1e-4, "hue gap {d}");
        }
    }

    #[test]
    fn diversity_examples() {
        let a = Tensor::new(&[1, 2], vec![0.0f32, 0.3]).unwrap();
        let b = Tensor::new(&[1, 2], vec![1.0f32, 0.3]).unwrap();
        let d = diversity_average(&[a.clone(), b, a.clone()]).unwrap();
        assert_eq!(d.variance.data()[1], 0.0);
        assert_eq!(d.mean.data()[1], 0.3);
        let two = diversity_average(&[a.clone(), Tensor::new(&[1, 2], vec![1.0f32, 0.3]).unwrap()]).unwrap();
        assert_eq!(two.mean.data()[0], 0.5);
        assert_eq!(diversity_average(&[a.clone(), a.clone()]).unwrap().mean, a);
        assert!(diversity_average(&[]).is_err());
    }

    #[test]
    fn averaging_commutes_with_frame_selection() {
        let clips: Vec<Tensor<f32>> = (0..4)
            .map(|s| Tensor::new(&[3, 1, 2, 2], (0..12).map(|i| ((i * 7 + s * 5) % 11) as f32 / 10.0).collect()).unwrap())
            .collect();
        let whole = diversity_average(&clips).unwrap();
        for t in 0..3 {
            let frames: Vec<Tensor<f32>> = clips.iter().map(|c| c.index_outer(t)).collect();
            assert_eq!(diversity_average(&frames).unwrap().mean, whole.mean.index_outer(t));
        }
    }

    #[test]
    fn curve_plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = MetricCurve::from_videos(super::super::Metric::Psnr, &[vec![20.0, 18.0, 15.0], vec![22.0, 17.0, 16.0]]).unwrap();
        let path = dir.path().join("c.png");
        plot_curves(&[&c], &path).unwrap();
        assert_eq!(image::open(&path).unwrap().width(), 480);
    }

    #[test]
    fn grid_png_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Tensor::<f32>::full(&[1, 4, 5], 0.5);
        let color = flow_to_color(&Tensor::zeros(&[2, 4, 5]), None).unwrap();
        let path = dir.path().join("g.png");
        save_grid(&[vec![Tile::Chw(&gray), Tile::Hwc(&color)], vec![Tile::Chw(&gray)]], &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2 * 6 + 1, 2 * 5 + 1));
    }
}
