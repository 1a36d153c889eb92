//! Procedural handwritten-style digits, used when no MNIST file is supplied.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageSet;
use crate::error::Result;

type Stroke = Vec<(f64, f64)>;

fn ring(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    (0..=16)
        .map(|k| {
            let a = TAU * k as f64 / 16.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Strokes of digit `d` in the unit square, x to the right and y down.
fn template(d: usize) -> Vec<Stroke> {
    match d {
        0 => vec![ring(0.5, 0.5, 0.28, 0.4)],
        1 => vec![vec![(0.35, 0.25), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.2, 0.3),
            (0.35, 0.12),
            (0.65, 0.12),
            (0.8, 0.3),
            (0.75, 0.45),
            (0.2, 0.9),
            (0.82, 0.9),
        ]],
        3 => vec![vec![
            (0.2, 0.15),
            (0.75, 0.15),
            (0.45, 0.45),
            (0.75, 0.6),
            (0.75, 0.8),
            (0.55, 0.9),
            (0.2, 0.85),
        ]],
        4 => vec![vec![(0.65, 0.9), (0.65, 0.1), (0.15, 0.65), (0.85, 0.65)]],
        5 => vec![vec![
            (0.8, 0.1),
            (0.25, 0.1),
            (0.2, 0.45),
            (0.6, 0.42),
            (0.8, 0.6),
            (0.7, 0.85),
            (0.45, 0.9),
            (0.2, 0.8),
        ]],
        6 => vec![vec![
            (0.7, 0.1),
            (0.35, 0.35),
            (0.22, 0.65),
            (0.35, 0.88),
            (0.65, 0.88),
            (0.78, 0.68),
            (0.6, 0.5),
            (0.3, 0.55),
        ]],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.4, 0.9)]],
        8 => vec![ring(0.5, 0.3, 0.2, 0.18), ring(0.5, 0.7, 0.24, 0.2)],
        _ => vec![ring(0.5, 0.32, 0.22, 0.2), vec![(0.72, 0.32), (0.6, 0.9)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render<R: Rng>(digit: usize, size: usize, rng: &mut R) -> Vec<f32> {
    let s = size as f64;
    let scale = rng.random_range(0.8..1.0) * s * 0.7;
    let shear = rng.random_range(-0.2..0.2);
    let offset = (
        s * 0.5 + rng.random_range(-0.04..0.04) * s,
        s * 0.5 + rng.random_range(-0.04..0.04) * s,
    );
    let thickness = s * rng.random_range(0.08..0.12);
    let strokes: Vec<Stroke> = template(digit)
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|(x, y)| {
                    let (u, v) = (x - 0.5, y - 0.5);
                    (offset.0 + scale * (u + shear * v), offset.1 + scale * v)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            out[r * size + c] = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// `count` digit glyphs of `size × size` pixels, cycling through 0–9.
pub fn synthetic_digits(count: usize, size: usize, seed: u64) -> Result<ImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * size * size);
    for i in 0..count {
        pixels.extend(render(i % 10, size, &mut rng));
    }
    ImageSet::new(count, size, size, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_have_ink_and_clear_borders() {
        let set = synthetic_digits(20, 14, 1).unwrap();
        for i in 0..20 {
            let g = set.image(i);
            let ink: f32 = g.iter().sum();
            assert!(ink > 5.0, "glyph {i} is nearly empty");
            let border: f32 = (0..14).map(|k| g[k] + g[13 * 14 + k]).sum();
            assert!(border < ink * 0.2);
        }
        assert_eq!(synthetic_digits(20, 14, 1).unwrap(), set);
    }
}
