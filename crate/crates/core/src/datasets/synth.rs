//! Procedural digit rendering, used when no IDX corpus is on disk.
//!
//! Each class is a fixed stroke skeleton in a unit box; samples get a seeded
//! random affine jitter (rotation, anisotropic scale, shift) and stroke
//! width, then the polylines are rasterized with soft disks. The result is
//! an MNIST-shaped corpus: 28x28 grayscale, ink = 1, unlimited samples,
//! bit-reproducible for a given seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RawDigit;

const SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f64 / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons per digit, coordinates in [0,1]^2 (x right, y down).
fn skeleton(digit: u8) -> Vec<Stroke> {
    use std::f64::consts::PI;
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.32, 0.42, 0.0, 2.0 * PI, 28)],
        1 => vec![vec![(0.32, 0.25), (0.54, 0.08), (0.54, 0.92)]],
        2 => vec![vec![
            (0.18, 0.30),
            (0.22, 0.14),
            (0.50, 0.08),
            (0.78, 0.16),
            (0.80, 0.34),
            (0.55, 0.58),
            (0.18, 0.90),
            (0.84, 0.90),
        ]],
        3 => vec![
            vec![(0.20, 0.16), (0.50, 0.08), (0.78, 0.20), (0.74, 0.40), (0.46, 0.48)],
            vec![(0.46, 0.48), (0.80, 0.58), (0.80, 0.80), (0.50, 0.92), (0.18, 0.82)],
        ],
        4 => vec![
            vec![(0.68, 0.92), (0.68, 0.08), (0.16, 0.62), (0.86, 0.62)],
        ],
        5 => vec![vec![
            (0.80, 0.08),
            (0.24, 0.08),
            (0.20, 0.46),
            (0.58, 0.40),
            (0.82, 0.56),
            (0.80, 0.82),
            (0.50, 0.92),
            (0.18, 0.84),
        ]],
        6 => vec![
            vec![(0.68, 0.08), (0.38, 0.30), (0.22, 0.58)],
            ellipse(0.50, 0.70, 0.28, 0.22, 0.0, 2.0 * PI, 22),
        ],
        7 => vec![vec![(0.16, 0.08), (0.84, 0.08), (0.44, 0.92)]],
        8 => vec![
            ellipse(0.5, 0.29, 0.26, 0.20, 0.0, 2.0 * PI, 22),
            ellipse(0.5, 0.71, 0.30, 0.22, 0.0, 2.0 * PI, 22),
        ],
        9 => vec![
            ellipse(0.50, 0.30, 0.28, 0.22, 0.0, 2.0 * PI, 22),
            vec![(0.78, 0.32), (0.74, 0.62), (0.56, 0.92)],
        ],
        _ => panic!("digit out of range"),
    }
}

struct Jitter {
    cos: f64,
    sin: f64,
    sx: f64,
    sy: f64,
    dx: f64,
    dy: f64,
    width: f64,
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let angle: f64 = rng.gen_range(-0.16..0.16);
        Jitter {
            cos: angle.cos(),
            sin: angle.sin(),
            sx: rng.gen_range(0.82..1.08),
            sy: rng.gen_range(0.82..1.08),
            dx: rng.gen_range(-1.6..1.6),
            dy: rng.gen_range(-1.6..1.6),
            width: rng.gen_range(0.75..1.25),
        }
    }

    /// Unit-box point to pixel coordinates, jitter applied about the center.
    fn map(&self, p: (f64, f64)) -> (f64, f64) {
        let (ux, uy) = (p.0 - 0.5, p.1 - 0.5);
        let (rx, ry) = (
            self.cos * ux * self.sx - self.sin * uy * self.sy,
            self.sin * ux * self.sx + self.cos * uy * self.sy,
        );
        let margin = 3.0;
        let span = SIZE as f64 - 2.0 * margin;
        (
            margin + (rx + 0.5) * span + self.dx,
            margin + (ry + 0.5) * span + self.dy,
        )
    }
}

fn stamp(pixels: &mut Array2<f64>, x: f64, y: f64, width: f64) {
    let r = (width * 2.5).ceil() as isize;
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    for di in -r..=r {
        for dj in -r..=r {
            let (py, px) = (yi + di, xi + dj);
            if py < 0 || px < 0 || py >= SIZE as isize || px >= SIZE as isize {
                continue;
            }
            let d2 = (py as f64 - y).powi(2) + (px as f64 - x).powi(2);
            let v = (-d2 / (2.0 * width * width)).exp();
            let cell = &mut pixels[[py as usize, px as usize]];
            *cell = cell.max(v);
        }
    }
}

fn render(digit: u8, jitter: &Jitter) -> Array2<f64> {
    let mut pixels = Array2::<f64>::zeros((SIZE, SIZE));
    for stroke in skeleton(digit) {
        for pair in stroke.windows(2) {
            let a = jitter.map(pair[0]);
            let b = jitter.map(pair[1]);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let steps = (len / 0.35).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                stamp(
                    &mut pixels,
                    a.0 + (b.0 - a.0) * t,
                    a.1 + (b.1 - a.1) * t,
                    jitter.width,
                );
            }
        }
    }
    pixels.mapv_inplace(|v| if v < 0.04 { 0.0 } else { v.min(1.0) });
    pixels
}

/// Generate `n` digits cycling through classes 0-9, deterministic in `seed`.
pub fn synth_digits(n: usize, seed: u64) -> Vec<RawDigit> {
    crate::parallel::map_indexed(n, |i| {
        let label = (i % 10) as u8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 20) ^ 0x5eed_d161);
        let jitter = Jitter::sample(&mut rng);
        RawDigit {
            pixels: render(label, &jitter),
            label,
        }
    })
}
