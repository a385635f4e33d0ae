//! Synthetic phantoms: a randomly rotated disc containing random ellipses
//! and rectangles, optionally with a high-frequency stripe patch.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: usize,
    /// Disc radius as a fraction of the half-width.
    pub disc_radius: f64,
    /// Inclusive count range of random ellipses.
    pub ellipses: (usize, usize),
    /// Inclusive count range of random rectangles.
    pub rectangles: (usize, usize),
    /// Chance that a sample carries a fine-detail stripe patch.
    pub high_frequency_probability: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: 64,
            disc_radius: 0.9,
            ellipses: (2, 6),
            rectangles: (1, 4),
            high_frequency_probability: 0.3,
            seed: 0,
        }
    }
}

/// Stable per-sample seed derived from the spec seed and sample index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic phantom for `(spec.seed, index)`; values in [0, 1] with
/// support inside the rotated disc.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Array2<f64> {
    let n = spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let r = spec.disc_radius;

    // rotated outer disc (slightly elliptic)
    let disc_angle = rng.random_range(0.0..std::f64::consts::PI);
    let disc = RotatedEllipse {
        center: (0.0, 0.0),
        semi: (0.95 * r, 0.78 * r),
        angle: disc_angle,
    };

    let mut shapes: Vec<(Shape, f64)> = Vec::new();
    let n_ell = rng.random_range(spec.ellipses.0..=spec.ellipses.1);
    for _ in 0..n_ell {
        let shape = RotatedEllipse {
            center: random_center(&mut rng, r),
            semi: (
                rng.random_range(0.05..0.35) * r,
                rng.random_range(0.05..0.35) * r,
            ),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        shapes.push((Shape::Ellipse(shape), rng.random_range(0.05..0.95)));
    }
    let n_rect = rng.random_range(spec.rectangles.0..=spec.rectangles.1);
    for _ in 0..n_rect {
        let shape = RotatedRect {
            center: random_center(&mut rng, r),
            half: (
                rng.random_range(0.05..0.30) * r,
                rng.random_range(0.05..0.30) * r,
            ),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        shapes.push((Shape::Rect(shape), rng.random_range(0.05..0.95)));
    }

    let stripes = if rng.random_bool(spec.high_frequency_probability.clamp(0.0, 1.0)) {
        let center = random_center(&mut rng, r);
        let half = rng.random_range(0.08..0.20) * r;
        let horizontal = rng.random_bool(0.5);
        let (a, b) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        Some((center, half, horizontal, a, b))
    } else {
        None
    };

    let mut img = Array2::zeros((n, n));
    let step = 2.0 / n as f64;
    for row in 0..n {
        for col in 0..n {
            let x = -1.0 + (col as f64 + 0.5) * step;
            let y = 1.0 - (row as f64 + 0.5) * step;
            if !disc.contains(x, y) {
                continue;
            }
            let mut v = 0.25;
            for (shape, intensity) in &shapes {
                if shape.contains(x, y) {
                    v = *intensity;
                }
            }
            if let Some((center, half, horizontal, a, b)) = stripes {
                if (x - center.0).abs() <= half && (y - center.1).abs() <= half {
                    let coord = if horizontal { row } else { col };
                    v = if (coord / 2) % 2 == 0 { a } else { b };
                }
            }
            img[[row, col]] = v.clamp(0.0, 1.0);
        }
    }
    img
}

fn random_center(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    (
        rng.random_range(-0.45..0.45) * r,
        rng.random_range(-0.45..0.45) * r,
    )
}

struct RotatedEllipse {
    center: (f64, f64),
    semi: (f64, f64),
    angle: f64,
}

impl RotatedEllipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi.0).powi(2) + (v / self.semi.1).powi(2) <= 1.0
    }
}

struct RotatedRect {
    center: (f64, f64),
    half: (f64, f64),
    angle: f64,
}

impl RotatedRect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.half.0 && v.abs() <= self.half.1
    }
}

enum Shape {
    Ellipse(RotatedEllipse),
    Rect(RotatedRect),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse(e) => e.contains(x, y),
            Shape::Rect(r) => r.contains(x, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 17);
        let b = generate_phantom(&spec, 17);
        assert_eq!(a, b);
        let c = generate_phantom(&spec, 18);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shape_counts_give_plain_constant_disc() {
        let spec = PhantomSpec {
            ellipses: (0, 0),
            rectangles: (0, 0),
            high_frequency_probability: 0.0,
            ..Default::default()
        };
        let img = generate_phantom(&spec, 0);
        let interior: Vec<f64> = img.iter().copied().filter(|&v| v > 0.0).collect();
        assert!(!interior.is_empty());
        assert!(interior.iter().all(|&v| v == 0.25), "interior constant");
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let spec = PhantomSpec::default();
        for i in 0..20 {
            let img = generate_phantom(&spec, i);
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn mean_foreground_fraction_is_reasonable() {
        let spec = PhantomSpec {
            grid: 32,
            ..Default::default()
        };
        let mut total = 0.0;
        let count = 200;
        for i in 0..count {
            let img = generate_phantom(&spec, i);
            let fg = img.iter().filter(|&&v| v > 0.0).count() as f64 / img.len() as f64;
            total += fg;
        }
        let mean = total / count as f64;
        assert!(
            (0.3..0.8).contains(&mean),
            "mean foreground fraction {mean}"
        );
    }
}
