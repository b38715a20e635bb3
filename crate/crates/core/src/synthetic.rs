//! Procedural stand-in corpus in the CIFAR-10 layout.
//!
//! Each image shows one of ten upright silhouettes over either a sky and
//! ground scene or a textured backdrop, with random colors, placement, size
//! and pixel noise. The silhouettes are vertically asymmetric and the
//! scenes have a consistent "up", so both rotation prediction and shape
//! classification are learnable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{CifarSplits, LabeledImage, NUM_CLASSES};
use crate::geometry::{Image, CIFAR_CHANNELS, CIFAR_HEIGHT, CIFAR_WIDTH};

/// Names of the ten synthetic shape classes, by label.
pub const SHAPE_NAMES: [&str; NUM_CLASSES] = [
    "triangle", "tee", "arch", "house", "pin", "kite", "cross", "boot", "snowman", "mushroom",
];

/// Whether normalized point `(u, v)` lies inside shape `class`.
/// `u` runs left to right and `v` top to bottom, both in `[-1, 1]`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let circle = |cu: f64, cv: f64, r: f64| (u - cu).powi(2) + (v - cv).powi(2) <= r * r;
    let rect = |u0: f64, u1: f64, v0: f64, v1: f64| u >= u0 && u <= u1 && v >= v0 && v <= v1;
    match class {
        // apex at the top
        0 => v >= -0.9 && v <= 0.9 && u.abs() <= (v + 0.9) / 1.8 * 0.9,
        1 => rect(-0.9, 0.9, -0.9, -0.45) || rect(-0.22, 0.22, -0.45, 0.9),
        // open at the bottom
        2 => {
            let r = (u * u + (v - 0.3).powi(2)).sqrt();
            r <= 0.85 && r >= 0.45 && v <= 0.3 || (rect(-0.85, -0.45, 0.3, 0.9) || rect(0.45, 0.85, 0.3, 0.9))
        }
        3 => rect(-0.7, 0.7, 0.0, 0.9) || (v < 0.0 && v >= -0.9 && u.abs() <= (v + 0.9) / 0.9 * 0.85),
        4 => circle(0.0, -0.55, 0.35) || rect(-0.12, 0.12, -0.3, 0.9),
        // long lower tail
        5 => {
            if v < -0.3 {
                u.abs() <= (v + 0.9) / 0.6 * 0.6
            } else {
                v <= 0.9 && u.abs() <= (0.9 - v) / 1.2 * 0.6
            }
        }
        6 => rect(-0.15, 0.15, -0.9, 0.9) || rect(-0.7, 0.7, -0.55, -0.25),
        7 => rect(-0.7, -0.2, -0.9, 0.9) || rect(-0.7, 0.8, 0.4, 0.9),
        8 => circle(0.0, 0.35, 0.55) || circle(0.0, -0.5, 0.32),
        9 => (v <= -0.1 && v >= -0.9 && circle(0.0, -0.1, 0.85)) || rect(-0.2, 0.2, -0.1, 0.9),
        _ => false,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders one image of `class`.
pub fn render(class: usize, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (CIFAR_HEIGHT, CIFAR_WIDTH);
    let mut canvas = vec![[0f64; 3]; h * w];

    if rng.random_bool(0.7) {
        // sky over ground, lighter towards the top
        let horizon = rng.random_range(18..26) as f64;
        let sky_top = mix([150.0, 190.0, 240.0], random_color(rng), 0.3);
        let sky_low = mix(sky_top, [235.0, 235.0, 240.0], rng.random_range(0.2..0.6));
        let ground = mix([70.0, 110.0, 50.0], random_color(rng), rng.random_range(0.0..0.6));
        for r in 0..h {
            for c in 0..w {
                let y = r as f64;
                canvas[r * w + c] = if y < horizon {
                    mix(sky_top, sky_low, y / horizon)
                } else {
                    mix(ground, [20.0, 20.0, 20.0], (y - horizon) / (h as f64 - horizon) * 0.5)
                };
            }
        }
    } else {
        // vertical gradient between two random colours with stripes
        let top = random_color(rng);
        let bottom = random_color(rng);
        let period = rng.random_range(4.0..12.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for r in 0..h {
            for c in 0..w {
                let stripe = 12.0 * ((c as f64 / period) * std::f64::consts::TAU + phase).sin();
                let base = mix(top, bottom, r as f64 / (h - 1) as f64);
                canvas[r * w + c] = [base[0] + stripe, base[1] + stripe, base[2] + stripe];
            }
        }
    }

    let size = rng.random_range(8.5..13.0);
    let cu = 15.5 + rng.random_range(-4.0..4.0);
    let cv = 15.5 + rng.random_range(-4.0..4.0);
    let fg = random_color(rng);
    let shade = rng.random_range(0.5..0.9);
    for r in 0..h {
        for c in 0..w {
            let u = (c as f64 - cu) / size;
            let v = (r as f64 - cv) / size;
            if inside(class, u, v) {
                // lit from above
                let light = 1.0 - shade * 0.5 * (v + 1.0) / 2.0;
                canvas[r * w + c] = [fg[0] * light, fg[1] * light, fg[2] * light];
            }
        }
    }

    let noise = rng.random_range(4.0..16.0);
    let mut img = Image::zeros(h, w, CIFAR_CHANNELS);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..CIFAR_CHANNELS {
                let v = canvas[r * w + c][ch] + rng.random_range(-noise..noise);
                img.set(r, c, ch, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

/// A class-balanced corpus with `train_per_class` and `test_per_class`
/// images per class, interleaved by class.
pub fn synthetic_cifar(train_per_class: usize, test_per_class: usize, seed: u64) -> CifarSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |per_class: usize| -> Vec<LabeledImage> {
        (0..per_class * NUM_CLASSES)
            .map(|i| {
                let class = i % NUM_CLASSES;
                LabeledImage {
                    image: render(class, &mut rng),
                    class_label: class as u8,
                }
            })
            .collect()
    };
    let train = split(train_per_class);
    let test = split(test_per_class);
    CifarSplits { train, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::class_histogram;

    #[test]
    fn balanced_and_deterministic() {
        let a = synthetic_cifar(3, 2, 5);
        let b = synthetic_cifar(3, 2, 5);
        assert_eq!(a.train.len(), 30);
        assert_eq!(class_histogram(&a.test), [2; NUM_CLASSES]);
        assert_eq!(a.train, b.train);
        assert_ne!(a.train, synthetic_cifar(3, 2, 6).train);
    }

    #[test]
    fn shapes_are_vertically_asymmetric() {
        for class in 0..NUM_CLASSES {
            let mut differ = 0;
            let mut area = 0;
            for i in 0..41 {
                for j in 0..41 {
                    let u = -1.0 + i as f64 / 20.0;
                    let v = -1.0 + j as f64 / 20.0;
                    area += inside(class, u, v) as usize;
                    differ += (inside(class, u, v) != inside(class, u, -v)) as usize;
                }
            }
            assert!(area > 100, "{} is too small", SHAPE_NAMES[class]);
            assert!(differ > 40, "{} looks the same upside down", SHAPE_NAMES[class]);
        }
    }
}
