//! Helpers shared by the integration tests: a finite-difference oracle and a
//! procedural image dataset.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use maskgate::data::{load_idx, write_idx_images, write_idx_labels, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Ten classes of faint oriented sinusoidal gratings with random phase and
/// period under heavy pixel noise, `side × side` bytes per image.
pub fn grating_bytes(n: usize, side: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.25).unwrap();
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let theta = class as f64 * PI / 10.0;
        let phase = r.random_range(0.0..2.0 * PI);
        let freq = 2.0 * PI / r.random_range(3.0..6.0);
        for y in 0..side {
            for x in 0..side {
                let t = freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase;
                let v = 0.5 + 0.25 * t.cos() + noise.sample(&mut r);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        labels.push(class as u8);
    }
    (pixels, labels)
}

/// Writes a grating set as IDX files under `dir` and loads it back.
pub fn grating_idx(dir: &Path, n: usize, side: usize, seed: u64) -> Dataset<f64> {
    let (pixels, labels) = grating_bytes(n, side, seed);
    let img = dir.join("images.idx");
    let lbl = dir.join("labels.idx");
    write_idx_images(&img, side, side, &pixels).unwrap();
    write_idx_labels(&lbl, &labels).unwrap();
    load_idx(&img, &lbl).unwrap()
}
