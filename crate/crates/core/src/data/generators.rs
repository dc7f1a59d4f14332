//! Pixel rules of the four generators and their zero-noise labelers.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{GeneratorKind, TaskSpec};
use crate::rng::{self, Stream};

/// Grating frequency in cycles per pixel.
const STRIPE_FREQ: f64 = 0.25;
const SQUARE: usize = 2;

/// Largest COUNT class count placeable at the given side.
pub(crate) fn max_count(side: usize) -> usize {
    let cells = (side + 1) / (SQUARE + 1);
    (cells * cells / 2).max(1)
}

fn centre(side: usize) -> f64 {
    (side as f64 - 1.0) / 2.0
}

fn sector_of(x: usize, y: usize, side: usize, k: usize) -> usize {
    let c = centre(side);
    let ang = (y as f64 - c).atan2(x as f64 - c).rem_euclid(2.0 * PI);
    ((ang / (2.0 * PI / k as f64)) as usize).min(k - 1)
}

fn stripes(side: usize, class: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let theta = PI * class as f64 / k as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let t = 2.0 * PI * STRIPE_FREQ * (x as f64 * c + y as f64 * s) + phase;
            img.push(0.5 + 0.5 * t.sin());
        }
    }
    img
}

fn blobs(side: usize, class: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let width = 2.0 * PI / k as f64;
    let c = centre(side);
    let (bx, by) = loop {
        let a = rng.random_range(width * (class as f64 + 0.1)..width * (class as f64 + 0.9));
        let r = rng.random_range(side as f64 / 4.0..side as f64 / 2.0 - 1.0);
        let x = (c + r * a.cos()).round().clamp(0.0, side as f64 - 1.0) as usize;
        let y = (c + r * a.sin()).round().clamp(0.0, side as f64 - 1.0) as usize;
        if sector_of(x, y, side, k) == class {
            break (x, y);
        }
    };
    let sigma = side as f64 / 10.0;
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let d2 = (x as f64 - bx as f64).powi(2) + (y as f64 - by as f64).powi(2);
            img.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    img
}

fn count(side: usize, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = class + 1;
    let hi = side - SQUARE;
    let placed = 'outer: loop {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ok = false;
            for _ in 0..200 {
                let (x, y) = (rng.random_range(0..=hi), rng.random_range(0..=hi));
                // At least one empty pixel between squares along some axis.
                if placed
                    .iter()
                    .all(|&(px, py)| px.abs_diff(x) > SQUARE || py.abs_diff(y) > SQUARE)
                {
                    placed.push((x, y));
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'outer;
            }
        }
        break placed;
    };
    let mut img = vec![0.0; side * side];
    for (x, y) in placed {
        for dy in 0..SQUARE {
            for dx in 0..SQUARE {
                img[(y + dy) * side + x + dx] = 1.0;
            }
        }
    }
    img
}

fn quadrant(x: usize, y: usize, side: usize) -> usize {
    usize::from(y >= side / 2) * 2 + usize::from(x >= side / 2)
}

fn xor_patch(side: usize, class: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut levels = [0usize; 4];
    for l in levels.iter_mut().take(3) {
        *l = rng.random_range(0..k);
    }
    let partial: usize = levels[..3].iter().sum();
    levels[3] = (class + k - partial % k) % k;
    let scale = (k - 1) as f64;
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            img.push(levels[quadrant(x, y, side)] as f64 / scale);
        }
    }
    img
}

/// Appends sample `id` of class `class` (local to `spec`) to `out`.
pub(crate) fn render(spec: &TaskSpec, id: u64, class: usize, out: &mut Vec<f32>) {
    let mut rng = rng::stream(spec.seed, Stream::Sample(id));
    let (side, k) = (spec.image_side, spec.num_classes);
    let base = match spec.kind {
        GeneratorKind::Stripes => stripes(side, class, k, &mut rng),
        GeneratorKind::Blobs => blobs(side, class, k, &mut rng),
        GeneratorKind::Count => count(side, class, &mut rng),
        GeneratorKind::XorPatch => xor_patch(side, class, k, &mut rng),
    };
    for _ in 0..spec.channels {
        for &v in &base {
            let noisy = if spec.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                (v + spec.noise_std * z).clamp(0.0, 1.0)
            } else {
                v
            };
            out.push(noisy as f32);
        }
    }
}

/// Closed-form labeler reading channel 0 of one image. Exact on
/// zero-noise samples.
pub fn oracle_label(spec: &TaskSpec, image: &[f32]) -> usize {
    let (side, k) = (spec.image_side, spec.num_classes);
    let px = |x: usize, y: usize| image[y * side + x] as f64;
    match spec.kind {
        GeneratorKind::Stripes => {
            // Magnitude of the grating's Fourier coefficient per orientation.
            let power = |c: usize| {
                let theta = PI * c as f64 / k as f64;
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..side {
                    for x in 0..side {
                        let t = 2.0 * PI * STRIPE_FREQ * (x as f64 * theta.cos() + y as f64 * theta.sin());
                        let v = px(x, y) - 0.5;
                        re += v * t.cos();
                        im += v * t.sin();
                    }
                }
                re * re + im * im
            };
            (0..k)
                .map(power)
                .enumerate()
                .fold((0, f64::MIN), |best, (c, p)| if p > best.1 { (c, p) } else { best })
                .0
        }
        GeneratorKind::Blobs => {
            let mut best = (0, 0, f64::MIN);
            for y in 0..side {
                for x in 0..side {
                    if px(x, y) > best.2 {
                        best = (x, y, px(x, y));
                    }
                }
            }
            sector_of(best.0, best.1, side, k)
        }
        GeneratorKind::Count => {
            let mut seen = vec![false; side * side];
            let mut components = 0usize;
            for start in 0..side * side {
                if seen[start] || image[start] <= 0.5 {
                    continue;
                }
                components += 1;
                let mut stack = vec![start];
                seen[start] = true;
                while let Some(i) = stack.pop() {
                    let (x, y) = (i % side, i / side);
                    let mut visit = |j: usize| {
                        if !seen[j] && image[j] > 0.5 {
                            seen[j] = true;
                            stack.push(j);
                        }
                    };
                    if x > 0 {
                        visit(i - 1);
                    }
                    if x + 1 < side {
                        visit(i + 1);
                    }
                    if y > 0 {
                        visit(i - side);
                    }
                    if y + 1 < side {
                        visit(i + side);
                    }
                }
            }
            components.saturating_sub(1).min(k - 1)
        }
        GeneratorKind::XorPatch => {
            let mut sums = [0.0; 4];
            for y in 0..side {
                for x in 0..side {
                    sums[quadrant(x, y, side)] += px(x, y);
                }
            }
            let per = (side * side / 4) as f64;
            let total: usize = sums.iter().map(|s| (s / per * (k - 1) as f64).round() as usize).sum();
            total % k
        }
    }
}
