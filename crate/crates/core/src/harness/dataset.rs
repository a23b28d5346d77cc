//! Procedural shapes dataset: {circle, square, triangle, cross} × {solid,
//! striped} on 32×32 RGB, every sample a pure function of `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const NUM_CLASSES: usize = 8;
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const TEXTURES: [&str; 2] = ["solid", "striped"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// `[3, 32, 32]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub label_name: String,
    /// Position in the generating stream; used as the teacher lookup key.
    pub index: u64,
}

pub fn label_name(label: usize) -> String {
    format!("{} {}", TEXTURES[label % 2], SHAPES[label / 2])
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => dy >= -r && dy <= 0.75 * r && dx.abs() <= (dy + r) / 1.75,
        _ => {
            let arm = 0.32 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Sample `index` of the stream keyed by `seed`.
pub fn generate_sample(seed: u64, index: u64) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let label = rng.gen_range(0..NUM_CLASSES);
    let (shape, striped) = (label / 2, label % 2 == 1);

    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.3));
    let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
    let r: f32 = rng.gen_range(8.0..12.5);
    let lo = r + 1.0;
    let hi = SIDE as f32 - r - 1.0;
    let cx: f32 = rng.gen_range(lo..hi.max(lo + 0.01));
    let cy: f32 = rng.gen_range(lo..hi.max(lo + 0.01));
    let phase = rng.gen_range(0..4usize);

    let mut data = vec![0f32; 3 * SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let on = inside(shape, dx, dy, r) && !(striped && ((y + phase) / 2) % 2 == 1);
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-0.04..0.04);
                let base = if on { fg[c] } else { bg[c] };
                data[(c * SIDE + y) * SIDE + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    ToySample {
        image: Tensor::new(vec![3, SIDE, SIDE], data).expect("fixed shape"),
        label,
        label_name: label_name(label),
        index,
    }
}

/// `count` consecutive samples starting at `start`.
pub fn generate_range(seed: u64, start: u64, count: usize) -> Vec<ToySample> {
    (start..start + count as u64)
        .map(|i| generate_sample(seed, i))
        .collect()
}

/// Samples `0..count` of the stream keyed by `seed`.
pub fn generate_toy_dataset(seed: u64, count: usize) -> Vec<ToySample> {
    generate_range(seed, 0, count)
}

/// Train/test split used throughout: the first `train` samples, then `test` more.
pub fn split(seed: u64, train: usize, test: usize) -> (Vec<ToySample>, Vec<ToySample>) {
    (
        generate_range(seed, 0, train),
        generate_range(seed, train as u64, test),
    )
}
