//! Synthetic shapes: flat-coloured rectangles, disks, triangles and diamonds
//! on a dark noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize_rows, Scalar, Tensor, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Disk,
    Triangle,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyClass {
    pub name: &'static str,
    pub color: [f64; 3],
    pub shape: Shape,
}

/// The toy ontology. Each class has its own colour and geometry.
pub const TOY_CLASSES: [ToyClass; 8] = [
    ToyClass {
        name: "red square",
        color: [0.95, 0.15, 0.15],
        shape: Shape::Rect,
    },
    ToyClass {
        name: "green disk",
        color: [0.15, 0.9, 0.2],
        shape: Shape::Disk,
    },
    ToyClass {
        name: "blue triangle",
        color: [0.2, 0.35, 1.0],
        shape: Shape::Triangle,
    },
    ToyClass {
        name: "yellow diamond",
        color: [0.95, 0.9, 0.1],
        shape: Shape::Diamond,
    },
    ToyClass {
        name: "magenta square",
        color: [0.9, 0.2, 0.9],
        shape: Shape::Rect,
    },
    ToyClass {
        name: "cyan disk",
        color: [0.1, 0.9, 0.9],
        shape: Shape::Disk,
    },
    ToyClass {
        name: "orange triangle",
        color: [1.0, 0.55, 0.1],
        shape: Shape::Triangle,
    },
    ToyClass {
        name: "white diamond",
        color: [0.95, 0.95, 0.95],
        shape: Shape::Diamond,
    },
];

pub fn class_names(num_classes: usize) -> Vec<String> {
    TOY_CLASSES[..num_classes].iter().map(|c| c.name.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    /// x0, y0, x1, y1 in pixels.
    pub bbox: [f64; 4],
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor<f32>,
    pub objects: Vec<Object>,
    pub seed: u64,
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer: distinct, well-mixed seeds per sample
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn inside(shape: Shape, bbox: &[f64; 4], px: f64, py: f64) -> bool {
    let [x0, y0, x1, y1] = *bbox;
    if px < x0 || px >= x1 || py < y0 || py >= y1 {
        return false;
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let (u, v) = ((px - x0) / w, (py - y0) / h);
    match shape {
        Shape::Rect => true,
        Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        // apex at top centre, base along the bottom edge
        Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
    }
}

fn overlaps(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// One sample drawn from its own seed: one to three non-overlapping objects.
pub fn gen_sample(seed: u64, image_size: usize, num_classes: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = image_size as f64;
    let base: f64 = rng.gen_range(0.0..0.2);
    let mut data: Vec<f32> = (0..3 * image_size * image_size)
        .map(|_| (base + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0) as f32)
        .collect();

    let wanted = rng.gen_range(1..=3);
    let (lo, hi) = (size * 0.2, size * 0.45);
    let mut objects: Vec<Object> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..20 {
            let w = rng.gen_range(lo..hi).round();
            let h = rng.gen_range(lo..hi).round();
            let x0 = rng.gen_range(0.0..=(size - w)).round();
            let y0 = rng.gen_range(0.0..=(size - h)).round();
            let bbox = [x0, y0, x0 + w, y0 + h];
            if objects.iter().all(|o| !overlaps(&o.bbox, &bbox)) {
                objects.push(Object {
                    bbox,
                    class_id: rng.gen_range(0..num_classes),
                });
                break;
            }
        }
    }
    let plane = image_size * image_size;
    for obj in &objects {
        let class = &TOY_CLASSES[obj.class_id];
        let shade: f64 = rng.gen_range(0.85..1.0);
        let [x0, y0, x1, y1] = obj.bbox;
        for y in y0 as usize..y1 as usize {
            for x in x0 as usize..x1 as usize {
                if inside(class.shape, &obj.bbox, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, &col) in class.color.iter().enumerate() {
                        data[c * plane + y * image_size + x] = (col * shade) as f32;
                    }
                }
            }
        }
    }
    SyntheticSample {
        image: Tensor::new([3, image_size, image_size], data).expect("consistent image shape"),
        objects,
        seed,
    }
}

/// Deterministic dataset: sample `i` depends only on `(seed, i)`, so samples
/// are generated in parallel without affecting the result.
pub fn gen_dataset(seed: u64, count: usize, image_size: usize, num_classes: usize) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
    }
    if num_classes == 0 || num_classes > TOY_CLASSES.len() {
        return Err(Error::InvalidArgument(format!(
            "toy ontology has {} classes, asked for {num_classes}",
            TOY_CLASSES.len()
        )));
    }
    if image_size < 32 {
        return Err(Error::InvalidArgument(format!("image size {image_size} is too small")));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| gen_sample(sample_seed(seed, i), image_size, num_classes))
        .collect())
}

/// Stand-ins for cached text-encoder output: unit rows sharing a common
/// component of weight `shared` plus an isotropic random part, so that
/// different prompts have cosine similarity near `shared²`.
pub fn synthetic_embeddings<T: Scalar>(seed: u64, count: usize, dim: usize, shared: f64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let common = unit(&mut rng);
    let rest = (1.0 - shared * shared).sqrt();
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let r = unit(&mut rng);
        data.extend(
            common
                .iter()
                .zip(&r)
                .map(|(c, x)| T::from_f64_lossy(shared * c + rest * x)),
        );
    }
    l2_normalize_rows(&Tensor::new([count, dim], data)?, T::from_f64_lossy(NORM_EPS))
}
