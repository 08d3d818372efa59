//! Image datasets: the CIFAR binary format and a synthetic stand-in.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Images stored as one contiguous (N, 3, H, W) buffer with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` records.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            height: self.height,
            width: self.width,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Little-endian pixel bytes followed by the labels; used for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4 + self.labels.len() * 8);
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "eval" | "val" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

impl CifarKind {
    pub fn record_len(self) -> usize {
        match self {
            CifarKind::Cifar10 => 3073,
            CifarKind::Cifar100 => 3074,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    /// File names and record counts of a split.
    fn files(self, split: Split) -> Vec<(String, usize)> {
        match (self, split) {
            (CifarKind::Cifar10, Split::Train) => {
                (1..=5).map(|i| (format!("data_batch_{i}.bin"), 10_000)).collect()
            }
            (CifarKind::Cifar10, Split::Test) => vec![("test_batch.bin".into(), 10_000)],
            (CifarKind::Cifar100, Split::Train) => vec![("train.bin".into(), 50_000)],
            (CifarKind::Cifar100, Split::Test) => vec![("test.bin".into(), 10_000)],
        }
    }
}

/// Decodes whole records; the label byte used is the last one before the pixels
/// (the fine label for CIFAR-100).
pub fn decode_cifar(kind: CifarKind, bytes: &[u8], out: &mut Dataset) {
    let stride = kind.record_len();
    for rec in bytes.chunks_exact(stride) {
        let label_at = stride - 3073;
        out.labels.push(rec[label_at] as usize);
        out.pixels
            .extend(rec[label_at + 1..].iter().map(|&b| b as f32 / 255.0));
    }
}

/// Loads a split from the directory holding the `.bin` files. Normalization
/// is left to the input pipeline.
pub fn load_cifar(dir: &Path, kind: CifarKind, split: Split) -> Result<Dataset> {
    let mut ds = Dataset {
        pixels: Vec::new(),
        height: 32,
        width: 32,
        labels: Vec::new(),
        classes: kind.classes(),
    };
    for (name, records) in kind.files(split) {
        let path: PathBuf = dir.join(&name);
        let expected = (records * kind.record_len()) as u64;
        let actual = std::fs::metadata(&path)?.len();
        if actual != expected {
            return Err(Error::CorruptFile { path, expected, actual });
        }
        let bytes = std::fs::read(&path)?;
        if bytes.len() as u64 != expected {
            return Err(Error::CorruptFile {
                path,
                expected,
                actual: bytes.len() as u64,
            });
        }
        decode_cifar(kind, &bytes, &mut ds);
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= ds.classes) {
        return Err(Error::Domain {
            op: "load_cifar",
            detail: format!("label {bad} outside 0..{}", ds.classes),
        });
    }
    Ok(ds)
}

/// Class-conditional images: each class owns a Gaussian blob position, a colour
/// and an oriented grating frequency; samples jitter the phase and blob centre
/// and add pixel noise. Labels are balanced and shuffled.
pub fn synthetic(n: usize, classes: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::config(format!(
            "synthetic dataset needs n >= classes > 0, got n={n}, classes={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Proto {
        centre: (f64, f64),
        colour: [f64; 3],
        freq: f64,
        angle: f64,
    }
    let protos: Vec<Proto> = (0..classes)
        .map(|c| Proto {
            centre: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            colour: [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
            freq: 2.0 + (c % 5) as f64 * 1.5 + rng.random_range(0.0..0.5),
            angle: std::f64::consts::PI * c as f64 / classes as f64,
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let r = resolution;
    let mut pixels = Vec::with_capacity(n * 3 * r * r);
    let sigma2 = 2.0 * 0.15f64.powi(2);
    for &label in &labels {
        let p = &protos[label];
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (
            p.centre.0 + rng.random_range(-0.05..0.05),
            p.centre.1 + rng.random_range(-0.05..0.05),
        );
        let (s, c) = p.angle.sin_cos();
        for ch in 0..3 {
            for y in 0..r {
                for x in 0..r {
                    let (fy, fx) = (y as f64 / r as f64, x as f64 / r as f64);
                    let grating = (std::f64::consts::TAU * p.freq * (fx * c + fy * s) + phase).sin();
                    let blob = (-((fy - cy).powi(2) + (fx - cx).powi(2)) / sigma2).exp();
                    let v = 0.5 + 0.2 * grating * p.colour[ch] + 0.35 * blob * p.colour[(ch + 1) % 3]
                        - 0.1
                        + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(Dataset {
        pixels,
        height: r,
        width: r,
        labels,
        classes,
    })
}

/// Bilinear resize of one (3, h, w) image to (3, size, size), align-corners off.
pub fn resize(image: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    if h == size && w == size {
        return image.to_vec();
    }
    let mut out = vec![0.0; 3 * size * size];
    let coord = |o: usize, inp: usize| {
        let src = ((o as f32 + 0.5) * inp as f32 / size as f32 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f32)
    };
    for c in 0..3 {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for oy in 0..size {
            let (y0, y1, ty) = coord(oy, h);
            for ox in 0..size {
                let (x0, x1, tx) = coord(ox, w);
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out[c * size * size + oy * size + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Per-channel standardization with the fixed CIFAR constants.
pub fn normalize(image: &mut [f32]) {
    let plane = image.len() / 3;
    for (c, chunk) in image.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - CIFAR_MEAN[c]) / CIFAR_STD[c];
        }
    }
}

/// Stacks prepared images into an (N, 3, size, size) array.
pub fn stack(images: &[Vec<f32>], size: usize) -> Result<NdArray<f32>> {
    NdArray::new(&[images.len(), 3, size, size], images.concat())
}
