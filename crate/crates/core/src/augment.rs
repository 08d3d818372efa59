//! Batch mixing (mixup / cutmix) and a reduced RandAugment.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::{Element, NdArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    None,
    Mixup,
    Cutmix,
}

#[derive(Clone, Debug)]
pub struct MixedBatch<T> {
    pub images: NdArray<T>,
    /// (N, classes), rows on the probability simplex.
    pub soft_labels: NdArray<T>,
    pub kind: MixKind,
    pub lambda: f64,
}

pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> NdArray<T> {
    NdArray::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Sample `i` is paired with sample `N - 1 - i`.
fn partner(i: usize, n: usize) -> usize {
    n - 1 - i
}

fn mix_labels<T: Element>(soft: &NdArray<T>, lambda: f64) -> NdArray<T> {
    let (n, k) = (soft.shape()[0], soft.shape()[1]);
    let (a, b) = (T::of(lambda), T::of(1.0 - lambda));
    NdArray::from_fn(&[n, k], |idx| {
        let (i, c) = (idx / k, idx % k);
        a * soft.data()[idx] + b * soft.data()[partner(i, n) * k + c]
    })
}

fn check_batch<T: Element>(images: &NdArray<T>, soft: &NdArray<T>) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 || soft.ndim() != 2 || soft.shape()[0] != s[0] {
        return Err(Error::shape(
            "mix_batch",
            format!("images {s:?} and labels {:?}", soft.shape()),
        ));
    }
    if s[0] < 2 {
        return Err(Error::config("mixing needs a batch of at least 2"));
    }
    Ok((s[0], s[2], s[3]))
}

/// `x_i <- lambda x_i + (1 - lambda) x_j`, labels likewise.
pub fn mixup_with<T: Element>(images: &NdArray<T>, soft: &NdArray<T>, lambda: f64) -> Result<MixedBatch<T>> {
    let (n, _, _) = check_batch(images, soft)?;
    let per = images.len() / n;
    let (a, b) = (T::of(lambda), T::of(1.0 - lambda));
    let mixed = NdArray::from_fn(images.shape(), |idx| {
        let (i, r) = (idx / per, idx % per);
        a * images.data()[idx] + b * images.data()[partner(i, n) * per + r]
    });
    Ok(MixedBatch {
        images: mixed,
        soft_labels: mix_labels(soft, lambda),
        kind: MixKind::Mixup,
        lambda,
    })
}

/// Pastes rows `y0..y1`, columns `x0..x1` of each partner; lambda becomes the
/// unpasted area fraction.
pub fn cutmix_with<T: Element>(
    images: &NdArray<T>,
    soft: &NdArray<T>,
    (y0, y1, x0, x1): (usize, usize, usize, usize),
) -> Result<MixedBatch<T>> {
    let (n, h, w) = check_batch(images, soft)?;
    if y0 > y1 || x0 > x1 || y1 > h || x1 > w {
        return Err(Error::shape("cutmix", format!("box {:?} outside {h}x{w}", (y0, y1, x0, x1))));
    }
    let lambda = 1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64;
    let per = images.len() / n;
    let mut mixed = images.clone();
    let c = images.shape()[1];
    for i in 0..n {
        let j = partner(i, n);
        for ch in 0..c {
            for y in y0..y1 {
                let row = ch * h * w + y * w;
                let (dst, src) = (i * per + row, j * per + row);
                mixed.data_mut()[dst + x0..dst + x1].copy_from_slice(&images.data()[src + x0..src + x1]);
            }
        }
    }
    Ok(MixedBatch {
        images: mixed,
        soft_labels: mix_labels(soft, lambda),
        kind: MixKind::Cutmix,
        lambda,
    })
}

/// A box covering about `1 - lambda` of an `h` x `w` image, centred uniformly and clipped.
pub fn cutmix_box<R: Rng>(h: usize, w: usize, lambda: f64, rng: &mut R) -> (usize, usize, usize, usize) {
    let ratio = (1.0 - lambda).sqrt();
    let (ch, cw) = ((h as f64 * ratio) as i64, (w as f64 * ratio) as i64);
    let cy = rng.random_range(0..h as i64);
    let cx = rng.random_range(0..w as i64);
    let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
    (
        clip(cy - ch / 2, h),
        clip(cy + ch / 2, h),
        clip(cx - cw / 2, w),
        clip(cx + cw / 2, w),
    )
}

/// Mixup or cutmix (never both), chosen with probability `switch_prob` for
/// cutmix when both are enabled; an alpha of 0 disables that method.
pub fn mix_batch<T: Element, R: Rng>(
    images: &NdArray<T>,
    labels: &[usize],
    classes: usize,
    rng: &mut R,
    mixup_alpha: f64,
    cutmix_alpha: f64,
    switch_prob: f64,
) -> Result<MixedBatch<T>> {
    let soft = one_hot(labels, classes);
    check_batch(images, &soft)?;
    let use_cutmix = match (mixup_alpha > 0.0, cutmix_alpha > 0.0) {
        (false, false) => {
            return Ok(MixedBatch {
                images: images.clone(),
                soft_labels: soft,
                kind: MixKind::None,
                lambda: 1.0,
            })
        }
        (true, true) => rng.random_bool(switch_prob),
        (false, true) => true,
        (true, false) => false,
    };
    let beta = |a: f64| Beta::new(a, a).map_err(|e| Error::config(format!("beta({a}): {e}")));
    if use_cutmix {
        let lambda = beta(cutmix_alpha)?.sample(rng);
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let bbox = cutmix_box(h, w, lambda, rng);
        cutmix_with(images, &soft, bbox)
    } else {
        let lambda = beta(mixup_alpha)?.sample(rng);
        mixup_with(images, &soft, lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    Identity,
    FlipX,
    TranslateX,
    TranslateY,
    Rotate,
    Brightness,
    Contrast,
    Cutout,
}

pub const AUG_POOL: [AugOp; 8] = [
    AugOp::Identity,
    AugOp::FlipX,
    AugOp::TranslateX,
    AugOp::TranslateY,
    AugOp::Rotate,
    AugOp::Brightness,
    AugOp::Contrast,
    AugOp::Cutout,
];

const FILL: f32 = 0.5;

/// `ops` operations drawn uniformly from [`AUG_POOL`], each applied with
/// probability `prob` at strength `magnitude / 31` of its maximum, with a random sign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandAugment {
    pub ops: usize,
    pub magnitude: f64,
    pub prob: f64,
}

impl Default for RandAugment {
    fn default() -> Self {
        RandAugment {
            ops: 2,
            magnitude: 9.0,
            prob: 0.5,
        }
    }
}

impl RandAugment {
    /// Augments one (3, h, w) image with values in [0, 1] in place.
    pub fn apply<R: Rng>(&self, img: &mut [f32], h: usize, w: usize, rng: &mut R) {
        let level = (self.magnitude / 31.0).clamp(0.0, 1.0);
        for _ in 0..self.ops {
            let op = AUG_POOL[rng.random_range(0..AUG_POOL.len())];
            if !rng.random_bool(self.prob) {
                continue;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            apply_op(op, sign * level, img, h, w, rng);
        }
    }
}

/// Applies `op` at signed strength `s` in [-1, 1].
pub fn apply_op<R: Rng>(op: AugOp, s: f64, img: &mut [f32], h: usize, w: usize, rng: &mut R) {
    let plane = h * w;
    match op {
        AugOp::Identity => {}
        AugOp::FlipX => resample(img, h, w, |y, x| Some((y, w - 1 - x))),
        AugOp::TranslateX => {
            let d = (s * 0.45 * w as f64).round() as i64;
            resample(img, h, w, |y, x| {
                let sx = x as i64 - d;
                (0..w as i64).contains(&sx).then_some((y, sx as usize))
            })
        }
        AugOp::TranslateY => {
            let d = (s * 0.45 * h as f64).round() as i64;
            resample(img, h, w, |y, x| {
                let sy = y as i64 - d;
                (0..h as i64).contains(&sy).then_some((sy as usize, x))
            })
        }
        AugOp::Rotate => {
            let (sin, cos) = (s * 30f64.to_radians()).sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            resample(img, h, w, |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = (cos * dy - sin * dx + cy).round();
                let sx = (sin * dy + cos * dx + cx).round();
                (sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64).then_some((sy as usize, sx as usize))
            })
        }
        AugOp::Brightness => {
            let f = (1.0 + 0.9 * s) as f32;
            img.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
        }
        AugOp::Contrast => {
            let f = (1.0 + 0.9 * s) as f32;
            let mean = img.iter().sum::<f32>() / img.len() as f32;
            img.iter_mut().for_each(|v| *v = (mean + (*v - mean) * f).clamp(0.0, 1.0));
        }
        AugOp::Cutout => {
            let side = ((s.abs() * 0.5 * h.min(w) as f64).round() as usize).max(1);
            let y0 = rng.random_range(0..=h - side.min(h));
            let x0 = rng.random_range(0..=w - side.min(w));
            for c in 0..3 {
                for y in y0..(y0 + side).min(h) {
                    for x in x0..(x0 + side).min(w) {
                        img[c * plane + y * w + x] = FILL;
                    }
                }
            }
        }
    }
}

/// Rebuilds every channel from source coordinates; `None` fills with grey.
fn resample(img: &mut [f32], h: usize, w: usize, src: impl Fn(usize, usize) -> Option<(usize, usize)>) {
    let plane = h * w;
    let old = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let from = src(y, x);
            for c in 0..img.len() / plane {
                img[c * plane + y * w + x] = match from {
                    Some((sy, sx)) => old[c * plane + sy * w + sx],
                    None => FILL,
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn batch(n: usize) -> NdArray<f64> {
        NdArray::from_fn(&[n, 3, 4, 4], |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn lambda_one_is_identity() {
        let x = batch(4);
        let soft = one_hot::<f64>(&[0, 1, 2, 1], 3);
        let m = mixup_with(&x, &soft, 1.0).unwrap();
        assert_eq!(m.images, x);
        assert_eq!(m.soft_labels, soft);
    }

    #[test]
    fn quarter_box_gives_three_quarters() {
        let x = batch(2);
        let soft = one_hot::<f64>(&[0, 1], 2);
        let m = cutmix_with(&x, &soft, (0, 2, 2, 4)).unwrap();
        assert_eq!(m.lambda, 0.75);
        assert_eq!(m.soft_labels.data(), &[0.75, 0.25, 0.25, 0.75]);
        assert_eq!(m.images.get(&[0, 1, 0, 3]), x.get(&[1, 1, 0, 3]));
        assert_eq!(m.images.get(&[0, 1, 3, 3]), x.get(&[0, 1, 3, 3]));
    }

    #[test]
    fn mixup_conserves_pixel_mass() {
        let x = batch(4);
        let soft = one_hot::<f64>(&[0, 1, 2, 3], 4);
        let m = mixup_with(&x, &soft, 0.3).unwrap();
        let per = 48;
        for i in 0..4 {
            let sum = |a: &NdArray<f64>, k: usize| a.data()[k * per..(k + 1) * per].iter().sum::<f64>();
            let expect = 0.3 * sum(&x, i) + 0.7 * sum(&x, 3 - i);
            assert!((sum(&m.images, i) - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn random_mixes_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = batch(6);
        for _ in 0..50 {
            let m = mix_batch(&x, &[0, 1, 2, 3, 4, 0], 5, &mut rng, 0.8, 1.0, 0.5).unwrap();
            for row in m.soft_labels.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert!(mix_batch(&batch(1), &[0], 2, &mut rng, 0.8, 1.0, 0.5).is_err());
    }

    #[test]
    fn augment_keeps_range_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ra = RandAugment::default();
        for _ in 0..50 {
            let mut img: Vec<f32> = (0..3 * 16 * 16).map(|i| (i % 17) as f32 / 16.0).collect();
            ra.apply(&mut img, 16, 16, &mut rng);
            assert_eq!(img.len(), 768);
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut img: Vec<f32> = (0..12).map(|i| i as f32).collect();
        apply_op(AugOp::FlipX, 1.0, &mut img, 2, 2, &mut rng);
        assert_eq!(&img[..4], &[1.0, 0.0, 3.0, 2.0]);
    }
}
