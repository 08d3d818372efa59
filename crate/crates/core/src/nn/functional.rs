use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, NdArray};

use super::Ctx;

/// Mean over the spatial axes of (N, C, H, W), giving (N, C).
pub fn global_avg_pool<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expects (N, C, H, W), got {:?}", x.shape()),
        ));
    }
    x.mean_axes(&[2, 3], false)
}

fn check_drop_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("drop-path probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Stochastic depth on a residual branch `x` with a leading batch axis.
///
/// In training, sample `i` is zeroed when `uniforms[i] < p` and otherwise scaled
/// by `1/(1-p)`, so the expectation equals `x`. Evaluation is the identity.
pub fn drop_path<T: Element>(x: &Var<T>, p: f64, train: bool, uniforms: &[f64]) -> Result<Var<T>> {
    check_drop_prob(p)?;
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let n = x.shape().first().copied().unwrap_or(1);
    if uniforms.len() != n {
        return Err(Error::shape(
            "drop_path",
            format!("{} uniforms for a batch of {n}", uniforms.len()),
        ));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mut mask_shape = vec![1; x.shape().len().max(1)];
    mask_shape[0] = n;
    let mask = NdArray::new(
        &mask_shape,
        uniforms
            .iter()
            .map(|&u| if u < p { T::zero() } else { keep })
            .collect(),
    )?;
    x.mul(&x.tape().constant(mask))
}

/// SplitMix64 finalizer; mixes keys into well-distributed 64-bit values.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [0, 1) determined by (seed, layer, sample).
pub(crate) fn keyed_uniform(seed: u64, layer: u64, sample: u64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ layer) ^ sample);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Drop-path layer. Masks are keyed by the pass seed, this layer's key and the
/// sample's index in its logical batch, so splitting a batch into micro-batches
/// reproduces the same masks.
#[derive(Clone, Debug)]
pub struct DropPath {
    pub p: f64,
    pub layer_key: u64,
}

impl DropPath {
    pub fn new(p: f64, layer_key: u64) -> Result<Self> {
        check_drop_prob(p)?;
        Ok(DropPath { p, layer_key })
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if !ctx.is_train() || self.p == 0.0 {
            return Ok(x.clone());
        }
        let n = x.shape().first().copied().unwrap_or(1);
        let uniforms: Vec<f64> = (0..n)
            .map(|i| keyed_uniform(ctx.drop_seed, self.layer_key, (ctx.sample_offset + i) as u64))
            .collect();
        drop_path(x, self.p, true, &uniforms)
    }
}
