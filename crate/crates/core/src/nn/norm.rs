use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

use super::{Ctx, Init, ParamId, ParamKind, ParamRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel statistics over (N, H, W); running statistics for evaluation.
    BatchNorm,
    /// Per-sample statistics over channel groups and space.
    GroupNorm { groups: usize },
    /// Per-position statistics over the last axis.
    LayerNorm,
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub kind: NormKind,
    pub features: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
    pub eps: f64,
    pub momentum: f64,
}

impl NormLayer {
    fn register(reg: &mut ParamRegistry, path: &str, kind: NormKind, features: usize, eps: f64) -> Self {
        let gamma = reg.register(format!("{path}.weight"), &[features], ParamKind::NormScale, Init::Ones);
        let beta = reg.register(format!("{path}.bias"), &[features], ParamKind::NormShift, Init::Zeros);
        let (running_mean, running_var) = if kind == NormKind::BatchNorm {
            (
                Some(reg.register(format!("{path}.running_mean"), &[features], ParamKind::Buffer, Init::Zeros)),
                Some(reg.register(format!("{path}.running_var"), &[features], ParamKind::Buffer, Init::Ones)),
            )
        } else {
            (None, None)
        };
        NormLayer {
            kind,
            features,
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            momentum: 0.1,
        }
    }

    pub fn batch_norm(reg: &mut ParamRegistry, path: &str, channels: usize) -> Self {
        Self::register(reg, path, NormKind::BatchNorm, channels, 1e-5)
    }

    /// Group norm with up to `groups` groups; falls back to the largest divisor of
    /// `channels` not exceeding `groups` so narrow desk-scale widths stay valid.
    pub fn group_norm(reg: &mut ParamRegistry, path: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        Self::register(reg, path, NormKind::GroupNorm { groups }, channels, 1e-5)
    }

    pub fn layer_norm(reg: &mut ParamRegistry, path: &str, dim: usize) -> Self {
        Self::register(reg, path, NormKind::LayerNorm, dim, 1e-6)
    }

    pub fn param_count(&self) -> usize {
        2 * self.features
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self.kind {
            NormKind::LayerNorm => self.layer_norm_forward(ctx, x),
            NormKind::GroupNorm { groups } => self.group_norm_forward(ctx, x, groups),
            NormKind::BatchNorm => self.batch_norm_forward(ctx, x),
        }
    }

    /// Reshape of (C,) parameters so they broadcast against `x` along axis 1.
    fn channel_shape(&self, ndim: usize) -> Vec<usize> {
        let mut s = vec![1; ndim];
        s[1] = self.features;
        s
    }

    fn affine<T: Element>(&self, ctx: &mut Ctx<'_, T>, xhat: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let g = ctx.param(self.gamma).reshape(shape)?;
        let b = ctx.param(self.beta).reshape(shape)?;
        xhat.mul(&g)?.add(&b)
    }

    fn layer_norm_forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let nd = x.shape().len();
        if nd == 0 || x.shape()[nd - 1] != self.features {
            return Err(Error::shape(
                "layer_norm",
                format!("last axis of {:?} must be {}", x.shape(), self.features),
            ));
        }
        let axis = nd - 1;
        let xhat = standardize(x, &[axis], self.eps)?;
        self.affine(ctx, &xhat, &[self.features])
    }

    fn group_norm_forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>, groups: usize) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[1] != self.features {
            return Err(Error::shape("group_norm", format!("{shape:?} with {} channels", self.features)));
        }
        let n = shape[0];
        let rest = x.value().len() / n / groups;
        let grouped = x.reshape(&[n, groups, rest])?;
        let xhat = standardize(&grouped, &[2], self.eps)?.reshape(&shape)?;
        let cs = self.channel_shape(x.shape().len());
        self.affine(ctx, &xhat, &cs)
    }

    fn batch_norm_forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[1] != self.features {
            return Err(Error::shape("batch_norm", format!("{shape:?} with {} channels", self.features)));
        }
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let cs = self.channel_shape(x.shape().len());
        let (rm_id, rv_id) = (self.running_mean.unwrap(), self.running_var.unwrap());
        let xhat = if ctx.is_train() {
            let count = x.value().len() / self.features;
            let mean = x.mean_axes(&axes, true)?;
            let centered = x.sub(&mean)?;
            let var = centered.mul(&centered)?.mean_axes(&axes, true)?;
            let m = T::of(self.momentum);
            let unbias = if count > 1 { T::of(count as f64 / (count as f64 - 1.0)) } else { T::one() };
            let new_mean = ctx
                .buffer(rm_id)
                .zip_map(&mean.value().reshape(&[self.features])?, |r, b| (T::one() - m) * r + m * b);
            let new_var = ctx
                .buffer(rv_id)
                .zip_map(&var.value().reshape(&[self.features])?, |r, b| (T::one() - m) * r + m * b * unbias);
            ctx.set_buffer(rm_id, new_mean)?;
            ctx.set_buffer(rv_id, new_var)?;
            centered.div(&var.add_scalar(T::of(self.eps))?.sqrt()?)?
        } else {
            let eps = T::of(self.eps);
            let mean = ctx.buffer(rm_id).reshape(&cs)?;
            let inv_std = ctx.buffer(rv_id).map(|v| T::one() / (v + eps).sqrt()).reshape(&cs)?;
            let tape = ctx.tape().clone();
            x.sub(&tape.constant(mean))?.mul(&tape.constant(inv_std))?
        };
        self.affine(ctx, &xhat, &cs)
    }
}

/// `(x - mean) / sqrt(var + eps)` with statistics over `axes` (biased variance).
fn standardize<T: Element>(x: &Var<T>, axes: &[usize], eps: f64) -> Result<Var<T>> {
    let mean = x.mean_axes(axes, true)?;
    let centered = x.sub(&mean)?;
    let var = centered.mul(&centered)?.mean_axes(axes, true)?;
    centered.div(&var.add_scalar(T::of(eps))?.sqrt()?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::NdArray;

    fn random(shape: &[usize], seed: u64) -> NdArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NdArray::from_fn(shape, |_| rng.random_range(-2.0..3.0))
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let mut reg = ParamRegistry::new();
        let ln = NormLayer::layer_norm(&mut reg, "ln", 6);
        let mut store = ParamStore::<f64>::materialize(&reg, 0);
        let mut ctx = Ctx::new(Tape::new(), &mut store, Mode::Eval);
        let x = ctx.tape().constant(NdArray::full(&[2, 6], 3.5));
        let y = ln.forward(&mut ctx, &x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_last_axis() {
        let mut reg = ParamRegistry::new();
        let ln = NormLayer::layer_norm(&mut reg, "ln", 16);
        let mut store = ParamStore::<f64>::materialize(&reg, 0);
        let mut ctx = Ctx::new(Tape::new(), &mut store, Mode::Eval);
        let x = ctx.tape().constant(random(&[3, 4, 16], 9));
        let y = ln.forward(&mut ctx, &x).unwrap();
        for row in y.value().data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let mut reg = ParamRegistry::new();
        let bn = NormLayer::batch_norm(&mut reg, "bn", 3);
        let mut store = ParamStore::<f64>::materialize(&reg, 0);
        let x = random(&[4, 3, 2, 2], 1);
        {
            let mut ctx = Ctx::new(Tape::new(), &mut store, Mode::Eval);
            let xv = ctx.tape().constant(x.clone());
            bn.forward(&mut ctx, &xv).unwrap();
        }
        assert_eq!(store.get(bn.running_mean.unwrap()).data(), &[0.0; 3]);
        {
            let mut ctx = Ctx::new(Tape::new(), &mut store, Mode::Train);
            let xv = ctx.tape().constant(x.clone());
            let y = bn.forward(&mut ctx, &xv).unwrap();
            // per-channel outputs are standardized over (N, H, W)
            let per_channel = y.value().sum_axes(&[0, 2, 3], false).unwrap();
            assert!(per_channel.data().iter().all(|v| v.abs() < 1e-9));
        }
        let channel_mean = x.sum_axes(&[0, 2, 3], false).unwrap().map(|v| v / 16.0);
        let rm = store.get(bn.running_mean.unwrap());
        for c in 0..3 {
            assert!((rm.data()[c] - 0.1 * channel_mean.data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_is_a_fixed_affine_map() {
        let mut reg = ParamRegistry::new();
        let bn = NormLayer::batch_norm(&mut reg, "bn", 2);
        let mut store = ParamStore::<f64>::materialize(&reg, 0);
        store.set(bn.running_mean.unwrap(), NdArray::from_f64(&[2], &[0.5, -1.0]).unwrap()).unwrap();
        store.set(bn.running_var.unwrap(), NdArray::from_f64(&[2], &[4.0, 0.25]).unwrap()).unwrap();
        let mut ctx = Ctx::new(Tape::new(), &mut store, Mode::Eval);
        let a = random(&[1, 2, 3, 3], 4);
        let b = random(&[1, 2, 3, 3], 5);
        let run = |ctx: &mut Ctx<'_, f64>, v: &NdArray<f64>| {
            let xv = ctx.tape().constant(v.clone());
            bn.forward(ctx, &xv).unwrap().value().clone()
        };
        let (ya, yb) = (run(&mut ctx, &a), run(&mut ctx, &b));
        assert_eq!(run(&mut ctx, &a), ya);
        // affine: f(a) - f(b) scales (a - b) per channel
        for c in 0..2 {
            let scale = 1.0 / ([4.0f64, 0.25][c] + 1e-5).sqrt();
            for i in 0..9 {
                let d = ya.data()[c * 9 + i] - yb.data()[c * 9 + i];
                let dx = a.data()[c * 9 + i] - b.data()[c * 9 + i];
                assert!((d - scale * dx).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_falls_back_to_divisor_groups() {
        let mut reg = ParamRegistry::new();
        let gn = NormLayer::group_norm(&mut reg, "gn", 8, 32);
        assert_eq!(gn.kind, NormKind::GroupNorm { groups: 8 });
        let gn = NormLayer::group_norm(&mut reg, "gn2", 96, 32);
        assert_eq!(gn.kind, NormKind::GroupNorm { groups: 32 });
        let gn = NormLayer::group_norm(&mut reg, "gn3", 48, 32);
        assert_eq!(gn.kind, NormKind::GroupNorm { groups: 24 });
    }
}
