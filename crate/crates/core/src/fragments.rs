//! Named model fragments for finite-difference gradient checks in f64.
//!
//! Every fragment differentiates a fixed random projection of its output with
//! respect to its input and all of its learnable parameters.

use std::cell::RefCell;

use crate::augment::one_hot;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, projection, project, GradCheckOptions, GradCheckReport};
use crate::graft::{Graft, GraftConfig, GraftMode};
use crate::model::{ModelConfig, Patternformer};
use crate::nn::{max_pool2d, Conv2d, Ctx, Init, Linear, Mode, MultiHeadSelfAttention, NormLayer, ParamRegistry, ParamStore};
use crate::tensor::NdArray;
use crate::tokenizer::{BlockKind, ResBlock, TokenizerNorm};
use crate::training::smoothed_ce;
use crate::transformer::{EncoderBlock, EncoderConfig};

pub const FRAGMENTS: [&str; 21] = [
    "linear",
    "conv3x3",
    "conv-stride2",
    "conv1x1",
    "maxpool",
    "relu",
    "gelu",
    "softmax",
    "batch-norm",
    "group-norm",
    "layer-norm",
    "msa",
    "basic-block",
    "bottle-block",
    "encoder-block",
    "encoder-stack",
    "graft-transpose-patch",
    "graft-pattern",
    "graft-flexible-patch",
    "smoothed-ce",
    "tiny-model",
];

/// 1e-5 for the end-to-end model, 1e-6 for everything else.
pub fn default_tolerance(name: &str) -> f64 {
    if name == "tiny-model" {
        1e-5
    } else {
        1e-6
    }
}

fn input(shape: &[usize], seed: u64) -> NdArray<f64> {
    projection(shape, seed ^ 0xA11CE)
}

/// Checks `forward(module, x)` for input `x` of `shape` plus every learnable
/// parameter registered in `reg`.
fn check_module<M>(
    reg: ParamRegistry,
    module: M,
    shape: &[usize],
    mode: Mode,
    forward: impl Fn(&M, &mut Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let store = ParamStore::<f64>::materialize(&reg, opts.seed ^ 0xBEEF);
    let learnable: Vec<_> = store.ids().filter(|&id| store.spec(id).kind.learnable()).collect();
    let mut inputs = vec![("input".to_string(), input(shape, opts.seed))];
    inputs.extend(learnable.iter().map(|&id| (store.spec(id).path.clone(), store.get(id).clone())));
    let store = RefCell::new(store);
    check_gradients(
        |tape: &Tape<f64>, vars: &[Var<f64>]| {
            let mut store = store.borrow_mut();
            let mut ctx = Ctx::new(tape.clone(), &mut store, mode);
            ctx.drop_seed = opts.seed;
            for (&id, v) in learnable.iter().zip(&vars[1..]) {
                ctx.override_param(id, v.clone());
            }
            let out = forward(&module, &mut ctx, &vars[0])?;
            project(&out, opts.seed)
        },
        &inputs,
        opts,
    )
}

fn check_fn(
    shape: &[usize],
    f: impl Fn(&Var<f64>) -> Result<Var<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let inputs = vec![("input".to_string(), input(shape, opts.seed))];
    check_gradients(|_: &Tape<f64>, v: &[Var<f64>]| project(&f(&v[0])?, opts.seed), &inputs, opts)
}

fn graft(mode: GraftMode, tokens: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut reg = ParamRegistry::new();
    let cfg = GraftConfig {
        mode,
        tokens,
        embed_dim: 12,
        in_channels: 16,
        in_hw: (3, 3),
    };
    let g = Graft::new(&mut reg, "graft", cfg)?;
    check_module(reg, g, &[2, 16, 3, 3], Mode::Train, |g, c, x| g.forward(c, x), opts)
}

/// Runs the named fragment check.
pub fn check_fragment(name: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut reg = ParamRegistry::new();
    let train = Mode::Train;
    match name {
        "linear" => {
            let l = Linear::new(&mut reg, "fc", 6, 5, true, Init::TruncNormal { std: 0.5 });
            check_module(reg, l, &[3, 4, 6], train, |l, c, x| l.forward(c, x), opts)
        }
        "conv3x3" | "conv-stride2" | "conv1x1" => {
            let (k, s, p) = match name {
                "conv3x3" => (3, 1, 1),
                "conv-stride2" => (3, 2, 1),
                _ => (1, 1, 0),
            };
            let conv = Conv2d::new(&mut reg, "conv", 3, 4, k, s, p, true);
            check_module(reg, conv, &[2, 3, 5, 5], train, |m, c, x| m.forward(c, x), opts)
        }
        "maxpool" => check_fn(&[2, 3, 6, 6], |x| max_pool2d(x, 3, 2, 1), opts),
        "relu" => check_fn(&[4, 7], |x| x.relu(), opts),
        "gelu" => check_fn(&[4, 7], |x| x.gelu(), opts),
        "softmax" => check_fn(&[3, 6], |x| x.softmax(1), opts),
        "batch-norm" => {
            let n = NormLayer::batch_norm(&mut reg, "bn", 4);
            check_module(reg, n, &[3, 4, 3, 3], train, |m, c, x| m.forward(c, x), opts)
        }
        "group-norm" => {
            let n = NormLayer::group_norm(&mut reg, "gn", 6, 3);
            check_module(reg, n, &[2, 6, 3, 3], train, |m, c, x| m.forward(c, x), opts)
        }
        "layer-norm" => {
            let n = NormLayer::layer_norm(&mut reg, "ln", 8);
            check_module(reg, n, &[2, 3, 8], train, |m, c, x| m.forward(c, x), opts)
        }
        "msa" => {
            let a = MultiHeadSelfAttention::new(&mut reg, "attn", 8, 2, Init::TruncNormal { std: 0.3 })?;
            check_module(reg, a, &[2, 5, 8], train, |m, c, x| m.forward(c, x), opts)
        }
        "basic-block" => {
            let b = ResBlock::new(&mut reg, "block", BlockKind::Basic, 4, 4, 1, TokenizerNorm::Batch);
            check_module(reg, b, &[2, 4, 5, 5], train, |m, c, x| m.forward(c, x), opts)
        }
        "bottle-block" => {
            let b = ResBlock::new(&mut reg, "block", BlockKind::Bottle, 6, 2, 2, TokenizerNorm::Batch);
            check_module(reg, b, &[2, 6, 6, 6], train, |m, c, x| m.forward(c, x), opts)
        }
        "encoder-block" | "encoder-stack" => {
            let depth = if name == "encoder-block" { 1 } else { 2 };
            let cfg = EncoderConfig {
                depth,
                heads: 2,
                dim: 8,
                mlp_ratio: 2,
                drop_path: 0.1,
            };
            let blocks = (0..depth)
                .map(|i| EncoderBlock::new(&mut reg, &format!("block{i}"), &cfg, i))
                .collect::<Result<Vec<_>>>()?;
            check_module(reg, blocks, &[3, 5, 8], train, |bs, c, x| {
                bs.iter().try_fold(x.clone(), |h, b| b.forward(c, &h))
            }, opts)
        }
        "graft-transpose-patch" => graft(GraftMode::TransposePatch, 9, opts),
        "graft-pattern" => graft(GraftMode::Pattern, 8, opts),
        "graft-flexible-patch" => graft(GraftMode::FlexiblePatch, 8, opts),
        "smoothed-ce" => {
            let soft = one_hot::<f64>(&[0, 3, 4, 1], 5).map(|v| 0.8 * v + 0.04);
            let inputs = vec![("logits".to_string(), input(&[4, 5], opts.seed))];
            check_gradients(|_: &Tape<f64>, v: &[Var<f64>]| smoothed_ce(&v[0], &soft, 0.1), &inputs, opts)
        }
        "tiny-model" => {
            let cfg = ModelConfig::preset("tiny")?;
            let (model, reg) = Patternformer::describe(&cfg)?;
            let r = cfg.resolution;
            check_module(reg, model, &[2, 3, r, r], train, |m, c, x| m.forward(c, x), opts)
        }
        other => Err(Error::config(format!(
            "unknown fragment {other:?}; expected one of {}",
            FRAGMENTS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fragment_lists_names() {
        let err = check_fragment("nope", &GradCheckOptions::default()).unwrap_err().to_string();
        assert!(err.contains("tiny-model"));
    }

    #[test]
    fn linear_fragment_passes() {
        let report = check_fragment("linear", &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.inputs.len(), 3);
    }
}
