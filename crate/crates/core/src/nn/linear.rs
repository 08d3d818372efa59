use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::Element;

use super::{Ctx, Init, ParamId, ParamKind, ParamRegistry};

/// Affine map over the last axis; leading axes pass through.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        reg: &mut ParamRegistry,
        path: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = reg.register(
            format!("{path}.weight"),
            &[out_features, in_features],
            ParamKind::Weight,
            init,
        );
        let bias = bias.then(|| {
            reg.register(format!("{path}.bias"), &[out_features], ParamKind::Bias, Init::Zeros)
        });
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        x.linear(&w, b.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)
    }

    /// Multiply-accumulates when applied at `positions` leading positions.
    pub fn macs(&self, positions: usize) -> u64 {
        (self.in_features * self.out_features * positions) as u64
    }
}
