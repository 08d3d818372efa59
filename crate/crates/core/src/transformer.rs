//! Pre-norm Transformer encoder blocks over (N, T, D) token sequences.

use crate::audit::CostEntry;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, DropPath, Init, Linear, MultiHeadSelfAttention, NormLayer, ParamRegistry};
use crate::tensor::Element;

pub const TRANSFORMER_INIT: Init = Init::TruncNormal { std: 0.02 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub drop_path: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embedding dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(1..=4).contains(&self.mlp_ratio) {
            return Err(Error::config(format!("mlp ratio {} outside 1..=4", self.mlp_ratio)));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(format!("drop path {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub path: String,
    pub norm1: NormLayer,
    pub attn: MultiHeadSelfAttention,
    pub norm2: NormLayer,
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_attn: DropPath,
    pub drop_mlp: DropPath,
}

impl EncoderBlock {
    /// `index` keys this block's drop-path masks.
    pub fn new(reg: &mut ParamRegistry, path: &str, cfg: &EncoderConfig, index: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let norm1 = NormLayer::layer_norm(reg, &format!("{path}.norm1"), d);
        let attn = MultiHeadSelfAttention::new(reg, &format!("{path}.attn"), d, cfg.heads, TRANSFORMER_INIT)?;
        let norm2 = NormLayer::layer_norm(reg, &format!("{path}.norm2"), d);
        let fc1 = Linear::new(reg, &format!("{path}.mlp.fc1"), d, hidden, true, TRANSFORMER_INIT);
        let fc2 = Linear::new(reg, &format!("{path}.mlp.fc2"), hidden, d, true, TRANSFORMER_INIT);
        Ok(EncoderBlock {
            path: path.to_string(),
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            drop_attn: DropPath::new(cfg.drop_path, 2 * index as u64)?,
            drop_mlp: DropPath::new(cfg.drop_path, 2 * index as u64 + 1)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.norm1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, &h)?;
        let x = x.add(&self.drop_attn.forward(ctx, &h)?)?;
        let h = self.norm2.forward(ctx, &x)?;
        let h = self.fc1.forward(ctx, &h)?.gelu()?;
        let h = self.fc2.forward(ctx, &h)?;
        x.add(&self.drop_mlp.forward(ctx, &h)?)
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.attn.param_count()
            + self.norm2.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    pub fn costs(&self, tokens: usize, out: &mut Vec<CostEntry>) {
        let p = &self.path;
        let d = self.attn.dim;
        out.push(CostEntry::new(format!("{p}.norm1"), self.norm1.param_count(), 0));
        out.push(CostEntry::new(
            format!("{p}.attn.qkv"),
            self.attn.qkv.param_count(),
            self.attn.qkv.macs(tokens),
        ));
        out.push(CostEntry::new(
            format!("{p}.attn.scores"),
            0,
            2 * (tokens * tokens * d) as u64,
        ));
        out.push(CostEntry::new(
            format!("{p}.attn.proj"),
            self.attn.proj.param_count(),
            self.attn.proj.macs(tokens),
        ));
        out.push(CostEntry::new(format!("{p}.norm2"), self.norm2.param_count(), 0));
        out.push(CostEntry::new(format!("{p}.mlp.fc1"), self.fc1.param_count(), self.fc1.macs(tokens)));
        out.push(CostEntry::new(format!("{p}.mlp.fc2"), self.fc2.param_count(), self.fc2.macs(tokens)));
    }
}
