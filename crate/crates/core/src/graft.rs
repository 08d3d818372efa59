//! Conversions from the tokenizer's activation map x1 (N, C1, H', W') to a
//! token sequence (N, T, C2).

use std::fmt;
use std::str::FromStr;

use crate::audit::CostEntry;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, Linear, ParamRegistry};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraftMode {
    /// `Transpose(Flatten(Conv(x1)))`: one token per spatial cell.
    TransposePatch,
    /// `Linear(Flatten(Conv(x1)))`: one token per conv output channel.
    Pattern,
    /// `Transpose(Linear(Flatten(Conv(x1))))`: spatial tokens remapped to a free count.
    FlexiblePatch,
}

impl GraftMode {
    pub fn name(self) -> &'static str {
        match self {
            GraftMode::TransposePatch => "transpose-patch",
            GraftMode::Pattern => "pattern",
            GraftMode::FlexiblePatch => "flexible-patch",
        }
    }
}

impl fmt::Display for GraftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transpose-patch" | "patch" => Ok(GraftMode::TransposePatch),
            "pattern" => Ok(GraftMode::Pattern),
            "flexible-patch" | "flexible" => Ok(GraftMode::FlexiblePatch),
            other => Err(Error::config(format!("unknown graft mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraftConfig {
    pub mode: GraftMode,
    pub tokens: usize,
    pub embed_dim: usize,
    pub in_channels: usize,
    pub in_hw: (usize, usize),
}

impl GraftConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.in_hw.0 * self.in_hw.1;
        if self.tokens == 0 || self.embed_dim == 0 || self.in_channels == 0 || cells == 0 {
            return Err(Error::config(format!("graft sizes must be positive: {self:?}")));
        }
        if self.mode == GraftMode::TransposePatch && self.tokens != cells {
            return Err(Error::config(format!(
                "transpose-patch graft needs tokens == H'*W' = {cells}, got {}",
                self.tokens
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Graft {
    pub config: GraftConfig,
    pub conv: Conv2d,
    pub linear: Option<Linear>,
}

impl Graft {
    /// Registers `<path>.conv` (1x1 with bias) and, outside transpose-patch mode,
    /// `<path>.linear` over the flattened spatial axis.
    pub fn new(reg: &mut ParamRegistry, path: &str, config: GraftConfig) -> Result<Self> {
        config.validate()?;
        let cells = config.in_hw.0 * config.in_hw.1;
        let conv_out = match config.mode {
            GraftMode::Pattern => config.tokens,
            GraftMode::TransposePatch | GraftMode::FlexiblePatch => config.embed_dim,
        };
        let conv = Conv2d::new(reg, &format!("{path}.conv"), config.in_channels, conv_out, 1, 1, 0, true);
        let linear_out = match config.mode {
            GraftMode::Pattern => Some(config.embed_dim),
            GraftMode::FlexiblePatch => Some(config.tokens),
            GraftMode::TransposePatch => None,
        };
        let linear = linear_out.map(|out| {
            Linear::new(
                reg,
                &format!("{path}.linear"),
                cells,
                out,
                true,
                Init::KaimingFanOut { fan_out: out },
            )
        });
        Ok(Graft { config, conv, linear })
    }

    fn check<T: Element>(&self, x1: &Var<T>) -> Result<()> {
        let s = x1.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "graft",
                format!("expects (N, {}, H', W'), got {s:?}", self.config.in_channels),
            ));
        }
        if (s[2], s[3]) != self.config.in_hw {
            return Err(Error::shape(
                "graft",
                format!(
                    "built for a {}x{} map, applied to {}x{}; the graft is bound to its resolution",
                    self.config.in_hw.0, self.config.in_hw.1, s[2], s[3]
                ),
            ));
        }
        Ok(())
    }

    /// The conv output (N, C, H', W'): pattern maps in pattern mode.
    pub fn maps<T: Element>(&self, ctx: &mut Ctx<'_, T>, x1: &Var<T>) -> Result<Var<T>> {
        self.check(x1)?;
        self.conv.forward(ctx, x1)
    }

    /// (N, C1, H', W') -> (N, T, C2).
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x1: &Var<T>) -> Result<Var<T>> {
        let maps = self.maps(ctx, x1)?;
        let (n, c) = (maps.shape()[0], maps.shape()[1]);
        let (h, w) = self.config.in_hw;
        let flat = maps.reshape(&[n, c, h * w])?;
        match (self.config.mode, &self.linear) {
            (GraftMode::TransposePatch, _) => flat.transpose(1, 2),
            (GraftMode::Pattern, Some(linear)) => linear.forward(ctx, &flat),
            (GraftMode::FlexiblePatch, Some(linear)) => linear.forward(ctx, &flat)?.transpose(1, 2),
            (mode, None) => Err(Error::config(format!("{mode} graft is missing its linear layer"))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.linear.as_ref().map_or(0, Linear::param_count)
    }

    pub fn costs(&self, path: &str, out: &mut Vec<CostEntry>) {
        let (h, w) = self.config.in_hw;
        out.push(CostEntry::new(
            format!("{path}.conv"),
            self.conv.param_count(),
            self.conv.macs(h, w),
        ));
        if let Some(linear) = &self.linear {
            out.push(CostEntry::new(
                format!("{path}.linear"),
                linear.param_count(),
                linear.macs(self.conv.out_ch),
            ));
        }
    }
}
