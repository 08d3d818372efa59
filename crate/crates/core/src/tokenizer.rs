//! ResNet trunk used as the heavy tokenizer: images in, activation map x1 out.

use crate::audit::CostEntry;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{max_pool2d, Conv2d, Ctx, NormLayer, ParamRegistry};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Basic,
    Bottle,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottle => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottle => "bottle",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottle" => Ok(BlockKind::Bottle),
            other => Err(Error::config(format!("unknown block kind {other:?}"))),
        }
    }
}

pub const MIN_WIDTH: usize = 8;
pub const MAX_WIDTH: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub width: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, width: usize) -> Result<Self> {
        if kind == BlockKind::Basic && width != 64 {
            return Err(Error::config(format!(
                "basic blocks use a fixed width of 64, got {width}"
            )));
        }
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&width) {
            return Err(Error::config(format!(
                "width {width} outside {MIN_WIDTH}..={MAX_WIDTH}"
            )));
        }
        Ok(BlockSpec { kind, width })
    }

    pub fn expansion(&self) -> usize {
        self.kind.expansion()
    }

    /// Channels of x1: the last stage's width times the expansion.
    pub fn out_channels(&self) -> usize {
        8 * self.width * self.expansion()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub counts: [usize; 4],
}

impl StagePlan {
    pub const STRIDES: [usize; 4] = [1, 2, 2, 2];

    pub fn new(counts: [usize; 4]) -> Self {
        StagePlan { counts }
    }

    pub fn widths(&self, width: usize) -> [usize; 4] {
        [width, 2 * width, 4 * width, 8 * width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TokenizerNorm {
    #[default]
    Batch,
    /// Group norm with this many groups (reduced to a divisor for narrow layers).
    Group(usize),
}

impl TokenizerNorm {
    fn build(self, reg: &mut ParamRegistry, path: &str, channels: usize) -> NormLayer {
        match self {
            TokenizerNorm::Batch => NormLayer::batch_norm(reg, path, channels),
            TokenizerNorm::Group(g) => NormLayer::group_norm(reg, path, channels, g),
        }
    }
}

/// Convolution followed by normalization; the unit every block is built from.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub path: String,
    pub norm_path: String,
    pub conv: Conv2d,
    pub norm: NormLayer,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new(
        reg: &mut ParamRegistry,
        path: String,
        norm_path: String,
        norm: TokenizerNorm,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2d::new(reg, &path, cin, cout, k, stride, k / 2, false);
        let norm = norm.build(reg, &norm_path, cout);
        ConvNorm {
            path,
            norm_path,
            conv,
            norm,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, &y)
    }

    fn costs(&self, h: usize, w: usize, out: &mut Vec<CostEntry>) -> Result<(usize, usize)> {
        let (ho, wo) = self.conv.out_hw(h, w)?;
        out.push(CostEntry::new(&self.path, self.conv.param_count(), self.conv.macs(ho, wo)));
        out.push(CostEntry::new(&self.norm_path, self.norm.param_count(), 0));
        Ok((ho, wo))
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Residual branch; the last unit is not followed by a relu.
    pub branch: Vec<ConvNorm>,
    pub shortcut: Option<ConvNorm>,
}

impl ResBlock {
    /// `planes` is the stage width; output channels are `planes * expansion`.
    pub fn new(
        reg: &mut ParamRegistry,
        path: &str,
        kind: BlockKind,
        in_ch: usize,
        planes: usize,
        stride: usize,
        norm: TokenizerNorm,
    ) -> Self {
        let out_ch = planes * kind.expansion();
        let mut unit = |name: &str, cin, cout, k, s| {
            let i = name.trim_start_matches("conv");
            ConvNorm::new(
                reg,
                format!("{path}.{name}"),
                format!("{path}.norm{i}"),
                norm,
                cin,
                cout,
                k,
                s,
            )
        };
        let branch = match kind {
            BlockKind::Basic => vec![
                unit("conv1", in_ch, planes, 3, stride),
                unit("conv2", planes, planes, 3, 1),
            ],
            BlockKind::Bottle => vec![
                unit("conv1", in_ch, planes, 1, 1),
                unit("conv2", planes, planes, 3, stride),
                unit("conv3", planes, out_ch, 1, 1),
            ],
        };
        let shortcut = projection(reg, &format!("{path}.shortcut"), in_ch, out_ch, stride, norm);
        ResBlock {
            kind,
            in_ch,
            out_ch,
            stride,
            branch,
            shortcut,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 4 || x.shape()[1] != self.in_ch {
            return Err(Error::shape(
                "res_block",
                format!("expects {} input channels, got {:?}", self.in_ch, x.shape()),
            ));
        }
        let mut y = x.clone();
        for (i, unit) in self.branch.iter().enumerate() {
            y = unit.forward(ctx, &y)?;
            if i + 1 < self.branch.len() {
                y = y.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        y.add(&skip)?.relu()
    }

    pub fn param_count(&self) -> usize {
        self.branch
            .iter()
            .chain(&self.shortcut)
            .map(|u| u.conv.param_count() + u.norm.param_count())
            .sum()
    }

    fn costs(&self, h: usize, w: usize, out: &mut Vec<CostEntry>) -> Result<(usize, usize)> {
        let mut hw = (h, w);
        for unit in &self.branch {
            hw = unit.costs(hw.0, hw.1, out)?;
        }
        if let Some(s) = &self.shortcut {
            s.costs(h, w, out)?;
        }
        Ok(hw)
    }
}

/// 1x1 projection with norm, or `None` when the identity already fits.
fn projection(
    reg: &mut ParamRegistry,
    path: &str,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    norm: TokenizerNorm,
) -> Option<ConvNorm> {
    (in_ch != out_ch || stride != 1).then(|| {
        ConvNorm::new(
            reg,
            format!("{path}.conv"),
            format!("{path}.norm"),
            norm,
            in_ch,
            out_ch,
            1,
            stride,
        )
    })
}

#[derive(Clone, Debug)]
pub enum Stage {
    Blocks(Vec<ResBlock>),
    /// A stage with zero blocks keeps its projection (followed by relu) so that
    /// downstream shapes do not depend on the block count.
    Projection(Option<ConvNorm>),
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub spec: BlockSpec,
    pub plan: StagePlan,
    pub stem: ConvNorm,
    pub stages: Vec<Stage>,
}

impl Tokenizer {
    pub fn build(
        reg: &mut ParamRegistry,
        path: &str,
        spec: BlockSpec,
        plan: StagePlan,
        norm: TokenizerNorm,
    ) -> Result<Self> {
        let spec = BlockSpec::new(spec.kind, spec.width)?;
        let w = spec.width;
        let stem = ConvNorm::new(
            reg,
            format!("{path}.stem.conv"),
            format!("{path}.stem.norm"),
            norm,
            3,
            w,
            7,
            2,
        );
        let mut in_ch = w;
        let mut stages = Vec::with_capacity(4);
        for (s, (&count, (&planes, &stride))) in plan
            .counts
            .iter()
            .zip(plan.widths(w).iter().zip(&StagePlan::STRIDES))
            .enumerate()
        {
            let stage_path = format!("{path}.stage{}", s + 1);
            let out_ch = planes * spec.expansion();
            if count == 0 {
                stages.push(Stage::Projection(projection(
                    reg,
                    &format!("{stage_path}.proj"),
                    in_ch,
                    out_ch,
                    stride,
                    norm,
                )));
            } else {
                let blocks = (0..count)
                    .map(|b| {
                        let (cin, st) = if b == 0 { (in_ch, stride) } else { (out_ch, 1) };
                        ResBlock::new(
                            reg,
                            &format!("{stage_path}.block{b}"),
                            spec.kind,
                            cin,
                            planes,
                            st,
                            norm,
                        )
                    })
                    .collect();
                stages.push(Stage::Blocks(blocks));
            }
            in_ch = out_ch;
        }
        Ok(Tokenizer {
            spec,
            plan,
            stem,
            stages,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(Error::shape(
                "tokenizer",
                format!("input spatial size {h}x{w} is not divisible by 32"),
            ));
        }
        Ok(())
    }

    /// (N, 3, H, W) -> (N, C1, H/32, W/32).
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("tokenizer", format!("expects (N, 3, H, W), got {s:?}")));
        }
        Self::check_input(s[2], s[3])?;
        let y = self.stem.forward(ctx, x)?.relu()?;
        let mut y = max_pool2d(&y, 3, 2, 1)?;
        for stage in &self.stages {
            y = match stage {
                Stage::Blocks(blocks) => {
                    for b in blocks {
                        y = b.forward(ctx, &y)?;
                    }
                    y
                }
                Stage::Projection(Some(p)) => p.forward(ctx, &y)?.relu()?,
                Stage::Projection(None) => y,
            };
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        let stem = self.stem.conv.param_count() + self.stem.norm.param_count();
        stem + self
            .stages
            .iter()
            .map(|s| match s {
                Stage::Blocks(b) => b.iter().map(ResBlock::param_count).sum::<usize>(),
                Stage::Projection(p) => p
                    .iter()
                    .map(|u| u.conv.param_count() + u.norm.param_count())
                    .sum(),
            })
            .sum::<usize>()
    }

    /// Per-layer cost breakdown at input size `h` x `w`; returns the x1 spatial size.
    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<CostEntry>) -> Result<(usize, usize)> {
        Self::check_input(h, w)?;
        let (sh, sw) = self.stem.costs(h, w, out)?;
        let pool = |n: usize| crate::nn::conv_out_size(n, 3, 2, 1);
        let mut hw = (pool(sh)?, pool(sw)?);
        for stage in &self.stages {
            match stage {
                Stage::Blocks(blocks) => {
                    for b in blocks {
                        hw = b.costs(hw.0, hw.1, out)?;
                    }
                }
                Stage::Projection(Some(p)) => hw = p.costs(hw.0, hw.1, out)?,
                Stage::Projection(None) => {}
            }
        }
        Ok(hw)
    }
}
