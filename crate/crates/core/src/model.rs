//! Model configurations, the named presets, and full-model assembly:
//! tokenizer -> graft -> positional embedding -> encoder -> LN -> mean -> head.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::audit::{CostEntry, CostReport};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graft::{Graft, GraftConfig, GraftMode};
use crate::nn::{Ctx, Linear, NormLayer, ParamId, ParamKind, ParamRegistry, ParamStore};
use crate::tensor::Element;
use crate::tokenizer::{BlockKind, BlockSpec, StagePlan, Tokenizer, TokenizerNorm};
use crate::transformer::{EncoderBlock, EncoderConfig, TRANSFORMER_INIT};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub block: BlockKind,
    pub width: usize,
    pub stages: [usize; 4],
    pub tokens: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub graft: GraftMode,
    pub resolution: usize,
    pub num_classes: usize,
    pub drop_path: f64,
    pub pos_embed: bool,
    pub norm: TokenizerNorm,
}

pub const TABLE1_PRESETS: [&str; 7] = [
    "Res34-ViT_S",
    "Res34-ViT_B",
    "Res50-ViT_S",
    "Res50-ViT_B",
    "Efficient-T",
    "Efficient-S",
    "Efficient-B",
];

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn row(
        name: &str,
        block: BlockKind,
        width: usize,
        stages: [usize; 4],
        tokens: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        ModelConfig {
            name: name.to_string(),
            block,
            width,
            stages,
            tokens,
            embed_dim,
            depth,
            heads,
            mlp_ratio,
            graft: GraftMode::Pattern,
            resolution: 224,
            num_classes: 1000,
            drop_path: 0.1,
            pos_embed: true,
            norm: TokenizerNorm::Batch,
        }
    }

    /// One of the seven reference variants, or `tiny` for desk-scale runs.
    pub fn preset(name: &str) -> Result<Self> {
        use BlockKind::{Basic, Bottle};
        let full = [3, 4, 6, 3];
        let light = [1, 1, 6, 3];
        Ok(match name {
            "Res34-ViT_S" => Self::row(name, Basic, 64, full, 128, 384, 12, 6, 4),
            "Res34-ViT_B" => Self::row(name, Basic, 64, full, 128, 768, 12, 12, 4),
            "Res50-ViT_S" => Self::row(name, Bottle, 64, full, 128, 384, 12, 6, 4),
            "Res50-ViT_B" => Self::row(name, Bottle, 64, full, 128, 768, 12, 12, 4),
            "Efficient-T" => Self::row(name, Bottle, 32, light, 64, 192, 6, 6, 2),
            "Efficient-S" => Self::row(name, Bottle, 64, light, 64, 384, 6, 6, 2),
            "Efficient-B" => Self::row(name, Bottle, 96, light, 64, 576, 6, 6, 2),
            "tiny" => {
                let mut c = Self::row(name, Bottle, 8, [1, 1, 1, 1], 8, 32, 2, 2, 2);
                c.resolution = 64;
                c.num_classes = 10;
                c
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {} or tiny",
                    TABLE1_PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn grid(&self) -> usize {
        self.resolution / 32
    }

    pub fn block_spec(&self) -> Result<BlockSpec> {
        BlockSpec::new(self.block, self.width)
    }

    pub fn graft_config(&self) -> Result<GraftConfig> {
        Ok(GraftConfig {
            mode: self.graft,
            tokens: self.tokens,
            embed_dim: self.embed_dim,
            in_channels: self.block_spec()?.out_channels(),
            in_hw: (self.grid(), self.grid()),
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            heads: self.heads,
            dim: self.embed_dim,
            mlp_ratio: self.mlp_ratio,
            drop_path: self.drop_path,
        }
    }

    /// Checks every cross-field invariant, naming the one that is violated.
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return Err(Error::config(format!(
                "resolution {} must be a positive multiple of 32",
                self.resolution
            )));
        }
        if self.num_classes == 0 || self.depth == 0 {
            return Err(Error::config("num_classes and depth must be positive"));
        }
        self.block_spec()?;
        self.graft_config()?.validate()?;
        self.encoder_config().validate()
    }

    /// Canonical `key = value` lines; the inverse of [`ModelConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let s = self.stages;
        let norm = match self.norm {
            TokenizerNorm::Batch => "batch".to_string(),
            TokenizerNorm::Group(g) => format!("group:{g}"),
        };
        [
            ("name", self.name.clone()),
            ("block", self.block.name().to_string()),
            ("width", self.width.to_string()),
            ("stages", format!("{},{},{},{}", s[0], s[1], s[2], s[3])),
            ("tokens", self.tokens.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("graft", self.graft.name().to_string()),
            ("resolution", self.resolution.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("drop_path", format!("{:?}", self.drop_path)),
            ("pos_embed", self.pos_embed.to_string()),
            ("norm", norm),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key = value` override. Returns `Ok(false)` for keys this
    /// config does not own so callers can route them elsewhere.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::config(format!("invalid {what} value {value:?}"));
        let num = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
        match key {
            "name" => self.name = value.to_string(),
            "block" => self.block = value.parse()?,
            "width" => self.width = num(key)?,
            "stages" => {
                let parts: Vec<usize> = value
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?;
                self.stages = parts.try_into().map_err(|_| bad(key))?;
            }
            "tokens" => self.tokens = num(key)?,
            "embed_dim" => self.embed_dim = num(key)?,
            "depth" => self.depth = num(key)?,
            "heads" => self.heads = num(key)?,
            "mlp_ratio" => self.mlp_ratio = num(key)?,
            "graft" => self.graft = value.parse()?,
            "resolution" => self.resolution = num(key)?,
            "num_classes" => self.num_classes = num(key)?,
            "drop_path" => self.drop_path = value.parse().map_err(|_| bad(key))?,
            "pos_embed" => self.pos_embed = value.parse().map_err(|_| bad(key))?,
            "norm" => {
                self.norm = match value.split_once(':') {
                    None if value == "batch" => TokenizerNorm::Batch,
                    None if value == "group" => TokenizerNorm::Group(32),
                    Some(("group", g)) => TokenizerNorm::Group(g.parse().map_err(|_| bad(key))?),
                    _ => return Err(bad(key)),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::preset("tiny")?;
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(Error::config(format!("unknown model key {k:?}")));
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical key=value text, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Debug)]
pub struct Patternformer {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub graft: Graft,
    pub pos_embed: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: NormLayer,
    pub head: Linear,
}

impl Patternformer {
    /// Registers every parameter under stable dotted paths without allocating values.
    pub fn describe(config: &ModelConfig) -> Result<(Self, ParamRegistry)> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let tokenizer = Tokenizer::build(
            &mut reg,
            "tokenizer",
            config.block_spec()?,
            StagePlan::new(config.stages),
            config.norm,
        )?;
        let graft = Graft::new(&mut reg, "graft", config.graft_config()?)?;
        let pos_embed = config.pos_embed.then(|| {
            reg.register(
                "pos_embed",
                &[config.tokens, config.embed_dim],
                ParamKind::PositionalEmbedding,
                TRANSFORMER_INIT,
            )
        });
        let enc = config.encoder_config();
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&mut reg, &format!("encoder.block{i}"), &enc, i))
            .collect::<Result<Vec<_>>>()?;
        let norm = NormLayer::layer_norm(&mut reg, "norm", config.embed_dim);
        let head = Linear::new(&mut reg, "head", config.embed_dim, config.num_classes, true, TRANSFORMER_INIT);
        let model = Patternformer {
            config: config.clone(),
            tokenizer,
            graft,
            pos_embed,
            blocks,
            norm,
            head,
        };
        Ok((model, reg))
    }

    /// Builds the model and materializes its parameters from `seed`.
    pub fn assemble<T: Element>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let (model, reg) = Self::describe(config)?;
        Ok((model, ParamStore::materialize(&reg, seed)))
    }

    /// Token sequence (N, T, D) entering the encoder, positional embedding included.
    pub fn embed<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let x1 = self.tokenizer.forward(ctx, x)?;
        let tokens = self.graft.forward(ctx, &x1)?;
        match self.pos_embed {
            Some(id) => tokens.add(&ctx.param(id)),
            None => Ok(tokens),
        }
    }

    /// Encoder, final norm, mean over tokens and head applied to a token sequence.
    pub fn classify_tokens<T: Element>(&self, ctx: &mut Ctx<'_, T>, tokens: &Var<T>) -> Result<Var<T>> {
        let mut h = tokens.clone();
        for b in &self.blocks {
            h = b.forward(ctx, &h)?;
        }
        let h = self.norm.forward(ctx, &h)?;
        let pooled = h.mean_axes(&[1], false)?;
        self.head.forward(ctx, &pooled)
    }

    /// (N, 3, H, W) -> logits (N, classes).
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let tokens = self.embed(ctx, x)?;
        self.classify_tokens(ctx, &tokens)
    }

    /// Graft conv output (N, C, H', W'): the pattern maps in pattern mode.
    pub fn pattern_maps<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let x1 = self.tokenizer.forward(ctx, x)?;
        self.graft.maps(ctx, &x1)
    }

    /// Per-sample parameter and MAC breakdown at the configured resolution.
    pub fn cost_report(&self) -> Result<CostReport> {
        let r = self.config.resolution;
        let mut entries = Vec::new();
        self.tokenizer.costs(r, r, &mut entries)?;
        self.graft.costs("graft", &mut entries);
        if self.pos_embed.is_some() {
            entries.push(CostEntry::new("pos_embed", self.config.tokens * self.config.embed_dim, 0));
        }
        for b in &self.blocks {
            b.costs(self.config.tokens, &mut entries);
        }
        entries.push(CostEntry::new("norm", self.norm.param_count(), 0));
        entries.push(CostEntry::new("head", self.head.param_count(), self.head.macs(1)));
        Ok(CostReport::new(entries))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use crate::tensor::NdArray;

    #[test]
    fn presets_match_table_rows() {
        let c = ModelConfig::preset("Res50-ViT_B").unwrap();
        assert_eq!(
            (c.block, c.width, c.stages, c.tokens, c.embed_dim, c.depth, c.heads, c.mlp_ratio),
            (BlockKind::Bottle, 64, [3, 4, 6, 3], 128, 768, 12, 12, 4)
        );
        for name in TABLE1_PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("Res101").is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig::preset("Efficient-B").unwrap();
        c.norm = TokenizerNorm::Group(16);
        c.drop_path = 0.25;
        let pairs = c.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        c.tokens += 1;
        assert_ne!(back.digest(), c.digest());
    }

    #[test]
    fn transpose_patch_token_mismatch_rejected() {
        let mut c = ModelConfig::preset("Res50-ViT_B").unwrap();
        c.graft = GraftMode::TransposePatch;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("tokens == H'*W'"), "{err}");
        c.tokens = 49;
        c.validate().unwrap();
    }

    #[test]
    fn same_seed_same_buffers() {
        let c = ModelConfig::preset("tiny").unwrap();
        let (_, a) = Patternformer::assemble::<f32>(&c, 11).unwrap();
        let (_, b) = Patternformer::assemble::<f32>(&c, 11).unwrap();
        for id in a.ids() {
            assert_eq!(a.get(id).data(), b.get(id).data());
        }
    }

    #[test]
    fn tiny_forward_and_identity_degeneracy() {
        let c = ModelConfig::preset("tiny").unwrap();
        let (model, mut store) = Patternformer::assemble::<f64>(&c, 3).unwrap();
        for b in &model.blocks {
            store.set(b.attn.proj.weight, NdArray::zeros(&[32, 32])).unwrap();
            store.set(b.fc2.weight, NdArray::zeros(&[32, 64])).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = NdArray::from_fn(&[2, 3, 64, 64], |_| rng.random_range(0.0..1.0));
        let mut ctx = Ctx::new(Tape::no_grad(), &mut store, Mode::Eval);
        let xv = ctx.tape().constant(x);
        let logits = model.forward(&mut ctx, &xv).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        let tokens = model.embed(&mut ctx, &xv).unwrap();
        let direct = model.norm.forward(&mut ctx, &tokens).unwrap().mean_axes(&[1], false).unwrap();
        let direct = model.head.forward(&mut ctx, &direct).unwrap();
        assert_eq!(logits.value(), direct.value());
    }

    #[test]
    fn cost_breakdown_matches_registry() {
        for name in TABLE1_PRESETS.iter().chain(&["tiny"]) {
            let (model, reg) = Patternformer::describe(&ModelConfig::preset(name).unwrap()).unwrap();
            let report = model.cost_report().unwrap();
            assert_eq!(report.params, reg.learnable_count(), "{name}");
            for e in &report.entries {
                assert_eq!(e.params, reg.learnable_count_under(&e.path), "{name} {}", e.path);
            }
        }
    }
}
