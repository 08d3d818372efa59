//! Parameterized layers on top of the autodiff tape.
//!
//! Architectures are described in two phases: layers register [`ParamSpec`]s in a
//! [`ParamRegistry`] (shapes only, no allocation), and a [`ParamStore`] is later
//! materialized from the registry with a seed. Cost auditing works from the
//! registry alone; forward passes read the store through a [`Ctx`].

mod attention;
mod conv;
mod functional;
mod linear;
mod norm;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, NdArray};

pub use attention::{attention_weights, MultiHeadSelfAttention};
pub use conv::{conv2d, conv_out_size, max_pool2d, Conv2d};
pub use functional::{drop_path, global_avg_pool, DropPath};
pub(crate) use functional::splitmix64;
pub use linear::Linear;
pub use norm::{NormKind, NormLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    PositionalEmbedding,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        self != ParamKind::Buffer
    }

    /// Norm affine parameters and positional embeddings are exempt from weight decay.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Kaiming normal with fan-out mode and ReLU gain: `std = sqrt(2 / fan_out)`.
    KaimingFanOut { fan_out: usize },
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
    ) -> ParamId {
        let path = path.into();
        debug_assert!(
            self.specs.iter().all(|s| s.path != path),
            "duplicate parameter path {path}"
        );
        self.specs.push(ParamSpec {
            path,
            shape: shape.to_vec(),
            kind,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn learnable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.learnable())
            .map(ParamSpec::numel)
            .sum()
    }

    /// Learnable element count of every parameter whose path starts with `prefix`.
    pub fn learnable_count_under(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.learnable() && under(&s.path, prefix))
            .map(ParamSpec::numel)
            .sum()
    }
}

/// True when `path` equals `prefix` or lies beneath it in the dotted hierarchy.
pub fn under(path: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || path == prefix
        || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'.'))
}

fn sample_init<T: Element>(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray<T> {
    match init {
        Init::Zeros => NdArray::zeros(shape),
        Init::Ones => NdArray::ones(shape),
        Init::KaimingFanOut { fan_out } => {
            let std = (2.0 / fan_out as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            NdArray::from_fn(shape, |_| T::of(normal.sample(rng)))
        }
        Init::TruncNormal { std } => {
            let normal = Normal::new(0.0, std).expect("positive std");
            NdArray::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::of(v);
                }
            })
        }
    }
}

/// Materialized parameter and buffer values, indexed like their registry.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Arc<NdArray<T>>>,
}

impl<T: Element> ParamStore<T> {
    /// Draws every value in registration order from one seeded stream.
    pub fn materialize(registry: &ParamRegistry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = registry
            .specs
            .iter()
            .map(|s| Arc::new(sample_init(s.init, &s.shape, &mut rng)))
            .collect();
        ParamStore {
            specs: registry.specs.clone(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.path == path).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &NdArray<T> {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<NdArray<T>> {
        Arc::clone(&self.values[id.0])
    }

    /// Mutable access; copies the buffer first if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: NdArray<T>) -> Result<()> {
        if value.shape() != self.specs[id.0].shape.as_slice() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "{} expects {:?}, got {:?}",
                    self.specs[id.0].path,
                    self.specs[id.0].shape,
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn learnable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.learnable())
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}

/// Per-forward-pass state: the tape, the parameter store, the mode, and the
/// keys that make stochastic layers reproducible.
pub struct Ctx<'a, T: Element> {
    tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    cache: Vec<Option<Var<T>>>,
    mode: Mode,
    /// Seed for per-sample drop-path masks of this forward pass.
    pub drop_seed: u64,
    /// Index of this batch's first sample within its logical batch, so that
    /// micro-batches draw the same masks as the undivided batch.
    pub sample_offset: usize,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Ctx {
            tape,
            store,
            cache: (0..n).map(|_| None).collect(),
            mode,
            drop_seed: 0,
            sample_offset: 0,
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var<T> {
        if let Some(v) = &self.cache[id.0] {
            return v.clone();
        }
        let learnable = self.store.spec(id).kind.learnable();
        let v = self.tape.leaf_shared(self.store.shared(id), learnable);
        self.cache[id.0] = Some(v.clone());
        v
    }

    /// Substitutes a caller-owned variable for a parameter (used by gradient checks).
    pub fn override_param(&mut self, id: ParamId, var: Var<T>) {
        self.cache[id.0] = Some(var);
    }

    pub fn buffer(&self, id: ParamId) -> &NdArray<T> {
        self.store.get(id)
    }

    pub fn set_buffer(&mut self, id: ParamId, value: NdArray<T>) -> Result<()> {
        self.store.set(id, value)
    }

    /// Gradients of every parameter touched by this pass (after `backward`).
    pub fn param_grads(&self) -> Vec<(ParamId, NdArray<T>)> {
        self.cache
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = v.as_ref()?.grad()?;
                Some((ParamId(i), g))
            })
            .collect()
    }
}
