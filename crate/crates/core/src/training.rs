//! Training: AdamW, the warmup-cosine schedule, layer-wise lr decay,
//! label-smoothed cross-entropy and the gradient-accumulating loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{mix_batch, one_hot, MixedBatch, RandAugment};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{normalize, resize, Dataset};
use crate::error::{Error, Result};
use crate::model::Patternformer;
use crate::nn::{splitmix64, Ctx, Mode, ParamId, ParamSpec, ParamStore};
use crate::tensor::{Element, NdArray};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub mix_switch_prob: f64,
    pub drop_path: f64,
    pub randaugment: bool,
    pub ra_magnitude: f64,
    pub ra_prob: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
    /// Stop once eval-mode accuracy on the training set reaches this value.
    pub target_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            batch_size: 32,
            accumulation_steps: 1,
            epochs: 5,
            warmup_epochs: 5,
            weight_decay: 0.3,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            layer_decay: 0.65,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            mix_switch_prob: 0.5,
            drop_path: 0.1,
            randaugment: true,
            ra_magnitude: 9.0,
            ra_prob: 0.5,
            seed: 0,
            eval_batch_size: 64,
            target_train_acc: None,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// ImageNet defaults: base lr 1e-4 and 20 warmup epochs.
    pub fn imagenet() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            warmup_epochs: 20,
            ..Default::default()
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation_steps == 0 || !self.batch_size.is_multiple_of(self.accumulation_steps) {
            return Err(Error::config(format!(
                "accumulation_steps ({}) must divide batch_size ({})",
                self.accumulation_steps, self.batch_size
            )));
        }
        if self.epochs == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("epochs and eval_batch_size must be positive"));
        }
        let probs = [self.label_smoothing, self.mix_switch_prob, self.ra_prob, self.betas.0, self.betas.1];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("smoothing, probabilities and betas must lie in [0, 1]"));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || !(self.layer_decay > 0.0) {
            return Err(Error::config("base_lr and layer_decay must be positive, weight_decay non-negative"));
        }
        if self.mixup_alpha < 0.0 || self.cutmix_alpha < 0.0 {
            return Err(Error::config("mixing alphas must be non-negative"));
        }
        Ok(())
    }

    /// Sets one field from a `key = value` pair; `Ok(false)` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "base_lr" => self.base_lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "accumulation_steps" => self.accumulation_steps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.betas.0 = parse(key, value)?,
            "beta2" => self.betas.1 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "layer_decay" => self.layer_decay = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "mixup_alpha" => self.mixup_alpha = parse(key, value)?,
            "cutmix_alpha" => self.cutmix_alpha = parse(key, value)?,
            "mix_switch_prob" => self.mix_switch_prob = parse(key, value)?,
            "drop_path" => self.drop_path = parse(key, value)?,
            "randaugment" => self.randaugment = parse(key, value)?,
            "ra_magnitude" => self.ra_magnitude = parse(key, value)?,
            "ra_prob" => self.ra_prob = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "target_train_acc" => {
                self.target_train_acc = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn augment(&self) -> Option<RandAugment> {
        self.randaugment.then_some(RandAugment {
            ops: 2,
            magnitude: self.ra_magnitude,
            prob: self.ra_prob,
        })
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then a half cosine
/// reaching 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if total == 0 || warmup > total {
            return Err(Error::config(format!("schedule needs 0 <= warmup ({warmup}) <= total ({total}), total > 0")));
        }
        Ok(LrSchedule { peak, warmup, total })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if self.warmup == self.total {
            return self.peak;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay and per-parameter lr multipliers.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Option<NdArray<T>>>,
    v: Vec<Option<NdArray<T>>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: usize, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// One update of every learnable parameter; missing gradients count as zero.
    /// A non-finite gradient aborts before anything is modified.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, NdArray<T>)],
        lr: f64,
        lr_scale: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        let mut by_id: Vec<Option<&NdArray<T>>> = vec![None; store.len()];
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at optimizer step {}",
                    store.spec(*id).path,
                    self.step + 1
                )));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adamw", format!("gradient shape for {}", store.spec(*id).path)));
            }
            by_id[id.0] = Some(g);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let spec = store.spec(id);
            if !spec.kind.learnable() {
                continue;
            }
            let lr_i = lr * lr_scale(id);
            let decay = if spec.kind.decayed() { 1.0 - lr_i * self.weight_decay } else { 1.0 };
            let shape = spec.shape.clone();
            let m = self.m[id.0].get_or_insert_with(|| NdArray::zeros(&shape));
            let v = self.v[id.0].get_or_insert_with(|| NdArray::zeros(&shape));
            let p = store.get_mut(id);
            for (k, pk) in p.data_mut().iter_mut().enumerate() {
                let g = by_id[id.0].map_or(0.0, |g| g.data()[k].as_f64());
                let mk = b1 * m.data()[k].as_f64() + (1.0 - b1) * g;
                let vk = b2 * v.data()[k].as_f64() + (1.0 - b2) * g * g;
                m.data_mut()[k] = T::of(mk);
                v.data_mut()[k] = T::of(vk);
                let upd = (mk / c1) / ((vk / c2).sqrt() + self.eps);
                *pk = T::of(pk.as_f64() * decay - lr_i * upd);
            }
        }
        Ok(())
    }
}

pub const LAYER_GROUPS: usize = 6;

/// `decay^(groups - 1 - g)` for each group `g`; the last group gets 1.
pub fn decay_multipliers(groups: usize, decay: f64) -> Vec<f64> {
    (0..groups).map(|g| decay.powi((groups - 1 - g) as i32)).collect()
}

/// Depth group of a parameter path: stem and stage 1, stages 2 to 4, then the
/// graft with the positional embedding and the first half of the encoder, and
/// finally the second half of the encoder with the final norm and head.
pub fn layer_group(path: &str, depth: usize) -> usize {
    let first = path.split('.').next().unwrap_or("");
    match first {
        "tokenizer" => match path.split('.').nth(1).unwrap_or("") {
            "stage2" => 1,
            "stage3" => 2,
            "stage4" => 3,
            _ => 0,
        },
        "graft" | "pos_embed" => 4,
        "encoder" => {
            let block = path
                .split('.')
                .nth(1)
                .and_then(|b| b.strip_prefix("block"))
                .and_then(|i| i.parse::<usize>().ok())
                .unwrap_or(depth);
            if block < depth / 2 {
                4
            } else {
                5
            }
        }
        _ => 5,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDecayMap {
    pub groups: Vec<usize>,
    pub multipliers: Vec<f64>,
}

impl LayerDecayMap {
    pub fn new(specs: &[ParamSpec], depth: usize, decay: f64) -> Self {
        let table = decay_multipliers(LAYER_GROUPS, decay);
        let groups: Vec<usize> = specs.iter().map(|s| layer_group(&s.path, depth)).collect();
        let multipliers = groups.iter().map(|&g| table[g]).collect();
        LayerDecayMap { groups, multipliers }
    }

    pub fn multiplier(&self, id: ParamId) -> f64 {
        self.multipliers[id.0]
    }
}

/// Mean over the batch of `-sum q~ log_softmax(logits)` with
/// `q~ = (1 - eps) q + eps / K`.
pub fn smoothed_ce<T: Element>(logits: &Var<T>, soft: &NdArray<T>, eps: f64) -> Result<Var<T>> {
    let s = logits.shape();
    if s.len() != 2 || soft.shape() != s {
        return Err(Error::shape("smoothed_ce", format!("logits {s:?} vs labels {:?}", soft.shape())));
    }
    let (n, k) = (s[0], s[1]);
    let q = soft.map(|v| T::of(v.as_f64() * (1.0 - eps) + eps / k as f64));
    let q = logits.tape().constant(q);
    logits
        .log_softmax(1)?
        .mul(&q)?
        .sum_all()?
        .scale(T::of(-1.0 / n as f64))
}

fn argmax_hits<T: Element>(logits: &NdArray<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// One optimizer step on a logical batch split into `accumulation` micro-batches.
/// Each micro-batch loss is weighted by its share of the batch, so the summed
/// gradients equal those of the undivided batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Element>(
    model: &Patternformer,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    layers: &LayerDecayMap,
    batch: &MixedBatch<T>,
    labels: &[usize],
    accumulation: usize,
    lr: f64,
    drop_seed: u64,
    smoothing: f64,
) -> Result<StepStats> {
    let n = batch.images.shape()[0];
    if accumulation == 0 || !n.is_multiple_of(accumulation) || labels.len() != n {
        return Err(Error::config(format!("{accumulation} micro-batches do not divide a batch of {n}")));
    }
    let micro = n / accumulation;
    let mut grads: Vec<Option<NdArray<T>>> = vec![None; store.len()];
    let mut stats = StepStats { loss: 0.0, correct: 0 };
    for j in 0..accumulation {
        let x = batch.images.narrow(0, j * micro, micro)?;
        let q = batch.soft_labels.narrow(0, j * micro, micro)?;
        let mut ctx = Ctx::new(Tape::new(), store, Mode::Train);
        ctx.drop_seed = drop_seed;
        ctx.sample_offset = j * micro;
        let xv = ctx.tape().constant(x);
        let logits = model.forward(&mut ctx, &xv)?;
        let loss = smoothed_ce(&logits, &q, smoothing)?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at micro-batch {j}")));
        }
        stats.loss += value * micro as f64 / n as f64;
        stats.correct += argmax_hits(logits.value(), &labels[j * micro..(j + 1) * micro]);
        loss.scale(T::of(micro as f64 / n as f64))?.backward()?;
        for (id, g) in ctx.param_grads() {
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }
    let grads: Vec<(ParamId, NdArray<T>)> = grads
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
        .collect();
    opt.update(store, &grads, lr, |id| layers.multiplier(id))?;
    Ok(stats)
}

/// Resized, optionally augmented and normalized images `indices` of `data`.
pub fn prepare_batch(
    data: &Dataset,
    indices: &[usize],
    resolution: usize,
    augment: Option<(&RandAugment, u64)>,
) -> Result<NdArray<f32>> {
    let mut out = Vec::with_capacity(indices.len() * 3 * resolution * resolution);
    for &i in indices {
        let mut img = resize(data.image(i), data.height, data.width, resolution);
        if let Some((ra, key)) = augment {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(key ^ splitmix64(i as u64)));
            ra.apply(&mut img, resolution, resolution, &mut rng);
        }
        normalize(&mut img);
        out.extend(img);
    }
    NdArray::new(&[indices.len(), 3, resolution, resolution], out)
}

/// Plain cross-entropy and accuracy in eval mode.
pub fn evaluate(model: &Patternformer, store: &mut ParamStore<f32>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let r = model.config.resolution;
    let (mut loss, mut correct) = (0.0, 0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let x = prepare_batch(data, chunk, r, None)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let mut ctx = Ctx::new(Tape::no_grad(), store, Mode::Eval);
        let xv = ctx.tape().constant(x);
        let logits = model.forward(&mut ctx, &xv)?;
        let ce = smoothed_ce(&logits, &one_hot(&labels, data.classes), 0.0)?;
        loss += ce.value().item() as f64 * chunk.len() as f64;
        correct += argmax_hits(logits.value(), &labels);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,acc,lr";

pub fn render_metrics(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6e}", r.epoch, r.split, r.loss, r.acc, r.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<MetricRow>,
    pub epochs_run: usize,
    pub best_acc: f64,
    pub final_train_acc: f64,
}

/// Trains `model` in place. Each epoch logs the running `train` loss and
/// accuracy (on mixed inputs), `train-eval` (eval mode, clean inputs) and,
/// when given, `eval`. With `out_dir`, writes `metrics.csv` every epoch,
/// `best.ckpt` whenever the monitored accuracy improves and `final.ckpt` at the
/// end; a non-finite loss or gradient saves `last_good.ckpt` and aborts.
pub fn train(
    model: &Patternformer,
    store: &mut ParamStore<f32>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || train_set.classes != model.config.num_classes {
        return Err(Error::config(format!(
            "training set has {} samples over {} classes; model expects {} classes",
            train_set.len(),
            train_set.classes,
            model.config.num_classes
        )));
    }
    let steps_per_epoch = train_set.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let updates = steps_per_epoch * cfg.epochs;
    // Update k uses lr_at(k + 1), so no update runs at lr 0.
    let schedule = LrSchedule::new(
        cfg.effective_lr(),
        (cfg.warmup_epochs * steps_per_epoch).min(updates),
        updates + 1,
    )?;
    let layers = LayerDecayMap::new(store.specs(), model.config.depth, cfg.layer_decay);
    let mut opt = AdamW::new(store.len(), cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let augment = cfg.augment();
    let r = model.config.resolution;
    let mut history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut final_train_acc = 0.0;
    let mut epochs_run = 0;
    let save = |store: &ParamStore<f32>, name: &str, epoch: usize| -> Result<()> {
        if let Some(dir) = out_dir {
            let extra = [("epoch".to_string(), epoch.to_string()), ("seed".to_string(), cfg.seed.to_string())];
            Checkpoint::capture(&model.config, store, &extra).save(&dir.join(name))?;
        }
        Ok(())
    };
    for epoch in 0..cfg.epochs {
        let epoch_key = splitmix64(cfg.seed ^ splitmix64(epoch as u64 + 1));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_key));
        let (mut loss, mut correct, mut lr) = (0.0, 0, 0.0);
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            let step_key = splitmix64(cfg.seed ^ splitmix64(0x5EED_0000 + step as u64));
            let idx = &order[s * cfg.batch_size..(s + 1) * cfg.batch_size];
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let images = prepare_batch(train_set, idx, r, augment.as_ref().map(|a| (a, epoch_key)))?;
            let mut mix_rng = ChaCha8Rng::seed_from_u64(step_key);
            let batch = mix_batch(
                &images,
                &labels,
                train_set.classes,
                &mut mix_rng,
                cfg.mixup_alpha,
                cfg.cutmix_alpha,
                cfg.mix_switch_prob,
            )?;
            lr = schedule.lr_at(step + 1);
            let stats = match train_step(
                model,
                store,
                &mut opt,
                &layers,
                &batch,
                &labels,
                cfg.accumulation_steps,
                lr,
                step_key,
                cfg.label_smoothing,
            ) {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    save(store, "last_good.ckpt", epoch)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            loss += stats.loss;
            correct += stats.correct;
        }
        let seen = steps_per_epoch * cfg.batch_size;
        history.push(MetricRow {
            epoch,
            split: "train".into(),
            loss: loss / steps_per_epoch as f64,
            acc: correct as f64 / seen as f64,
            lr,
        });
        let (tl, ta) = evaluate(model, store, train_set, cfg.eval_batch_size)?;
        history.push(MetricRow {
            epoch,
            split: "train-eval".into(),
            loss: tl,
            acc: ta,
            lr,
        });
        final_train_acc = ta;
        let monitored = match eval_set {
            Some(es) => {
                let (el, ea) = evaluate(model, store, es, cfg.eval_batch_size)?;
                history.push(MetricRow {
                    epoch,
                    split: "eval".into(),
                    loss: el,
                    acc: ea,
                    lr,
                });
                ea
            }
            None => ta,
        };
        epochs_run = epoch + 1;
        if monitored > best {
            best = monitored;
            save(store, "best.ckpt", epoch)?;
        }
        if let Some(dir) = out_dir {
            write_atomic(&dir.join("metrics.csv"), render_metrics(&history).as_bytes())?;
        }
        if cfg.target_train_acc.is_some_and(|t| ta >= t) {
            break;
        }
    }
    save(store, "final.ckpt", epochs_run.saturating_sub(1))?;
    Ok(TrainReport {
        history,
        epochs_run,
        best_acc: best,
        final_train_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(kind: crate::nn::ParamKind) -> ParamStore<f64> {
        let mut reg = crate::nn::ParamRegistry::new();
        reg.register("p", &[1], kind, crate::nn::Init::Ones);
        ParamStore::materialize(&reg, 0)
    }

    #[test]
    fn adamw_single_step() {
        let mut store = scalar_store(crate::nn::ParamKind::Weight);
        let mut opt = AdamW::new(1, (0.9, 0.95), 1e-8, 0.0);
        opt.update(&mut store, &[(ParamId(0), NdArray::from_f64(&[1], &[1.0]).unwrap())], 0.1, |_| 1.0)
            .unwrap();
        let p = store.get(ParamId(0)).data()[0];
        let expect = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only_on_decayed_kinds() {
        let mut store = scalar_store(crate::nn::ParamKind::Weight);
        let mut opt = AdamW::new(1, (0.9, 0.95), 1e-8, 0.3);
        opt.update(&mut store, &[], 0.1, |_| 1.0).unwrap();
        assert_eq!(store.get(ParamId(0)).data()[0], 1.0 * (1.0 - 0.1 * 0.3));
        let mut norm = scalar_store(crate::nn::ParamKind::NormScale);
        let mut opt = AdamW::new(1, (0.9, 0.95), 1e-8, 0.3);
        opt.update(&mut norm, &[], 0.1, |_| 1.0).unwrap();
        assert_eq!(norm.get(ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut store = scalar_store(crate::nn::ParamKind::Weight);
        let mut opt = AdamW::new(1, (0.9, 0.95), 1e-8, 0.3);
        let g = NdArray::from_f64(&[1], &[f64::NAN]).unwrap();
        assert!(matches!(opt.update(&mut store, &[(ParamId(0), g)], 0.1, |_| 1.0), Err(Error::NonFinite(_))));
        assert_eq!(store.get(ParamId(0)).data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            base_lr: 2e-4,
            batch_size: 1024,
            ..Default::default()
        };
        assert_eq!(cfg.effective_lr(), 8e-4);
        let s = LrSchedule::new(8e-4, 10, 100).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 8e-4);
        assert!(s.lr_at(100).abs() < 1e-12);
        assert!(LrSchedule::new(1.0, 5, 4).is_err());
    }

    #[test]
    fn layer_groups_and_multipliers() {
        let m = decay_multipliers(3, 0.65);
        assert!((m[0] - 0.4225).abs() < 1e-15 && m[1] == 0.65 && m[2] == 1.0);
        assert_eq!(layer_group("tokenizer.stem.conv.weight", 12), 0);
        assert_eq!(layer_group("tokenizer.stage1.block0.conv1.weight", 12), 0);
        assert_eq!(layer_group("tokenizer.stage3.block0.conv1.weight", 12), 2);
        assert_eq!(layer_group("graft.conv.weight", 12), 4);
        assert_eq!(layer_group("pos_embed", 12), 4);
        assert_eq!(layer_group("encoder.block5.attn.qkv.weight", 12), 4);
        assert_eq!(layer_group("encoder.block6.attn.qkv.weight", 12), 5);
        assert_eq!(layer_group("head.weight", 12), 5);
    }

    #[test]
    fn smoothed_ce_uniform_logits() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(NdArray::zeros(&[2, 10]));
        let loss = smoothed_ce(&logits, &one_hot(&[3, 7], 10), 0.1).unwrap();
        assert!((loss.value().item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_overrides() {
        let mut c = TrainConfig::default();
        assert!(c.apply("beta2", "0.999").unwrap());
        assert!(!c.apply("nope", "1").unwrap());
        assert!(c.apply("epochs", "x").is_err());
        assert_eq!(c.betas.1, 0.999);
        c.accumulation_steps = 5;
        assert!(c.validate().is_err());
    }
}
