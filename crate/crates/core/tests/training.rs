use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patternformer::augment::mix_batch;
use patternformer::checkpoint::Checkpoint;
use patternformer::data::{synthetic, Dataset};
use patternformer::model::{ModelConfig, Patternformer};
use patternformer::nn::{ParamId, ParamStore};
use patternformer::tokenizer::TokenizerNorm;
use patternformer::training::{
    layer_group, prepare_batch, train, train_step, AdamW, LayerDecayMap, TrainConfig, LAYER_GROUPS, METRICS_HEADER,
};
use patternformer::{Error, NdArray};

fn group_norm_tiny() -> ModelConfig {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.norm = TokenizerNorm::Group(32);
    cfg.drop_path = 0.1;
    cfg
}

/// Parameters after one optimizer step on a mixed, drop-path-active batch of 32.
fn one_step(k: usize) -> ParamStore<f64> {
    let cfg = group_norm_tiny();
    let (model, mut store) = Patternformer::assemble::<f64>(&cfg, 21).unwrap();
    let data = synthetic(32, 10, 64, 3).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let images: NdArray<f64> = prepare_batch(&data, &idx, 64, None).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = mix_batch(&images, &data.labels, 10, &mut rng, 0.8, 1.0, 0.5).unwrap();
    let layers = LayerDecayMap::new(store.specs(), cfg.depth, 0.65);
    let mut opt = AdamW::new(store.len(), (0.9, 0.95), 1e-8, 0.3);
    train_step(&model, &mut store, &mut opt, &layers, &batch, &data.labels, k, 1e-3, 99, 0.1).unwrap();
    store
}

#[test]
fn accumulation_matches_single_batch() {
    let reference = one_step(1);
    for k in [2, 4, 8] {
        let acc = one_step(k);
        let worst = reference
            .ids()
            .map(|id| reference.get(id).max_abs_diff(acc.get(id)))
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "k={k}: max parameter difference {worst}");
    }
}

#[test]
fn layer_decay_over_the_tiny_model() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (_, reg) = Patternformer::describe(&cfg).unwrap();
    let map = LayerDecayMap::new(reg.specs(), cfg.depth, 0.65);
    let head = reg.specs().iter().position(|s| s.path == "head.weight").unwrap();
    assert_eq!(map.multiplier(ParamId(head)), 1.0);
    let mut seen = vec![false; LAYER_GROUPS];
    for (spec, &g) in reg.specs().iter().zip(&map.groups) {
        assert_eq!(g, layer_group(&spec.path, cfg.depth));
        seen[g] = true;
    }
    assert!(seen.iter().all(|&s| s), "every group populated: {seen:?}");
    let by_group: Vec<f64> = (0..LAYER_GROUPS)
        .map(|g| map.multipliers[map.groups.iter().position(|&x| x == g).unwrap()])
        .collect();
    assert!(by_group.windows(2).all(|w| w[0] < w[1]), "{by_group:?}");
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        warmup_epochs: 1,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_writes_metrics_and_checkpoints_deterministically() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let data = synthetic(32, 10, 64, 7).unwrap();
    let held_out = synthetic(16, 10, 64, 8).unwrap();
    let run = |dir: &std::path::Path| {
        let (model, mut store) = Patternformer::assemble::<f32>(&cfg, 1).unwrap();
        let report = train(&model, &mut store, &data, Some(&held_out), &quick_config(1), Some(dir)).unwrap();
        (report, store)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, sa) = run(a.path());
    let (rb, _) = run(b.path());
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.history.len(), 2 * 3);
    let csv = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.path().join("metrics.csv")).unwrap());
    assert!(csv.starts_with(METRICS_HEADER));
    let last = Checkpoint::load(&a.path().join("final.ckpt")).unwrap();
    assert_eq!(last, Checkpoint::capture(&cfg, &sa, &[("epoch".into(), "1".into()), ("seed".into(), "1".into())]));
    assert!(a.path().join("best.ckpt").exists());
}

#[test]
fn non_finite_loss_keeps_last_good_checkpoint() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (model, mut store) = Patternformer::assemble::<f32>(&cfg, 1).unwrap();
    let id = store.find("head.bias").unwrap();
    store.set(id, NdArray::full(&[10], f32::NAN)).unwrap();
    let data = synthetic(32, 10, 64, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train(&model, &mut store, &data, None, &quick_config(0), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let saved = Checkpoint::load(&dir.path().join("last_good.ckpt")).unwrap();
    let restored = saved.entries.iter().find(|e| e.path == "tokenizer.stem.conv.weight").unwrap();
    let sid = store.find("tokenizer.stem.conv.weight").unwrap();
    assert_eq!(restored.data, store.get(sid).data());
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (model, mut store) = Patternformer::assemble::<f32>(&cfg, 1).unwrap();
    let data = synthetic(32, 10, 64, 7).unwrap();
    let bad = TrainConfig {
        batch_size: 64,
        ..quick_config(0)
    };
    assert!(train(&model, &mut store, &data, None, &bad, None).is_err());
    let wrong_classes = synthetic(32, 4, 64, 7).unwrap();
    assert!(train(&model, &mut store, &wrong_classes, None, &quick_config(0), None).is_err());
}

/// Least-squares one-vs-rest probe on 4x4 average-pooled pixels with a bias
/// column, fit on even indices and scored on odd ones.
fn probe_accuracy(data: &Dataset, labels: &[usize]) -> f64 {
    let cell = data.height / 4;
    let feats: Vec<Vec<f32>> = (0..data.len())
        .map(|i| {
            let img = data.image(i);
            let mut f = vec![0.0; 48];
            for c in 0..3 {
                for y in 0..data.height {
                    for x in 0..data.width {
                        f[c * 16 + (y / cell) * 4 + x / cell] += img[(c * data.height + y) * data.width + x];
                    }
                }
            }
            f
        })
        .collect();
    let d = feats[0].len() + 1;
    let half = data.len() / 2;
    let design = |off: usize| {
        DMatrix::from_fn(half, d, |i, j| if j + 1 == d { 1.0 } else { feats[2 * i + off][j] as f64 })
    };
    let (fit, held) = (design(0), design(1));
    let svd = fit.clone().svd(true, true);
    let mut scores = DMatrix::zeros(half, data.classes);
    for c in 0..data.classes {
        let y = DVector::from_fn(half, |i, _| if labels[2 * i] == c { 1.0 } else { 0.0 });
        let w = svd.solve(&y, 1e-10).unwrap();
        scores.set_column(c, &(&held * w));
    }
    let hits = (0..half)
        .filter(|&i| scores.row(i).transpose().argmax().0 == labels[2 * i + 1])
        .count();
    hits as f64 / half as f64
}

#[test]
fn synthetic_set_is_linearly_separable() {
    let data = synthetic(512, 10, 64, 7).unwrap();
    let acc = probe_accuracy(&data, &data.labels);
    assert!(acc >= 0.8, "probe accuracy {acc}");
    // Control: shuffled labels do not generalize.
    let mut shuffled = data.labels.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let control = probe_accuracy(&data, &shuffled);
    assert!(control < 0.3, "probe generalizes shuffled labels at {control}");
}
