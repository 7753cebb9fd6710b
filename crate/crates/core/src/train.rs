//! Scene preparation, the mini-batch Adam training loop, split evaluation,
//! the wavelet ablation and full-scene map prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_io::{HsiCube, LabelMap};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{self, argmax, ModelConfig, ModelParams, Mode};
use crate::nn::{checkpoint, AdamState, Tape};
use crate::preprocess::{
    self, anchors, center_offset, check_patch_side, extract_patches, split_dataset, Patch, SplitFractions,
    SplitSet,
};
use crate::rng::{self, Stream, DEFAULT_SEED};

const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub wavelet_enabled: bool,
    pub split: SplitFractions,
    /// Standardize bands before band reduction.
    pub normalize: bool,
    /// Return the parameters of the best validation epoch instead of the last.
    pub keep_best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            lr: 0.001,
            seed: DEFAULT_SEED,
            model: ModelConfig::default(),
            wavelet_enabled: true,
            split: SplitFractions::default(),
            normalize: true,
            keep_best_val: false,
        }
    }
}

impl TrainConfig {
    /// Model configuration with the wavelet switch applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            wavelet: self.wavelet_enabled,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        self.split.validate()?;
        self.model_config().validate()
    }
}

/// A preprocessed scene: reduced cube, labeled patches and their split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cube: HsiCube,
    pub patches: Vec<Patch>,
    pub split: SplitSet,
    pub num_classes: usize,
    pub pca_rank: usize,
}

impl Dataset {
    pub fn select(&self, indices: &[usize]) -> Vec<&Patch> {
        indices.iter().map(|&i| &self.patches[i]).collect()
    }
}

/// Normalizes and band-reduces the cube, as done before patch extraction.
pub fn preprocess_cube(cube: &HsiCube, cfg: &TrainConfig) -> Result<(HsiCube, usize)> {
    let base = if cfg.normalize {
        preprocess::normalize(cube)
    } else {
        cube.clone()
    };
    let reduction = preprocess::reduce_bands(&base, cfg.model.reduced_bands)?;
    let rank = reduction.rank;
    Ok((reduction.cube, rank))
}

pub fn prepare(cube: &HsiCube, labels: &LabelMap, cfg: &TrainConfig) -> Result<Dataset> {
    cfg.validate()?;
    if labels.num_classes() != cfg.model.num_classes {
        return Err(Error::InvalidConfig(format!(
            "labels have {} classes, model configured for {}",
            labels.num_classes(),
            cfg.model.num_classes
        )));
    }
    let (reduced, pca_rank) = preprocess_cube(cube, cfg)?;
    let patches = extract_patches(&reduced, labels, cfg.model.patch_side)?;
    let split = split_dataset(&patches, cfg.split, cfg.seed)?;
    Ok(Dataset {
        cube: reduced,
        patches,
        split,
        num_classes: labels.num_classes(),
        pca_rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when the validation split is empty.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub wall_clock_s: f64,
    pub optimizer_steps: u64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                e.train_loss,
                e.train_acc,
                opt(e.val_loss),
                opt(e.val_acc)
            );
        }
        out
    }
}

/// Loss and accuracy in eval mode, without touching parameters.
pub fn loss_and_accuracy(params: &ModelParams, cfg: &ModelConfig, patches: &[&Patch]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in patches.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let (l, fwd) = model::training_loss(&mut tape, params, cfg, chunk, Mode::Eval, &mut no_rng)?;
        loss += tape.scalar_value(l) * chunk.len() as f64;
        correct += tape
            .value(fwd.logits)
            .chunks_exact(cfg.num_classes)
            .zip(chunk)
            .filter(|(z, p)| argmax(z) == p.class_index())
            .count();
    }
    let n = patches.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if data.split.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let model_cfg = cfg.model_config();
    let started = Instant::now();
    let mut params = ModelParams::init(&model_cfg, &mut rng::stream(cfg.seed, Stream::Init))?;
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut adam = AdamState::new(cfg.lr);
    let mut order = data.split.train.clone();
    let val = data.select(&data.split.validation);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelParams)> = None;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let mut tape = Tape::new();
            let (loss, fwd) =
                model::training_loss(&mut tape, &params, &model_cfg, &batch, Mode::Train, &mut dropout_rng)?;
            loss_sum += tape.scalar_value(loss) * batch.len() as f64;
            correct += tape
                .value(fwd.logits)
                .chunks_exact(model_cfg.num_classes)
                .zip(&batch)
                .filter(|(z, p)| argmax(z) == p.class_index())
                .count();
            params.zero_grad();
            model::accumulate_gradients(&tape, loss, &fwd, &mut params)?;
            adam.step(&mut params.tensors_mut())?;
        }
        let n = order.len() as f64;
        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = loss_and_accuracy(&params, &model_cfg, &val)?;
            (Some(l), Some(a))
        };
        if cfg.keep_best_val {
            if let Some(acc) = val_acc {
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, params.clone()));
                }
            }
        }
        history.push(EpochStats {
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        });
    }
    let history = TrainHistory {
        epochs: history,
        wall_clock_s: started.elapsed().as_secs_f64(),
        optimizer_steps: adam.step_count(),
    };
    let params = match best {
        Some((_, p)) if cfg.keep_best_val => p,
        _ => params,
    };
    Ok((params, history))
}

/// Eval-mode predictions (zero-based class ids) for the given patches.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, patches: &[&Patch]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        out.extend(model::predict_batch(params, cfg, chunk)?.iter().map(|p| argmax(p)));
    }
    Ok(out)
}

fn confusion_for(params: &ModelParams, cfg: &ModelConfig, patches: &[&Patch]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for (p, pred) in patches.iter().zip(predict(params, cfg, patches)?) {
        cm.accumulate(p.class_index(), pred)?;
    }
    Ok(cm)
}

/// Confusion matrix computed in parallel shards and merged.
pub fn confusion_sharded(
    params: &ModelParams,
    cfg: &ModelConfig,
    patches: &[&Patch],
    shard: usize,
) -> Result<ConfusionMatrix> {
    patches
        .par_chunks(shard.max(1))
        .map(|chunk| confusion_for(params, cfg, chunk))
        .try_reduce(
            || ConfusionMatrix::new(cfg.num_classes),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

pub fn confusion_serial(params: &ModelParams, cfg: &ModelConfig, patches: &[&Patch]) -> Result<ConfusionMatrix> {
    confusion_for(params, cfg, patches)
}

/// Metrics over one split. `train_time_s` is copied into the report.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    train_time_s: f64,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let model_cfg = cfg.model_config();
    let patches = data.select(indices);
    let cm = confusion_sharded(params, &model_cfg, &patches, EVAL_BATCH)?;
    MetricsReport::from_confusion(&cm, train_time_s, serde_json::to_value(cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_wavelet: MetricsReport,
    pub without_wavelet: MetricsReport,
}

/// Trains twice from the same seeds, with and without the Haar stage, and
/// reports test-split metrics for both.
pub fn ablate_wavelet(data: &Dataset, cfg: &TrainConfig) -> Result<AblationReport> {
    let run = |wavelet: bool| -> Result<MetricsReport> {
        let c = TrainConfig {
            wavelet_enabled: wavelet,
            ..cfg.clone()
        };
        let (params, hist) = train(data, &c)?;
        evaluate(&params, data, &data.split.test, &c, hist.wall_clock_s)
    };
    Ok(AblationReport {
        with_wavelet: run(true)?,
        without_wavelet: run(false)?,
    })
}

/// Classifies the centre pixel of every full window of the (already
/// preprocessed) cube. Pixels without a full window stay 0.
pub fn predict_map(params: &ModelParams, cube: &HsiCube, cfg: &ModelConfig) -> Result<LabelMap> {
    let p = cfg.patch_side;
    check_patch_side(cube, p)?;
    let off = center_offset(p);
    let windows: Vec<Patch> = anchors(cube.height(), cube.width(), p)
        .map(|(r, c)| Patch {
            window: preprocess::window_at(cube, r, c, p),
            anchor_row: r,
            anchor_col: c,
            center_row: r + off,
            center_col: c + off,
            label: 1,
        })
        .collect();
    let refs: Vec<&Patch> = windows.iter().collect();
    let preds: Vec<usize> = refs
        .par_chunks(EVAL_BATCH)
        .map(|chunk| predict(params, cfg, chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut labels = vec![0u16; cube.pixels()];
    for (w, pred) in windows.iter().zip(preds) {
        labels[w.center_row * cube.width() + w.center_col] = pred as u16 + 1;
    }
    LabelMap::new(cube.height(), cube.width(), labels)
}

/// Path of the JSON config sidecar that accompanies a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes the WMCK checkpoint and its JSON `TrainConfig` sidecar.
pub fn save_model(params: &ModelParams, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let named = params.named();
    let refs: Vec<(&str, _)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    checkpoint::save(path, &refs)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, TrainConfig)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)?;
    let params = ModelParams::from_named(&cfg.model_config(), checkpoint::load(path)?)?;
    Ok((params, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub patch: usize,
    pub train_frac: f64,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub train_time_s: f64,
}

/// One train + test evaluation per (patch side, train percentage) cell. The
/// validation percentage is kept and the test split takes the remainder.
pub fn sweep(
    cube: &HsiCube,
    labels: &LabelMap,
    base: &TrainConfig,
    patch_sides: &[usize],
    train_fracs: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &patch in patch_sides {
        for &frac in train_fracs {
            let mut cfg = base.clone();
            cfg.model.patch_side = patch;
            cfg.split = SplitFractions::new(frac, base.split.val, 100.0 - frac - base.split.val)?;
            let data = prepare(cube, labels, &cfg)?;
            let (params, hist) = train(&data, &cfg)?;
            let report = evaluate(&params, &data, &data.split.test, &cfg, hist.wall_clock_s)?;
            rows.push(SweepRow {
                patch,
                train_frac: frac,
                oa: report.oa,
                aa: report.aa,
                kappa: report.kappa,
                train_time_s: hist.wall_clock_s,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("patch,frac,OA,AA,kappa,train_time_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.patch, r.train_frac, r.oa, r.aa, r.kappa, r.train_time_s
        );
    }
    out
}
