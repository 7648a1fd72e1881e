//! Training loop: mini-batch gradient descent on the combined loss over
//! fresh-offset windows, periodic validation at fixed offsets, and
//! best-MAE checkpoint selection.
//!
//! All state needed to continue a run bit-for-bit lives under
//! `<checkpoint_dir>/last/`: model parameters (including normalization
//! buffers), optimizer moments, and the data/offset rng streams. `best/`
//! holds the checkpoint with the lowest observed validation MAE.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_scene, AnnotatedScene, DatasetManifest, ManifestEntry, NormStats, Split,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_entries, EvalReport, ModelDescriptor};
use crate::loss::{class_weights_from_frequencies, sel_batch, weighted_cel_batch, LossConfig};
use crate::model::{
    batch_inputs, load_checkpoint, save_checkpoint, BackboneConfig, Model, ParamStore,
};
use crate::sampler::{sample_window, SamplerConfig};

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}
fn default_eval_every() -> usize {
    5
}
fn default_log_every() -> usize {
    25
}
fn default_cache() -> usize {
    512
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    /// Replace `loss.class_weights` with inverse-frequency weights computed
    /// on the train split (only relevant when lambda > 0).
    #[serde(default = "default_true")]
    pub auto_class_weights: bool,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Validate (and checkpoint on improvement) every this many epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Maximum number of scenes kept in memory.
    #[serde(default = "default_cache")]
    pub scene_cache: usize,
    /// Suppress per-step stdout records.
    #[serde(default)]
    pub quiet: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_sel: f64,
    pub mean_cel: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub best_val_mae: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_history: Vec<EpochStats>,
    /// (epoch, validation MAE in ug/m3) pairs in evaluation order.
    pub val_history: Vec<(usize, f64)>,
    pub adam_step: usize,
    data_rng: ChaCha8Rng,
    offset_rng: ChaCha8Rng,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub best_checkpoint: PathBuf,
}

// ── Adam ─────────────────────────────────────────────────────────────────────

/// Adaptive-moment gradient descent with bias correction. Moments are kept
/// per trainable parameter in store order and serialize to safetensors so
/// interrupted runs resume exactly.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        let zeros = |t: &Tensor| Tensor::zeros(t.dims(), DType::F32, t.device());
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, var) in store.trainable() {
            m.push(zeros(var.as_tensor())?);
            v.push(zeros(var.as_tensor())?);
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        })
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in store.trainable().iter().enumerate() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            self.m[i] = self.m[i]
                .affine(self.beta1, 0.0)?
                .add(&grad.affine(1.0 - self.beta1, 0.0)?)?;
            self.v[i] = self.v[i]
                .affine(self.beta2, 0.0)?
                .add(&grad.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let m_hat = self.m[i].affine(1.0 / bc1, 0.0)?;
            let v_hat = self.v[i].affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&v_hat.sqrt()?.affine(1.0, self.eps)?)?;
            var.set(&var.as_tensor().sub(&update.affine(self.lr, 0.0)?)?)?;
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn save(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (i, (name, _)) in store.trainable().iter().enumerate() {
            map.insert(format!("m.{name}"), self.m[i].clone());
            map.insert(format!("v.{name}"), self.v[i].clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, store: &ParamStore, path: &Path, t: usize) -> Result<()> {
        let map = candle_core::safetensors::load(path, store.device())?;
        for (i, (name, _)) in store.trainable().iter().enumerate() {
            self.m[i] = map
                .get(&format!("m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moment missing for {name}")))?
                .clone();
            self.v[i] = map
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moment missing for {name}")))?
                .clone();
        }
        self.t = t;
        Ok(())
    }
}

// ── Scene cache ──────────────────────────────────────────────────────────────

/// Loads scenes on demand and keeps up to `limit` of them in memory.
pub struct SceneStore {
    cache: HashMap<PathBuf, Arc<AnnotatedScene>>,
    limit: usize,
}

impl SceneStore {
    pub fn new(limit: usize) -> Self {
        SceneStore {
            cache: HashMap::new(),
            limit,
        }
    }

    pub fn get(
        &mut self,
        manifest: &DatasetManifest,
        entry: &ManifestEntry,
    ) -> Result<Arc<AnnotatedScene>> {
        let dir = manifest.sample_dir(entry);
        if let Some(scene) = self.cache.get(&dir) {
            return Ok(scene.clone());
        }
        let scene = Arc::new(load_scene(&dir)?);
        if self.cache.len() < self.limit {
            self.cache.insert(dir, scene.clone());
        }
        Ok(scene)
    }
}

// ── Training ─────────────────────────────────────────────────────────────────

fn load_stats(manifest: &DatasetManifest) -> Result<NormStats> {
    let path = manifest.stats_path().ok_or_else(|| {
        Error::Config("manifest has no normalization_stats_path; run stats first".into())
    })?;
    NormStats::load(&path)
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0xd1b5_4a32_d192_ed03u64.wrapping_mul(stream + 1)))
}

/// Runs validation on a split with fixed offsets, in ug/m3.
pub fn validate(
    model: &Model,
    stats: &NormStats,
    sampler: &SamplerConfig,
    manifest: &DatasetManifest,
    split: Split,
    desc: ModelDescriptor,
) -> Result<EvalReport> {
    let entries: Vec<&ManifestEntry> = manifest.entries(split).collect();
    evaluate_entries(model, stats, sampler, manifest, &entries, &split.to_string(), desc)
}

/// Trains from scratch. See [`train_resumable`] for continuing a run.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    train_resumable(cfg, manifest, false)
}

/// Trains up to `cfg.max_epochs` total epochs. With `resume` set, continues
/// from `<checkpoint_dir>/last/` including optimizer moments and rng
/// streams, reproducing an uninterrupted run.
pub fn train_resumable(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stats = load_stats(manifest)?;
    let need_lc = cfg.loss.lambda > 0.0;

    let mut loss_cfg = cfg.loss.clone();
    if need_lc && cfg.auto_class_weights {
        loss_cfg.class_weights = class_weights_from_frequencies(manifest)?.to_vec();
    }

    let train_entries: Vec<ManifestEntry> = manifest.entries(Split::Train).cloned().collect();
    if train_entries.is_empty() {
        return Err(Error::EmptySplit("train split is empty".into()));
    }
    let val_entries: Vec<ManifestEntry> = manifest.entries(Split::Val).cloned().collect();
    if val_entries.is_empty() {
        return Err(Error::EmptySplit("val split is empty".into()));
    }

    let last_dir = cfg.checkpoint_dir.join("last");
    let best_dir = cfg.checkpoint_dir.join("best");

    let (mut model, mut adam, mut state) = if resume {
        let state_path = last_dir.join("train_state.json");
        let state: TrainState = serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(&state_path).map_err(|e| {
                Error::Checkpoint(format!("cannot resume from {}: {e}", state_path.display()))
            })?,
        ))?;
        let loaded = load_checkpoint(&last_dir)?;
        let mut adam = Adam::new(loaded.model.params(), cfg.learning_rate)?;
        adam.load(
            loaded.model.params(),
            &last_dir.join("optimizer.safetensors"),
            state.adam_step,
        )?;
        (loaded.model, adam, state)
    } else {
        let model = Model::new(&cfg.backbone, cfg.seed)?;
        let adam = Adam::new(model.params(), cfg.learning_rate)?;
        let state = TrainState {
            epoch: 0,
            step: 0,
            best_val_mae: None,
            best_checkpoint: None,
            loss_history: Vec::new(),
            val_history: Vec::new(),
            adam_step: 0,
            data_rng: sub_rng(cfg.seed, 1),
            offset_rng: sub_rng(cfg.seed, 2),
        };
        (model, adam, state)
    };

    let desc = ModelDescriptor {
        kind: cfg.backbone.kind.to_string(),
        loss_mode: if need_lc { "combined".into() } else { "regression-only".into() },
        prediction_space: cfg.sampler.prediction_space,
    };
    let mut scenes = SceneStore::new(cfg.scene_cache);

    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut state.data_rng);

        let mut sums = (0f64, 0f64, 0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut windows = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let scene = scenes.get(manifest, &train_entries[idx])?;
                windows.push(sample_window(
                    &scene,
                    &cfg.sampler,
                    &stats,
                    need_lc,
                    &mut state.offset_rng,
                )?);
            }
            let refs: Vec<&crate::sampler::WindowSample> = windows.iter().collect();
            let x = batch_inputs(&refs)?;
            let gts: Vec<(usize, usize)> = windows.iter().map(|w| w.gt_pixel).collect();
            let ys = Tensor::from_vec(
                windows.iter().map(|w| w.no2_norm).collect::<Vec<f32>>(),
                windows.len(),
                x.device(),
            )?;

            let (preds, lc_logits) = model.forward_pixel_readout(&x, &gts, need_lc, true)?;
            let sel_part = sel_batch(&ys, &preds)?;
            let (total, cel_value) = if need_lc {
                let masks: Vec<&Array2<u8>> = windows
                    .iter()
                    .map(|w| w.landcover_win.as_ref().expect("labels required"))
                    .collect();
                let cel = weighted_cel_batch(
                    &lc_logits.expect("lc logits requested"),
                    &masks,
                    &loss_cfg.class_weights,
                )?;
                let total = sel_part.add(&cel.affine(loss_cfg.lambda, 0.0)?)?;
                let cel_value = cel.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                (total, cel_value)
            } else {
                (sel_part.clone(), 0.0)
            };

            let sel_value = sel_part.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let total_value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !total_value.is_finite() {
                let batch = windows
                    .iter()
                    .map(|w| w.station_id.as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    sel: sel_value,
                    cel: cel_value,
                    batch,
                });
            }

            let grads = total.backward()?;
            adam.step(model.params(), &grads)?;
            state.step += 1;
            state.adam_step = adam.t();

            sums.0 += total_value;
            sums.1 += sel_value;
            sums.2 += cel_value;
            batches += 1;
            if !cfg.quiet && state.step % cfg.log_every == 0 {
                println!(
                    "step={} epoch={} sel={:.6} cel={:.6} total={:.6} lr={}",
                    state.step, epoch, sel_value, cel_value, total_value, cfg.learning_rate
                );
            }
        }

        let nb = batches.max(1) as f64;
        state.loss_history.push(EpochStats {
            epoch,
            mean_total: sums.0 / nb,
            mean_sel: sums.1 / nb,
            mean_cel: sums.2 / nb,
        });
        state.epoch += 1;

        if state.epoch % cfg.eval_every == 0 || state.epoch == cfg.max_epochs {
            let report = validate(&model, &stats, &cfg.sampler, manifest, Split::Val, desc.clone())?;
            state.val_history.push((state.epoch, report.mae));
            if !cfg.quiet {
                println!(
                    "epoch={} val_mae={:.6} val_mse={:.6} best={}",
                    state.epoch,
                    report.mae,
                    report.mse,
                    state.best_val_mae.map_or("none".into(), |b| format!("{b:.6}"))
                );
            }
            if state.best_val_mae.map_or(true, |best| report.mae < best) {
                state.best_val_mae = Some(report.mae);
                save_checkpoint(&best_dir, &model, &cfg.sampler, &loss_cfg, &stats, cfg.seed)?;
                state.best_checkpoint = Some(best_dir.clone());
            }
            // rolling resume point
            save_checkpoint(&last_dir, &model, &cfg.sampler, &loss_cfg, &stats, cfg.seed)?;
            adam.save(model.params(), &last_dir.join("optimizer.safetensors"))?;
            let mut json = serde_json::to_string_pretty(&state)?;
            json.push('\n');
            std::fs::write(last_dir.join("train_state.json"), json)?;
        }
    }

    let best_checkpoint = state
        .best_checkpoint
        .clone()
        .ok_or_else(|| Error::Checkpoint("no checkpoint was saved".into()))?;
    Ok(TrainOutcome {
        state,
        best_checkpoint,
    })
}
