//! Optimization loop: Adam, gradient clipping, KL annealing, stage-wise
//! phases, early stopping on validation R@1 and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    decode_tensors, encode_tensors, load_into_store, read_tensors, save_store, NamedTensor,
};
use crate::corpus::{make_batches, BatchMode, Dataset, PairBatch, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Metrics};
use crate::graph::Graph;
use crate::latent::GaussianNoise;
use crate::model::{LossWeights, Mcen, ModelConfig, Phase};
use crate::objectives::{LossBreakdown, Mining};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Clamp every gradient coordinate to `[-clip, clip]`.
    Value,
    /// Rescale all gradients so their joint L2 norm is at most `clip`.
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub margin: f64,
    pub mining: Mining,
    /// Steps at the start that use `mean` mining regardless of `mining`;
    /// hardest negatives from the first step can collapse all embeddings.
    pub mean_mining_steps: u64,
    pub alpha_start: f64,
    pub alpha_max: f64,
    /// Steps over which alpha ramps linearly from start to max.
    pub alpha_ramp_steps: u64,
    pub beta: f64,
    pub gamma: f64,
    /// Epochs of the recipe phase before both posteriors train.
    pub phase_len: u64,
    pub max_epochs: u64,
    /// Optimizer steps after which training stops; 0 for no limit.
    pub max_steps: u64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: u64,
    pub val_size: usize,
    pub val_repeats: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip: 5.0,
            clip_mode: ClipMode::Value,
            margin: 0.3,
            mining: Mining::Hardest,
            mean_mining_steps: 0,
            alpha_start: 1e-4,
            alpha_max: 0.1,
            alpha_ramp_steps: 10_000,
            beta: 0.002,
            gamma: 0.008,
            phase_len: 2,
            max_epochs: 100,
            max_steps: 0,
            patience: 5,
            val_size: 1000,
            val_repeats: 10,
            eval_batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train.{m}")));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("clip", self.clip),
            ("margin", self.margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        for (k, v) in [
            ("alpha_start", self.alpha_start),
            ("alpha_max", self.alpha_max),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if self.alpha_max < self.alpha_start {
            return bad("alpha_max is below alpha_start".into());
        }
        if self.val_size == 0 || self.val_repeats == 0 || self.eval_batch_size == 0 {
            return bad("val_size, val_repeats and eval_batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn alpha(&self, step: u64) -> f64 {
        anneal_alpha(
            step,
            self.alpha_start,
            self.alpha_max,
            self.alpha_ramp_steps,
        )
    }

    pub fn weights(&self, step: u64) -> LossWeights {
        LossWeights {
            alpha: self.alpha(step),
            beta: self.beta,
            gamma: self.gamma,
            margin: self.margin,
            mining: if step < self.mean_mining_steps {
                Mining::Mean
            } else {
                self.mining
            },
        }
    }
}

/// Linear ramp from `start` at step 0 to `max` at `ramp` steps, flat after.
pub fn anneal_alpha(step: u64, start: f64, max: f64, ramp: u64) -> f64 {
    if step >= ramp {
        max
    } else {
        start + (max - start) * step as f64 / ramp as f64
    }
}

pub fn stagewise_mode(epoch: u64, phase_len: u64) -> Phase {
    if epoch < phase_len {
        Phase::RecipePhase
    } else {
        Phase::JointPhase
    }
}

pub type Grads<T> = Vec<(ParamId, Array2<T>)>;

pub fn clip_values<T: Scalar>(grads: &mut Grads<T>, clip: f64) {
    let c = T::of(clip);
    for (_, g) in grads.iter_mut() {
        g.mapv_inplace(|v| v.max(-c).min(c));
    }
}

pub fn clip_norm<T: Scalar>(grads: &mut Grads<T>, clip: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let k = T::of(clip / norm);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
}

/// Adam with bias correction; moments are kept for every parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros: Vec<Array2<T>> = store
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.dim()))
            .collect();
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let i = id.index();
            Zip::from(store.value_mut(*id))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }

    fn tensors(&self, store: &ParamStore<T>) -> Vec<NamedTensor<T>> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (prefix, moments) in [("m.", &self.m), ("v.", &self.v)] {
            for ((_, p), value) in store.iter().zip(moments) {
                out.push(NamedTensor {
                    name: format!("{prefix}{}", p.name),
                    trainable: p.trainable,
                    value: value.clone(),
                });
            }
        }
        out
    }

    fn restore(&mut self, store: &ParamStore<T>, tensors: Vec<NamedTensor<T>>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, Array2<T>> =
            tensors.into_iter().map(|t| (t.name, t.value)).collect();
        for (id, p) in store.iter() {
            for (prefix, moments) in [("m.", &mut self.m), ("v.", &mut self.v)] {
                let key = format!("{prefix}{}", p.name);
                let value = by_name
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if value.dim() != p.value.dim() {
                    return Err(Error::shape(
                        key,
                        format!("{:?}", p.value.dim()),
                        format!("{:?}", value.dim()),
                    ));
                }
                moments[id.index()] = value;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has unknown tensor {extra}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_r1: f64,
    pub im2recipe: Metrics,
    pub recipe2im: Metrics,
}

/// Everything besides tensors needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Next epoch to run.
    pub epoch: u64,
    pub best_r1: Option<f64>,
    pub best_epoch: Option<u64>,
    pub bad_epochs: u64,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub config_hash: String,
    pub adam_t: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

pub const MANIFEST_VERSION: u32 = 1;

/// SHA-256 over the JSON form of both configs.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Where [`Trainer::fit`] writes checkpoints and the JSON-lines log.
#[derive(Debug, Clone, Copy)]
pub struct FitOutput<'a> {
    pub dir: &'a Path,
    pub vocab: Option<&'a Vocab>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps: u64,
    pub epochs: u64,
    pub best_r1: Option<f64>,
    pub best_epoch: Option<u64>,
    pub stopped_early: bool,
}

#[derive(Serialize)]
struct StepLog<'a> {
    kind: &'a str,
    step: u64,
    epoch: u64,
    phase: Phase,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Serialize)]
struct EpochLog<'a> {
    kind: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

const NOISE_SALT: u64 = 0x6e6f_6973_655f_7a00;

pub struct Trainer<T: Scalar> {
    pub model: Mcen,
    pub store: ParamStore<T>,
    pub optim: Adam<T>,
    pub config: TrainConfig,
    pub state: TrainState,
    /// Parameters of the best validation epoch so far.
    pub best: Option<ParamStore<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_config: &ModelConfig, config: TrainConfig, vocab: usize) -> Result<Self> {
        config.validate()?;
        let (model, store) = Mcen::new(model_config, vocab, config.seed)?;
        Ok(Self::from_parts(model, store, config))
    }

    pub fn from_parts(model: Mcen, store: ParamStore<T>, config: TrainConfig) -> Self {
        let optim = Adam::new(&store, &config);
        Trainer {
            model,
            store,
            optim,
            config,
            state: TrainState {
                step: 0,
                epoch: 0,
                best_r1: None,
                best_epoch: None,
                bad_epochs: 0,
                stopped: false,
                history: Vec::new(),
            },
            best: None,
        }
    }

    pub fn phase(&self) -> Phase {
        stagewise_mode(self.state.epoch, self.config.phase_len)
    }

    /// Loss and clipped gradients of one batch at the current step, without
    /// updating anything.
    pub fn gradients(&self, batch: &PairBatch<T>) -> Result<(LossBreakdown, Grads<T>)> {
        let w = self.config.weights(self.state.step);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ NOISE_SALT);
        rng.set_stream(self.state.step);
        let mut noise = GaussianNoise(rng);
        let mut g = Graph::new();
        let f =
            self.model
                .forward_train(&mut g, &self.store, batch, &mut noise, self.phase(), &w)?;
        let loss = f.breakdown(&g, &w);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.step,
                dump: serde_json::to_string(&loss)?,
            });
        }
        let grads = g.backward(f.total);
        let mut out: Grads<T> = g
            .param_grads(&grads)
            .into_iter()
            .map(|(id, a)| (id, a.clone()))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        if out.iter().any(|(_, a)| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                step: self.state.step,
                dump: format!("gradient; loss {}", serde_json::to_string(&loss)?),
            });
        }
        match self.config.clip_mode {
            ClipMode::Value => clip_values(&mut out, self.config.clip),
            ClipMode::Norm => clip_norm(&mut out, self.config.clip),
        }
        Ok((loss, out))
    }

    pub fn train_step(&mut self, batch: &PairBatch<T>) -> Result<LossBreakdown> {
        let (loss, grads) = self.gradients(batch)?;
        self.optim.step(&mut self.store, &grads);
        self.state.step += 1;
        Ok(loss)
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps == 0 || self.state.step < self.config.max_steps
    }

    /// Train until the epoch limit, the step limit or early stopping.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        out: Option<FitOutput>,
    ) -> Result<FitSummary> {
        if val.is_empty() {
            return Err(Error::InvalidArgument("empty validation set".into()));
        }
        if train.len() < self.config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "{} training pairs cannot fill a batch of {}",
                train.len(),
                self.config.batch_size
            )));
        }
        let mut log = match out {
            Some(o) => {
                fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
                let path = o.dir.join("train_log.jsonl");
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        let log_io = |e| Error::io("train_log.jsonl", e);
        while !self.state.stopped && self.state.epoch < self.config.max_epochs && self.budget_left()
        {
            let epoch = self.state.epoch;
            let phase = self.phase();
            let mut total = 0.0;
            let mut batches = 0usize;
            let mode = BatchMode::Train {
                seed: self.config.seed,
                epoch,
            };
            for batch in make_batches::<T>(train, self.config.batch_size, mode)? {
                if !self.budget_left() {
                    break;
                }
                let step = self.state.step;
                let loss = self.train_step(&batch?)?;
                total += loss.total;
                batches += 1;
                if let Some(f) = log.as_mut() {
                    let line = StepLog {
                        kind: "step",
                        step,
                        epoch,
                        phase,
                        loss: &loss,
                    };
                    serde_json::to_writer(&mut *f, &line)?;
                    f.write_all(b"\n").map_err(log_io)?;
                }
            }
            let report = evaluate_model(
                &self.model,
                &self.store,
                val,
                self.config.val_size,
                self.config.val_repeats,
                self.config.seed,
                self.config.eval_batch_size,
            )?;
            let record = EpochRecord {
                epoch,
                step: self.state.step,
                phase,
                train_loss: total / batches.max(1) as f64,
                val_r1: report.mean_r1(),
                im2recipe: report.im2recipe.mean,
                recipe2im: report.recipe2im.mean,
            };
            log::info!(
                "epoch {epoch} step {} loss {:.4} val R@1 {:.2}",
                record.step,
                record.train_loss,
                record.val_r1
            );
            if let Some(f) = log.as_mut() {
                serde_json::to_writer(
                    &mut *f,
                    &EpochLog {
                        kind: "epoch",
                        record: &record,
                    },
                )?;
                f.write_all(b"\n").map_err(log_io)?;
                f.flush().map_err(log_io)?;
            }
            self.state.history.push(record);
            self.state.epoch += 1;
            let improved = self.state.best_r1.is_none_or(|b| record.val_r1 > b);
            if improved {
                self.state.best_r1 = Some(record.val_r1);
                self.state.best_epoch = Some(epoch);
                self.state.bad_epochs = 0;
                self.best = Some(self.store.clone());
            } else {
                self.state.bad_epochs += 1;
                if self.state.bad_epochs > self.config.patience {
                    self.state.stopped = true;
                }
            }
            if let Some(o) = out {
                if improved {
                    self.save(&o.dir.join("best"), o.vocab)?;
                }
                self.save(&o.dir.join("last"), o.vocab)?;
            }
        }
        Ok(FitSummary {
            steps: self.state.step,
            epochs: self.state.epoch,
            best_r1: self.state.best_r1,
            best_epoch: self.state.best_epoch,
            stopped_early: self.state.stopped,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            dtype: T::DTYPE,
            config_hash: config_hash(&self.model.config, &self.config),
            adam_t: self.optim.t,
            model: self.model.config.clone(),
            train: self.config.clone(),
            state: self.state.clone(),
        }
    }

    /// Write `params.bin`, `optim.bin`, `manifest.json` and, when given,
    /// `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path, vocab: Option<&Vocab>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_store(&self.store, &dir.join("params.bin"))?;
        let optim = dir.join("optim.bin");
        fs::write(&optim, encode_tensors(&self.optim.tensors(&self.store)))
            .map_err(|e| Error::io(&optim, e))?;
        let manifest = dir.join("manifest.json");
        fs::write(&manifest, serde_json::to_vec_pretty(&self.manifest())?)
            .map_err(|e| Error::io(&manifest, e))?;
        if let Some(v) = vocab {
            v.save(&dir.join("vocab.json"))?;
        }
        Ok(())
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint::<T>(dir)?;
        let mut trainer = Trainer::from_parts(ckpt.model, ckpt.store, ckpt.manifest.train.clone());
        let optim = dir.join("optim.bin");
        let bytes = fs::read(&optim).map_err(|e| Error::io(&optim, e))?;
        trainer
            .optim
            .restore(&trainer.store, decode_tensors(&bytes)?)?;
        trainer.optim.t = ckpt.manifest.adam_t;
        trainer.state = ckpt.manifest.state;
        Ok(trainer)
    }

    /// Continue a run directory written by [`Trainer::fit`]: state from
    /// `last/`, best parameters from `best/`.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let mut trainer = Self::load(&run_dir.join("last"))?;
        let best = run_dir.join("best");
        if best.join("params.bin").exists() {
            let mut store = trainer.store.clone();
            load_into_store(&mut store, read_tensors(&best.join("params.bin"))?)?;
            trainer.best = Some(store);
        }
        Ok(trainer)
    }

    /// Parameters to evaluate: the best epoch when one exists.
    pub fn best_store(&self) -> &ParamStore<T> {
        self.best.as_ref().unwrap_or(&self.store)
    }
}

/// A checkpoint loaded for inference.
pub struct Checkpoint<T> {
    pub model: Mcen,
    pub store: ParamStore<T>,
    pub manifest: Manifest,
    pub vocab: Option<Vocab>,
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let expected = config_hash(&manifest.model, &manifest.train);
    if manifest.config_hash != expected {
        return Err(Error::Checkpoint(
            "config hash does not match the stored configuration".into(),
        ));
    }
    let tensors = read_tensors::<T>(&dir.join("params.bin"))?;
    let vocab_rows = tensors
        .iter()
        .find(|t| t.name == "recipe.embedding")
        .map(|t| t.value.nrows())
        .ok_or_else(|| Error::Checkpoint("params.bin lacks recipe.embedding".into()))?;
    let mut config = manifest.model.clone();
    // Pretrained weights are already inside params.bin.
    config.backbone.checkpoint.clear();
    let (model, mut store) = Mcen::new::<T>(&config, vocab_rows, manifest.train.seed)?;
    load_into_store(&mut store, tensors)?;
    let vocab_path = dir.join("vocab.json");
    let vocab = if vocab_path.exists() {
        Some(Vocab::load(&vocab_path)?)
    } else {
        None
    };
    Ok(Checkpoint {
        model: Mcen {
            config: manifest.model.clone(),
            ..model
        },
        store,
        manifest,
        vocab,
    })
}

/// Default checkpoint directory inside a run directory.
pub fn best_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("best")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthOptions};
    use crate::image_encoder::{BackboneConfig, BackboneKind};
    use crate::model::Variant;
    use ndarray::array;
    use proptest::prelude::*;

    fn small_model(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            reconstruction: true,
            embed_dim: 8,
            latent_dim: 8,
            word_dim: 6,
            recipe_hidden: 4,
            attn_dim: 4,
            backbone: BackboneConfig {
                kind: BackboneKind::Tiny,
                input_size: 16,
                tiny_channels: vec![4, 8],
                ..BackboneConfig::tiny()
            },
        }
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            phase_len: 1,
            max_epochs: 3,
            val_size: 8,
            val_repeats: 2,
            eval_batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn data(pairs: usize, seed: u64) -> (Dataset, usize) {
        let mut opts = SynthOptions::new(4, pairs, seed);
        opts.image_size = 16;
        let s = generate_synthetic(&opts).unwrap();
        (s.dataset(), s.vocab.len())
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate), (32, 1e-4));
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!((c.clip, c.margin), (5.0, 0.3));
        assert_eq!((c.alpha_max, c.beta, c.gamma), (0.1, 0.002, 0.008));
        assert_eq!(
            (c.patience, c.phase_len, c.alpha_ramp_steps),
            (5, 2, 10_000)
        );
        c.validate().unwrap();
    }

    #[test]
    fn alpha_schedule_endpoints() {
        assert_eq!(anneal_alpha(0, 1e-4, 0.1, 10_000), 1e-4);
        assert_eq!(anneal_alpha(10_000, 1e-4, 0.1, 10_000), 0.1);
        assert_eq!(anneal_alpha(50_000, 1e-4, 0.1, 10_000), 0.1);
        assert!((anneal_alpha(5_000, 1e-4, 0.1, 10_000) - (1e-4 + 0.1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn phases() {
        assert_eq!(stagewise_mode(0, 2), Phase::RecipePhase);
        assert_eq!(stagewise_mode(1, 2), Phase::RecipePhase);
        assert_eq!(stagewise_mode(2, 2), Phase::JointPhase);
        assert_eq!(stagewise_mode(0, 0), Phase::JointPhase);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[1.0, -2.0, 0.0]], true);
        let frozen = store.add("f", array![[1.0]], false);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        adam.step(
            &mut store,
            &vec![(id, array![[3.0, -0.5, 0.0]]), (frozen, array![[1.0]])],
        );
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-7);
        assert_eq!(w[[0, 2]], 0.0);
        assert_eq!(store.value(frozen)[[0, 0]], 1.0);
    }

    #[test]
    fn adam_accepts_transposed_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Array2::zeros((2, 3)), true);
        let g = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].reversed_axes();
        let mut adam = Adam::new(&store, &TrainConfig::default());
        adam.step(&mut store, &vec![(id, g)]);
        assert!(store.value(id).iter().all(|v| *v < 0.0));
    }

    #[test]
    fn norm_clip_bounds_global_norm() {
        let mut g: Grads<f64> = vec![
            (ParamId(0), array![[30.0, 40.0]]),
            (ParamId(1), array![[0.0]]),
        ];
        clip_norm(&mut g, 5.0);
        assert!((g[0].1[[0, 0]] - 3.0).abs() < 1e-12 && (g[0].1[[0, 1]] - 4.0).abs() < 1e-12);
        let mut small: Grads<f64> = vec![(ParamId(0), array![[0.3]])];
        clip_norm(&mut small, 5.0);
        assert_eq!(small[0].1[[0, 0]], 0.3);
    }

    proptest! {
        #[test]
        fn alpha_is_monotone(a in 0u64..30_000, b in 0u64..30_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(anneal_alpha(lo, 1e-4, 0.1, 10_000) <= anneal_alpha(hi, 1e-4, 0.1, 10_000));
        }

        #[test]
        fn value_clip_bounds_coordinates(vals in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
            let n = vals.len();
            let mut g: Grads<f64> = vec![(ParamId(0), Array2::from_shape_vec((1, n), vals.clone()).unwrap())];
            clip_values(&mut g, 5.0);
            for (c, v) in g[0].1.iter().zip(&vals) {
                prop_assert!(c.abs() <= 5.0);
                if v.abs() <= 5.0 {
                    prop_assert_eq!(c, v);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (d, vocab) = data(16, 1);
        let run = || {
            let mut t =
                Trainer::<f32>::new(&small_model(Variant::Both), small_train(), vocab).unwrap();
            let mut losses = Vec::new();
            for epoch in 0..2 {
                t.state.epoch = epoch;
                for b in make_batches::<f32>(&d, 4, BatchMode::Train { seed: 3, epoch }).unwrap() {
                    losses.push(t.train_step(&b.unwrap()).unwrap().total);
                }
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let (d, vocab) = data(8, 2);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            phase_len: 0,
            mean_mining_steps: 200,
            ..small_train()
        };
        let mut t = Trainer::<f32>::new(&small_model(Variant::Both), cfg, vocab).unwrap();
        let batch = PairBatch::build(&d, &[0, 1, 2, 3, 4, 5, 6, 7], &[0; 8]).unwrap();
        let first = t.gradients(&batch).unwrap().0.l_ret;
        for _ in 0..200 {
            t.train_step(&batch).unwrap();
        }
        let last = t.gradients(&batch).unwrap().0.l_ret;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn clipped_gradients_stay_in_bounds() {
        let (d, vocab) = data(8, 3);
        let cfg = TrainConfig {
            clip: 1e-3,
            ..small_train()
        };
        let t = Trainer::<f64>::new(&small_model(Variant::Both), cfg, vocab).unwrap();
        let batch = PairBatch::build(&d, &[0, 1, 2, 3], &[0; 4]).unwrap();
        let (_, grads) = t.gradients(&batch).unwrap();
        assert!(grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .all(|v| v.abs() <= 1e-3));
        assert!(grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .any(|v| v.abs() == 1e-3));
    }

    #[test]
    fn patience_zero_stops_after_first_bad_epoch() {
        let (d, vocab) = data(8, 4);
        let cfg = TrainConfig {
            patience: 0,
            max_epochs: 50,
            learning_rate: 0.0 + 1e-12,
            ..small_train()
        };
        let mut t = Trainer::<f32>::new(&small_model(Variant::None), cfg, vocab).unwrap();
        let s = t.fit(&d, &d, None).unwrap();
        assert!(s.stopped_early);
        assert_eq!(s.epochs, t.state.history.len() as u64);
        let max = t
            .state
            .history
            .iter()
            .map(|h| h.val_r1)
            .fold(f64::MIN, f64::max);
        assert_eq!(s.best_r1, Some(max));
        let last = t.state.history.last().unwrap();
        assert!(last.val_r1 <= max);
        assert!(t.state.history.len() >= 2);
    }

    #[test]
    fn empty_validation_set_is_an_error() {
        let (d, vocab) = data(8, 5);
        let mut t = Trainer::<f32>::new(&small_model(Variant::None), small_train(), vocab).unwrap();
        let empty = d.subset(&[]);
        assert!(t.fit(&d, &empty, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_continues_identically() {
        let (d, vocab) = data(16, 6);
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::<f32>::new(&small_model(Variant::Both), small_train(), vocab).unwrap();
        let batches: Vec<_> = make_batches::<f32>(&d, 4, BatchMode::Train { seed: 3, epoch: 0 })
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        a.train_step(&batches[0]).unwrap();
        a.save(dir.path(), None).unwrap();
        let mut b = Trainer::<f32>::load(dir.path()).unwrap();
        for (x, y) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(x.1.value, y.1.value, "{}", x.1.name);
        }
        assert_eq!(a.state, b.state);
        for batch in &batches[1..] {
            let la = a.train_step(batch).unwrap();
            let lb = b.train_step(batch).unwrap();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn resumed_fit_matches_uninterrupted_fit() {
        let (d, vocab) = data(16, 7);
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 100,
            ..small_train()
        };
        let full_dir = tempfile::tempdir().unwrap();
        let mut full =
            Trainer::<f32>::new(&small_model(Variant::Both), cfg.clone(), vocab).unwrap();
        full.fit(
            &d,
            &d,
            Some(FitOutput {
                dir: full_dir.path(),
                vocab: None,
            }),
        )
        .unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::<f32>::new(
            &small_model(Variant::Both),
            TrainConfig {
                max_epochs: 2,
                ..cfg.clone()
            },
            vocab,
        )
        .unwrap();
        first
            .fit(
                &d,
                &d,
                Some(FitOutput {
                    dir: part_dir.path(),
                    vocab: None,
                }),
            )
            .unwrap();
        let mut resumed = Trainer::<f32>::resume(part_dir.path()).unwrap();
        resumed.config.max_epochs = 4;
        resumed
            .fit(
                &d,
                &d,
                Some(FitOutput {
                    dir: part_dir.path(),
                    vocab: None,
                }),
            )
            .unwrap();
        assert_eq!(full.state.history, resumed.state.history);
        for (x, y) in full.store.iter().zip(resumed.store.iter()) {
            assert_eq!(x.1.value, y.1.value);
        }
        let log = fs::read_to_string(part_dir.path().join("train_log.jsonl")).unwrap();
        let full_log = fs::read_to_string(full_dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log, full_log);
    }

    #[test]
    fn inference_checkpoint_loads() {
        let (d, vocab) = data(8, 8);
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::<f32>::new(&small_model(Variant::Image), small_train(), vocab).unwrap();
        t.save(dir.path(), None).unwrap();
        let c = load_checkpoint::<f32>(dir.path()).unwrap();
        let batch = PairBatch::<f32>::build(&d, &[0, 1], &[0, 0]).unwrap();
        assert_eq!(
            c.model.embed_images(&c.store, &batch.images).unwrap(),
            t.model.embed_images(&t.store, &batch.images).unwrap()
        );
        let mut m: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        m["train"]["margin"] = serde_json::json!(0.5);
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_vec(&m).unwrap(),
        )
        .unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
