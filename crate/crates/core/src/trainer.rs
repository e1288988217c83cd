//! Optimization loop: seeded batching, AdamW with decoupled weight decay,
//! cosine learning-rate decay, global-norm clipping, checkpoints and a
//! per-step metrics log.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Checkpoint, MetricsLog};
use crate::loss::{total_loss_graph, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, EvalReport, THRESHOLDS};
use crate::model::{decode_to_elements, FusionModel, ModelConfig, PreparedScene, ScoredElement};
use crate::nn::{Graph, Gradients, Matrix, ParamStore};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Train each sample on a random non-empty subset of its trips, so
    /// one model sees every trip count.
    pub random_trip_subsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 4,
            total_steps: 2000,
            grad_clip_norm: 10.0,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            random_trip_subsets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidConfig("grad_clip_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * t / T))`, clamped at `t >= T`.
pub fn learning_rate_at(step: usize, config: &TrainConfig) -> f64 {
    if config.total_steps == 0 {
        return config.learning_rate;
    }
    let t = step.min(config.total_steps) as f64 / config.total_steps as f64;
    config.learning_rate * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.zero_grads().grads;
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.grads[i]);
            if param.decay {
                let keep = 1.0 - lr * weight_decay;
                for w in param.value.data.iter_mut() {
                    *w *= keep;
                }
            }
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                param.value.data[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    /// Batch means.
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub scenes: Vec<String>,
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(
    model: &FusionModel,
    scene: &PreparedScene,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(model.params());
    let vars = model.forward_graph(&mut g, &scene.tokens)?;
    let (root, breakdown) = total_loss_graph(&mut g, &vars, &scene.targets, Some(&scene.seg_mask), weights)?;
    Ok((breakdown, g.backward(root)))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut out = LossBreakdown {
        aux: vec![Default::default(); parts.first().map_or(0, |p| p.aux.len())],
        ..Default::default()
    };
    for p in parts {
        out.cls += p.cls / n;
        out.p2p += p.p2p / n;
        out.dir += p.dir / n;
        out.seg += p.seg / n;
        out.total += p.total / n;
        for (a, b) in out.aux.iter_mut().zip(&p.aux) {
            a.cls += b.cls / n;
            a.p2p += b.p2p / n;
            a.dir += b.dir / n;
        }
    }
    out
}

pub struct Trainer {
    model: FusionModel,
    optimizer: AdamW,
    weights: LossWeights,
    config: TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: FusionModel, weights: LossWeights, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        Ok(Self {
            optimizer: AdamW::new(model.params()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            weights,
            config,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &FusionModel {
        &self.model
    }

    pub fn into_model(self) -> FusionModel {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Next batch indices; reshuffles at every epoch boundary.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    fn augment(&mut self, scene: &PreparedScene) -> Option<PreparedScene> {
        if !self.config.random_trip_subsets || scene.trip_count <= 1 {
            return None;
        }
        let k = self.rng.gen_range(1..=scene.trip_count);
        let mut trips: Vec<usize> = (0..scene.trip_count).collect();
        trips.shuffle(&mut self.rng);
        trips.truncate(k);
        trips.sort_unstable();
        Some(scene.with_trips(&trips))
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[PreparedScene]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let batch = self.next_batch(data.len());
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.model.params().zero_grads();
        let mut parts = Vec::with_capacity(batch.len());
        for &i in &batch {
            let augmented = self.augment(&data[i]);
            let scene = augmented.as_ref().unwrap_or(&data[i]);
            let (breakdown, g) = scene_gradients(&self.model, scene, &self.weights)?;
            if !breakdown.total.is_finite() || !g.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!(
                        "scene {} ({} tokens, {} targets): {:?}",
                        scene.scene_id,
                        scene.tokens.len(),
                        scene.targets.len(),
                        breakdown
                    ),
                });
            }
            grads.accumulate(&g, scale);
            parts.push(breakdown);
        }
        let grad_norm = grads.clip_global_norm(self.config.grad_clip_norm);
        let lr = learning_rate_at(self.step, &self.config);
        self.optimizer
            .step(self.model.params_mut(), &grads, lr, self.config.weight_decay);
        let record = StepRecord {
            step: self.step,
            learning_rate: lr,
            loss: mean_breakdown(&parts),
            grad_norm,
            scenes: batch.iter().map(|&i| data[i].scene_id.clone()).collect(),
        };
        self.step += 1;
        Ok(record)
    }
}

/// Decoded predictions for each scene.
pub fn predict(model: &FusionModel, scenes: &[PreparedScene], score_threshold: f64) -> Result<Vec<Vec<ScoredElement>>> {
    scenes
        .iter()
        .map(|s| {
            let out = model.forward_item(&s.tokens)?;
            decode_to_elements(&out, &s.frame, score_threshold, true)
        })
        .collect()
}

pub fn evaluate_model(model: &FusionModel, scenes: &[PreparedScene], score_threshold: f64) -> Result<EvalReport> {
    let predictions = predict(model, scenes, score_threshold)?;
    evaluate_predictions(&predictions, scenes)
}

pub fn evaluate_predictions(predictions: &[Vec<ScoredElement>], scenes: &[PreparedScene]) -> Result<EvalReport> {
    let gts: Vec<_> = scenes.iter().map(|s| s.gt.clone()).collect();
    let windows: Vec<_> = scenes.iter().map(|s| s.frame).collect();
    evaluate(predictions, &gts, &windows, &THRESHOLDS)
}

/// Where a training run leaves its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("model-{step:06}.ckpt"))
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn failure_dump(&self, step: usize) -> PathBuf {
        self.dir.join(format!("nonfinite-{step:06}.json"))
    }
}

#[derive(Debug, Clone, Serialize)]
struct FailureDump<'a> {
    step: usize,
    scenes: Vec<&'a str>,
    detail: String,
}

/// Full run: trains for `total_steps`, logging every step and writing
/// checkpoints into `paths.dir`. Evaluates on `eval_data` every
/// `eval_every` steps when given.
pub fn train(
    model: FusionModel,
    weights: LossWeights,
    config: TrainConfig,
    data: &[PreparedScene],
    eval_data: Option<&[PreparedScene]>,
    paths: &RunPaths,
) -> Result<FusionModel> {
    std::fs::create_dir_all(&paths.dir)?;
    let mut trainer = Trainer::new(model, weights, config)?;
    let mut log = MetricsLog::create(&paths.metrics_log())?;
    let total = trainer.config().total_steps;
    while trainer.step() < total {
        let record = match trainer.train_step(data) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { step, detail }) => {
                let dump = FailureDump {
                    step,
                    scenes: data.iter().map(|s| s.scene_id.as_str()).collect(),
                    detail: detail.clone(),
                };
                io::write_atomic(&paths.failure_dump(step), serde_json::to_string_pretty(&dump)?.as_bytes())?;
                return Err(Error::NonFiniteLoss { step, detail });
            }
            Err(e) => return Err(e),
        };
        log.append(&serde_json::to_value(&record)?)?;
        let done = trainer.step();
        log::debug!("step {} loss {:.4}", record.step, record.loss.total);
        let every = trainer.config().checkpoint_every;
        if every > 0 && done % every == 0 && done < total {
            Checkpoint::from_model(trainer.model(), done).save(&paths.step_checkpoint(done))?;
        }
        let every = trainer.config().eval_every;
        if let (Some(eval), true) = (eval_data, every > 0 && done % every == 0) {
            let report = evaluate_model(trainer.model(), eval, DEFAULT_SCORE_THRESHOLD)?;
            log.append(&serde_json::json!({ "step": done, "eval_map": report.map }))?;
            log::info!("step {done}: mAP {:.4}", report.map);
        }
    }
    let step = trainer.step();
    let model = trainer.into_model();
    Checkpoint::from_model(&model, step).save(&paths.checkpoint())?;
    Ok(model)
}

/// Loads a checkpoint and evaluates it on prepared scenes.
pub fn evaluate_checkpoint(checkpoint: &Path, scenes: &[PreparedScene], score_threshold: f64) -> Result<EvalReport> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    evaluate_model(&model, scenes, score_threshold)
}

/// Re-prepares scenes against a model's own configuration.
pub fn prepare_all(
    scenes: &[crate::geometry::Scene],
    config: &ModelConfig,
    seg_line_width: f64,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| crate::model::prepare_scene(s, config, seg_line_width))
        .collect()
}
