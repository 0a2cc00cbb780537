//! Three-stage training schedule, losses, logging and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{forward_graph, offset_graph, CompletionTrace, Model, ModelConfig};
use crate::data::manifest::{Manifest, SampleEntry, Split};
use crate::data::mix_seed;
use crate::data::pair::SamplePair;
use crate::error::{Error, Result};
use crate::geometry::{build_rays, Point3, PointCloud};
use crate::metrics::{chamfer, evaluate, EvalOptions, SampleReport};
use crate::net::adam::Adam;
use crate::net::checkpoint::{Checkpoint, NamedParams};
use crate::net::params::{clip_global_norm, Gradient};
use crate::net::tape::Tape;
use crate::spatial::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Offset predictor and adjustment only.
    OffsetPretrain,
    /// Refinement with the offset modules frozen.
    RefinePretrain,
    /// Everything, with the refinement loss.
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::OffsetPretrain, Stage::RefinePretrain, Stage::Joint];

    pub fn number(self) -> u8 {
        match self {
            Stage::OffsetPretrain => 1,
            Stage::RefinePretrain => 2,
            Stage::Joint => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| Error::InvalidArgument(format!("no training stage {n}")))
    }

    /// Name used in logs and checkpoint file names.
    pub fn tag(self) -> &'static str {
        match self {
            Stage::OffsetPretrain => "stage1",
            Stage::RefinePretrain => "stage2",
            Stage::Joint => "stage3",
        }
    }

    fn trains_predictor(self) -> bool {
        self != Stage::RefinePretrain
    }

    fn trains_refiner(self) -> bool {
        self != Stage::OffsetPretrain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Standard deviation of the per-axis camera perturbation.
    pub cam_noise: f64,
    /// Evaluate per-sample gradients on the rayon pool.
    pub parallel: bool,
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::OffsetPretrain,
            lr: 1e-3,
            steps: 2000,
            batch: 8,
            seed: 0,
            clip_norm: 1.0,
            cam_noise: 0.0,
            parallel: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.cam_noise >= 0.0) {
            return Err(Error::InvalidArgument("camera noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate for `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// A sample prepared for training: ground-truth tiers indexed once.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub partial: PointCloud,
    pub cam: Point3,
    pub gt1: SpatialIndex,
    pub gt2: SpatialIndex,
    pub gt3: SpatialIndex,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, pair: &SamplePair) -> Self {
        Self {
            id: id.into(),
            partial: pair.partial.clone(),
            cam: pair.cam,
            gt1: SpatialIndex::build(&pair.gt1),
            gt2: SpatialIndex::build(&pair.gt2),
            gt3: SpatialIndex::build(&pair.gt3),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
}

impl Dataset {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (String, &'a SamplePair)>) -> Self {
        Self {
            samples: pairs.into_iter().map(|(id, p)| TrainSample::new(id, p)).collect(),
        }
    }

    /// Loads one split of a generated dataset.
    pub fn load(root: &Path, manifest: &Manifest, split: Split) -> Result<Self> {
        let entries: Vec<&SampleEntry> = manifest.split(split).collect();
        let samples = entries
            .par_iter()
            .map(|e| Ok(TrainSample::new(e.sample_id.clone(), &e.load(root)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sum of the two Chamfer terms supervising the offset stage.
pub fn loss_stage1(trace: &CompletionTrace, gt1: &PointCloud) -> Result<f64> {
    Ok(chamfer(&trace.p_first, gt1)? + chamfer(&trace.p_initial, gt1)?)
}

/// Sum of the two Chamfer terms supervising refinement.
pub fn loss_stage2(trace: &CompletionTrace, gt2: &PointCloud, gt3: &PointCloud) -> Result<f64> {
    Ok(chamfer(&trace.p_mid, gt2)? + chamfer(&trace.p_final, gt3)?)
}

/// Camera actually used for `sample` at `step`: the recorded one, moved by
/// Gaussian noise when `sigma > 0`.
pub fn noisy_camera(cam: Point3, sigma: f64, seed: u64) -> Point3 {
    if sigma == 0.0 {
        return cam;
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cam + Point3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
}

/// Loss and gradients of one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub predictor: Option<Gradient>,
    pub refiner: Option<Gradient>,
}

/// Records the stage's forward pass and differentiates its loss.
pub fn sample_gradient(model: &Model, sample: &TrainSample, stage: Stage, cam: Point3) -> Result<SampleGrad> {
    let rays = build_rays(cam, &sample.partial)?;
    let mut t = Tape::new();
    let pb = t.bind(model.predictor.to_f64(), &model.predictor.layout, stage.trains_predictor());
    let loss = if stage == Stage::OffsetPretrain {
        let nodes = offset_graph(&mut t, pb, &model.config, &rays)?;
        let (a, _) = t.chamfer(nodes.p_first, &sample.gt1)?;
        let (b, _) = t.chamfer(nodes.p_initial, &sample.gt1)?;
        t.add(a, b)?
    } else {
        let rb = t.bind(model.refiner.to_f64(), &model.refiner.layout, stage.trains_refiner());
        let nodes = forward_graph(&mut t, pb, rb, &model.config, &rays)?;
        let layers = &nodes.refine.layers;
        let (a, _) = t.chamfer(layers[0], &sample.gt2)?;
        let (b, _) = t.chamfer(*layers.last().expect("refinement layers"), &sample.gt3)?;
        t.add(a, b)?
    };
    let value = t.value(loss).data()[0];
    let mut grads = t.backward(loss)?.into_iter();
    let predictor = grads.next().flatten();
    let refiner = grads.next().flatten();
    Ok(SampleGrad {
        loss: value,
        predictor,
        refiner,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
}

/// Optimizer state and progress within one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Steps already taken in this stage.
    pub step: u64,
    pub predictor_opt: Adam,
    pub refiner_opt: Adam,
}

impl TrainState {
    pub fn fresh(stage: Stage, model: &Model) -> Self {
        Self {
            stage,
            step: 0,
            predictor_opt: Adam::new(model.predictor.len()),
            refiner_opt: Adam::new(model.refiner.len()),
        }
    }
}

/// Dataset positions of the batch at `step`; every epoch visits the
/// samples in a fresh seeded permutation.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let k = step * batch as u64 + j;
            let epoch = k / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[(k % n as u64) as usize]
        })
        .collect()
}

/// Where and how often checkpoints go.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub every: Option<u64>,
}

pub fn checkpoint_name(stage: Stage, step: u64) -> String {
    format!("{}_{step}.ckpt", stage.tag())
}

/// Runs `config.steps - state.step` optimizer steps of `config.stage`.
/// Each log record is handed to `log` as it is produced.
pub fn run_stage(
    config: &TrainConfig,
    model: &mut Model,
    data: &Dataset,
    state: &mut TrainState,
    sink: Option<&CheckpointSink>,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    if state.stage != config.stage {
        return Err(Error::InvalidArgument("training state belongs to another stage".into()));
    }
    let stage = config.stage;
    while state.step < config.steps {
        let step = state.step;
        let ids = batch_indices(config.seed, step, config.batch, data.len());
        let eval = |(j, &i): (usize, &usize)| {
            let s = &data.samples[i];
            let cam = noisy_camera(s.cam, config.cam_noise, mix_seed(config.seed ^ 0xCA3, step * 4096 + j as u64));
            sample_gradient(model, s, stage, cam)
        };
        let results: Vec<SampleGrad> = if config.parallel {
            ids.par_iter().enumerate().map(eval).collect::<Result<_>>()?
        } else {
            ids.iter().enumerate().map(eval).collect::<Result<_>>()?
        };

        let inv = 1.0 / results.len() as f64;
        let mut loss = 0.0;
        let mut gp = stage.trains_predictor().then(|| Gradient::zeros(model.predictor.len()));
        let mut gr = stage.trains_refiner().then(|| Gradient::zeros(model.refiner.len()));
        for r in &results {
            loss += r.loss;
            if let (Some(acc), Some(g)) = (gp.as_mut(), r.predictor.as_ref()) {
                acc.add_assign(g);
            }
            if let (Some(acc), Some(g)) = (gr.as_mut(), r.refiner.as_ref()) {
                acc.add_assign(g);
            }
        }
        loss *= inv;
        let mut live: Vec<&mut Gradient> = gp.iter_mut().chain(gr.iter_mut()).collect();
        for g in live.iter_mut() {
            g.scale(inv);
        }
        clip_global_norm(&mut live, config.clip_norm);
        if live.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite gradient at step {step}")));
        }

        let lr = config.lr_at(step);
        if let Some(g) = &gp {
            state.predictor_opt.step(&mut model.predictor, g, lr)?;
        }
        if let Some(g) = &gr {
            state.refiner_opt.step(&mut model.refiner, g, lr)?;
        }
        state.step += 1;
        log(&LogRecord {
            step,
            stage: stage.number(),
            loss,
            lr,
        })?;
        if let Some(s) = sink {
            let due = s.every.is_some_and(|e| e > 0 && state.step.is_multiple_of(e));
            if due || state.step == config.steps {
                save_checkpoint(&s.dir.join(checkpoint_name(stage, state.step)), model, state, config.seed)?;
            }
        }
    }
    Ok(())
}

pub const PREDICTOR_BLOCK: &str = "predictor";
pub const REFINER_BLOCK: &str = "refiner";

/// Writes parameters, model configuration and optimizer state.
pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState, seed: u64) -> Result<()> {
    Checkpoint {
        step: state.step,
        stage: state.stage.tag().to_string(),
        rng_seed: seed,
        config: serde_json::to_value(&model.config)?,
        blocks: vec![
            NamedParams {
                name: PREDICTOR_BLOCK.into(),
                params: model.predictor.clone(),
            },
            NamedParams {
                name: REFINER_BLOCK.into(),
                params: model.refiner.clone(),
            },
        ],
        optimizer: Some(vec![state.predictor_opt.clone(), state.refiner_opt.clone()]),
    }
    .save(path)
}

/// Restores a model and, when present, the optimizer state it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TrainState>)> {
    let ckpt = Checkpoint::load(path)?;
    let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
    let get = |name: &str| {
        ckpt.get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing block '{name}'")))
    };
    let model = Model::from_params(config, get(PREDICTOR_BLOCK)?, get(REFINER_BLOCK)?)?;
    let stage = Stage::ALL
        .into_iter()
        .find(|s| s.tag() == ckpt.stage)
        .ok_or_else(|| Error::Checkpoint(format!("unknown stage '{}'", ckpt.stage)))?;
    let state = ckpt.optimizer.map(|mut opt| {
        let refiner_opt = opt.pop().expect("two blocks");
        let predictor_opt = opt.pop().expect("two blocks");
        TrainState {
            stage,
            step: ckpt.step,
            predictor_opt,
            refiner_opt,
        }
    });
    Ok((model, state))
}

/// Metrics of the model's final completion against `gt3` for every sample.
pub fn evaluate_model(
    model: &Model,
    pairs: &[(String, String, SamplePair)],
    opts: &EvalOptions,
    cam_noise: f64,
    seed: u64,
) -> Result<Vec<SampleReport>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(k, (id, category, pair))| {
            let cam = noisy_camera(pair.cam, cam_noise, mix_seed(seed ^ 0xE7A1, k as u64));
            let trace = model.complete(&pair.partial, cam)?;
            Ok(SampleReport {
                sample_id: id.clone(),
                category: category.clone(),
                metrics: evaluate(&trace.p_final, &pair.gt3, &pair.partial, opts)?,
            })
        })
        .collect()
}
