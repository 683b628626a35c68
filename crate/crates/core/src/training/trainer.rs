use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use ndarray::{Array2, ArrayView4};
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointBundle, CheckpointManifest};
use super::pipeline::{BatchPipeline, PreparedBatch};
use super::sgd::Sgd;
use super::{Algorithm, TeacherInit, TrainConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, joint_objective, sequential_distill_loss, DualGrads, LossBreakdown,
    LossWeights, Objective, StepOutputs,
};
use crate::nn::{ema_update, init_dual, Network, NetworkRole, Param, Real};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Line-delimited JSON metrics; truncated on a fresh run, appended on resume.
    pub metrics_path: Option<PathBuf>,
    /// Write a metrics line every this many steps (0 or 1: every step).
    pub log_every: usize,
    /// Stop once this many epochs are complete (for checkpoint/resume).
    pub stop_after_epoch: Option<usize>,
    /// Where to save the final bundle.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: CheckpointBundle,
    pub steps: Vec<StepRecord>,
    /// Mean loss breakdown of each epoch run in this call.
    pub epoch_means: Vec<LossBreakdown>,
    /// Learning rate of each epoch run in this call.
    pub epoch_lrs: Vec<f64>,
}

/// Runs `net.backward` with zeros standing in for stopped gradients, so a
/// network whose outputs receive no gradient still gets an (all-zero)
/// backward pass.
fn backward_routed<F: Real>(net: &mut Network<F>, feat: Option<&Array2<F>>, logits: Option<&Array2<F>>, n: usize) {
    match logits {
        Some(l) => net.backward(feat, Some(l)),
        None => {
            let zeros = Array2::zeros((n, net.n_classes()));
            net.backward(feat, Some(&zeros));
        }
    }
}

/// Backpropagates routed gradients into both networks.
pub fn backward_dual<F: Real>(rin: &mut Network<F>, sin: &mut Network<F>, grads: &DualGrads<F>, n: usize) {
    backward_routed(rin, grads.feat_rin.as_ref(), grads.logits_rin.as_ref(), n);
    backward_routed(sin, grads.feat_sin.as_ref(), grads.logits_sin.as_ref(), n);
}

/// Zeroes gradients, runs both networks in train mode, assembles the joint
/// objective (plus the teacher term when a teacher is given) and
/// accumulates every parameter gradient.
#[allow(clippy::too_many_arguments)]
pub fn dual_gradients<F: Real>(
    rin: &mut Network<F>,
    sin: &mut Network<F>,
    teacher: Option<&Network<F>>,
    rgb: ArrayView4<F>,
    shape: ArrayView4<F>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    rin.zero_grad();
    sin.zero_grad();
    let (z_rin, logits_rin) = rin.forward_train(rgb)?;
    let (z_sin, logits_sin) = sin.forward_train(shape)?;
    let teacher_logits = teacher.map(|t| t.forward_logits(rgb)).transpose()?;
    let out = StepOutputs {
        z_rin: &z_rin,
        logits_rin: &logits_rin,
        z_sin: &z_sin,
        logits_sin: &logits_sin,
        teacher_logits: teacher_logits.as_ref(),
        labels,
    };
    let objective = if teacher.is_some() {
        Objective::Online
    } else {
        Objective::Joint
    };
    let (losses, grads) = joint_objective(&out, weights, objective)?;
    if losses.is_finite() {
        backward_dual(rin, sin, &grads, labels.len());
    }
    Ok(losses)
}

struct Nets {
    rin: Network<f32>,
    sin: Option<Network<f32>>,
    teacher: Option<Network<f32>>,
}

struct Progress {
    epoch: usize,
    step: usize,
    optimizer: Option<Vec<f32>>,
}

fn all_params<'a>(rin: &'a mut Network<f32>, sin: Option<&'a mut Network<f32>>) -> Vec<&'a mut Param<f32>> {
    let mut params = rin.params_mut();
    if let Some(s) = sin {
        params.extend(s.params_mut());
    }
    params
}

fn non_finite(pipe: &BatchPipeline, batch: &PreparedBatch, losses: &LossBreakdown, epoch: usize, step: usize) -> Error {
    let snapshot = serde_json::json!({
        "image_ids": pipe.image_ids(&batch.indices),
        "losses": losses,
    });
    Error::NonFinite {
        epoch,
        step,
        snapshot: snapshot.to_string(),
    }
}

fn train_loop(
    dataset: &Dataset,
    config: &TrainConfig,
    mut nets: Nets,
    frozen_teacher: Option<&Network<f32>>,
    progress: Progress,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let algorithm = config.algorithm;
    let pipe = BatchPipeline::new(dataset.split(Split::Train), config, algorithm.is_dual())?;
    if pipe.n_classes != nets.rin.n_classes() {
        return Err(Error::Config(format!(
            "train split has {} classes, network head has {}",
            pipe.n_classes,
            nets.rin.n_classes()
        )));
    }
    let mut opt = Sgd::<f32>::new(config.momentum, config.weight_decay);
    if let Some(state) = &progress.optimizer {
        let mut params: Vec<&Param<f32>> = nets.rin.params();
        if let Some(s) = &nets.sin {
            params.extend(s.params());
        }
        opt.load_flat_state(&params, state)?;
    }

    let mut metrics = match &opts.metrics_path {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(progress.epoch > 0)
                .truncate(progress.epoch == 0)
                .open(path)?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let log_every = opts.log_every.max(1);
    let last_epoch = opts
        .stop_after_epoch
        .map_or(config.epochs, |s| s.min(config.epochs));

    let mut step = progress.step;
    let mut steps = Vec::new();
    let mut epoch_means = Vec::new();
    let mut epoch_lrs = Vec::new();
    let mut epoch = progress.epoch;
    while epoch < last_epoch {
        let lr = config.lr_at(epoch);
        let order = pipe.epoch_order(epoch);
        let mut this_epoch = Vec::with_capacity(pipe.n_batches());
        for b in 0..pipe.n_batches() {
            let batch = pipe.batch(epoch, b, &order)?;
            let losses = match algorithm {
                Algorithm::Lsfsl | Algorithm::Online => {
                    let sin = nets.sin.as_mut().expect("dual run has a SIN");
                    let shape = batch.shape.as_ref().expect("dual pipeline");
                    let teacher = if algorithm == Algorithm::Online {
                        nets.teacher.as_ref()
                    } else {
                        None
                    };
                    dual_gradients(
                        &mut nets.rin,
                        sin,
                        teacher,
                        batch.rgb.view(),
                        shape.view(),
                        &batch.labels,
                        &config.loss_weights,
                    )?
                }
                Algorithm::Baseline => {
                    nets.rin.zero_grad();
                    let (_, logits) = nets.rin.forward_train(batch.rgb.view())?;
                    let (ce, g) = cross_entropy(&logits, &batch.labels)?;
                    let ce = f64::from(ce);
                    if ce.is_finite() {
                        nets.rin.backward(None, Some(&g));
                    }
                    LossBreakdown {
                        ce_rin: ce,
                        total: ce,
                        ..Default::default()
                    }
                }
                Algorithm::Distill => {
                    let teacher = frozen_teacher.expect("distillation has a teacher");
                    let t_logits = teacher.forward_logits(batch.rgb.view())?;
                    nets.rin.zero_grad();
                    let (_, logits) = nets.rin.forward_train(batch.rgb.view())?;
                    let w = &config.loss_weights;
                    let (total, (ce, kl), g) =
                        sequential_distill_loss(&logits, &t_logits, &batch.labels, w.alpha, w.beta)?;
                    if total.is_finite() {
                        nets.rin.backward(None, Some(&g));
                    }
                    LossBreakdown {
                        ce_rin: f64::from(ce),
                        ts: f64::from(kl),
                        total: f64::from(total),
                        ..Default::default()
                    }
                }
            };
            if !losses.is_finite() {
                return Err(non_finite(&pipe, &batch, &losses, epoch, step));
            }
            opt.step(all_params(&mut nets.rin, nets.sin.as_mut()), lr)?;
            if algorithm == Algorithm::Online {
                let teacher = nets.teacher.as_mut().expect("online run has a teacher");
                ema_update(teacher, &nets.rin, config.ema_momentum)?;
            }
            step += 1;
            let record = StepRecord {
                step,
                epoch,
                lr,
                losses,
            };
            if let Some(w) = metrics.as_mut() {
                if step % log_every == 0 {
                    serde_json::to_writer(&mut *w, &record)?;
                    w.write_all(b"\n")?;
                }
            }
            this_epoch.push(losses);
            steps.push(record);
        }
        epoch_means.push(LossBreakdown::mean(&this_epoch));
        epoch_lrs.push(lr);
        epoch += 1;
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }

    let bundle = CheckpointBundle {
        manifest: CheckpointManifest {
            format: 1,
            architecture: config.architecture,
            input_size: config.augment.crop_size,
            feature_dim: config.feature_dim,
            n_base_classes: pipe.n_classes,
            algorithm,
            config_hash: config.hash(),
            epoch,
            step,
            seed: config.seed,
            init_seed: nets.rin.config().init_seed,
            dtype: f32::DTYPE.to_string(),
            rgb_stats: pipe.rgb_stats,
            shape_stats: pipe.shape_stats,
            files: BTreeMap::new(),
        },
        rin: nets.rin,
        sin: nets.sin,
        teacher: nets.teacher,
        optimizer: Some(opt.flat_state()),
    };
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&bundle, dir)?;
    }
    Ok(TrainOutcome {
        bundle,
        steps,
        epoch_means,
        epoch_lrs,
    })
}

fn expect_algorithm(config: &TrainConfig, allowed: &[Algorithm]) -> Result<()> {
    config.validate()?;
    if !allowed.contains(&config.algorithm) {
        return Err(Error::Config(format!(
            "algorithm: {} is not valid here (expected one of {:?})",
            config.algorithm.name(),
            allowed.iter().map(|a| a.name()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn n_base(dataset: &Dataset) -> usize {
    dataset.split(Split::Train).classes().count()
}

const FRESH: Progress = Progress {
    epoch: 0,
    step: 0,
    optimizer: None,
};

fn fresh_dual(dataset: &Dataset, config: &TrainConfig) -> Result<Nets> {
    let dual = init_dual::<f32>(&config.backbone(config.seed), n_base(dataset), config.seed)?;
    let teacher = match (config.algorithm, config.teacher_init) {
        (Algorithm::Online, TeacherInit::CopyOfRin) => Some(dual.rin.clone()),
        (Algorithm::Online, TeacherInit::Random) => Some(Network::new(
            &config.backbone(config.seed),
            n_base(dataset),
            NetworkRole::Teacher,
        )?),
        _ => None,
    };
    Ok(Nets {
        rin: dual.rin,
        sin: Some(dual.sin),
        teacher,
    })
}

/// Joint RIN/SIN training; returns both networks.
pub fn pretrain_lsfsl(dataset: &Dataset, config: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    expect_algorithm(config, &[Algorithm::Lsfsl])?;
    train_loop(dataset, config, fresh_dual(dataset, config)?, None, FRESH, opts)
}

/// Joint training plus the EMA-teacher term.
pub fn pretrain_online_distill(dataset: &Dataset, config: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    expect_algorithm(config, &[Algorithm::Online])?;
    train_loop(dataset, config, fresh_dual(dataset, config)?, None, FRESH, opts)
}

/// A lone RIN with cross-entropy. With the same seed its initialization and
/// batches equal the RIN of a joint run.
pub fn pretrain_baseline(dataset: &Dataset, config: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    expect_algorithm(config, &[Algorithm::Baseline])?;
    let rin = Network::new(&config.backbone(config.seed), n_base(dataset), NetworkRole::Rin)?;
    let nets = Nets {
        rin,
        sin: None,
        teacher: None,
    };
    train_loop(dataset, config, nets, None, FRESH, opts)
}

/// Trains a fresh student RIN against a frozen teacher RIN. `student`
/// overrides the student's initialization.
pub fn distill_sequential(
    teacher: &CheckpointBundle,
    dataset: &Dataset,
    config: &TrainConfig,
    student: Option<Network<f32>>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    expect_algorithm(config, &[Algorithm::Distill])?;
    teacher.manifest.check_compatible(config)?;
    let rin = match student {
        Some(s) => s,
        None => Network::new(&config.backbone(config.seed), n_base(dataset), NetworkRole::Student)?,
    };
    if !rin.same_shape(&teacher.rin) {
        return Err(Error::Config("student and teacher architectures differ".into()));
    }
    let nets = Nets {
        rin,
        sin: None,
        teacher: None,
    };
    train_loop(dataset, config, nets, Some(&teacher.rin), FRESH, opts)
}

/// Dispatches on `config.algorithm`; distillation needs `teacher`.
pub fn pretrain(
    dataset: &Dataset,
    config: &TrainConfig,
    teacher: Option<&CheckpointBundle>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    match config.algorithm {
        Algorithm::Lsfsl => pretrain_lsfsl(dataset, config, opts),
        Algorithm::Online => pretrain_online_distill(dataset, config, opts),
        Algorithm::Baseline => pretrain_baseline(dataset, config, opts),
        Algorithm::Distill => {
            let t = teacher.ok_or_else(|| Error::Config("distill: a teacher checkpoint is required".into()))?;
            distill_sequential(t, dataset, config, None, opts)
        }
    }
}

/// Continues a run from a checkpoint written under the same config.
pub fn resume(
    bundle: CheckpointBundle,
    dataset: &Dataset,
    config: &TrainConfig,
    teacher: Option<&CheckpointBundle>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let m = &bundle.manifest;
    if m.config_hash != config.hash() {
        return Err(Error::load("config_hash", "checkpoint was written under a different config"));
    }
    if m.algorithm != config.algorithm {
        return Err(Error::load("algorithm", format!("checkpoint {}", m.algorithm.name())));
    }
    m.check_compatible(config)?;
    let progress = Progress {
        epoch: m.epoch,
        step: m.step,
        optimizer: bundle.optimizer,
    };
    let frozen = match config.algorithm {
        Algorithm::Distill => Some(
            &teacher
                .ok_or_else(|| Error::Config("distill: a teacher checkpoint is required".into()))?
                .rin,
        ),
        _ => None,
    };
    let nets = Nets {
        rin: bundle.rin,
        sin: bundle.sin,
        teacher: bundle.teacher,
    };
    train_loop(dataset, config, nets, frozen, progress, opts)
}
