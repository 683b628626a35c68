//! Episodic evaluation of a frozen RIN: per-episode logistic-regression or
//! nearest-prototype classifiers over backbone features.

mod heads;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, Episode, EpisodeSpec, LabeledImage, Split, SplitData};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{stack_images, Network};
use crate::training::{eval_tensor, CheckpointBundle};
use crate::transforms::ChannelStats;

pub use heads::{argmax_rows, fit_linear_head, prototype_classify, prototypes, LinearHead};

const EXTRACT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    #[default]
    Linear,
    Prototype,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub classifier: Classifier,
    /// Inverse regularization strength of the logistic head.
    pub reg: f64,
    /// L2-normalize features before the logistic head.
    pub normalize_linear: bool,
    /// L2-normalize features before prototype matching.
    pub normalize_prototype: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classifier: Classifier::Linear,
            reg: 1.0,
            normalize_linear: true,
            normalize_prototype: false,
        }
    }
}

impl EvalConfig {
    pub fn with_classifier(self, classifier: Classifier) -> Self {
        Self { classifier, ..self }
    }

    fn normalizes(&self) -> bool {
        match self.classifier {
            Classifier::Linear => self.normalize_linear,
            Classifier::Prototype => self.normalize_prototype,
        }
    }
}

/// Divides each nonzero row by its L2 norm; zero rows stay zero.
pub fn l2_normalize_rows(mut features: Array2<f64>) -> Array2<f64> {
    for mut row in features.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    features
}

/// A fitted per-episode classifier, usable as a black box on new queries.
#[derive(Debug, Clone)]
pub enum EpisodeHead {
    Linear { head: LinearHead, normalize: bool },
    Prototype { protos: Array2<f64>, normalize: bool },
}

impl EpisodeHead {
    pub fn fit(config: &EvalConfig, support: ArrayView2<f64>, labels: &[usize], n_way: usize) -> Result<Self> {
        let normalize = config.normalizes();
        let feats = if normalize {
            l2_normalize_rows(support.to_owned())
        } else {
            support.to_owned()
        };
        Ok(match config.classifier {
            Classifier::Linear => EpisodeHead::Linear {
                head: fit_linear_head(feats.view(), labels, n_way, config.reg)?,
                normalize,
            },
            Classifier::Prototype => EpisodeHead::Prototype {
                protos: prototypes(feats.view(), labels, n_way)?,
                normalize,
            },
        })
    }

    /// Class scores: logits, or negative squared distances to prototypes.
    pub fn scores(&self, query: ArrayView2<f64>) -> Array2<f64> {
        match self {
            EpisodeHead::Linear { head, normalize } => {
                if *normalize {
                    head.logits(l2_normalize_rows(query.to_owned()).view())
                } else {
                    head.logits(query)
                }
            }
            EpisodeHead::Prototype { protos, normalize } => {
                let q = if *normalize {
                    l2_normalize_rows(query.to_owned())
                } else {
                    query.to_owned()
                };
                Array2::from_shape_fn((q.nrows(), protos.nrows()), |(i, c)| {
                    -q.row(i)
                        .iter()
                        .zip(protos.row(c))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
            }
        }
    }

    pub fn predict(&self, query: ArrayView2<f64>) -> Vec<usize> {
        argmax_rows(&self.scores(query))
    }
}

/// The frozen RIN plus the preprocessing it was trained with. Only RIN is
/// ever consulted at meta-test time.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub net: &'a Network<f32>,
    pub rgb_stats: ChannelStats,
    pub crop: usize,
    pub config: EvalConfig,
}

impl<'a> Evaluator<'a> {
    pub fn new(net: &'a Network<f32>, rgb_stats: ChannelStats, config: EvalConfig) -> Self {
        Self {
            net,
            rgb_stats,
            crop: net.config().input_size,
            config,
        }
    }

    pub fn from_bundle(bundle: &'a CheckpointBundle, config: EvalConfig) -> Self {
        Self::new(&bundle.rin, bundle.manifest.rgb_stats, config)
    }

    pub fn with_config(self, config: EvalConfig) -> Self {
        Self { config, ..self }
    }

    /// Raw (unnormalized) backbone features, one row per image.
    pub fn extract(&self, images: &[&Image]) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EXTRACT_CHUNK) {
            let tensors = chunk
                .iter()
                .map(|img| eval_tensor(img, &self.rgb_stats, self.crop))
                .collect::<Result<Vec<_>>>()?;
            let batch = stack_images::<f32>(&tensors);
            rows.push(self.net.forward_features(batch.view())?.mapv(f64::from));
        }
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.net.feature_dim())));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
    }

    /// Features of every image of a split after an optional per-image
    /// transform; rows follow the split's image order.
    pub fn table(
        &self,
        split: &SplitData,
        transform: Option<&(dyn Fn(&LabeledImage) -> Result<Image> + Sync)>,
    ) -> Result<Array2<f64>> {
        let transformed: Vec<Image>;
        let images: Vec<&Image> = match transform {
            Some(f) => {
                transformed = split.images().par_iter().map(f).collect::<Result<_>>()?;
                transformed.iter().collect()
            }
            None => split.images().iter().map(|i| &i.image).collect(),
        };
        self.extract(&images)
    }
}

/// L2-normalized features of `images` through `evaluator`'s backbone.
pub fn extract_features(evaluator: &Evaluator<'_>, images: &[&Image]) -> Result<Array2<f64>> {
    Ok(l2_normalize_rows(evaluator.extract(images)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_tasks: usize,
    pub mean_acc: f64,
    pub std: f64,
    pub seed: u64,
    #[serde(skip)]
    pub task_accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(scenario: &str, spec: &EpisodeSpec, seed: u64, accs: Vec<f64>) -> Self {
        let n = accs.len().max(1) as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Self {
            scenario: scenario.to_string(),
            n_way: spec.n_way,
            k_shot: spec.k_shot,
            n_tasks: accs.len(),
            mean_acc: mean,
            std: var.sqrt(),
            seed,
            task_accuracies: accs,
        }
    }

    /// Half-width of the normal 95% interval of the mean.
    pub fn ci95(&self) -> f64 {
        1.96 * self.std / (self.n_tasks.max(1) as f64).sqrt()
    }
}

/// The episode drawn for task `task` under evaluation seed `seed`. Shared by
/// every evaluation so that sweeps compare identical tasks.
pub fn task_episode(dataset: &Dataset, split: Split, spec: &EpisodeSpec, seed: u64, task: usize) -> Result<Episode> {
    let spec = spec.with_seed(seed.wrapping_add(task as u64));
    sample_episode(dataset, split, &spec).map_err(|e| match e {
        Error::Sampling(m) => Error::Sampling(format!("task {task}: {m}")),
        other => other,
    })
}

fn rows(table: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    table.select(Axis(0), idx)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Evaluates `n_tasks` episodes whose support features come from
/// `support_table` and query features from `query_table` (rows indexed by
/// split position).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_tables(
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    n_tasks: usize,
    seed: u64,
    config: &EvalConfig,
    support_table: &Array2<f64>,
    query_table: &Array2<f64>,
    scenario: &str,
) -> Result<EvalReport> {
    spec.validate()?;
    let accs = (0..n_tasks)
        .into_par_iter()
        .map(|t| {
            let ep = task_episode(dataset, split, spec, seed, t)?;
            let head = EpisodeHead::fit(config, rows(support_table, &ep.support_index).view(), &ep.support_labels, ep.n_way())?;
            let pred = head.predict(rows(query_table, &ep.query_index).view());
            Ok(accuracy(&pred, &ep.query_labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(scenario, spec, seed, accs))
}

/// Clean episodic accuracy of a frozen backbone.
pub fn evaluate_episodes(
    evaluator: &Evaluator<'_>,
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    n_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    let table = evaluator.table(dataset.split(split), None)?;
    evaluate_tables(dataset, split, spec, n_tasks, seed, &evaluator.config, &table, &table, "clean")
}
