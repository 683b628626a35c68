//! Robustness analyses of a frozen RIN: class-tint shortcut scenarios,
//! Fourier low-pass sweeps of the query set and black-box square attacks.
//!
//! Every sweep draws its episodes through [`task_episode`], so the clean row
//! of any sweep and the rows of different sweeps share identical tasks.

mod attack;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EpisodeSpec, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metatest::{
    accuracy, argmax_rows, evaluate_tables, task_episode, EpisodeHead, EvalConfig, EvalReport,
    Evaluator,
};
use crate::training::CheckpointBundle;
use crate::transforms::{apply_class_tint, fourier_low_pass, max_frequency_radius, TintPalette};

pub use attack::{margin, p_schedule, square_attack, AttackConfig, AttackResult};

/// Which stages of the pipeline see class-tinted images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TintScenario {
    #[serde(rename = "Q")]
    Q,
    #[serde(rename = "S")]
    S,
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "PT+Q")]
    PtQ,
    #[serde(rename = "PT+S")]
    PtS,
}

impl TintScenario {
    pub const ALL: [TintScenario; 5] = [Self::Q, Self::S, Self::Pt, Self::PtQ, Self::PtS];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Q => "Q",
            Self::S => "S",
            Self::Pt => "PT",
            Self::PtQ => "PT+Q",
            Self::PtS => "PT+S",
        }
    }

    pub fn tints_pretraining(self) -> bool {
        matches!(self, Self::Pt | Self::PtQ | Self::PtS)
    }

    pub fn tints_support(self) -> bool {
        matches!(self, Self::S | Self::PtS)
    }

    pub fn tints_query(self) -> bool {
        matches!(self, Self::Q | Self::PtQ)
    }
}

impl std::fmt::Display for TintScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for TintScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tint scenario `{s}`")))
    }
}

/// Copy of `dataset` whose base (train) images carry their class tint.
pub fn tint_pretraining_split(dataset: &Dataset, palette: &TintPalette) -> Result<Dataset> {
    palette.validate()?;
    dataset.map_split(Split::Train, |img| apply_class_tint(&img.image, img.label, palette))
}

/// Where the backbone of PT scenarios comes from.
pub enum PretrainSource<'a> {
    /// A backbone already trained on [`tint_pretraining_split`] data.
    Checkpoint(&'a CheckpointBundle),
    /// Trains one on the tinted dataset it is handed.
    Train(&'a (dyn Fn(&Dataset) -> Result<CheckpointBundle> + Sync)),
}

/// Inputs shared by every tint scenario.
pub struct TintSuite<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    pub spec: EpisodeSpec,
    pub n_tasks: usize,
    pub seed: u64,
    pub palette: TintPalette,
    pub eval: EvalConfig,
}

/// Evaluates `clean` on the untouched data followed by one report per
/// scenario (tagged by scenario). Support and query tints are keyed by the
/// image's original class id, so the cue is consistent within an episode.
pub fn run_tint_scenarios(
    suite: &TintSuite<'_>,
    clean: &CheckpointBundle,
    pretrain: Option<PretrainSource<'_>>,
    scenarios: &[TintScenario],
) -> Result<Vec<EvalReport>> {
    suite.palette.validate()?;
    let needs_pt = scenarios.iter().any(|s| s.tints_pretraining());
    let trained;
    let pt_bundle = match (needs_pt, pretrain) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(
                "PT scenarios need a tinted-pretrained checkpoint or a training function".into(),
            ))
        }
        (true, Some(PretrainSource::Checkpoint(b))) => Some(b),
        (true, Some(PretrainSource::Train(train))) => {
            trained = train(&tint_pretraining_split(suite.dataset, &suite.palette)?)?;
            Some(&trained)
        }
    };

    let split = suite.dataset.split(suite.split);
    let tint = |img: &LabeledImage| apply_class_tint(&img.image, img.label, &suite.palette);
    let tables = |bundle: &CheckpointBundle| -> Result<(Array2<f64>, Array2<f64>)> {
        let ev = Evaluator::from_bundle(bundle, suite.eval);
        Ok((ev.table(split, None)?, ev.table(split, Some(&tint))?))
    };
    let run = |name: &str, support: &Array2<f64>, query: &Array2<f64>| {
        evaluate_tables(
            suite.dataset,
            suite.split,
            &suite.spec,
            suite.n_tasks,
            suite.seed,
            &suite.eval,
            support,
            query,
            name,
        )
    };

    let (clean_plain, clean_tinted) = tables(clean)?;
    let pt_tables = pt_bundle.map(tables).transpose()?;
    let mut reports = vec![run("clean", &clean_plain, &clean_plain)?];
    for &s in scenarios {
        let (plain, tinted) = if s.tints_pretraining() {
            let t = pt_tables.as_ref().expect("checked above");
            (&t.0, &t.1)
        } else {
            (&clean_plain, &clean_tinted)
        };
        let support = if s.tints_support() { tinted } else { plain };
        let query = if s.tints_query() { tinted } else { plain };
        reports.push(run(s.tag(), support, query)?);
    }
    Ok(reports)
}

/// Radii `0, 1, 2, 4, ...` up to and including the radius that keeps
/// every frequency of an `h × w` image.
pub fn default_radii(height: usize, width: usize) -> Vec<f64> {
    let max = max_frequency_radius(height, width);
    let mut radii = vec![0.0];
    let mut r = 1.0;
    while r < max {
        radii.push(r);
        r *= 2.0;
    }
    radii.push(max);
    radii
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub severity: f64,
    pub report: EvalReport,
}

/// Query images low-passed at each radius; support stays clean.
#[allow(clippy::too_many_arguments)]
pub fn fourier_sweep(
    evaluator: &Evaluator<'_>,
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    radii: &[f64],
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if let Some(r) = radii.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::Parameter(format!("radius {r} must be non-negative")));
    }
    let data = dataset.split(split);
    let support = evaluator.table(data, None)?;
    radii
        .iter()
        .map(|&radius| {
            let filter = |img: &LabeledImage| fourier_low_pass(&img.image, radius);
            let query = evaluator.table(data, Some(&filter))?;
            let report = evaluate_tables(
                dataset,
                split,
                spec,
                n_tasks,
                seed,
                &evaluator.config,
                &support,
                &query,
                "fourier",
            )?;
            Ok(SweepPoint { severity: radius, report })
        })
        .collect()
}

/// Adversarial query accuracy at each budget. The black box is the frozen
/// backbone composed with the episode's fitted head; support stays clean.
/// Queries the attack leaves untouched keep their clean features, so
/// `epsilon = 0` reproduces clean accuracy exactly.
#[allow(clippy::too_many_arguments)]
pub fn attack_sweep(
    evaluator: &Evaluator<'_>,
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    epsilons: &[f32],
    n_tasks: usize,
    seed: u64,
    attack: &AttackConfig,
) -> Result<Vec<SweepPoint>> {
    for &eps in epsilons {
        AttackConfig { epsilon: eps, ..*attack }.validate()?;
    }
    let data = dataset.split(split);
    let clean = evaluator.table(data, None)?;
    let config = evaluator.config;
    epsilons
        .iter()
        .map(|&eps| {
            let accs = (0..n_tasks)
                .into_par_iter()
                .map(|t| {
                    let ep = task_episode(dataset, split, spec, seed, t)?;
                    let support = clean.select(Axis(0), &ep.support_index);
                    let head = EpisodeHead::fit(&config, support.view(), &ep.support_labels, ep.n_way())?;
                    let black_box = |imgs: &[&Image]| -> Result<Array2<f64>> {
                        Ok(head.scores(evaluator.extract(imgs)?.view()))
                    };
                    let originals: Vec<Image> =
                        ep.query_index.iter().map(|&i| data.images()[i].image.clone()).collect();
                    let cfg = AttackConfig {
                        epsilon: eps,
                        seed: crate::rng::derive_seed(attack.seed, &[t as u64]),
                        ..*attack
                    };
                    let result = square_attack(&black_box, &originals, &ep.query_labels, &cfg)?;
                    let mut feats = clean.select(Axis(0), &ep.query_index);
                    let changed: Vec<usize> = (0..originals.len())
                        .filter(|&i| result.adversarial[i] != originals[i])
                        .collect();
                    if !changed.is_empty() {
                        let imgs: Vec<&Image> = changed.iter().map(|&i| &result.adversarial[i]).collect();
                        let adv = evaluator.extract(&imgs)?;
                        for (row, &i) in changed.iter().enumerate() {
                            feats.row_mut(i).assign(&adv.row(row));
                        }
                    }
                    let pred = argmax_rows(&head.scores(feats.view()));
                    Ok(accuracy(&pred, &ep.query_labels))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint {
                severity: f64::from(eps),
                report: EvalReport::from_accuracies("square_attack", spec, seed, accs),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    scenario: &'a str,
    severity: f64,
    mean_acc: f64,
    std: f64,
    seed: u64,
}

/// Consolidated `scenario,severity,mean_acc,std,seed` table.
pub fn write_sweep_csv(points: &[SweepPoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(CsvRow {
            scenario: &p.report.scenario,
            severity: p.severity,
            mean_acc: p.report.mean_acc,
            std: p.report.std,
            seed: p.report.seed,
        })
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    write_sweep_csv(points, std::fs::File::create(path)?)
}

/// Tint reports as sweep points, severity = palette strength.
pub fn tint_points(reports: &[EvalReport], palette: &TintPalette) -> Vec<SweepPoint> {
    reports
        .iter()
        .map(|r| SweepPoint {
            severity: f64::from(palette.strength),
            report: r.clone(),
        })
        .collect()
}
