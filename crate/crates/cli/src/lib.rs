//! Subcommand implementations behind the `shapefsl` binary. Every command
//! takes a resolved [`RunConfig`] and an output directory, writes
//! `resolved_config.json` first and its artifacts under the fixed layout
//! (`checkpoints/`, `metrics.jsonl`, `reports/`, `figures/`).

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use shapefsl::data::{generate_toy_dataset, load_dataset, save_dataset, Dataset, SplitManifest};
use shapefsl::metatest::{evaluate_episodes, evaluate_tables, EvalReport, Evaluator};
use shapefsl::robustness::{
    attack_sweep, default_radii, fourier_sweep, run_tint_scenarios, save_sweep_csv, tint_points,
    AttackConfig, PretrainSource, SweepPoint, TintScenario, TintSuite,
};
use shapefsl::training::{
    load_checkpoint, pretrain, Algorithm, CheckpointBundle, RunOptions, TrainConfig,
    TrainOutcome,
};
use shapefsl::losses::LossWeights;
use shapefsl::transforms::TintPalette;

pub use config::{DataSource, RunConfig};
use plot::{line_chart, Series};

/// The fixed output layout under `--out`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        let layout = Self { root: root.to_path_buf() };
        for dir in [layout.checkpoints(), layout.reports(), layout.figures()] {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(layout)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.json")
    }
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn start(cfg: &RunConfig, out: &Path) -> anyhow::Result<Layout> {
    cfg.validate()?;
    let layout = Layout::create(out)?;
    write_json(cfg, &layout.resolved_config())?;
    Ok(layout)
}

/// The dataset a run with `seed` sees; toy data is regenerated from the seed.
pub fn load_data(cfg: &RunConfig, seed: u64) -> anyhow::Result<Dataset> {
    match cfg.data.source {
        DataSource::Toy => Ok(generate_toy_dataset(&cfg.data.toy, seed)?.dataset),
        DataSource::Folder => {
            let root = cfg.data_root()?;
            let manifest_path = cfg.data.manifest.clone().unwrap_or_else(|| root.join("manifest.json"));
            let text = fs::read_to_string(&manifest_path)
                .with_context(|| format!("reading split manifest {}", manifest_path.display()))?;
            let manifest: SplitManifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing split manifest {}", manifest_path.display()))?;
            Ok(load_dataset(&root, &manifest)?)
        }
    }
}

fn ensure_finite_reports(reports: &[EvalReport]) -> anyhow::Result<()> {
    if let Some(r) = reports.iter().find(|r| !r.mean_acc.is_finite() || !r.std.is_finite()) {
        bail!("non-finite accuracy in report `{}`", r.scenario);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    algorithm: &'a str,
    epochs: usize,
    steps: usize,
    epoch_losses: Vec<f64>,
    final_losses: Option<&'a shapefsl::losses::LossBreakdown>,
}

/// Trains per `cfg.train`; distillation additionally needs `teacher`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, teacher: Option<&Path>) -> anyhow::Result<TrainOutcome> {
    let layout = start(cfg, out)?;
    let dataset = load_data(cfg, cfg.seed)?;
    let teacher = teacher
        .map(|p| load_checkpoint(p).with_context(|| format!("loading teacher {}", p.display())))
        .transpose()?;
    let opts = RunOptions {
        metrics_path: Some(layout.metrics()),
        checkpoint_dir: Some(layout.checkpoints().join("final")),
        ..RunOptions::default()
    };
    let outcome = pretrain(&dataset, &cfg.train, teacher.as_ref(), &opts)?;
    let summary = TrainSummary {
        algorithm: cfg.train.algorithm.name(),
        epochs: cfg.train.epochs,
        steps: outcome.steps.len(),
        epoch_losses: outcome.epoch_means.iter().map(|l| l.total).collect(),
        final_losses: outcome.epoch_means.last(),
    };
    write_json(&summary, &layout.reports().join("train_summary.json"))?;
    let points: Vec<(f64, f64)> = summary
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, &l)| (e as f64 + 1.0, l))
        .collect();
    let top = points.iter().map(|p| p.1).fold(0.0, f64::max);
    line_chart(&[Series { points }], Some((0.0, top)), &layout.figures().join("loss.png"))?;
    Ok(outcome)
}

/// Sequential distillation of a frozen teacher into a fresh student.
pub fn cmd_distill(cfg: &RunConfig, out: &Path, teacher: &Path) -> anyhow::Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.train.algorithm = Algorithm::Distill;
    cmd_pretrain(&cfg, out, Some(teacher))
}

#[derive(Debug, Serialize)]
struct EvalCsvRow<'a> {
    scenario: &'a str,
    n_way: usize,
    k_shot: usize,
    n_tasks: usize,
    mean_acc: f64,
    std: f64,
    ci95: f64,
    seed: u64,
}

/// One report per configured `[n_way, k_shot]` pair.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> anyhow::Result<Vec<EvalReport>> {
    let layout = start(cfg, out)?;
    let bundle = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_data(cfg, cfg.seed)?;
    let e = &cfg.evaluation;
    let evaluator = Evaluator::from_bundle(&bundle, e.head);
    let table = evaluator.table(dataset.split(e.split), None)?;
    let mut reports = Vec::new();
    for &[n, k] in &e.episodes {
        let spec = cfg.episode_spec(n, k, e.n_query);
        let r = evaluate_tables(&dataset, e.split, &spec, e.n_tasks, cfg.seed, &e.head, &table, &table, "clean")?;
        write_json(&r, &layout.reports().join(format!("eval_{n}way_{k}shot.json")))?;
        reports.push(r);
    }
    ensure_finite_reports(&reports)?;
    let mut w = csv::Writer::from_path(layout.reports().join("eval.csv"))?;
    for r in &reports {
        w.serialize(EvalCsvRow {
            scenario: &r.scenario,
            n_way: r.n_way,
            k_shot: r.k_shot,
            n_tasks: r.n_tasks,
            mean_acc: r.mean_acc,
            std: r.std,
            ci95: r.ci95(),
            seed: r.seed,
        })?;
    }
    w.flush()?;
    Ok(reports)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RobustnessResults {
    pub tint: Vec<EvalReport>,
    pub fourier: Vec<SweepPoint>,
    pub attack: Vec<SweepPoint>,
}

fn sweep_outputs(layout: &Layout, name: &str, points: &[SweepPoint]) -> anyhow::Result<()> {
    write_json(points, &layout.reports().join(format!("{name}.json")))?;
    save_sweep_csv(points, &layout.reports().join(format!("{name}.csv")))?;
    let series = Series {
        points: points.iter().map(|p| (p.severity, p.report.mean_acc)).collect(),
    };
    line_chart(&[series], None, &layout.figures().join(format!("{name}.png")))
}

/// Tint scenarios, Fourier and attack sweeps as configured. PT scenarios
/// use `pt_checkpoint` or else train a backbone on the tinted base split
/// with `cfg.train`.
pub fn cmd_robustness(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    pt_checkpoint: Option<&Path>,
) -> anyhow::Result<RobustnessResults> {
    let layout = start(cfg, out)?;
    let bundle = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_data(cfg, cfg.seed)?;
    let r = &cfg.robustness;
    let split = cfg.evaluation.split;
    let spec = cfg.episode_spec(r.episode[0], r.episode[1], cfg.evaluation.n_query);
    let head = cfg.evaluation.head;
    let evaluator = Evaluator::from_bundle(&bundle, head);
    let mut results = RobustnessResults::default();

    if let Some(t) = &r.tint {
        let palette = TintPalette::hue_corners(dataset.n_classes(), t.strength);
        let suite = TintSuite {
            dataset: &dataset,
            split,
            spec,
            n_tasks: r.n_tasks,
            seed: cfg.seed,
            palette: palette.clone(),
            eval: head,
        };
        let pt_bundle = pt_checkpoint
            .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
            .transpose()?;
        let pt_dir = layout.checkpoints().join("pretrain_tinted");
        let train = |tinted: &Dataset| -> shapefsl::Result<CheckpointBundle> {
            if cfg.train.algorithm == Algorithm::Distill {
                return Err(shapefsl::Error::Config(
                    "PT scenarios with distill need --pt-checkpoint".into(),
                ));
            }
            let opts = RunOptions {
                checkpoint_dir: Some(pt_dir.clone()),
                ..RunOptions::default()
            };
            Ok(pretrain(tinted, &cfg.train, None, &opts)?.bundle)
        };
        let source = match &pt_bundle {
            Some(b) => Some(PretrainSource::Checkpoint(b)),
            None => Some(PretrainSource::Train(&train)),
        };
        let scenarios: Vec<TintScenario> = t.scenarios.clone();
        results.tint = run_tint_scenarios(&suite, &bundle, source, &scenarios)?;
        ensure_finite_reports(&results.tint)?;
        write_json(&results.tint, &layout.reports().join("tint.json"))?;
        let points = tint_points(&results.tint, &palette);
        save_sweep_csv(&points, &layout.reports().join("tint.csv"))?;
        let series = Series {
            points: results.tint.iter().enumerate().map(|(i, r)| (i as f64, r.mean_acc)).collect(),
        };
        line_chart(&[series], None, &layout.figures().join("tint.png"))?;
    }

    if let Some(f) = &r.fourier {
        let radii = if f.radii.is_empty() {
            let img = &dataset.split(split).images()[0].image;
            default_radii(img.height(), img.width())
        } else {
            f.radii.clone()
        };
        results.fourier = fourier_sweep(&evaluator, &dataset, split, &spec, &radii, r.n_tasks, cfg.seed)?;
        sweep_outputs(&layout, "fourier", &results.fourier)?;
    }

    if let Some(a) = &r.attack {
        let attack = AttackConfig {
            epsilon: 0.0,
            n_iters: a.n_iters,
            p_init: a.p_init,
            seed: cfg.seed,
        };
        results.attack = attack_sweep(&evaluator, &dataset, split, &spec, &a.epsilons, a.n_tasks, cfg.seed, &attack)?;
        sweep_outputs(&layout, "attack", &results.attack)?;
    }
    let all: Vec<EvalReport> = results
        .fourier
        .iter()
        .chain(&results.attack)
        .map(|p| p.report.clone())
        .collect();
    ensure_finite_reports(&all)?;
    Ok(results)
}

/// Which loss terms an ablation row switches on. `ce_rin` is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationTerms {
    pub ce_rin: bool,
    pub ce_sin: bool,
    pub da_rin: bool,
    pub da_sin: bool,
    pub fa_rin: bool,
    pub fa_sin: bool,
}

impl AblationTerms {
    const fn dual(da_rin: bool, da_sin: bool, fa_rin: bool, fa_sin: bool) -> Self {
        Self {
            ce_rin: true,
            ce_sin: true,
            da_rin,
            da_sin,
            fa_rin,
            fa_sin,
        }
    }

    /// The eight rows: CE-only baseline, then the dual setups.
    pub const GRID: [AblationTerms; 8] = [
        Self {
            ce_rin: true,
            ce_sin: false,
            da_rin: false,
            da_sin: false,
            fa_rin: false,
            fa_sin: false,
        },
        Self::dual(true, false, false, false),
        Self::dual(false, true, false, false),
        Self::dual(true, true, false, false),
        Self::dual(false, false, true, false),
        Self::dual(false, false, false, true),
        Self::dual(false, false, true, true),
        Self::dual(true, true, true, true),
    ];

    /// `base` restricted to this row: the CE-only row trains the RIN
    /// alone, the others zero the weights of switched-off terms.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        if !self.ce_sin {
            return TrainConfig {
                algorithm: Algorithm::Baseline,
                ..base.clone()
            };
        }
        let w = base.loss_weights;
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        TrainConfig {
            algorithm: Algorithm::Lsfsl,
            loss_weights: LossWeights {
                gamma_r: on(self.fa_rin, w.gamma_r),
                gamma_s: on(self.fa_sin, w.gamma_s),
                lambda_r: on(self.da_rin, w.lambda_r),
                lambda_s: on(self.da_sin, w.lambda_s),
                ..w
            },
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        let names = [
            (self.ce_rin, "CE_R"),
            (self.ce_sin, "CE_S"),
            (self.da_rin, "DA_R"),
            (self.da_sin, "DA_S"),
            (self.fa_rin, "FA_R"),
            (self.fa_sin, "FA_S"),
        ];
        names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub terms: AblationTerms,
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_acc: f64,
    pub std: f64,
}

/// A trainer for ablation rows: `(dataset, seed, row index, config) -> bundle`.
pub type Trainer<'a> = dyn Fn(&Dataset, u64, usize, &TrainConfig) -> anyhow::Result<CheckpointBundle> + 'a;

/// Trains and evaluates every row of the grid for each seed.
pub fn run_ablation(cfg: &RunConfig, train: &Trainer<'_>) -> anyhow::Result<Vec<AblationRow>> {
    let a = &cfg.ablation;
    let seeds = cfg.ablation_seeds();
    let spec = cfg.episode_spec(a.episode[0], a.episode[1], a.n_query);
    let split = cfg.evaluation.split;
    let mut accs = vec![Vec::new(); AblationTerms::GRID.len()];
    for &seed in &seeds {
        let dataset = load_data(cfg, seed)?;
        for (row, terms) in AblationTerms::GRID.iter().enumerate() {
            let tc = TrainConfig {
                seed,
                ..terms.train_config(&cfg.train)
            };
            let bundle = train(&dataset, seed, row, &tc)?;
            let ev = Evaluator::from_bundle(&bundle, cfg.evaluation.head);
            let r = evaluate_episodes(&ev, &dataset, split, &spec, a.n_tasks, seed)?;
            accs[row].push(r.mean_acc);
        }
    }
    Ok(AblationTerms::GRID
        .iter()
        .zip(accs)
        .map(|(terms, accuracies)| {
            let n = accuracies.len() as f64;
            let mean = accuracies.iter().sum::<f64>() / n;
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            AblationRow {
                terms: *terms,
                label: terms.label(),
                seeds: seeds.clone(),
                accuracies,
                mean_acc: mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct AblationCsvRow<'a> {
    row: usize,
    terms: &'a str,
    mean_acc: f64,
    std: f64,
    n_seeds: usize,
}

pub fn write_ablation(layout: &Layout, rows: &[AblationRow]) -> anyhow::Result<()> {
    write_json(rows, &layout.reports().join("ablation.json"))?;
    let mut w = csv::Writer::from_path(layout.reports().join("ablation.csv"))?;
    for (i, r) in rows.iter().enumerate() {
        w.serialize(AblationCsvRow {
            row: i + 1,
            terms: &r.label,
            mean_acc: r.mean_acc,
            std: r.std,
            n_seeds: r.seeds.len(),
        })?;
    }
    w.flush()?;
    let series = Series {
        points: rows.iter().enumerate().map(|(i, r)| (i as f64 + 1.0, r.mean_acc)).collect(),
    };
    line_chart(&[series], None, &layout.figures().join("ablation.png"))
}

/// The eight-row alignment ablation; checkpoints land in
/// `checkpoints/ablation/row<r>_seed<s>`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<AblationRow>> {
    let layout = start(cfg, out)?;
    let ckpt = layout.checkpoints().join("ablation");
    let train = |ds: &Dataset, seed: u64, row: usize, tc: &TrainConfig| -> anyhow::Result<CheckpointBundle> {
        let opts = RunOptions {
            checkpoint_dir: Some(ckpt.join(format!("row{}_seed{seed}", row + 1))),
            ..RunOptions::default()
        };
        Ok(pretrain(ds, tc, None, &opts)?.bundle)
    };
    let rows = run_ablation(cfg, &train)?;
    if rows.iter().any(|r| !r.mean_acc.is_finite()) {
        bail!("non-finite ablation accuracy");
    }
    write_ablation(&layout, &rows)?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct ToyMetadata<'a> {
    seed: u64,
    config: &'a shapefsl::data::ToyConfig,
    records: &'a [shapefsl::data::toy::ToyRecord],
}

/// Writes the toy dataset under `<out>/data` (loadable with the folder
/// source) plus `toy_metadata.json`.
pub fn cmd_make_toy_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let layout = start(cfg, out)?;
    let toy = generate_toy_dataset(&cfg.data.toy, cfg.seed)?;
    let root = layout.root.join("data");
    save_dataset(&toy.dataset, &root)?;
    write_json(
        &ToyMetadata {
            seed: cfg.seed,
            config: &toy.config,
            records: &toy.records,
        },
        &root.join("toy_metadata.json"),
    )?;
    Ok(root)
}
