//! Leave-one-domain-out runs and ablation sweeps.
//!
//! Every cell trains on one source domain and is scored on all the others.
//! Output tables are plain CSV with fixed six-decimal formatting so that two
//! runs with the same config and seed produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_benchmark, leave_one_domain_out, load_benchmark, DomainDataset};
use crate::error::{Error, Result};
use crate::geometry::{PointSelection, PromptKinds};
use crate::metrics::{evaluate, MetricsReport, RunMeta};
use crate::model::CoSam;
use crate::train::{fit, FitOptions, LossToggles};

/// Loads `data.root` if set, otherwise renders the synthetic benchmark.
pub fn benchmark_for(cfg: &ExperimentConfig) -> Result<Vec<DomainDataset>> {
    let sets = match &cfg.data.root {
        Some(root) => load_benchmark(root)?,
        None => generate_benchmark(cfg.data.domains, cfg.data.per_domain, cfg.dims(), cfg.data.seed)?,
    };
    if sets.len() < 2 {
        return Err(Error::input(format!("need at least two domains, found {}", sets.len())));
    }
    if let Some(d) = sets.iter().find(|d| d.dims() != cfg.dims()) {
        return Err(Error::input(format!(
            "domain {} has images of size {}x{}, config expects {:?}",
            d.name(),
            d.dims().height,
            d.dims().width,
            cfg.dims
        )));
    }
    Ok(sets)
}

fn resolve_sources(n: usize, sources: Option<&[usize]>) -> Result<Vec<usize>> {
    match sources {
        None => Ok((0..n).collect()),
        Some(s) if s.is_empty() => Err(Error::config("source list is empty")),
        Some(s) => {
            if let Some(bad) = s.iter().find(|&&i| i >= n) {
                return Err(Error::config(format!("source index {bad} out of range for {n} domains")));
            }
            Ok(s.to_vec())
        }
    }
}

/// Trains on `source` with the config's training settings.
pub fn train_source(
    benchmark: &[DomainDataset],
    source: usize,
    cfg: &ExperimentConfig,
    run_dir: Option<&Path>,
) -> Result<CoSam> {
    let (train, _) = leave_one_domain_out(benchmark, source)?;
    let opts = FitOptions {
        run_dir: run_dir.map(Path::to_path_buf),
        ..FitOptions::default()
    };
    let (model, _) = fit(&train, &cfg.arch, &cfg.train_config()?, &opts)?;
    Ok(model)
}

/// Scores a model trained on `source` against every other domain.
pub fn evaluate_source(
    model: &CoSam,
    benchmark: &[DomainDataset],
    source: usize,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let (_, targets) = leave_one_domain_out(benchmark, source)?;
    evaluate(
        model,
        &targets,
        &cfg.refine_options()?,
        cfg.data.group_key,
        cfg.parallelism,
        RunMeta::new(cfg.hash(), cfg.seed),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoCell {
    pub source: String,
    pub report: MetricsReport,
}

/// One row per source domain, one column per target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoTable {
    pub domains: Vec<String>,
    pub cells: Vec<LodoCell>,
}

impl LodoTable {
    /// Mean over sources of each source's cross-domain average.
    pub fn average(&self) -> f64 {
        mean(self.cells.iter().map(|c| c.report.average))
    }

    pub fn coarse_average(&self) -> f64 {
        mean(self.cells.iter().map(|c| c.report.coarse_average))
    }

    pub fn cell(&self, source: &str) -> Option<&LodoCell> {
        self.cells.iter().find(|c| c.source == source)
    }

    /// Source-by-target matrix; the diagonal is left blank.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("source");
        for d in &self.domains {
            write!(out, ",{d}").unwrap();
        }
        out.push_str(",average,coarse_average\n");
        for c in &self.cells {
            out.push_str(&c.source);
            for d in &self.domains {
                out.push(',');
                if let Some(v) = c.report.domain(d).and_then(|s| s.mean_dsc) {
                    write!(out, "{v:.6}").unwrap();
                }
            }
            writeln!(out, ",{:.6},{:.6}", c.report.average, c.report.coarse_average).unwrap();
        }
        out
    }

    /// The per-source averages as one row, followed by their mean.
    pub fn summary_row(&self) -> Vec<f64> {
        let mut row: Vec<f64> = self.cells.iter().map(|c| c.report.average).collect();
        row.push(self.average());
        row
    }

    pub fn summary_csv(&self, label: &str) -> String {
        let mut out = String::from("method");
        for c in &self.cells {
            write!(out, ",{}", c.source).unwrap();
        }
        out.push_str(",average\n");
        out.push_str(label);
        for v in self.summary_row() {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
        out
    }

    /// Writes `lodo_matrix.csv`, `lodo_summary.csv` and `lodo.json`.
    pub fn save(&self, dir: &Path, label: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("lodo_matrix.csv"), self.matrix_csv())?;
        fs::write(dir.join("lodo_summary.csv"), self.summary_csv(label))?;
        fs::write(dir.join("lodo.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains one model per source (all domains when `sources` is `None`) and
/// evaluates each on the remaining domains. With `run_dir`, each source's
/// training log and checkpoints go to `run_dir/<source>`.
pub fn run_lodo(
    benchmark: &[DomainDataset],
    cfg: &ExperimentConfig,
    sources: Option<&[usize]>,
    run_dir: Option<&Path>,
) -> Result<LodoTable> {
    cfg.validate()?;
    let sources = resolve_sources(benchmark.len(), sources)?;
    let mut cells = Vec::new();
    for &s in &sources {
        let name = benchmark[s].name().to_string();
        log::info!("training on {name}");
        let dir = run_dir.map(|d| d.join(&name));
        let model = train_source(benchmark, s, cfg, dir.as_deref())?;
        let report = evaluate_source(&model, benchmark, s, cfg)?;
        log::info!("{name}: average {:.4} (coarse {:.4})", report.average, report.coarse_average);
        if let Some(d) = &dir {
            fs::write(d.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        }
        cells.push(LodoCell { source: name, report });
    }
    Ok(LodoTable {
        domains: benchmark.iter().map(|d| d.name().to_string()).collect(),
        cells,
    })
}

/// What an ablation varies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    LossCombination,
    PromptCombination,
    PointSelection,
    /// `alpha`, `k_points` or `t_iters`.
    HyperParameter(String),
}

pub const HYPER_PARAMETERS: [&str; 3] = ["alpha", "k_points", "t_iters"];

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "loss" | "losses" | "loss-combination" => AblationAxis::LossCombination,
            "prompt" | "prompts" | "prompt-combination" => AblationAxis::PromptCombination,
            "point-selection" | "points" => AblationAxis::PointSelection,
            "alpha" => AblationAxis::HyperParameter("alpha".into()),
            "k" | "k_points" => AblationAxis::HyperParameter("k_points".into()),
            "t" | "t_iters" => AblationAxis::HyperParameter("t_iters".into()),
            other => {
                return Err(Error::config(format!(
                    "unknown ablation axis '{other}' (expected loss, prompt, point-selection, alpha, k_points or t_iters)"
                )))
            }
        })
    }

    /// File-name friendly label.
    pub fn name(&self) -> String {
        match self {
            AblationAxis::LossCombination => "loss".into(),
            AblationAxis::PromptCombination => "prompt".into(),
            AblationAxis::PointSelection => "point-selection".into(),
            AblationAxis::HyperParameter(p) => p.clone(),
        }
    }

    pub fn default_levels(&self) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            AblationAxis::LossCombination => s(&[
                "coarse",
                "coarse+refined",
                "coarse+refined+error",
                "coarse+refined+error+guided",
            ]),
            AblationAxis::PromptCombination => PromptKinds::nonempty_subsets().iter().map(|k| k.name()).collect(),
            AblationAxis::PointSelection => s(&["random-k", "top-k"]),
            AblationAxis::HyperParameter(p) => match p.as_str() {
                "alpha" => s(&["0", "0.1", "0.2", "0.3", "0.5"]),
                "k_points" => s(&["4", "16", "64", "128"]),
                _ => s(&["1", "2", "3", "4", "6"]),
            },
        }
    }

    /// Numeric axis values, for hyper-parameter sweeps.
    pub fn is_numeric(&self) -> bool {
        matches!(self, AblationAxis::HyperParameter(_))
    }

    /// `base` with this axis set to `level`.
    pub fn apply(&self, base: &ExperimentConfig, level: &str) -> Result<ExperimentConfig> {
        let bad = |e: Error| Error::config(format!("invalid {} level '{level}': {e}", self.name()));
        let mut cfg = base.clone();
        match self {
            AblationAxis::LossCombination => {
                let t = LossToggles::parse(level).map_err(bad)?;
                if !t.any_mask_term() {
                    return Err(Error::config(format!("loss level '{level}' has no mask term")));
                }
                cfg.losses = t.name();
            }
            AblationAxis::PromptCombination => cfg.prompts = PromptKinds::parse(level).map_err(bad)?.name(),
            AblationAxis::PointSelection => cfg.point_selection = PointSelection::parse(level).map_err(bad)?,
            AblationAxis::HyperParameter(p) => {
                if !HYPER_PARAMETERS.contains(&p.as_str()) {
                    return Err(Error::config(format!("unknown hyper-parameter '{p}'")));
                }
                if level.parse::<f64>().is_err() {
                    return Err(Error::config(format!("{p} level '{level}' is not a number")));
                }
                cfg = cfg.with_override(p, level)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub levels: Vec<String>,
    pub seeds: Vec<u64>,
    /// Source domain indices; `None` uses every domain.
    pub sources: Option<Vec<usize>>,
}

impl AblationSpec {
    pub fn new(axis: AblationAxis, seeds: Vec<u64>) -> Self {
        Self {
            levels: axis.default_levels(),
            axis,
            seeds,
            sources: None,
        }
    }

    pub fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("ablation has no levels"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("ablation has no seeds"));
        }
        for l in &self.levels {
            self.axis.apply(base, l)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub level: String,
    pub seed: u64,
    pub table: LodoTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub spec: AblationSpec,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// Mean over seeds of the overall average, per level in spec order.
    pub fn level_means(&self) -> Vec<(String, f64)> {
        self.spec
            .levels
            .iter()
            .map(|l| {
                let m = mean(self.rows.iter().filter(|r| &r.level == l).map(|r| r.table.average()));
                (l.clone(), m)
            })
            .collect()
    }

    fn sources(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| r.table.cells.iter().map(|c| c.source.clone()).collect())
            .unwrap_or_default()
    }

    /// One row per (level, seed), then one `mean` row per level.
    pub fn to_csv(&self) -> String {
        let sources = self.sources();
        let mut out = String::from("level,seed");
        for s in &sources {
            write!(out, ",{s}").unwrap();
        }
        out.push_str(",average,coarse_average\n");
        for r in &self.rows {
            write!(out, "{},{}", r.level, r.seed).unwrap();
            for v in r.table.summary_row() {
                write!(out, ",{v:.6}").unwrap();
            }
            writeln!(out, ",{:.6}", r.table.coarse_average()).unwrap();
        }
        for l in &self.spec.levels {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| &r.level == l).collect();
            write!(out, "{l},mean").unwrap();
            for i in 0..=sources.len() {
                write!(out, ",{:.6}", mean(rows.iter().map(|r| r.table.summary_row()[i]))).unwrap();
            }
            writeln!(out, ",{:.6}", mean(rows.iter().map(|r| r.table.coarse_average()))).unwrap();
        }
        out
    }

    /// Writes `ablation_<axis>.csv` and `ablation_<axis>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let stem = format!("ablation_{}", self.spec.axis.name());
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv())?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(csv)
    }
}

/// Runs every (level, seed) cell. Levels whose training settings coincide
/// share one trained model per (source, seed); an iteration-budget sweep
/// therefore trains once and only re-runs inference.
pub fn run_ablation(benchmark: &[DomainDataset], base: &ExperimentConfig, spec: &AblationSpec) -> Result<AblationResult> {
    base.validate()?;
    spec.validate(base)?;
    let sources = resolve_sources(benchmark.len(), spec.sources.as_deref())?;
    let domains: Vec<String> = benchmark.iter().map(|d| d.name().to_string()).collect();
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let mut trained: Vec<(crate::train::TrainConfig, Vec<CoSam>)> = Vec::new();
        for level in &spec.levels {
            let mut cfg = spec.axis.apply(base, level)?;
            cfg.seed = seed;
            let tc = cfg.train_config()?;
            let idx = match trained.iter().position(|(t, _)| *t == tc) {
                Some(i) => i,
                None => {
                    let mut models = Vec::new();
                    for &s in &sources {
                        log::info!("{} {level} seed {seed}: training on {}", spec.axis.name(), domains[s]);
                        models.push(train_source(benchmark, s, &cfg, None)?);
                    }
                    trained.push((tc, models));
                    trained.len() - 1
                }
            };
            let mut cells = Vec::new();
            for (model, &s) in trained[idx].1.iter().zip(&sources) {
                let report = evaluate_source(model, benchmark, s, &cfg)?;
                cells.push(LodoCell {
                    source: domains[s].clone(),
                    report,
                });
            }
            let table = LodoTable {
                domains: domains.clone(),
                cells,
            };
            log::info!("{} {level} seed {seed}: average {:.4}", spec.axis.name(), table.average());
            rows.push(AblationRow {
                level: level.clone(),
                seed,
                table,
            });
        }
    }
    Ok(AblationResult {
        spec: spec.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::preset("toy").unwrap()
    }

    #[test]
    fn axes_parse_and_default_levels_apply() {
        for name in ["loss", "prompt", "point-selection", "alpha", "k_points", "t_iters"] {
            let axis = AblationAxis::parse(name).unwrap();
            let levels = axis.default_levels();
            assert!(!levels.is_empty());
            for l in &levels {
                axis.apply(&base(), l).unwrap();
            }
        }
        assert_eq!(AblationAxis::PromptCombination.default_levels().len(), 7);
        assert!(matches!(AblationAxis::parse("lr"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_levels_are_config_errors() {
        let cases = [
            (AblationAxis::LossCombination, "coarse+bogus"),
            (AblationAxis::PromptCombination, "scribbles"),
            (AblationAxis::PointSelection, "bottom-k"),
            (AblationAxis::HyperParameter("alpha".into()), "high"),
            (AblationAxis::HyperParameter("t_iters".into()), "0"),
        ];
        for (axis, level) in cases {
            let spec = AblationSpec {
                levels: vec![level.into()],
                ..AblationSpec::new(axis, vec![0])
            };
            assert!(matches!(spec.validate(&base()), Err(Error::Config(_))), "{level}");
        }
    }

    #[test]
    fn point_selection_levels_differ_only_in_selection() {
        let axis = AblationAxis::PointSelection;
        let a = axis.apply(&base(), "top-k").unwrap();
        let b = axis.apply(&base(), "random-k").unwrap();
        assert_ne!(a.point_selection, b.point_selection);
        assert_eq!(ExperimentConfig { point_selection: a.point_selection, ..b }, a);
    }

    #[test]
    fn budget_levels_share_training_settings() {
        let axis = AblationAxis::HyperParameter("t_iters".into());
        let a = axis.apply(&base(), "1").unwrap();
        let b = axis.apply(&base(), "6").unwrap();
        assert_eq!(a.train_config().unwrap(), b.train_config().unwrap());
        assert_ne!(a.refine_options().unwrap(), b.refine_options().unwrap());
    }
}
