use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cosam_core::config::{ExperimentConfig, PRESETS};
use cosam_core::data::{leave_one_domain_out, load_dataset, save_benchmark, DomainDataset};
use cosam_core::experiment::{benchmark_for, run_ablation, run_lodo, AblationAxis, AblationSpec, HYPER_PARAMETERS};
use cosam_core::metrics::{evaluate, RunMeta};
use cosam_core::plot::{emit_plots, Figure, PlotKind};
use cosam_core::refine::refine_batch;
use cosam_core::train::{fit, FitOptions};
use cosam_core::{CoSam, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cosam", version, about = "Self-correcting prompt-based segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config file laid over the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base preset: prostate, od, oc or toy
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Extra `key=value` config overrides (dotted keys reach nested tables)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-domain benchmark to disk
    GenData,
    /// Train on one source domain
    Train {
        /// Source domain name or index
        #[arg(long, default_value = "0")]
        source: String,
        /// Continue from the run directory's latest checkpoint
        #[arg(long)]
        resume: bool,
        /// Starting weights
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the self-correcting loop over a domain directory
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain directory with images/ (and optionally masks/)
        #[arg(long)]
        data: PathBuf,
        /// Also write per-iteration masks as PNG
        #[arg(long)]
        save_masks: bool,
    },
    /// Score a checkpoint on every domain except its source
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source domain to leave out; all domains are scored when omitted
        #[arg(long)]
        source: Option<String>,
    },
    /// Leave-one-domain-out training and evaluation
    Lodo {
        /// Restrict to these source domains (names or indices)
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        /// Row label in the summary table
        #[arg(long, default_value = "cosam")]
        label: String,
    },
    /// Sweep one ablation axis
    Ablate {
        /// loss, prompt, point-selection, alpha, k_points or t_iters
        #[arg(long)]
        axis: String,
        /// Levels to run; defaults to the axis's standard grid
        #[arg(long, value_delimiter = ',')]
        levels: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
    },
    /// Draw a figure from an ablation CSV
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// Figure name; taken from the file name when omitted
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, default_value = "plots")]
        run_id: String,
        /// Draw a line plot (the default for hyper-parameter sweeps)
        #[arg(long)]
        line: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.global.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Data { .. } | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Numeric { .. } | Error::Tensor(_) => 4,
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    if let Some(p) = &g.preset {
        if !PRESETS.contains(&p.as_str()) {
            return Err(Error::Config(format!("unknown preset '{p}' (expected one of {})", PRESETS.join(", "))));
        }
    }
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path, g.preset.as_deref())?,
        None => ExperimentConfig::preset(g.preset.as_deref().unwrap_or("toy"))?,
    };
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn source_index(benchmark: &[DomainDataset], key: &str) -> Result<usize> {
    if let Some(i) = benchmark.iter().position(|d| d.name() == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < benchmark.len() => Ok(i),
        _ => Err(Error::Config(format!(
            "unknown source domain '{key}' (have {})",
            benchmark.iter().map(|d| d.name()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn source_list(benchmark: &[DomainDataset], keys: &[String]) -> Result<Option<Vec<usize>>> {
    if keys.is_empty() {
        return Ok(None);
    }
    keys.iter().map(|k| source_index(benchmark, k)).collect::<Result<Vec<_>>>().map(Some)
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    match &cli.command {
        Command::GenData => {
            let sets = benchmark_for(&cfg)?;
            save_benchmark(&sets, out)?;
            println!("wrote {} domains to {}", sets.len(), out.display());
        }
        Command::Train { source, resume, init } => {
            let sets = benchmark_for(&cfg)?;
            let s = source_index(&sets, source)?;
            write_config(&cfg, out)?;
            let opts = FitOptions {
                run_dir: Some(out.clone()),
                resume: *resume,
                init: init.clone(),
                stop_after: None,
            };
            let (model, log) = fit(&sets[s], &cfg.arch, &cfg.train_config()?, &opts)?;
            model.save(&out.join("final.bin"))?;
            if let Some(last) = log.last() {
                println!("trained on {} for {} steps, last coarse loss {:.4}", sets[s].name(), log.len(), last.coarse);
            }
        }
        Command::Refine { checkpoint, data, save_masks } => {
            let model = CoSam::load(checkpoint)?;
            let ds = load_dataset(data)?;
            let opts = cfg.refine_options()?;
            let images: Vec<_> = ds.samples.iter().map(|s| s.image.clone()).collect();
            let traces = refine_batch(&model, &images, &opts, cfg.parallelism)?;
            fs::create_dir_all(out)?;
            let mut lines = String::new();
            for (s, t) in ds.samples.iter().zip(traces) {
                let t = t?;
                lines += &serde_json::to_string(&t.summary(&s.id, opts.threshold, Some(&s.label))?)?;
                lines.push('\n');
                if *save_masks {
                    t.save_masks(&out.join("masks").join(&s.id), opts.threshold)?;
                }
            }
            fs::write(out.join("traces.jsonl"), lines)?;
            println!("refined {} images from {}", ds.len(), ds.name());
        }
        Command::Eval { checkpoint, source } => {
            let model = CoSam::load(checkpoint)?;
            let sets = benchmark_for(&cfg)?;
            let targets = match source {
                Some(k) => leave_one_domain_out(&sets, source_index(&sets, k)?)?.1,
                None => sets,
            };
            let report = evaluate(
                &model,
                &targets,
                &cfg.refine_options()?,
                cfg.data.group_key,
                cfg.parallelism,
                RunMeta::new(cfg.hash(), cfg.seed),
            )?;
            fs::create_dir_all(out)?;
            fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
            let mut csv = String::from("domain,dsc,coarse_dsc,scored,missing\n");
            for d in &report.domains {
                let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
                csv += &format!("{},{},{},{},{}\n", d.domain, f(d.mean_dsc), f(d.mean_coarse_dsc), d.scored, d.missing);
            }
            csv += &format!("average,{:.6},{:.6},,\n", report.average, report.coarse_average);
            fs::write(out.join("metrics.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Lodo { sources, label } => {
            let sets = benchmark_for(&cfg)?;
            let sources = source_list(&sets, sources)?;
            write_config(&cfg, out)?;
            let table = run_lodo(&sets, &cfg, sources.as_deref(), Some(out))?;
            table.save(out, label)?;
            print!("{}", table.matrix_csv());
        }
        Command::Ablate { axis, levels, seeds, sources } => {
            let axis = AblationAxis::parse(axis)?;
            let sets = benchmark_for(&cfg)?;
            let mut spec = AblationSpec::new(axis, seeds.clone());
            if !levels.is_empty() {
                spec.levels = levels.clone();
            }
            spec.sources = source_list(&sets, sources)?;
            write_config(&cfg, out)?;
            let result = run_ablation(&sets, &cfg, &spec)?;
            let csv = result.save(out)?;
            emit_plots(&[Figure::from_ablation(&result)?], out, "figures")?;
            print!("{}", fs::read_to_string(csv)?);
        }
        Command::Plot { input, axis, run_id, line } => {
            let text = fs::read_to_string(input).map_err(|e| Error::Data {
                path: input.clone(),
                reason: e.to_string(),
            })?;
            let axis = match axis {
                Some(a) => a.clone(),
                None => input
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .map(|s| s.trim_start_matches("ablation_").to_string())
                    .unwrap_or_else(|| "ablation".into()),
            };
            let kind = if *line || HYPER_PARAMETERS.contains(&axis.as_str()) { PlotKind::Line } else { PlotKind::Bar };
            let fig = Figure::from_ablation_csv(&text, &axis, kind).map_err(|e| Error::Data {
                path: input.clone(),
                reason: e.to_string(),
            })?;
            for p in emit_plots(&[fig], out, run_id)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
