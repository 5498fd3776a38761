//! File-based workflow around the library: dataset generation, training,
//! evaluation, ablation grids, gradient checking, parameter reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use mobe::config::{ExperimentConfig, Task};
use mobe::error::{Error, Result};
use mobe::metrics::MetricsReport;
use mobe::synth::{self, SynthConfig};
use mobe::train;
use mobe::{gradcheck, model};

#[derive(Parser)]
#[command(name = "mobe", version, about = "Multi-subject decoding experiments on a synthetic simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Gen {
        /// TOML experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
        /// Reduce one subject's training split: "subj=0,ratio=0.1".
        #[arg(long)]
        few_shot: Option<String>,
        /// Voxel-dropout misalignment keep fraction in (0, 1].
        #[arg(long)]
        misalign: Option<f64>,
    },
    /// Run the training pipeline on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, logs and the report.
        #[arg(long)]
        out: PathBuf,
        /// classification | retrieval | reconstruction.
        #[arg(long)]
        task: Option<String>,
        /// Component toggles: "mobe=off,sra=on".
        #[arg(long)]
        toggles: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// "subj=0,ratio=0.1" applied to the training split.
        #[arg(long)]
        few_shot: Option<String>,
    },
    /// Evaluate a saved checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory (contains index.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write report.json/report.csv; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run ablation grids and collect one CSV over all runs.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// toggles | rank | misalign | all.
        #[arg(long, default_value = "toggles")]
        grid: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks of every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Only run cases whose name contains this substring.
        #[arg(long)]
        module: Option<String>,
        /// Deliberately corrupt one gradient to prove the checker can fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Model parameter counts and the adapter share.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn parse_few_shot(spec: &str) -> Result<(usize, f64)> {
    let mut subject = None;
    let mut ratio = None;
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("bad few-shot component '{part}'")))?;
        match key.trim() {
            "subj" | "subject" => {
                subject = Some(value.trim().parse::<usize>().map_err(|_| {
                    Error::config(format!("few-shot subject '{value}' is not an integer"))
                })?)
            }
            "ratio" => {
                ratio = Some(value.trim().parse::<f64>().map_err(|_| {
                    Error::config(format!("few-shot ratio '{value}' is not a number"))
                })?)
            }
            other => return Err(Error::config(format!("unknown few-shot key '{other}'"))),
        }
    }
    match (subject, ratio) {
        (Some(s), Some(r)) => Ok((s, r)),
        _ => Err(Error::config(
            "few-shot spec needs both subj=<id> and ratio=<frac>",
        )),
    }
}

fn parse_toggles(cfg: &mut ExperimentConfig, spec: &str) -> Result<()> {
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("bad toggle '{part}'")))?;
        let on = match value.trim() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => return Err(Error::config(format!("toggle value '{other}' not on/off"))),
        };
        match key.trim() {
            "mobe" => cfg.train.mobe = on,
            "sra" => cfg.train.sra = on,
            other => return Err(Error::config(format!("unknown toggle '{other}'"))),
        }
    }
    Ok(())
}

fn echo_config(cfg: &ExperimentConfig) -> Result<()> {
    println!("# resolved configuration (hash {})", cfg.config_hash());
    println!("{}", cfg.to_toml_pretty()?);
    Ok(())
}

fn cmd_gen(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    few_shot: Option<String>,
    misalign: Option<f64>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(frac) = misalign {
        cfg.data.misalign_keep_frac = Some(frac);
    }
    if let Some(spec) = &few_shot {
        let (s, r) = parse_few_shot(spec)?;
        cfg.train.few_shot_subject = Some(s);
        cfg.train.few_shot_ratio = Some(r);
    }
    cfg.validate()?;
    echo_config(&cfg)?;

    let mut data = synth::generate_dataset(&cfg.data, cfg.train.seed)?;
    if let (Some(s), Some(r)) = (cfg.train.few_shot_subject, cfg.train.few_shot_ratio) {
        data = synth::few_shot_subsample(&data, s, r, cfg.train.seed)?;
    }
    synth::save_dataset(&out, &data)?;
    let summary = synth::dataset_summary(&data);
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Serialization(e.to_string()))?
    );
    println!("dataset written to {}", out.display());
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    data_dir: PathBuf,
    out: PathBuf,
    task: Option<String>,
    toggles: Option<String>,
    seed: Option<u64>,
    few_shot: Option<String>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(t) = &task {
        cfg.train.task = t.parse::<Task>()?;
    }
    if let Some(spec) = &toggles {
        parse_toggles(&mut cfg, spec)?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(spec) = &few_shot {
        let (s, r) = parse_few_shot(spec)?;
        cfg.train.few_shot_subject = Some(s);
        cfg.train.few_shot_ratio = Some(r);
    }
    cfg.validate()?;
    echo_config(&cfg)?;

    let data = synth::load_dataset(&data_dir)?;
    let output = train::run_experiment(&cfg, &data, Some(&out))?;
    if let Some(stats) = &output.router_stats {
        println!(
            "router: accuracy {:.4}, mean top-1 confidence {:.4} after {} epochs",
            stats.test_accuracy, stats.mean_top1_confidence, stats.epochs_run
        );
    }
    println!("{}", output.report.to_json_pretty()?);
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn cmd_eval(
    config: Option<PathBuf>,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = synth::load_dataset(&data_dir)?;
    let model = model::Model::load_checkpoint(&checkpoint)?;
    let t0 = std::time::Instant::now();
    let per_subject = train::evaluate(&model, &data, &cfg.eval, cfg.train.seed)?;
    let report = MetricsReport::new(
        "eval",
        cfg.train.seed,
        cfg.config_hash(),
        data.content_hash(),
        per_subject,
        t0.elapsed().as_secs_f64(),
    );
    println!("{}", report.to_json_pretty()?);
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, report.to_json_pretty()?).map_err(|e| Error::io(&path, e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

struct AblateRun {
    label: String,
    seed: u64,
    misalign: Option<f64>,
    rank: Option<usize>,
    mobe: bool,
    sra: bool,
}

fn ablate_runs(cfg: &ExperimentConfig, grid: &str) -> Result<Vec<AblateRun>> {
    let mut runs = Vec::new();
    let seeds = &cfg.ablate.seeds;
    let combos = [
        ("full", true, true),
        ("mobe-only", true, false),
        ("sra-only", false, true),
        ("vanilla-multi", false, false),
    ];
    let want_toggles = grid == "toggles" || grid == "all";
    let want_rank = grid == "rank" || grid == "all";
    let want_misalign = grid == "misalign" || grid == "all";
    if !(want_toggles || want_rank || want_misalign) {
        return Err(Error::config(format!(
            "unknown grid '{grid}' (expected toggles|rank|misalign|all)"
        )));
    }
    if want_toggles {
        for (label, mobe, sra) in combos {
            for &seed in seeds {
                runs.push(AblateRun {
                    label: label.to_string(),
                    seed,
                    misalign: None,
                    rank: None,
                    mobe,
                    sra,
                });
            }
        }
    }
    if want_rank {
        let ranks = if cfg.ablate.rank_grid.is_empty() {
            vec![2, 4, 8, 16, 32]
        } else {
            cfg.ablate.rank_grid.clone()
        };
        for rank in ranks {
            for &seed in seeds {
                runs.push(AblateRun {
                    label: format!("rank-{rank}"),
                    seed,
                    misalign: None,
                    rank: Some(rank),
                    mobe: true,
                    sra: true,
                });
            }
        }
    }
    if want_misalign {
        for (label, misalign) in [
            ("aligned", None),
            ("misaligned", Some(cfg.ablate.misalign_keep_frac)),
        ] {
            for &seed in seeds {
                runs.push(AblateRun {
                    label: label.to_string(),
                    seed,
                    misalign,
                    rank: None,
                    mobe: true,
                    sra: true,
                });
            }
        }
    }
    Ok(runs)
}

fn cmd_ablate(
    config: Option<PathBuf>,
    out: PathBuf,
    grid: String,
    seed: Option<u64>,
) -> Result<()> {
    let mut base = load_config(&config)?;
    if let Some(s) = seed {
        base.train.seed = s;
    }
    base.validate()?;
    echo_config(&base)?;
    let runs = ablate_runs(&base, &grid)?;
    println!("running {} configurations...", runs.len());

    let results: Vec<Result<Vec<String>>> = runs
        .par_iter()
        .map(|run| -> Result<Vec<String>> {
            let mut cfg = base.clone();
            cfg.train.seed = run.seed;
            cfg.train.mobe = run.mobe;
            cfg.train.sra = run.sra;
            if let Some(rank) = run.rank {
                cfg.model.rank = rank;
            }
            cfg.data.misalign_keep_frac = run.misalign;
            let data = synth::generate_dataset(&cfg.data, cfg.train.seed)?;
            let output = train::run_experiment(&cfg, &data, None)?;
            let mut report = output.report;
            report.label = run.label.clone();
            Ok(report.csv_rows())
        })
        .collect();

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for rows in results {
        for row in rows? {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    println!("grid results written to {}", path.display());
    Ok(())
}

fn cmd_gradcheck(
    trials: usize,
    seed: Option<u64>,
    module: Option<String>,
    inject_fault: bool,
) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut report = gradcheck::check_builtin_ops(trials, seed, gradcheck::DEFAULT_TOLERANCE)?;
    let loss_report = gradcheck::check_losses(trials, seed, gradcheck::DEFAULT_TOLERANCE)?;
    report.cases.extend(loss_report.cases);
    if let Some(filter) = &module {
        report.cases.retain(|c| c.name.contains(filter.as_str()));
    }
    if inject_fault {
        report.cases.push(gradcheck::corrupted_case(seed)?);
    }
    for case in &report.cases {
        let status = if case.max_rel_err <= report.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "{status:4} {:<22} trials {:>3} worst rel err {:.3e}",
            case.name, case.trials, case.max_rel_err
        );
    }
    println!(
        "worst over {} cases: {:.3e} (tolerance {:.1e})",
        report.cases.len(),
        report.worst(),
        report.tolerance
    );
    if !report.all_passed() {
        return Err(Error::Numerical(format!(
            "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            report.tolerance
        )));
    }
    Ok(())
}

fn cmd_params(config: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let d_roi = expected_d_roi(&cfg.data);
    let model_cfg = model::ModelConfig {
        d_in: d_roi,
        hidden: cfg.model.hidden,
        n_blocks: cfg.model.n_blocks,
        n_subjects: cfg.data.n_subjects,
        n_classes: cfg.data.n_classes,
        embed_dim: cfg.data.embed_dim,
        rank: cfg.model.rank,
        adapter_scale: cfg.model.adapter_scale,
        adapters_in_heads: cfg.model.adapters_in_heads,
        dropout: cfg.model.dropout,
        router_hidden: cfg.model.router_hidden,
        retrieval_mid: cfg.model.retrieval_mid,
    };
    let m = model::Model::new(model_cfg, 0)?;
    let report = m.param_report();
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Serialization(e.to_string()))?
    );
    Ok(())
}

fn expected_d_roi(data: &SynthConfig) -> usize {
    match data.misalign_keep_frac {
        Some(f) => ((f * data.template_size as f64).round() as usize).max(1),
        None => data.template_size,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            seed,
            out,
            few_shot,
            misalign,
        } => cmd_gen(config, seed, out, few_shot, misalign),
        Command::Train {
            config,
            data,
            out,
            task,
            toggles,
            seed,
            few_shot,
        } => cmd_train(config, data, out, task, toggles, seed, few_shot),
        Command::Eval {
            config,
            data,
            checkpoint,
            out,
            seed,
        } => cmd_eval(config, data, checkpoint, out, seed),
        Command::Ablate {
            config,
            out,
            grid,
            seed,
        } => cmd_ablate(config, out, grid, seed),
        Command::Gradcheck {
            trials,
            seed,
            module,
            inject_fault,
        } => cmd_gradcheck(trials, seed, module, inject_fault),
        Command::Params { config } => cmd_params(config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
