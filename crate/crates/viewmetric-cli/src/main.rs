//! Command-line experiments: dataset generation, training, evaluation, the
//! four-variant ablation, the viewpoint-error sweep, and the branch-count
//! sweep. Every command is deterministic given its config; exit code 0 on
//! success, 2 on configuration or input errors, 3 on numerical failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use manifest::Manifest;
use viewmetric::config::ExperimentConfig;
use viewmetric::data::{generate_dataset, Dataset};
use viewmetric::eval::{distance_histograms, embed_all, evaluate, EvalSpace};
use viewmetric::experiments::{
    prepare_replicate, run_ablation, run_branch_sweep, run_sigma_sweep, train_variant,
};
use viewmetric::model::EmbeddingModel;
use viewmetric::predictor::{inject_errors, predict_viewpoints, ViewpointClassifier};
use viewmetric::Result;

#[derive(Parser)]
#[command(name = "viewmetric", version, about = "Viewpoint-conditional metric learning experiments")]
struct Cli {
    /// Experiment config file (`key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen,
    /// Train the configured variant on the train split of a dataset.
    Train {
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a trained checkpoint on the test split of a dataset.
    Eval {
        /// Model checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Viewpoint classifier checkpoint path.
        #[arg(long)]
        vpclf: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Viewpoint prediction error rate to inject before evaluation.
        #[arg(long)]
        sigma: Option<f64>,
        /// Number of query/gallery trials (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train and evaluate all four variants and write a comparison table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Sweep the viewpoint prediction error rate for baseline and vanet.
    SweepSigma {
        #[arg(long)]
        data: PathBuf,
    },
    /// Sweep the number of branches.
    SweepBranches {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn say(cli: &Cli, message: &str) {
    if !cli.quiet {
        println!("{message}");
    }
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let mut manifest = Manifest::new(command_name(&cli.command), &cfg);
    if let Some(path) = &cli.config {
        manifest.input("config", path);
    }

    match &cli.command {
        Command::Gen => {
            let ds = generate_dataset(&cfg.gen_config())?;
            let path = cli.out.join("dataset.txt");
            ds.save(&path)?;
            manifest.artifact(&path);
            say(
                cli,
                &format!(
                    "wrote {} ({} samples, {} ids)",
                    path.display(),
                    ds.n_samples(),
                    ds.n_ids()
                ),
            );
        }
        Command::Train { data } => {
            manifest.input("dataset", data);
            let ds = Dataset::load(data)?;
            let ctx = prepare_replicate(&ds, &cfg, 0)?;
            say(
                cli,
                &format!(
                    "training variant {} on {} train ids ({} test ids held out)",
                    cfg.variant,
                    ctx.train.n_ids(),
                    ctx.test.n_ids()
                ),
            );
            let (model, history) =
                train_variant(&ctx, &cfg, cfg.variant, cfg.variant.default_branches())?;

            let model_path = cli.out.join("model.txt");
            model.save(&model_path)?;
            let clf_path = cli.out.join("vpclf.txt");
            ctx.clf.save(&clf_path)?;
            let steps_path = cli.out.join("history_steps.csv");
            write_file(&steps_path, |w| history.write_steps_csv(w))?;
            let epochs_path = cli.out.join("history_epochs.csv");
            write_file(&epochs_path, |w| {
                history.write_epochs_csv(w, cfg.steps_per_epoch)
            })?;
            let preds_path = cli.out.join("predictions.csv");
            write_file(&preds_path, |w| ctx.preds_train.write_csv(&ctx.train, w))?;
            for p in [&model_path, &clf_path, &steps_path, &epochs_path, &preds_path] {
                manifest.artifact(p);
            }
            say(cli, &format!("wrote checkpoint {}", model_path.display()));
        }
        Command::Eval {
            model,
            vpclf,
            data,
            sigma,
            trials,
        } => {
            manifest.input("model", model);
            manifest.input("vpclf", vpclf);
            manifest.input("dataset", data);
            let net = EmbeddingModel::load(model)?;
            let clf = ViewpointClassifier::load(vpclf)?;
            let ds = Dataset::load(data)?;
            let seeds = cfg.seed_plan().replicate(0);
            let (_, test) = viewmetric::data::split_by_id(&ds, cfg.test_fraction, seeds.split())?;
            let mut preds = predict_viewpoints(&clf, &test)?;
            let sigma = sigma.unwrap_or(0.0);
            if sigma > 0.0 {
                preds = inject_errors(&preds, &test.viewpoint_set, sigma, seeds.sigma_injection(0))?;
            }
            let trials = trials.unwrap_or(cfg.trials);
            let report = evaluate(&net, &test, &preds, trials, seeds.eval_trials())?;
            let emb = embed_all(&net, &test)?;
            let space = EvalSpace {
                embeddings: &emb.embeddings,
                partition: &net.partition,
                preds: &preds.labels,
            };
            let hist = distance_histograms(&space, &test, cfg.histogram_bins)?;

            let report_path = cli.out.join("eval_report.csv");
            write_file(&report_path, |w| report.write_csv(w))?;
            let hist_path = cli.out.join("histograms.csv");
            write_file(&hist_path, |w| hist.write_csv(w))?;
            manifest.artifact(&report_path);
            manifest.artifact(&hist_path);
            let mean = report.mean();
            say(
                cli,
                &format!(
                    "top1 {:.4}, top5 {:.4}, mAP {:.4} over {trials} trials (sigma {sigma})",
                    mean.cmc[0], mean.cmc[1], mean.map
                ),
            );
        }
        Command::Ablate { data } => {
            manifest.input("dataset", data);
            let ds = Dataset::load(data)?;
            say(
                cli,
                &format!(
                    "running 4-variant ablation over {} replicates x {} trials",
                    cfg.replicates, cfg.trials
                ),
            );
            let outcome = run_ablation(&ds, &cfg)?;
            for vr in &outcome.variants {
                for rep in &vr.replicates {
                    let dir = cli
                        .out
                        .join(vr.variant.name())
                        .join(format!("seed{}", rep.replicate));
                    std::fs::create_dir_all(&dir)?;
                    let report_path = dir.join("eval_report.csv");
                    write_file(&report_path, |w| rep.report.write_csv(w))?;
                    let hist_path = dir.join("histograms.csv");
                    write_file(&hist_path, |w| rep.histograms.write_csv(w))?;
                    manifest.artifact(&report_path);
                    manifest.artifact(&hist_path);
                }
            }
            let table_path = cli.out.join("ablation.csv");
            write_file(&table_path, |w| outcome.write_comparison_csv(w))?;
            manifest.artifact(&table_path);
            say(cli, &format!("wrote {}", table_path.display()));
        }
        Command::SweepSigma { data } => {
            manifest.input("dataset", data);
            let ds = Dataset::load(data)?;
            let outcome = run_sigma_sweep(&ds, &cfg)?;
            let path = cli.out.join("sigma_sweep.csv");
            write_file(&path, |w| outcome.write_csv(w))?;
            manifest.artifact(&path);
            say(cli, &format!("wrote {}", path.display()));
        }
        Command::SweepBranches { data } => {
            manifest.input("dataset", data);
            let ds = Dataset::load(data)?;
            let outcome = run_branch_sweep(&ds, &cfg)?;
            let path = cli.out.join("branch_sweep.csv");
            write_file(&path, |w| outcome.write_csv(w))?;
            manifest.artifact(&path);
            say(cli, &format!("wrote {}", path.display()));
        }
    }

    manifest.write(&cli.out)?;
    Ok(())
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Gen => "gen",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::SweepSigma { .. } => "sweep-sigma",
        Command::SweepBranches { .. } => "sweep-branches",
    }
}
