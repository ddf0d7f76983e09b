//! Command line for the segmentation stack: synthetic data generation,
//! training, evaluation, gradient checking and ablation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dtgrm::checkpoint;
use dtgrm::config::RunConfig;
use dtgrm::data::{generate_dataset, load_dataset, write_dataset, Dataset};
use dtgrm::dtgrm::GraphVariant;
use dtgrm::gradcheck;
use dtgrm::scalar::Scalar;
use dtgrm::timeline::write_timeline;
use dtgrm::train::{
    evaluate_model, load_model, predict_stages, run_ablation, run_training,
    render_ablation_table, AblationParam,
};

#[derive(Parser)]
#[command(name = "dtgrm", version, about = "Frame-wise action segmentation trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by the verbs that build a run config. Each one overrides
/// the corresponding config-file field.
#[derive(Args, Clone)]
struct Overrides {
    /// Run config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Float width: 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    /// Drop the exchange terms and the exchanged pass.
    #[arg(long)]
    no_self_supervision: bool,
    /// Refinement stages.
    #[arg(long)]
    stages: Option<usize>,
    /// DRGC layers per stage.
    #[arg(long)]
    levels: Option<usize>,
    /// Percent of frames exchanged per sequence.
    #[arg(long)]
    eta: Option<f64>,
    /// both, s-only, l-only or conv.
    #[arg(long)]
    graph_variant: Option<GraphVariant>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn build(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.to_string_lossy().into_owned();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if self.no_self_supervision {
            cfg.self_supervision = false;
        }
        if let Some(s) = self.stages {
            cfg.dtgrm.num_stages = s;
        }
        if let Some(k) = self.levels {
            cfg.dtgrm.num_levels = k;
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        if let Some(v) = self.graph_variant {
            cfg.dtgrm.graph_variant = v;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (features, labels, manifest) to disk.
    GenData {
        #[command(flatten)]
        common: Overrides,
    },
    /// Train on a dataset directory, or on freshly generated data.
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Dataset directory from gen-data; generated in memory when
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-stage metrics for a checkpoint, plus optional timelines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; regenerated from the checkpoint's config
        /// when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where the report (and timelines) go; defaults to the
        /// checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// train or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Write one SVG timeline per sequence.
        #[arg(long)]
        timelines: bool,
    },
    /// Validate analytic gradients against finite differences (64-bit).
    Gradcheck {
        /// Deliberately corrupt one gradient; must make the run fail.
        #[arg(long)]
        corrupt_fixture: bool,
    },
    /// Train once per value of one hyperparameter under a shared seed.
    Ablate {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        data: Option<PathBuf>,
        /// eta, lambda_e, lambda_c, omega, num_stages, num_levels or
        /// graph-variant.
        param: String,
        #[arg(required = true)]
        values: Vec<String>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::GenData { common } => {
            let cfg = common.build()?;
            let dir = PathBuf::from(&cfg.out_dir);
            let ds = generate_dataset::<f32>(&cfg.data, cfg.n_train, cfg.n_test);
            write_dataset(&dir, ds.num_classes, &ds.train, &ds.test)?;
            println!(
                "wrote {} train / {} test sequences to {}",
                ds.train.len(),
                ds.test.len(),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { common, data } => {
            let cfg = common.build()?;
            match cfg.precision {
                32 => train_run::<f32>(&cfg, data.as_deref()),
                _ => train_run::<f64>(&cfg, data.as_deref()),
            }
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            split,
            timelines,
        } => match checkpoint::peek_precision(&checkpoint)? {
            32 => eval_run::<f32>(&checkpoint, data.as_deref(), out.as_deref(), &split, timelines),
            _ => eval_run::<f64>(&checkpoint, data.as_deref(), out.as_deref(), &split, timelines),
        },
        Cmd::Gradcheck { corrupt_fixture } => {
            let report = gradcheck::run_full_suite(corrupt_fixture);
            for e in &report.entries {
                println!(
                    "{:<18} worst rel err {:>12.3e}  {}",
                    e.name,
                    e.worst_rel_err,
                    if e.pass { "ok" } else { "FAIL" }
                );
            }
            Ok(if report.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Ablate {
            common,
            data,
            param,
            values,
        } => {
            let cfg = common.build()?;
            match cfg.precision {
                32 => ablate_run::<f32>(&cfg, data.as_deref(), &param, &values),
                _ => ablate_run::<f64>(&cfg, data.as_deref(), &param, &values),
            }
        }
    }
}

fn obtain_dataset<T: Scalar>(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<Dataset<T>> {
    match data {
        Some(dir) => {
            load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
        }
        None => Ok(generate_dataset(&cfg.data, cfg.n_train, cfg.n_test)),
    }
}

fn train_run<T: Scalar>(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<ExitCode> {
    let dataset = obtain_dataset::<T>(cfg, data)?;
    let summary = run_training(cfg, &dataset)?;
    let last = summary.validations.last().expect("final validation");
    println!("held-out metrics after epoch {}:", last.epoch);
    for (stage, report) in &last.reports {
        println!("[{stage}]");
        print!("{}", report.render());
    }
    println!(
        "best final-stage edit {:.4} at epoch {}; checkpoints in {}",
        summary.best.1, summary.best.0, cfg.out_dir
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_run<T: Scalar>(
    ckpt: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    split: &str,
    timelines: bool,
) -> anyhow::Result<ExitCode> {
    let (model, cfg, epoch) = load_model::<T>(ckpt)?;
    let dataset = obtain_dataset::<T>(&cfg, data)?;
    if dataset.num_classes != model.num_classes() || dataset.d_in != model.d_in() {
        anyhow::bail!(
            "dataset has {} classes / {} dims, checkpoint expects {} / {}",
            dataset.num_classes,
            dataset.d_in,
            model.num_classes(),
            model.d_in()
        );
    }
    let seqs = match split {
        "train" => &dataset.train,
        "test" => &dataset.test,
        other => anyhow::bail!("unknown split {other:?} (expected train or test)"),
    };
    let reports = evaluate_model(&model, seqs);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir)?;

    println!("checkpoint epoch {epoch}, split {split}:");
    for (stage, report) in &reports {
        println!("[{stage}]");
        print!("{}", report.render());
    }
    let record = json!({
        "checkpoint_epoch": epoch,
        "split": split,
        "stages": reports
            .iter()
            .map(|(stage, r)| json!({
                "stage": stage,
                "acc": r.acc,
                "edit": r.edit,
                "f1": r.f1,
            }))
            .collect::<Vec<_>>(),
    });
    let report_path = out_dir.join("eval_report.json");
    std::fs::write(&report_path, format!("{record:#}\n"))?;
    println!("report written to {}", report_path.display());

    if timelines {
        for seq in seqs {
            let pred = predict_stages(&model, &seq.features)
                .pop()
                .expect("at least the trunk prediction");
            let path = out_dir.join(format!("timeline-{}.svg", seq.id));
            write_timeline(&path, &seq.id, &seq.labels, &pred)?;
        }
        println!("wrote {} timelines to {}", seqs.len(), out_dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate_run<T: Scalar>(
    cfg: &RunConfig,
    data: Option<&Path>,
    param: &str,
    values: &[String],
) -> anyhow::Result<ExitCode> {
    let param: AblationParam = param.parse()?;
    let dataset = obtain_dataset::<T>(cfg, data)?;
    let rows = run_ablation(cfg, param, values, &dataset)?;
    let table = render_ablation_table(param.name(), &rows);
    print!("{table}");
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = Path::new(&cfg.out_dir).join("ablation.txt");
    std::fs::write(&path, table)?;
    println!("table written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}
