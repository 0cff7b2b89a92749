use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sfde::bench::{evaluate, gen_shift, gradcheck_suite, ShiftSpec};
use sfde::model::{pretrain_source, ModelParams, PretrainConfig};
use sfde::store::FeatureDataset;
use sfde::trainer::{
    ablation_mean_variant, write_history_csv, write_history_jsonl, AdaptConfig, EvalProbe,
    HistoryHeader, PseudoLabeler, Variant,
};
use sfde::{Error, Result};

#[derive(Parser)]
#[command(name = "sfde", version, about = "Source-free domain adaptation by source distribution estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair from a key = value spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: PathBuf,
    },
    /// Train extractor and classifier on labelled source features.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hidden layer widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "128")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        feature_dim: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Extra labelled set to report accuracy on.
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Adapt a checkpoint to an unlabeled target set.
    Adapt(AdaptArgs),
    /// Accuracy of a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adaptation with a swapped mean estimator or pseudo-labeler.
    Ablate {
        #[command(flatten)]
        adapt: AdaptArgs,
        /// target-mean, anchor, update-once or full.
        #[arg(long, conflicts_with = "pseudo")]
        variant: Option<String>,
        /// Pseudo-labeling strategy: clustering or max-prob.
        #[arg(long)]
        pseudo: Option<String>,
        #[arg(long, requires = "pseudo")]
        tau_prime: Option<f64>,
    },
}

#[derive(Args, Clone)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// office, visda or custom.
    #[arg(long, default_value = "office")]
    preset: String,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Classes per batch.
    #[arg(long)]
    cpb: Option<usize>,
    /// Samples per class per batch.
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Number of runs; run i uses seed + i.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// JSONL history; the CSV goes next to it.
    #[arg(long)]
    history: PathBuf,
    /// Adapted checkpoint (default: history path with extension `sfdm`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Labelled source set for the covariance-bias diagnostic.
    #[arg(long)]
    source: Option<PathBuf>,
}

impl AdaptArgs {
    fn config(&self) -> Result<(AdaptConfig, Vec<String>)> {
        let mut cfg = AdaptConfig::preset(&self.preset)?;
        let mut overrides = Vec::new();
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field)+ = v;
                    overrides.push(format!("{}={}", stringify!($flag), v));
                }
            };
        }
        set!(tau => tau);
        set!(gamma => gamma);
        set!(cpb => classes_per_batch);
        set!(nb => per_class_batch);
        set!(epochs => epochs);
        set!(seed => seed);
        set!(eta0 => opt.schedule.eta0);
        set!(alpha => opt.schedule.alpha);
        set!(beta => opt.schedule.beta);
        Ok((cfg, overrides))
    }

    fn run_paths(&self, run: u64) -> (PathBuf, PathBuf, PathBuf) {
        let base = if self.runs > 1 {
            let stem = self.history.file_stem().unwrap_or_default().to_string_lossy();
            let ext = self
                .history
                .extension()
                .map(|e| e.to_string_lossy().into_owned())
                .unwrap_or_else(|| "jsonl".into());
            self.history.with_file_name(format!("{stem}.run{run}.{ext}"))
        } else {
            self.history.clone()
        };
        let ckpt = match (&self.out, self.runs > 1) {
            (Some(o), false) => o.clone(),
            (Some(o), true) => {
                let stem = o.file_stem().unwrap_or_default().to_string_lossy();
                o.with_file_name(format!("{stem}.run{run}.sfdm"))
            }
            (None, _) => base.with_extension("sfdm"),
        };
        (base.clone(), base.with_extension("csv"), ckpt)
    }
}

fn run_adapt(args: &AdaptArgs, variant: Variant, pseudo: Option<PseudoLabeler>) -> Result<Value> {
    if args.runs == 0 {
        return Err(Error::InvalidConfig("--runs must be >= 1".into()));
    }
    let model = ModelParams::load(&args.ckpt)?;
    let target = FeatureDataset::read_binary(&args.target)?;
    let mut probe = EvalProbe::from_target(&target);
    if let Some(src) = &args.source {
        probe = probe.with_source(FeatureDataset::read_binary(src)?);
    }
    let (mut cfg, mut overrides) = args.config()?;
    if let Some(p) = pseudo {
        cfg.pseudo_labeler = p;
        if let PseudoLabeler::MaxProb { tau_prime } = p {
            overrides.push(format!("pseudo=max-prob tau_prime={tau_prime}"));
        }
    }
    let before = target.labels().map(|_| evaluate(&model, &target)).transpose()?;
    let unlabeled = target.unlabeled();
    let mut runs = Vec::new();
    for run in 0..args.runs {
        let run_cfg = AdaptConfig {
            seed: cfg.seed + run,
            ..cfg.clone()
        };
        eprintln!(
            "run {}/{}: preset {} tau {} gamma {} |C'| {} n_b {} epochs {} seed {}",
            run + 1,
            args.runs,
            run_cfg.preset,
            run_cfg.tau,
            run_cfg.gamma,
            run_cfg.classes_per_batch,
            run_cfg.per_class_batch,
            run_cfg.epochs,
            run_cfg.seed
        );
        let mut adapted = model.clone();
        let history = ablation_mean_variant(&mut adapted, &unlabeled, &run_cfg, variant, Some(&probe))?;
        let (jsonl, csv, ckpt) = args.run_paths(run);
        let header = HistoryHeader {
            config: variant.apply(&run_cfg),
            overrides: overrides.clone(),
        };
        write_history_jsonl(&jsonl, &header, &history)?;
        write_history_csv(&csv, &history)?;
        adapted.save(&ckpt)?;
        let after = target.labels().map(|_| evaluate(&adapted, &target)).transpose()?;
        runs.push(json!({
            "seed": run_cfg.seed,
            "epochs": history.len(),
            "final_loss": history.last().map(|r| r.loss),
            "final_n_confident": history.last().map(|r| r.n_confident),
            "accuracy": after.as_ref().map(|e| e.accuracy),
            "history": jsonl,
            "csv": csv,
            "checkpoint": ckpt,
        }));
    }
    let accs: Vec<f64> = runs.iter().filter_map(|r| r["accuracy"].as_f64()).collect();
    let mean = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
    Ok(json!({
        "preset": cfg.preset,
        "variant": variant.name(),
        "pseudo": match cfg.pseudo_labeler {
            PseudoLabeler::Clustering => json!("clustering"),
            PseudoLabeler::MaxProb { tau_prime } => json!({ "max-prob": tau_prime }),
        },
        "overrides": overrides,
        "source_only_accuracy": before.map(|e| e.accuracy),
        "mean_accuracy": mean,
        "runs": runs,
    }))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Gen { spec, out_src, out_tgt } => {
            let spec = ShiftSpec::load(&spec)?;
            let (src, tgt) = gen_shift(&spec)?;
            src.write_binary(&out_src)?;
            tgt.write_binary(&out_tgt)?;
            Ok(json!({
                "spec": spec,
                "source": { "path": out_src, "n": src.len(), "m": src.dim() },
                "target": { "path": out_tgt, "n": tgt.len(), "m": tgt.dim() },
            }))
        }
        Command::Pretrain {
            source,
            out,
            epochs,
            seed,
            hidden,
            feature_dim,
            batch,
            lr,
            holdout,
        } => {
            let ds = FeatureDataset::read_binary(&source)?;
            let mut cfg = PretrainConfig {
                hidden,
                feature_dim,
                epochs,
                batch_size: batch,
                seed,
                ..PretrainConfig::default()
            };
            cfg.opt.schedule.eta0 = lr;
            eprintln!("pretraining on {} samples for {epochs} epochs", ds.len());
            let model = pretrain_source(&ds, &cfg)?;
            model.save(&out)?;
            let holdout_acc = match holdout {
                Some(p) => Some(evaluate(&model, &FeatureDataset::read_binary(&p)?)?.accuracy),
                None => None,
            };
            Ok(json!({
                "checkpoint": out,
                "source_accuracy": evaluate(&model, &ds)?.accuracy,
                "holdout_accuracy": holdout_acc,
                "config": cfg,
            }))
        }
        Command::Adapt(args) => run_adapt(&args, Variant::Full, None),
        Command::Eval { ckpt, data } => {
            let model = ModelParams::load(&ckpt)?;
            let ds = FeatureDataset::read_binary(&data)?;
            if ds.dim() != model.input_dim() || ds.num_classes() != model.num_classes() {
                return Err(Error::ShapeMismatch {
                    expected: format!("m={}, K={}", model.input_dim(), model.num_classes()),
                    got: format!("m={}, K={}", ds.dim(), ds.num_classes()),
                });
            }
            let ev = evaluate(&model, &ds)?;
            Ok(json!({ "accuracy": ev.accuracy, "per_class": ev.per_class }))
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck_suite(seed)?;
            if !report.passed {
                println!("{}", serde_json::to_string(&report)?);
                return Err(Error::InvalidConfig(format!(
                    "gradcheck failed: max relative error {:e}",
                    report.max_relative_error()
                )));
            }
            Ok(serde_json::to_value(report)?)
        }
        Command::Ablate {
            adapt,
            variant,
            pseudo,
            tau_prime,
        } => {
            let variant = variant.as_deref().unwrap_or("full").parse::<Variant>()?;
            let pseudo = match pseudo.as_deref() {
                None | Some("clustering") => None,
                Some("max-prob") => Some(PseudoLabeler::MaxProb {
                    tau_prime: tau_prime.ok_or_else(|| {
                        Error::InvalidConfig("--pseudo max-prob needs --tau-prime".into())
                    })?,
                }),
                Some(other) => return Err(Error::InvalidConfig(format!("unknown pseudo-labeler `{other}`"))),
            };
            run_adapt(&adapt, variant, pseudo)
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .parse_default_env()
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: Usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
