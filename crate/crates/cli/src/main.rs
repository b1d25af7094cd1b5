//! `polyfusion` command-line tool.
//!
//! Exit codes: 0 success, 1 verification or validation failure, 2 usage
//! error, 3 runtime or data error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polyfusion::data::{self, Generator, SegmentDataset, SynthSpec, Task};
use polyfusion::fusion::{param_count, FusionPath, FusionSpec};
use polyfusion::models::{write_atomic, ExtractorSpec, ModelGraph, Topology};
use polyfusion::train::{self, fold_seed, TrainReport, VERSION};
use polyfusion::{verify, Error, Result};
use serde::Serialize;

use config::{DataSource, ModelChoice, Overrides, Profile, RunConfig};

#[derive(Parser)]
#[command(name = "polyfusion", version, about = "Multimodal fusion experiments on EEG and NIRS segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint and a training report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Hold out this fold of the k-fold plan and report its accuracy.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// k-fold cross-validation with trial-disjoint folds.
    Cv {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of folds to run.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value = "interaction")]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        #[arg(long, default_value_t = 124)]
        trials: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        signal: f64,
        #[arg(long, value_enum, default_value = "mi")]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write continuous trial recordings instead of segments.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-check suite.
    Verify {
        /// Run only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Directory of stored factorizations for the fixture check.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Write fixtures to this directory and exit.
        #[arg(long, conflicts_with_all = ["filter", "fixtures"])]
        write_fixtures: Option<PathBuf>,
    },
    /// Parameter counts of every fusion variant and whole model.
    Params {
        /// Feature lengths of the three modalities.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [120, 144, 144])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        output_dim: usize,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        #[arg(long, default_value_t = 3)]
        order: usize,
        /// Extractor widths for the whole-model column.
        #[arg(long, value_enum, default_value = "full")]
        profile: Profile,
        #[arg(long)]
        json: bool,
    },
    /// Cut raw trial recordings into 3 s windows.
    Segment {
        /// Trial manifest written by `synth --raw` or by hand.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Sets the model, shuffle, fold and synthetic-data seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Segment manifest to use instead of the configured data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory (default `$POLYFUSION_OUT/<task>` or `runs/<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GeneratorArg {
    Additive,
    Interaction,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TaskArg {
    Mi,
    Ma,
}

impl RunArgs {
    fn resolve(&self, folds: Option<Vec<usize>>) -> Result<RunConfig> {
        let flags = Overrides {
            profile: self.profile,
            seed: self.seed,
            jobs: self.jobs,
            data: self.data.clone(),
            model: self.model,
            epochs: self.epochs,
            folds,
            out: self.out.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &flags)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::InfeasibleGeometry { .. }
        | Error::MaterializationGuard { .. }
        | Error::Json(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { run, holdout } => run.resolve(None).and_then(|c| cmd_train(&c, holdout)),
        Command::Cv { run, folds } => run.resolve(folds).and_then(|c| cmd_cv(&c)),
        Command::Synth {
            generator,
            subjects,
            trials,
            noise,
            signal,
            task,
            seed,
            raw,
            out,
        } => {
            let spec = SynthSpec {
                generator: match generator {
                    GeneratorArg::Additive => Generator::Additive,
                    GeneratorArg::Interaction => Generator::Interaction,
                },
                subjects,
                trials_per_subject: trials,
                noise,
                signal,
                task: match task {
                    TaskArg::Mi => Task::Mi,
                    TaskArg::Ma => Task::Ma,
                },
            };
            cmd_synth(&spec, seed, raw, &out)
        }
        Command::Verify {
            filter,
            fixtures,
            write_fixtures,
        } => match write_fixtures {
            Some(dir) => verify::write_fixtures(&dir).map(|_| {
                println!("fixtures written to {}", dir.display());
                true
            }),
            None => Ok(cmd_verify(filter.as_deref(), fixtures.as_deref())),
        },
        Command::Params {
            dims,
            output_dim,
            rank,
            order,
            profile,
            json,
        } => cmd_params([dims[0], dims[1], dims[2]], output_dim, rank, order, profile, json),
        Command::Segment { manifest, out } => cmd_segment(&manifest, &out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<SegmentDataset> {
    match &cfg.data {
        DataSource::Manifest(p) => data::load_manifest(p),
        DataSource::Synthetic { spec, seed } => data::synth_dataset(spec, *seed),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct TrainArtifact {
    library_version: &'static str,
    model: String,
    config: serde_json::Value,
    init_seed: u64,
    shuffle_seed: u64,
    param_count: usize,
    holdout_fold: Option<usize>,
    train_accuracy: f64,
    holdout_accuracy: Option<f64>,
    report: TrainReport,
}

fn cmd_train(cfg: &RunConfig, holdout: Option<usize>) -> Result<bool> {
    let ds = load_data(cfg)?;
    let (train_idx, test_idx) = match holdout {
        Some(f) => {
            if f >= cfg.cv.k {
                return Err(Error::InvalidArgument(format!("holdout fold {f} out of range for k = {}", cfg.cv.k)));
            }
            let plan = data::make_folds(&ds, cfg.cv.k, cfg.cv.fold_seed)?;
            let (tr, te) = plan.split(&ds, f);
            plan.assert_disjoint(&ds, &tr, &te)?;
            (tr, Some(te))
        }
        None => ((0..ds.len()).collect(), None),
    };
    let (init_seed, shuffle_seed) = (fold_seed(cfg.cv.seed, 0, 0), fold_seed(cfg.cv.seed, 0, 1));
    let mut model = ModelGraph::new(cfg.model.topology(), init_seed)?;
    let report = train::train(&mut model, &ds, &train_idx, &cfg.train, shuffle_seed)?;
    let train_accuracy = train::evaluate(&model, &ds, &train_idx)?;
    let holdout_accuracy = test_idx.as_deref().map(|t| train::evaluate(&model, &ds, t)).transpose()?;

    let out = cfg.output_dir();
    create_dir(&out)?;
    model.save(out.join("checkpoint"))?;
    let artifact = TrainArtifact {
        library_version: VERSION,
        model: model.topology().label(),
        config: cfg.fingerprint(),
        init_seed,
        shuffle_seed,
        param_count: model.param_count(),
        holdout_fold: holdout,
        train_accuracy,
        holdout_accuracy,
        report,
    };
    write_json(&out.join("train_report.json"), &artifact)?;
    println!("model {} ({} parameters), {} epochs", artifact.model, artifact.param_count, cfg.train.epochs);
    println!("final loss {:.4}", artifact.report.losses.last().copied().unwrap_or(f64::NAN));
    println!("train accuracy {train_accuracy:.4}");
    if let Some(a) = holdout_accuracy {
        println!("held-out accuracy {a:.4}");
    }
    println!("wrote {}", out.display());
    Ok(true)
}

fn cmd_cv(cfg: &RunConfig) -> Result<bool> {
    let ds = load_data(cfg)?;
    let report = train::cross_validate(&cfg.model.topology(), &ds, &cfg.train, &cfg.cv, cfg.fingerprint())?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_json(&out.join("cv_report.json"), &report)?;
    write_atomic(&out.join("cv_report.csv"), report.to_csv().as_bytes())?;
    println!("{:>4}  {:>8}  {:>8}", "fold", "segment", "trial");
    for f in &report.folds {
        println!("{:>4}  {:>8.4}  {:>8.4}", f.fold, f.accuracy, f.trial_accuracy);
    }
    println!("{} mean {:.4} ± {:.4} (trial vote {:.4})", report.model, report.mean_accuracy, report.std_accuracy, report.mean_trial_accuracy);
    println!("wrote {}", out.display());
    Ok(true)
}

fn cmd_synth(spec: &SynthSpec, seed: u64, raw: bool, out: &Path) -> Result<bool> {
    create_dir(out)?;
    let path = if raw {
        data::save_trial_manifest(&data::synth_recordings(spec, seed)?, out)?
    } else {
        data::save_manifest(&data::synth_dataset(spec, seed)?, out)?
    };
    println!("{} trials, wrote {}", spec.subjects * spec.trials_per_subject, path.display());
    Ok(true)
}

fn cmd_segment(manifest: &Path, out: &Path) -> Result<bool> {
    let recs = data::load_trial_manifest(manifest)?;
    let ds = SegmentDataset::from_recordings(&recs)?;
    create_dir(out)?;
    let path = data::save_manifest(&ds, out)?;
    println!("{} trials, {} segments, wrote {}", ds.trials.len(), ds.len(), path.display());
    Ok(true)
}

fn cmd_verify(filter: Option<&str>, fixtures: Option<&Path>) -> bool {
    let results = verify::run(filter, fixtures);
    if results.is_empty() {
        println!("no check matches {:?}; available: {}", filter.unwrap_or(""), verify::CHECKS.join(", "));
        return false;
    }
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!("{:<width$}  {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    failed == 0
}

#[derive(Serialize)]
struct ParamRow {
    variant: String,
    fusion: u128,
    model: u128,
}

fn cmd_params(dims: [usize; 3], output_dim: usize, rank: usize, order: usize, profile: Profile, json: bool) -> Result<bool> {
    let div = match profile {
        Profile::Desk => 6,
        Profile::Full => 1,
    };
    let (e, n) = (ExtractorSpec::eeg(div), ExtractorSpec::nirs(div));
    let fused_variants = [
        ("lf".to_string(), FusionSpec::linear(dims, output_dim)),
        ("tf full".to_string(), FusionSpec::tensor(dims, output_dim, rank, FusionPath::Full)),
        ("tf factorized".to_string(), FusionSpec::tensor(dims, output_dim, rank, FusionPath::Factorized)),
        (format!("pf{order} full"), FusionSpec::polynomial(dims, output_dim, order, rank, false, FusionPath::Full)),
        (format!("pf{order} factorized"), FusionSpec::polynomial(dims, output_dim, order, rank, false, FusionPath::Factorized)),
        (format!("pf{order} symmetric"), FusionSpec::polynomial(dims, output_dim, order, rank, true, FusionPath::Factorized)),
    ];
    let mut rows = Vec::new();
    for m in polyfusion::models::Modality::ALL {
        let t = Topology::single(e.clone(), n.clone(), m);
        rows.push(ParamRow {
            variant: m.name().to_string(),
            fusion: 0,
            model: t.param_count(),
        });
    }
    for (name, spec) in fused_variants {
        spec.validate().or_else(|err| match err {
            Error::MaterializationGuard { .. } => Ok(()),
            other => Err(other),
        })?;
        let fusion = param_count(&spec);
        let t = Topology::fused(e.clone(), n.clone(), spec);
        rows.push(ParamRow {
            variant: name,
            fusion,
            model: t.param_count(),
        });
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(true);
    }
    println!("fusion dims {dims:?}, output {output_dim}, rank {rank}; model column uses {profile:?} extractors");
    println!("{:<18} {:>14} {:>14}", "variant", "fusion", "model");
    for r in &rows {
        println!("{:<18} {:>14} {:>14}", r.variant, r.fusion, r.model);
    }
    Ok(true)
}
