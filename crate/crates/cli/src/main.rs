use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use lrpabn::checkpoint::load_checkpoint;
use lrpabn::comparator::RelationMatrix;
use lrpabn::config::{RunConfig, CONFIG_FILE};
use lrpabn::data::{self, DataFormat, SynthSpec, METADATA_FILE, RAW_FILE};
use lrpabn::episodes::{split_classes, EpisodeSpec, LabeledDataset, Source};
use lrpabn::model::{EpisodeBatch, EpisodeScorer, Model};
use lrpabn::pooling::PoolingVariant;
use lrpabn::sweep::{self, SweepConfig};
use lrpabn::train::{self, append_eval_row, METRICS_FILE};
use lrpabn::verify;
use lrpabn::Error;

#[derive(Parser)]
#[command(name = "lrpabn", version, about = "Low-rank pairwise alignment bilinear network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on test-class episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model configuration; defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset path; defaults to the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write comparative features as comma-separated rows.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = verify::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = verify::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic fine-grained dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 84)]
        image_size: usize,
        #[arg(long, default_value_t = 5)]
        families: usize,
        #[arg(long, default_value_t = 12)]
        patch: usize,
        #[arg(long, default_value_t = 8)]
        jitter: usize,
    },
    /// Parameter counts and per-pair forward time across bilinear dimensions.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_DIMS.to_vec())]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 441)]
        positions: usize,
        #[arg(long, default_value_t = sweep::MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFinite(_) | Error::DegenerateStats(_) | Error::DegenerateInput(_)) => 3,
        Some(Error::Incompatible(_) | Error::Format { .. }) => 4,
        _ => 1,
    }
}

fn load_data(cfg: &RunConfig, override_path: Option<&Path>) -> anyhow::Result<LabeledDataset> {
    let size = cfg.model.encoder.image_size;
    if let Some(path) = override_path {
        let format = if path.is_file() || path.join(RAW_FILE).is_file() {
            DataFormat::Raw
        } else {
            DataFormat::Folder
        };
        return Ok(data::load_dataset(format, path, size)?);
    }
    match cfg.data_format {
        DataFormat::Synth if !data::raw_path(&cfg.data_root).is_file() => {
            Ok(data::generate_synthetic(&cfg.synth_for_model(), cfg.synth_seed)?.dataset)
        }
        format => Ok(data::load_dataset(format, &cfg.data_root, size)?),
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let dataset = load_data(&cfg, None)?;
    let split = split_classes(dataset.num_classes(), cfg.split, cfg.split_seed)?;
    info!(
        "{} samples, {} train / {} val / {} test classes",
        dataset.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let outcome = train::run_training(&cfg.model, &cfg.train, &dataset, &split.train, &cfg.out_dir)?;
    println!(
        "trained {} episodes; checkpoint {}",
        cfg.train.episodes,
        outcome.checkpoint.display()
    );
    Ok(())
}

/// Writes `episode,query,class,target,score,f0,f1,...` rows while scoring.
struct FeatureDump<'a, W: Write> {
    model: &'a Model,
    out: W,
    episode: usize,
}

impl<W: Write> EpisodeScorer for FeatureDump<'_, W> {
    fn score(&mut self, batch: &EpisodeBatch) -> lrpabn::Result<RelationMatrix> {
        let (scores, feats) = self.model.score_with_features(batch)?;
        let d = feats.shape()[1];
        for (p, row) in feats.data().chunks(d).enumerate() {
            let (q, c) = (p / batch.way, p % batch.way);
            let target = u8::from(batch.query_classes[q] == c);
            write!(self.out, "{},{q},{c},{target},{}", self.episode, scores.get(q, c))?;
            for v in row {
                write!(self.out, ",{v}")?;
            }
            writeln!(self.out)?;
        }
        self.episode += 1;
        Ok(scores)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    config: Option<PathBuf>,
    data_path: Option<PathBuf>,
    way: Option<usize>,
    shot: Option<usize>,
    query: Option<usize>,
    episodes: usize,
    seed: u64,
    dump: Option<PathBuf>,
) -> anyhow::Result<()> {
    let ckpt_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config_path = config.unwrap_or_else(|| ckpt_dir.join(CONFIG_FILE));
    let cfg = RunConfig::load(&config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let mut model = Model::new(cfg.model.clone(), 0)?;
    let params = load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    model.load_params(params)?;

    let dataset = load_data(&cfg, data_path.as_deref())?;
    let split = split_classes(dataset.num_classes(), cfg.split, cfg.split_seed)?;
    let base = cfg.episode();
    let spec = EpisodeSpec::new(
        way.unwrap_or(base.way),
        shot.unwrap_or(base.shot),
        query.unwrap_or(base.query),
        Source::Test,
    )?;
    let report = match dump {
        Some(path) => {
            let out = BufWriter::new(fs::File::create(&path)?);
            let mut scorer = FeatureDump {
                model: &model,
                out,
                episode: 0,
            };
            let r = train::evaluate(&mut scorer, &dataset, &split.test, &spec, episodes, seed)?;
            scorer.out.flush()?;
            r
        }
        None => train::evaluate(&mut model, &dataset, &split.test, &spec, episodes, seed)?,
    };
    println!("{}", report.summary());
    let metrics = ckpt_dir.join(METRICS_FILE);
    if metrics.is_file() {
        append_eval_row(&metrics, &report)?;
    }
    Ok(())
}

fn cmd_gradcheck(tolerance: f64, samples: usize, seed: u64) -> anyhow::Result<()> {
    let rows = verify::full_suite(tolerance, samples, seed)?;
    println!("{:<28} {:>8} {:>14}  result", "case", "coords", "worst_rel");
    let mut failed = 0;
    for r in &rows {
        let ok = r.report.passed();
        failed += usize::from(!ok);
        println!(
            "{:<28} {:>8} {:>14.3e}  {}",
            r.name,
            r.report.checked,
            r.report.worst_relative,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!(Error::NonFinite(format!(
            "{failed} of {} gradient checks exceed tolerance {tolerance:e}",
            rows.len()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    classes: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
    image_size: usize,
    families: usize,
    patch: usize,
    jitter: usize,
) -> anyhow::Result<()> {
    let spec = SynthSpec {
        classes,
        per_class,
        image_size,
        families,
        patch,
        jitter,
        sigma,
    };
    let synth = data::generate_synthetic(&spec, seed)?;
    fs::create_dir_all(out)?;
    data::save_raw(&out.join(RAW_FILE), &synth.dataset)?;
    synth.write_metadata(&out.join(METADATA_FILE))?;
    println!("wrote {} samples of {} classes to {}", synth.dataset.len(), classes, out.display());
    Ok(())
}

fn cmd_bench(
    dims: Vec<usize>,
    variants: Option<Vec<String>>,
    channels: usize,
    positions: usize,
    reps: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let variants = match variants {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<PoolingVariant>())
            .collect::<lrpabn::Result<Vec<_>>>()?,
        None => PoolingVariant::ALL.to_vec(),
    };
    let rows = sweep::run_sweep(&SweepConfig {
        dims,
        variants,
        channels,
        positions,
        reps,
        seed,
    })?;
    print!("{}", sweep::format_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Eval {
            checkpoint,
            config,
            data,
            way,
            shot,
            query,
            episodes,
            seed,
            dump_features,
        } => cmd_eval(&checkpoint, config, data, way, shot, query, episodes, seed, dump_features),
        Command::Gradcheck {
            tolerance,
            samples,
            seed,
        } => cmd_gradcheck(tolerance, samples, seed),
        Command::Synth {
            out,
            classes,
            per_class,
            sigma,
            seed,
            image_size,
            families,
            patch,
            jitter,
        } => cmd_synth(&out, classes, per_class, sigma, seed, image_size, families, patch, jitter),
        Command::Bench {
            dims,
            variants,
            channels,
            positions,
            reps,
            seed,
        } => cmd_bench(dims, variants, channels, positions, reps, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
