//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cdcd_core::data::Dataset;
use cdcd_core::denoiser::Params;
use cdcd_core::eval::{
    bench_csv, bench_data, convergence_bench, elbo_nll, exact_distribution, generate, accuracy_of,
    local_coherence_distance, mi_lower_bound, EvalReport, NegativeDraw, RatioSource, EXACT_STATE_LIMIT,
};
use cdcd_core::io;
use cdcd_core::rng::{tags, RngStream};
use cdcd_core::sampler::{sample_many, SamplerConfig};
use cdcd_core::trainer::train;

use crate::config::{ExactMode, Resolved, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cdcd", version, about = "Conditional discrete diffusion with contrastive training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key=value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.mode=step`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint, log and config snapshot.
    Train(Common),
    /// Draw class-conditioned samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        truncation: Option<f64>,
    },
    /// Score a checkpoint on the held-out split of its world.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Equal-epoch sweep over diffusion lengths, variants and seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step counts.
        #[arg(long = "T", value_delimiter = ',', default_value = "4,8,16")]
        steps: Vec<usize>,
        /// Comma-separated variants such as `vanilla,step-intra`.
        #[arg(long, value_delimiter = ',', default_value = "vanilla")]
        mode: Vec<String>,
        /// Number of seeds; seeds run from 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Generate a world and write its train and held-out corpora.
    MakeWorld(Common),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Sample {
            common,
            checkpoint,
            class,
            count,
            truncation,
        } => cmd_sample(&common, &checkpoint, class, count, truncation),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Bench {
            common,
            steps,
            mode,
            seeds,
        } => cmd_bench(&common, steps, mode, seeds),
        Command::MakeWorld(c) => cmd_make_world(&c),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn splits(r: &Resolved) -> Result<(cdcd_core::data::World, Dataset, Dataset)> {
    Ok(bench_data(&r.bench_spec(vec![], vec![], vec![]))?)
}

pub fn cmd_train(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    let r = cfg.resolve()?;
    prepare_out(&c.out)?;
    let (_, train_set, heldout) = splits(&r)?;
    let (params, log) = train(&r.train, &train_set, &heldout, &RngStream::new(r.train.seed))?;
    write(&c.out.join("train_log.csv"), &log.to_csv())?;
    write(&c.out.join("config.snapshot"), &cfg.snapshot())?;
    io::save_checkpoint(&c.out.join("model.ckpt"), &params, &cfg.snapshot())?;
    if let Some(last) = log.records.last() {
        println!(
            "trained {} epochs: loss {:.4}, held-out bound {}",
            last.epoch,
            last.loss.total,
            last.heldout_elbo.map_or("n/a".into(), |v| format!("{v:.4} nats/token"))
        );
    }
    Ok(())
}

/// The checkpoint's own snapshot, then `--config`, then `--set`.
fn checkpoint_config(c: &Common, checkpoint: &Path) -> Result<(Params, RunConfig, Resolved)> {
    let (params, snapshot) =
        io::load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&snapshot).context("in checkpoint config snapshot")?;
    if let Some(p) = &c.config {
        cfg.apply_text(&std::fs::read_to_string(p)?)
            .with_context(|| format!("in config {}", p.display()))?;
    }
    for o in &c.set {
        cfg.apply_override(o).with_context(|| format!("in --set {o}"))?;
    }
    let r = cfg.resolve()?;
    let (m, d) = (params.config(), &r.train.denoiser);
    if (m.codebook, m.states, m.seq_len, m.steps, m.classes) != (d.codebook, d.states, d.seq_len, d.steps, d.classes) {
        bail!("configuration does not match the checkpoint's model shape");
    }
    Ok((params, cfg, r))
}

pub fn cmd_sample(c: &Common, checkpoint: &Path, class: usize, count: Option<usize>, truncation: Option<f64>) -> Result<()> {
    let (params, _, r) = checkpoint_config(c, checkpoint)?;
    let classes = params.config().classes;
    if class >= classes {
        bail!("class {class} out of range: the model has {classes} classes");
    }
    let cfg = SamplerConfig {
        truncation: truncation.unwrap_or(r.sampler.truncation),
        count: count.unwrap_or(r.sampler.count),
        seed: r.sampler.seed,
    };
    cfg.validate()?;
    let schedule = r.train.build_schedule()?;
    let stream = RngStream::new(cfg.seed).child(tags::SAMPLE).child(class as u64);
    let items = sample_many(&params, class, &schedule, &cfg, cfg.count, &stream)?;
    let m = params.config();
    let data = Dataset::new(m.codebook, m.seq_len, classes, items)?;
    prepare_out(&c.out)?;
    let path = c.out.join("samples.corpus");
    io::save_corpus(&path, &data)?;
    println!("wrote {} samples of class {class} to {}", data.len(), path.display());
    Ok(())
}

fn exact_available(r: &Resolved) -> bool {
    let s = r.train.schedule.states() as f64;
    s.powi(r.world.seq_len as i32) <= EXACT_STATE_LIMIT as f64
}

pub fn cmd_eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let (params, _, r) = checkpoint_config(c, checkpoint)?;
    let schedule = r.train.build_schedule()?;
    let (world, _, heldout) = splits(&r)?;
    if heldout.is_empty() {
        bail!("world.heldout_per_class must be at least 1 for eval");
    }
    let exact = match r.eval.exact {
        ExactMode::Off => false,
        ExactMode::Auto => exact_available(&r),
        ExactMode::On => {
            if !exact_available(&r) {
                bail!(
                    "exact likelihood needs S^L <= {EXACT_STATE_LIMIT} joint states but S={} and L={}; \
                     shrink world.codebook, world.seq_len or schedule.steps, or set eval.exact=auto",
                    r.train.schedule.states(),
                    r.world.seq_len
                );
            }
            true
        }
    };
    let opts = r.train.elbo_options();
    let elbo = elbo_nll(&params, &heldout, &schedule, &opts)?;
    let exact_nll = if exact {
        let dists = (0..heldout.classes)
            .map(|g| exact_distribution(&params, g, &schedule))
            .collect::<cdcd_core::Result<Vec<_>>>()?;
        let k = heldout.codebook;
        let total: f64 = heldout
            .items
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let idx = x.tokens.iter().fold(0usize, |a, &t| a * k + t);
                -dists[heldout.class_of(i)][idx].ln()
            })
            .sum();
        Some(total / (heldout.len() * heldout.seq_len) as f64)
    } else {
        None
    };
    let source = if exact {
        RatioSource::Exact {
            params: &params,
            schedule: &schedule,
        }
    } else {
        RatioSource::Model {
            params: &params,
            schedule: &schedule,
            opts,
        }
    };
    let eval_stream = RngStream::new(r.eval.seed);
    let mi = mi_lower_bound(
        &source,
        &heldout,
        r.eval.mi_negatives,
        NegativeDraw::Marginal,
        &eval_stream.child(tags::NEGATIVES),
    )?;
    let samples = generate(&params, &schedule, &r.sampler, r.eval.per_class, &eval_stream.child(tags::SAMPLE))?;
    let report = EvalReport {
        elbo_per_token: elbo,
        exact_nll_per_token: exact_nll,
        mi_lower_bound: mi,
        genre_accuracy: accuracy_of(&world, &samples)?,
        coherence_tv: local_coherence_distance(&world, &samples)?,
        steps: r.train.schedule.steps,
        mode: r.train.loss.variant(),
        seed: r.train.seed,
    };
    prepare_out(&c.out)?;
    write(&c.out.join("eval.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn cmd_bench(c: &Common, steps: Vec<usize>, modes: Vec<String>, seeds: u64) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    let r = cfg.resolve()?;
    if steps.is_empty() || modes.is_empty() || seeds == 0 {
        bail!("bench needs at least one step count, mode and seed");
    }
    for m in &modes {
        r.train.loss.clone().set_variant(m)?;
    }
    prepare_out(&c.out)?;
    write(&c.out.join("config.snapshot"), &cfg.snapshot())?;
    let spec = r.bench_spec(steps, modes, (0..seeds).collect());
    let rows = convergence_bench(&spec, Some(&c.out.join("cells")))?;
    write(&c.out.join("bench.csv"), &bench_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), c.out.join("bench.csv").display());
    Ok(())
}

pub fn cmd_make_world(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    let r = cfg.resolve()?;
    prepare_out(&c.out)?;
    let (_, train_set, heldout) = splits(&r)?;
    io::save_corpus(&c.out.join("train.corpus"), &train_set)?;
    io::save_corpus(&c.out.join("heldout.corpus"), &heldout)?;
    write(&c.out.join("config.snapshot"), &cfg.snapshot())?;
    println!(
        "world {}: {} train and {} held-out sequences",
        r.world.name,
        train_set.len(),
        heldout.len()
    );
    Ok(())
}
