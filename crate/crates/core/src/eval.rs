//! Metrics and exact oracles for trained models.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{bayes_classify, log_sequence_probability, sample_dataset, Dataset, World, WorldSpec};
use crate::denoiser::{compose_reverse, predict_x0, Params};
use crate::diffusion::{
    forward_marginal, forward_sample, kl_categorical, posterior, prior_term, stationary_distribution, Schedule,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::rng::{tags, RngStream};
use crate::sampler::{sample, SamplerConfig};
use crate::trainer::{train, TrainConfig};

/// Joint-state guard for [`exact_distribution`].
pub const EXACT_STATE_LIMIT: usize = 4096;

/// How the expectation over `x_t ~ q(x_t | x_0)` inside each bound term is
/// taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboOptions {
    /// Enumerate `x_t` exactly when its support has at most this many
    /// sequences.
    pub enumerate_limit: usize,
    /// Monte Carlo draws per step otherwise.
    pub draws: usize,
    pub stream: RngStream,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            enumerate_limit: EXACT_STATE_LIMIT,
            draws: 1,
            stream: RngStream::new(0).child(tags::EVAL),
        }
    }
}

/// Per-term bound for one sequence, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub l_t: f64,
    /// `L_{t-1}` for `t = 2..=T`, in that order.
    pub l_tm1: Vec<f64>,
    pub l0: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.l_t + self.l_tm1.iter().sum::<f64>() + self.l0
    }
}

/// Weighted support of `q(x_t | x_0)`: every sequence when small enough,
/// otherwise `draws` samples with equal weight.
fn latent_support(
    x0: &TokenSequence,
    t: usize,
    schedule: &Schedule,
    opts: &ElboOptions,
    stream: &RngStream,
) -> Result<Vec<(TokenSequence, f64)>> {
    let marginal = forward_marginal(x0, t, schedule)?;
    let supports: Vec<Vec<(usize, f64)>> = marginal
        .rows()
        .map(|row| row.iter().copied().enumerate().filter(|(_, p)| *p > 0.0).collect())
        .collect();
    let size = supports
        .iter()
        .try_fold(1usize, |acc, s| acc.checked_mul(s.len()))
        .unwrap_or(usize::MAX);
    if size <= opts.enumerate_limit {
        let mut out = Vec::with_capacity(size);
        let mut idx = vec![0usize; supports.len()];
        loop {
            let mut w = 1.0;
            let mut tokens = Vec::with_capacity(idx.len());
            for (s, &i) in supports.iter().zip(&idx) {
                tokens.push(s[i].0);
                w *= s[i].1;
            }
            out.push((TokenSequence::new(tokens, x0.class), w));
            // odometer increment, last position fastest
            let mut pos = idx.len();
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < supports[pos].len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
    let w = 1.0 / opts.draws.max(1) as f64;
    (0..opts.draws.max(1))
        .map(|d| Ok((forward_sample(x0, t, schedule, &stream.child(d as u64))?, w)))
        .collect()
}

/// Every bound term for one sequence, all steps evaluated.
pub fn sequence_elbo(
    params: &Params,
    x0: &TokenSequence,
    class: usize,
    schedule: &Schedule,
    opts: &ElboOptions,
) -> Result<ElboTerms> {
    let l_t = prior_term(x0, schedule)?;
    let mut l0 = 0.0;
    for (x1, w) in latent_support(x0, 1, schedule, opts, &opts.stream.child(1))? {
        let p0 = predict_x0(params, &x1, 1, class)?;
        let nll: f64 = x0.tokens.iter().enumerate().map(|(pos, &x)| -p0.row(pos)[x].ln()).sum();
        l0 += w * nll;
    }
    let mut l_tm1 = Vec::with_capacity(schedule.steps().saturating_sub(1));
    for t in 2..=schedule.steps() {
        let mut term = 0.0;
        for (xt, w) in latent_support(x0, t, schedule, opts, &opts.stream.child(t as u64))? {
            let q = posterior(x0, &xt, t, schedule)?;
            let p = compose_reverse(&predict_x0(params, &xt, t, class)?, &xt, t, schedule)?;
            term += w * kl_categorical(&q, &p)?;
        }
        l_tm1.push(term);
    }
    Ok(ElboTerms { l_t, l_tm1, l0 })
}

/// Mean bound per token over a labelled dataset. Item `i` uses
/// `opts.stream.child(i)` for any Monte Carlo draws.
pub fn elbo_nll(params: &Params, dataset: &Dataset, schedule: &Schedule, opts: &ElboOptions) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let totals = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let item_opts = ElboOptions {
                stream: opts.stream.child(i as u64),
                ..*opts
            };
            sequence_elbo(params, x, dataset.class_of(i), schedule, &item_opts).map(|e| e.total())
        })
        .collect::<Result<Vec<f64>>>()?;
    let tokens = (dataset.len() * dataset.seq_len) as f64;
    Ok(totals.iter().sum::<f64>() / tokens)
}

fn joint_state_count(states: usize, len: usize) -> Result<usize> {
    states
        .checked_pow(len as u32)
        .filter(|&n| n <= EXACT_STATE_LIMIT)
        .ok_or_else(|| {
            Error::Guard(format!(
                "{states}^{len} joint states exceed {EXACT_STATE_LIMIT}; shrink K, L or use the ELBO"
            ))
        })
}

fn decode(mut idx: usize, base: usize, len: usize) -> Vec<usize> {
    let mut v = vec![0; len];
    for slot in v.iter_mut().rev() {
        *slot = idx % base;
        idx /= base;
    }
    v
}

/// Probability of every joint state under independent per-position rows.
fn joint_probs(rows: &crate::diffusion::PositionDistributions, base: usize, len: usize, out: &mut [f64], weight: f64) {
    for (y, slot) in out.iter_mut().enumerate() {
        let mut p = weight;
        for (pos, &tok) in decode(y, base, len).iter().enumerate() {
            p *= rows.row(pos)[tok];
            if p == 0.0 {
                break;
            }
        }
        *slot += p;
    }
}

/// Exact model distribution over all `K^L` clean sequences (lexicographic
/// order), marginalising every latent path by dynamic programming over the
/// `S^L` joint states.
pub fn exact_distribution(params: &Params, class: usize, schedule: &Schedule) -> Result<Vec<f64>> {
    let len = params.config().seq_len;
    let s = schedule.states();
    let k = schedule.codebook();
    let n = joint_state_count(s, len)?;
    let prior = stationary_distribution(schedule);
    let mut msg: Vec<f64> = (0..n)
        .map(|x| decode(x, s, len).iter().map(|&tok| prior[tok]).product())
        .collect();
    for t in (2..=schedule.steps()).rev() {
        let mut next = vec![0.0; n];
        for (x, &m) in msg.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let xt = TokenSequence::new(decode(x, s, len), None);
            let rev = compose_reverse(&predict_x0(params, &xt, t, class)?, &xt, t, schedule)?;
            joint_probs(&rev, s, len, &mut next, m);
        }
        msg = next;
    }
    let nk = k.pow(len as u32);
    let mut out = vec![0.0; nk];
    for (x, &m) in msg.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let x1 = TokenSequence::new(decode(x, s, len), None);
        let p0 = predict_x0(params, &x1, 1, class)?;
        joint_probs(&p0, k, len, &mut out, m);
    }
    Ok(out)
}

/// `−ln p_θ(x0 | c)` by exact marginalisation.
pub fn exact_nll(params: &Params, x0: &TokenSequence, class: usize, schedule: &Schedule) -> Result<f64> {
    let k = schedule.codebook();
    let dist = exact_distribution(params, class, schedule)?;
    Ok(-dist[sequence_index(x0, k)?].ln())
}

fn sequence_index(x0: &TokenSequence, k: usize) -> Result<usize> {
    x0.tokens.iter().try_fold(0usize, |acc, &x| {
        if x < k {
            Ok(acc * k + x)
        } else {
            Err(Error::range("clean token", x, format!("[0, {k})")))
        }
    })
}

/// Where density ratios `f(z, c) = p(z | c) / p(z)` come from.
pub enum RatioSource<'a> {
    /// Exact world likelihoods.
    Oracle(&'a World),
    /// `exp(−ELBO)` as a stand-in for the model likelihood.
    Model {
        params: &'a Params,
        schedule: &'a Schedule,
        opts: ElboOptions,
    },
    /// Exact model likelihoods by enumeration (small models only).
    Exact {
        params: &'a Params,
        schedule: &'a Schedule,
    },
}

/// Distribution the contrastive negatives are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeDraw {
    /// Any dataset item (the empirical marginal); the bound is valid.
    Marginal,
    /// Items of other classes only, as used in training.
    InterClass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Whether ratios came from the ELBO proxy.
    pub proxy: bool,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln N − InfoNCE` averaged over the dataset as positives, with `n`
/// negatives per positive. Positive `i` draws its negatives from
/// `stream.child(i)`.
pub fn mi_lower_bound(
    source: &RatioSource<'_>,
    dataset: &Dataset,
    n: usize,
    draw: NegativeDraw,
    stream: &RngStream,
) -> Result<MiEstimate> {
    use rand::Rng;
    if n == 0 {
        return Err(Error::range("negatives", 0, ">= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::Config("cannot estimate from an empty dataset".into()));
    }
    let g = dataset.classes;
    let (log_prior, proxy): (Vec<f64>, bool) = match source {
        RatioSource::Oracle(w) => (w.prior().iter().map(|p| p.ln()).collect(), false),
        RatioSource::Model { .. } => (vec![-(g as f64).ln(); g], true),
        RatioSource::Exact { .. } => (vec![-(g as f64).ln(); g], false),
    };
    let k = dataset.codebook;
    let exact = match source {
        RatioSource::Exact { params, schedule } => Some(
            (0..g)
                .map(|c| exact_distribution(params, c, schedule))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    // log p(z_i | c) for every item and class
    let table: Vec<Vec<f64>> = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            (0..g)
                .map(|c| match source {
                    RatioSource::Oracle(w) => log_sequence_probability(w, x, c),
                    RatioSource::Model { params, schedule, opts } => {
                        let o = ElboOptions {
                            stream: opts.stream.child(i as u64),
                            ..*opts
                        };
                        sequence_elbo(params, x, c, schedule, &o).map(|e| -e.total())
                    }
                    RatioSource::Exact { .. } => {
                        let dists = exact.as_ref().expect("computed for exact sources");
                        sequence_index(x, k).map(|idx| dists[c][idx].ln())
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let log_marginal: Vec<f64> = table
        .iter()
        .map(|row| log_sum_exp(&row.iter().zip(&log_prior).map(|(a, b)| a + b).collect::<Vec<_>>()))
        .collect();
    let log_ratio = |i: usize, c: usize| table[i][c] - log_marginal[i];

    let by_other: Vec<Vec<usize>> = (0..g)
        .map(|c| (0..dataset.len()).filter(|&i| dataset.class_of(i) != c).collect())
        .collect();
    let ln_n = (n as f64).ln();
    let mut bounds = Vec::with_capacity(dataset.len());
    let mut scratch = Vec::with_capacity(n + 1);
    for i in 0..dataset.len() {
        let c = dataset.class_of(i);
        let pool = match draw {
            NegativeDraw::Marginal => None,
            NegativeDraw::InterClass => {
                if by_other[c].is_empty() {
                    return Err(Error::Negatives(format!("no items outside class {c}")));
                }
                Some(&by_other[c])
            }
        };
        let mut rng = stream.child(i as u64).rng();
        let lf = log_ratio(i, c);
        scratch.clear();
        scratch.push(lf);
        for _ in 0..n {
            let j = match pool {
                None => rng.gen_range(0..dataset.len()),
                Some(p) => p[rng.gen_range(0..p.len())],
            };
            scratch.push(log_ratio(j, c));
        }
        // −log(f / (f + Σ f_j)) in log space
        let loss = log_sum_exp(&scratch) - lf;
        bounds.push(ln_n - loss);
    }
    let m = bounds.len() as f64;
    let mean = bounds.iter().sum::<f64>() / m;
    let var = bounds.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok(MiEstimate {
        mean,
        stderr: (var / m).sqrt(),
        proxy,
    })
}

/// `n_per_class` samples for every class; sample `i` of class `g` uses
/// `stream.at(&[g, i])`.
pub fn generate(
    params: &Params,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    n_per_class: usize,
    stream: &RngStream,
) -> Result<Vec<TokenSequence>> {
    let classes = params.config().classes;
    let cells: Vec<(usize, usize)> = (0..classes).flat_map(|g| (0..n_per_class).map(move |i| (g, i))).collect();
    cells
        .par_iter()
        .map(|&(g, i)| sample(params, g, schedule, cfg, &stream.at(&[g as u64, i as u64])))
        .collect()
}

/// Fraction of labelled samples the world's Bayes classifier assigns to
/// their own label.
pub fn accuracy_of(world: &World, samples: &[TokenSequence]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to classify".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let label = s.class.ok_or_else(|| Error::Config("unlabelled sample".into()))?;
        if bayes_classify(world, s)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

pub fn genre_accuracy(
    world: &World,
    params: &Params,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    n_per_class: usize,
    stream: &RngStream,
) -> Result<f64> {
    accuracy_of(world, &generate(params, schedule, cfg, n_per_class, stream)?)
}

/// Mean over the classes present of the total-variation distance between
/// the samples' empirical bigram frequencies and the world's bigram law.
pub fn local_coherence_distance(world: &World, samples: &[TokenSequence]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to score".into()));
    }
    let k = world.codebook();
    let mut counts = vec![vec![0.0; k * k]; world.classes()];
    let mut totals = vec![0.0; world.classes()];
    for s in samples {
        let g = s.class.ok_or_else(|| Error::Config("unlabelled sample".into()))?;
        if g >= world.classes() {
            return Err(Error::range("class", g, format!("[0, {})", world.classes())));
        }
        for w in s.tokens.windows(2) {
            if w[0] >= k || w[1] >= k {
                return Err(Error::range("token", w[0].max(w[1]), format!("[0, {k})")));
            }
            counts[g][w[0] * k + w[1]] += 1.0;
            totals[g] += 1.0;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for g in 0..world.classes() {
        if totals[g] == 0.0 {
            continue;
        }
        let truth = world.bigram_distribution(g);
        let tv: f64 = counts[g].iter().zip(&truth).map(|(c, p)| (c / totals[g] - p).abs()).sum::<f64>() / 2.0;
        sum += tv;
        present += 1;
    }
    if present == 0 {
        return Err(Error::Config("samples are too short to contain bigrams".into()));
    }
    Ok(sum / present as f64)
}

/// Metrics of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub elbo_per_token: f64,
    pub exact_nll_per_token: Option<f64>,
    pub mi_lower_bound: MiEstimate,
    pub genre_accuracy: f64,
    pub coherence_tv: f64,
    pub steps: usize,
    pub mode: String,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "T,mode,seed,elbo_per_token,exact_nll_per_token,mi_lower_bound,mi_stderr,mi_proxy,genre_acc,coherence_tv";

    pub fn to_csv(&self) -> String {
        let exact = self.exact_nll_per_token.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{}\n{},{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.steps,
            self.mode,
            self.seed,
            self.elbo_per_token,
            exact,
            self.mi_lower_bound.mean,
            self.mi_lower_bound.stderr,
            self.mi_lower_bound.proxy,
            self.genre_accuracy,
            self.coherence_tv
        )
    }
}

/// One sweep of trainings under an equal epoch budget.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub world: WorldSpec,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub steps: Vec<usize>,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Epochs, optimiser and model shape shared by every cell.
    pub base: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub world: String,
    pub steps: usize,
    pub mode: String,
    pub seed: u64,
    pub elbo_per_token: f64,
    pub genre_acc: f64,
    pub coherence_tv: f64,
    pub wall_s: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "world,T,mode,seed,elbo_per_token,genre_acc,coherence_tv,wall_s";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.world, self.steps, self.mode, self.seed, self.elbo_per_token, self.genre_acc, self.coherence_tv, self.wall_s
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected 8 fields, got {}", f.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("field {i} '{}' is not a number", f[i]),
            })
        };
        Ok(Self {
            world: f[0].to_string(),
            steps: num(1)? as usize,
            mode: f[2].to_string(),
            seed: f[3].parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad seed '{}'", f[3]),
            })?,
            elbo_per_token: num(4)?,
            genre_acc: num(5)?,
            coherence_tv: num(6)?,
            wall_s: num(7)?,
        })
    }

    pub fn key(world: &str, steps: usize, mode: &str, seed: u64) -> String {
        format!("{world}_T{steps}_{mode}_s{seed}")
    }
}

/// Bench rows rendered as CSV with the declared header.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BenchRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv_line());
    }
    s
}

/// Shared train/held-out split of a bench world.
pub fn bench_data(spec: &BenchSpec) -> Result<(World, Dataset, Dataset)> {
    let world = spec.world.build()?;
    let data = RngStream::new(spec.world.seed).child(tags::DATA);
    let train = sample_dataset(&world, spec.train_per_class, &data.child(0));
    let heldout = sample_dataset(&world, spec.heldout_per_class, &data.child(1));
    Ok((world, train, heldout))
}

/// Train and score a single `(T, variant, seed)` cell.
pub fn run_cell(spec: &BenchSpec, steps: usize, variant: &str, seed: u64) -> Result<BenchRow> {
    let (world, train_set, heldout) = bench_data(spec)?;
    let mut cfg = spec.base.clone();
    cfg.schedule.steps = steps;
    cfg.loss.set_variant(variant)?;
    cfg.seed = seed;
    cfg.eval_interval = cfg.epochs.max(1);
    cfg.sync_with(&train_set);
    let start = Instant::now();
    let (params, log) = train(&cfg, &train_set, &heldout, &RngStream::new(seed))?;
    let schedule = cfg.build_schedule()?;
    let elbo = match log.records.last().and_then(|r| r.heldout_elbo) {
        Some(v) => v,
        None => elbo_nll(&params, &heldout, &schedule, &cfg.elbo_options())?,
    };
    let samples = generate(
        &params,
        &schedule,
        &spec.sampler,
        spec.eval_per_class,
        &RngStream::new(seed).child(tags::SAMPLE),
    )?;
    Ok(BenchRow {
        world: spec.world.name.clone(),
        steps,
        mode: variant.to_string(),
        seed,
        elbo_per_token: elbo,
        genre_acc: accuracy_of(&world, &samples)?,
        coherence_tv: local_coherence_distance(&world, &samples)?,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Thread budget for bench cells from `CDCD_THREADS`, if set.
pub fn thread_budget() -> Option<usize> {
    std::env::var("CDCD_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

/// Run every `(T, variant, seed)` cell, in that nesting order.
///
/// With `resume_dir`, each finished cell leaves a marker file there and
/// cells whose marker already exists are read back instead of retrained.
pub fn convergence_bench(spec: &BenchSpec, resume_dir: Option<&Path>) -> Result<Vec<BenchRow>> {
    let cells: Vec<(usize, String, u64)> = spec
        .steps
        .iter()
        .flat_map(|&t| {
            spec.variants
                .iter()
                .flat_map(move |v| spec.seeds.iter().map(move |&s| (t, v.clone(), s)))
        })
        .collect();
    if let Some(dir) = resume_dir {
        std::fs::create_dir_all(dir)?;
    }
    let run = |(t, v, s): &(usize, String, u64)| -> Result<BenchRow> {
        let marker = resume_dir.map(|d| d.join(format!("{}.done", BenchRow::key(&spec.world.name, *t, v, *s))));
        if let Some(m) = &marker {
            if let Ok(text) = std::fs::read_to_string(m) {
                return BenchRow::parse_csv_line(&text);
            }
        }
        let row = run_cell(spec, *t, v, *s)?;
        if let Some(m) = &marker {
            let tmp = m.with_extension("tmp");
            std::fs::write(&tmp, row.to_csv_line() + "\n")?;
            std::fs::rename(&tmp, m)?;
        }
        Ok(row)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget().unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_world;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::diffusion::{build_schedule, Kernel, ScheduleConfig, ScheduleShape};
    use crate::negatives::intra_shuffle;
    use rand::Rng;

    fn tiny(kernel: Kernel, k: usize, len: usize, steps: usize, seed: u64) -> (Schedule, Params) {
        let sc = ScheduleConfig {
            steps,
            codebook: k,
            kernel,
            shape: ScheduleShape::Linear,
            terminal: 0.9,
        };
        let mut dc = DenoiserConfig::new(&sc, len, 2);
        dc.width = 8;
        dc.blocks = 1;
        dc.ff_mult = 2;
        dc.seed = seed;
        let mut p = init_params(&dc).unwrap();
        let mut rng = RngStream::new(seed).rng();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.8..0.8);
            }
        }
        (build_schedule(&sc).unwrap(), p)
    }

    #[test]
    fn exact_distribution_is_normalised() {
        for kernel in [Kernel::Uniform, Kernel::MaskUniform] {
            let (sched, p) = tiny(kernel, 3, 2, 3, 1);
            let d = exact_distribution(&p, 1, &sched).unwrap();
            assert_eq!(d.len(), 9);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn elbo_dominates_exact_nll() {
        for seed in 0..5 {
            let (sched, p) = tiny(Kernel::MaskUniform, 3, 2, 3, seed);
            let x0 = TokenSequence::new(vec![seed as usize % 3, 2], None);
            let elbo = sequence_elbo(&p, &x0, 0, &sched, &ElboOptions::default()).unwrap().total();
            let nll = exact_nll(&p, &x0, 0, &sched).unwrap();
            assert!(elbo >= nll - 1e-9, "{elbo} < {nll}");
        }
    }

    #[test]
    fn exact_guard() {
        let (sched, p) = tiny(Kernel::MaskUniform, 7, 6, 2, 0);
        assert!(matches!(exact_distribution(&p, 0, &sched), Err(Error::Guard(_))));
    }

    #[test]
    fn zero_model_reconstruction_term_is_log_k() {
        let sc = ScheduleConfig {
            steps: 3,
            codebook: 4,
            kernel: Kernel::Uniform,
            shape: ScheduleShape::Linear,
            terminal: 1.0,
        };
        let mut dc = DenoiserConfig::new(&sc, 3, 2);
        dc.width = 8;
        dc.blocks = 1;
        let p = init_params(&dc).unwrap();
        let sched = build_schedule(&sc).unwrap();
        let e = sequence_elbo(&p, &TokenSequence::new(vec![1, 2, 3], None), 0, &sched, &ElboOptions::default()).unwrap();
        assert!((e.l0 - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coherence_detects_shuffling() {
        let w = make_world(2, 4, 16, 0.3, 2).unwrap();
        let d = sample_dataset(&w, 400, &RngStream::new(3));
        let clean = local_coherence_distance(&w, &d.items).unwrap();
        let shuffled: Vec<TokenSequence> = d
            .items
            .iter()
            .enumerate()
            .map(|(i, x)| intra_shuffle(x, 4, &RngStream::new(i as u64)).unwrap_or_else(|_| x.clone()))
            .collect();
        let broken = local_coherence_distance(&w, &shuffled).unwrap();
        assert!(broken > clean, "{broken} <= {clean}");
        assert!((0.0..=1.0).contains(&clean) && (0.0..=1.0).contains(&broken));
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let w = make_world(2, 4, 6, 0.5, 5).unwrap();
        let sc = ScheduleConfig {
            steps: 2,
            codebook: 4,
            ..Default::default()
        };
        let mut dc = DenoiserConfig::new(&sc, 6, 2);
        dc.width = 8;
        dc.blocks = 1;
        let p = init_params(&dc).unwrap();
        let sched = build_schedule(&sc).unwrap();
        let cfg = SamplerConfig {
            truncation: 1.0,
            ..Default::default()
        };
        let acc = genre_accuracy(&w, &p, &sched, &cfg, 500, &RngStream::new(1)).unwrap();
        // the untrained model ignores the label, so accuracy is the share of
        // uniform sequences each class wins, averaged: exactly 1/2 in expectation
        assert!((acc - 0.5).abs() < 3.0 * (0.25f64 / 1000.0).sqrt(), "{acc}");
    }

    #[test]
    fn oracle_bound_on_degenerate_world_is_not_positive() {
        let u = vec![0.25; 4];
        let w = World::from_tables(vec![0.5, 0.5], vec![u.clone(); 2], vec![vec![u; 4]; 2], 3).unwrap();
        let d = sample_dataset(&w, 500, &RngStream::new(0));
        let est = mi_lower_bound(&RatioSource::Oracle(&w), &d, 5, NegativeDraw::Marginal, &RngStream::new(1)).unwrap();
        assert!(est.mean <= 3.0 * est.stderr + 1e-12);
        assert!((est.mean - (5f64.ln() - 6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn bench_row_round_trip() {
        let r = BenchRow {
            world: "W1".into(),
            steps: 8,
            mode: "step-intra".into(),
            seed: 2,
            elbo_per_token: 1.234_567_890_123,
            genre_acc: 0.25,
            coherence_tv: 0.5,
            wall_s: 3.5,
        };
        assert_eq!(BenchRow::parse_csv_line(&r.to_csv_line()).unwrap(), r);
    }
}
