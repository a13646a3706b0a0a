//! Training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::denoiser::{init_params, DenoiserConfig, Params};
use crate::diffusion::{build_schedule, Schedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::{elbo_nll, ElboOptions, EXACT_STATE_LIMIT};
use crate::graph::Gradients;
use crate::losses::{total_loss_with_grad, ChainRng, LossBreakdown, LossConfig};
use crate::negatives::{build_negative_set, default_chunk, NegativeKind};
use crate::optim::{clip_global_norm, optimizer_step, AdamW, OptimizerState};
use crate::rng::{tags, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub seed: u64,
    /// Probability that an item's contrastive term is computed.
    pub rho: f64,
    /// Held-out evaluation every this many epochs (and after the last).
    pub eval_interval: usize,
    /// Monte Carlo draws per step for the held-out bound.
    pub eval_draws: usize,
    pub eval_seed: u64,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = ScheduleConfig::default();
        let denoiser = DenoiserConfig::new(&schedule, 16, 4);
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamW::default(),
            clip: 1.0,
            seed: 0,
            rho: 1.0,
            eval_interval: 5,
            eval_draws: 1,
            eval_seed: 0,
            loss: LossConfig::default(),
            schedule,
            denoiser,
        }
    }
}

impl TrainConfig {
    /// Copy sizes from the dataset and schedule into the denoiser config and
    /// seed the initialisation from `seed`.
    pub fn sync_with(&mut self, data: &Dataset) {
        self.schedule.codebook = data.codebook;
        self.denoiser.codebook = data.codebook;
        self.denoiser.states = self.schedule.states();
        self.denoiser.steps = self.schedule.steps;
        self.denoiser.seq_len = data.seq_len;
        self.denoiser.classes = data.classes;
        self.denoiser.seed = self.seed;
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        build_schedule(&self.schedule)
    }

    pub fn elbo_options(&self) -> ElboOptions {
        ElboOptions {
            enumerate_limit: EXACT_STATE_LIMIT,
            draws: self.eval_draws,
            stream: RngStream::new(self.eval_seed).child(tags::EVAL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.denoiser.validate()?;
        if self.batch_size == 0 {
            return Err(Error::range("train.batch_size", 0, ">= 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::range("train.rho", self.rho, "(0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::range("train.clip", self.clip, "(0, inf)"));
        }
        if self.eval_interval == 0 {
            return Err(Error::range("train.eval_interval", 0, ">= 1"));
        }
        if self.eval_draws == 0 {
            return Err(Error::range("train.eval_draws", 0, ">= 1"));
        }
        let d = &self.denoiser;
        let s = &self.schedule;
        if d.codebook != s.codebook || d.states != s.states() || d.steps != s.steps {
            return Err(Error::Config(format!(
                "model (K={}, S={}, T={}) does not match schedule (K={}, S={}, T={})",
                d.codebook,
                d.states,
                d.steps,
                s.codebook,
                s.states(),
                s.steps
            )));
        }
        Ok(())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let d = &self.denoiser;
        if data.codebook != d.codebook || data.seq_len != d.seq_len || data.classes != d.classes {
            return Err(Error::Config(format!(
                "dataset (K={}, L={}, classes={}) does not match model (K={}, L={}, classes={})",
                data.codebook, data.seq_len, data.classes, d.codebook, d.seq_len, d.classes
            )));
        }
        Ok(())
    }
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean over the items of the epochs since the previous record.
    pub loss: LossBreakdown,
    pub heldout_elbo: Option<f64>,
    /// Items whose intra negatives could not be formed.
    pub skipped_negatives: usize,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<TrainRecord>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str =
        "epoch,l_t,l_tm1,l0,l_aux,l_cdcd,total,heldout_elbo,skipped_negatives,wall_s";

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column, which is the only
    /// nondeterministic field.
    pub fn to_csv_deterministic(&self) -> String {
        self.render(false)
    }

    fn render(&self, wall: bool) -> String {
        let mut s = String::new();
        let header = if wall {
            Self::CSV_HEADER
        } else {
            Self::CSV_HEADER.trim_end_matches(",wall_s")
        };
        s.push_str(header);
        s.push('\n');
        for r in &self.records {
            let l = &r.loss;
            let elbo = r.heldout_elbo.map(|v| v.to_string()).unwrap_or_default();
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch, l.l_t, l.l_tm1, l.l0, l.l_aux, l.l_cdcd, l.total, elbo, r.skipped_negatives
            );
            if wall {
                let _ = write!(s, ",{}", r.wall_s);
            }
            s.push('\n');
        }
        s
    }
}

/// Whether this item computes its contrastive term: true with probability
/// `rho`, independently per `(stream, t)`.
pub fn contrastive_step_gate(t: usize, rho: f64, stream: &RngStream) -> bool {
    rho >= 1.0 || stream.child(t as u64).uniform() < rho
}

struct ItemResult {
    loss: LossBreakdown,
    grads: Gradients,
    skipped: bool,
}

fn item_gradient(
    params: &Params,
    cfg: &TrainConfig,
    schedule: &Schedule,
    data: &Dataset,
    idx: usize,
    stream: &RngStream,
) -> Result<ItemResult> {
    let x0 = &data.items[idx];
    let class = data.class_of(idx);
    let chain = ChainRng::new(stream);
    let mut negatives = None;
    let mut skipped = false;
    if cfg.loss.contrastive() {
        let t = chain.sample_step(schedule.steps());
        if contrastive_step_gate(t, cfg.rho, &stream.child(tags::GATE)) {
            let chunk = cfg.loss.chunk.unwrap_or_else(|| default_chunk(data.seq_len));
            match build_negative_set(
                x0,
                class,
                data,
                cfg.loss.kind,
                cfg.loss.negatives,
                chunk,
                &stream.child(tags::NEGATIVES),
            ) {
                Ok(set) => negatives = Some(set),
                // a sequence made of one repeated chunk has no intra negative
                Err(Error::Negatives(_)) if cfg.loss.kind == NegativeKind::Intra => skipped = true,
                Err(e) => return Err(e),
            }
        }
    }
    let (loss, grads) = total_loss_with_grad(params, x0, class, negatives.as_ref(), schedule, &cfg.loss, &chain)?;
    Ok(ItemResult { loss, grads, skipped })
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.l_t += w * b.l_t;
    acc.l_tm1 += w * b.l_tm1;
    acc.l0 += w * b.l0;
    acc.l_aux += w * b.l_aux;
    acc.l_cdcd += w * b.l_cdcd;
    acc.total += w * b.total;
}

/// Train from `init_params(cfg.denoiser)`.
///
/// Each epoch visits the training set in a fresh shuffled order; item `b`
/// of iteration `i` draws everything from `stream.at(&[DATA, i, b])`.
/// `heldout` may be empty, in which case no bound is logged.
pub fn train(cfg: &TrainConfig, data: &Dataset, heldout: &Dataset, stream: &RngStream) -> Result<(Params, TrainingLog)> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    if !heldout.is_empty() {
        cfg.check_dataset(heldout)?;
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let schedule = cfg.build_schedule()?;
    let mut params = init_params(&cfg.denoiser)?;
    let mut state = OptimizerState::new(&params);
    let mut log = TrainingLog::default();
    let start = Instant::now();
    let mut iteration: u64 = 0;
    let mut running = LossBreakdown::default();
    let mut seen = 0usize;
    let mut skipped = 0usize;
    let elbo_opts = cfg.elbo_options();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream.at(&[tags::SHUFFLE, epoch as u64]).rng());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let s = stream.at(&[tags::DATA, iteration, slot as u64]);
                    item_gradient(&params, cfg, &schedule, data, idx, &s)
                })
                .collect::<Result<Vec<_>>>()?;
            let w = 1.0 / batch.len() as f64;
            let mut grads = Gradients::new();
            for r in &results {
                grads.add_scaled(&r.grads, w);
                accumulate(&mut running, &r.loss, 1.0);
                skipped += r.skipped as usize;
            }
            seen += results.len();
            clip_global_norm(&mut grads, cfg.clip);
            optimizer_step(&mut params, &grads, &mut state, &cfg.optimizer)?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after iteration {iteration}")));
            }
            iteration += 1;
        }
        if epoch % cfg.eval_interval == 0 || epoch == cfg.epochs {
            let heldout_elbo = if heldout.is_empty() {
                None
            } else {
                Some(elbo_nll(&params, heldout, &schedule, &elbo_opts)?)
            };
            let mut mean = LossBreakdown::default();
            accumulate(&mut mean, &running, 1.0 / seen.max(1) as f64);
            log.records.push(TrainRecord {
                epoch,
                loss: mean,
                heldout_elbo,
                skipped_negatives: skipped,
                wall_s: start.elapsed().as_secs_f64(),
            });
            running = LossBreakdown::default();
            seen = 0;
            skipped = 0;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_world, sample_dataset};
    use crate::losses::ContrastiveMode;

    fn small() -> (TrainConfig, Dataset, Dataset) {
        let w = make_world(2, 4, 6, 0.5, 3).unwrap();
        let train_set = sample_dataset(&w, 8, &RngStream::new(1));
        let heldout = sample_dataset(&w, 4, &RngStream::new(2));
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            eval_interval: 1,
            ..Default::default()
        };
        cfg.schedule.steps = 3;
        cfg.denoiser.width = 8;
        cfg.denoiser.blocks = 1;
        cfg.denoiser.ff_mult = 2;
        cfg.sync_with(&train_set);
        (cfg, train_set, heldout)
    }

    #[test]
    fn gate_frequency() {
        assert!((0..1000).all(|i| contrastive_step_gate(3, 1.0, &RngStream::new(i))));
        let n = 100_000;
        let hits = (0..n).filter(|&i| contrastive_step_gate(2, 0.6, &RngStream::new(7).child(i))).count();
        let sd = (0.6 * 0.4 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.6).abs() < 3.0 * sd);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (mut cfg, d, h) = small();
        cfg.epochs = 0;
        let (p, log) = train(&cfg, &d, &h, &RngStream::new(0)).unwrap();
        assert_eq!(p, init_params(&cfg.denoiser).unwrap());
        assert!(log.records.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let (mut cfg, d, h) = small();
        cfg.loss.mode = ContrastiveMode::Step;
        cfg.loss.negatives = 2;
        cfg.loss.chunk = Some(2);
        let (a, la) = train(&cfg, &d, &h, &RngStream::new(0)).unwrap();
        let (b, lb) = train(&cfg, &d, &h, &RngStream::new(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_csv_deterministic(), lb.to_csv_deterministic());
        assert_eq!(la.records.len(), 2);
    }

    #[test]
    fn lambda_zero_equals_vanilla() {
        let (cfg, d, h) = small();
        let mut zero = cfg.clone();
        zero.loss.mode = ContrastiveMode::Sample;
        zero.loss.kind = NegativeKind::Inter;
        zero.loss.lambda = 0.0;
        let (a, la) = train(&cfg, &d, &h, &RngStream::new(4)).unwrap();
        let (b, lb) = train(&zero, &d, &h, &RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_csv_deterministic(), lb.to_csv_deterministic());
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let (mut cfg, d, h) = small();
        cfg.denoiser.classes = 3;
        assert!(train(&cfg, &d, &h, &RngStream::new(0)).is_err());
    }

    #[test]
    fn log_csv_shape() {
        let (cfg, d, h) = small();
        let (_, log) = train(&cfg, &d, &h, &RngStream::new(0)).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TrainingLog::CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 10));
        assert!(log.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
    }
}
