//! Forward corruption chain over categorical tokens.
//!
//! Non-mask rows of a step matrix follow `Q_t = α_t·I + (β_t/K)·ones` on the
//! `K` codebook states, plus `γ_t` moved to the mask state when the kernel
//! has one. The mask state (index `K`) is absorbing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{sample_categorical, RngStream};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Uniform,
    MaskUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleShape {
    Linear,
    Cosine,
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Kernel::Uniform),
            "mask-uniform" => Ok(Kernel::MaskUniform),
            _ => Err(Error::Config(format!("unknown kernel '{s}'"))),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kernel::Uniform => "uniform",
            Kernel::MaskUniform => "mask-uniform",
        })
    }
}

impl std::str::FromStr for ScheduleShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleShape::Linear),
            "cosine" => Ok(ScheduleShape::Cosine),
            _ => Err(Error::Config(format!("unknown schedule shape '{s}'"))),
        }
    }
}

impl std::fmt::Display for ScheduleShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleShape::Linear => "linear",
            ScheduleShape::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub codebook: usize,
    pub kernel: Kernel,
    pub shape: ScheduleShape,
    /// For the uniform kernel, the fraction of retention removed by step `T`;
    /// for the mask kernel, the mask mass reached at step `T`.
    pub terminal: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            codebook: 16,
            kernel: Kernel::MaskUniform,
            shape: ScheduleShape::Linear,
            terminal: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn states(&self) -> usize {
        match self.kernel {
            Kernel::Uniform => self.codebook,
            Kernel::MaskUniform => self.codebook + 1,
        }
    }
}

/// Dense square row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    n: usize,
    data: Vec<f64>,
}

impl Transition {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = 1.0);
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn compose(&self, rhs: &Transition) -> Transition {
        Transition {
            n: self.n,
            data: crate::graph::mm(&self.data, &rhs.data, self.n, self.n, self.n),
        }
    }

    fn step(k: usize, states: usize, alpha: f64, beta: f64, gamma: f64) -> Self {
        let mut data = vec![0.0; states * states];
        for i in 0..k {
            for j in 0..k {
                data[i * states + j] = beta / k as f64;
            }
            data[i * states + i] += alpha;
            if states > k {
                data[i * states + k] = gamma;
            }
        }
        if states > k {
            data[k * states + k] = 1.0;
        }
        Self { n: states, data }
    }
}

#[derive(Clone, Debug)]
pub struct Schedule {
    config: ScheduleConfig,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// `step[t-1] = Q_t`.
    step: Vec<Transition>,
    /// `cumulative[t] = Q̄_t`, with `cumulative[0] = I`.
    cumulative: Vec<Transition>,
}

/// Build the schedule described by `config`.
pub fn build_schedule(config: &ScheduleConfig) -> Result<Schedule> {
    if config.steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if config.codebook < 2 {
        return Err(Error::Config("codebook size must be at least 2".into()));
    }
    if !(config.terminal > 0.0 && config.terminal <= 1.0) {
        return Err(Error::range("terminal corruption level", config.terminal, "(0, 1]"));
    }
    let t_max = config.steps as f64;
    let progress = |t: usize| -> f64 {
        let s = t as f64 / t_max;
        match config.shape {
            ScheduleShape::Linear => s,
            ScheduleShape::Cosine => 1.0 - (std::f64::consts::FRAC_PI_2 * s).cos(),
        }
    };
    // cumulative retention and mask mass per step, t = 0..=T
    let (keep, mask): (Vec<f64>, Vec<f64>) = (0..=config.steps)
        .map(|t| {
            let s = if t == config.steps { 1.0 } else { progress(t) };
            match config.kernel {
                Kernel::Uniform => (1.0 - config.terminal * s, 0.0),
                Kernel::MaskUniform => (1.0 - s, config.terminal * s),
            }
        })
        .unzip();
    let mut alphas = Vec::with_capacity(config.steps);
    let mut betas = Vec::with_capacity(config.steps);
    let mut gammas = Vec::with_capacity(config.steps);
    for t in 1..=config.steps {
        let alpha = if keep[t - 1] > 0.0 { keep[t] / keep[t - 1] } else { 0.0 };
        let gamma = if mask[t - 1] < 1.0 {
            1.0 - (1.0 - mask[t]) / (1.0 - mask[t - 1])
        } else {
            1.0
        };
        let beta = (1.0 - alpha - gamma).max(0.0);
        alphas.push(alpha);
        betas.push(beta);
        gammas.push(gamma);
    }
    Schedule::from_coefficients(config.clone(), alphas, betas, gammas)
}

impl Schedule {
    /// Assemble a schedule from explicit per-step coefficients. Only
    /// `steps`, `codebook` and `kernel` of `config` are consulted.
    pub fn from_coefficients(
        config: ScheduleConfig,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        gamma: Vec<f64>,
    ) -> Result<Self> {
        let t_max = config.steps;
        if alpha.len() != t_max || beta.len() != t_max || gamma.len() != t_max || t_max == 0 {
            return Err(Error::Config(format!(
                "need {t_max} coefficients per kind, got {}/{}/{}",
                alpha.len(),
                beta.len(),
                gamma.len()
            )));
        }
        if config.codebook < 2 {
            return Err(Error::Config("codebook size must be at least 2".into()));
        }
        let k = config.codebook;
        let states = config.states();
        let mut step = Vec::with_capacity(t_max);
        let mut cumulative = vec![Transition::identity(states)];
        for t in 0..t_max {
            let (a, b, g) = (alpha[t], beta[t], gamma[t]);
            if a < 0.0 || b < 0.0 || g < 0.0 || !((a + b + g - 1.0).abs() <= STOCHASTIC_TOL) {
                return Err(Error::Config(format!(
                    "step {} coefficients ({a}, {b}, {g}) are not a probability split",
                    t + 1
                )));
            }
            if config.kernel == Kernel::Uniform && g != 0.0 {
                return Err(Error::Config("uniform kernel cannot move mass to a mask".into()));
            }
            let q = Transition::step(k, states, a, b, g);
            let bar = cumulative[t].compose(&q);
            step.push(q);
            cumulative.push(bar);
        }
        Ok(Self {
            config,
            alpha,
            beta,
            gamma,
            step,
            cumulative,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn codebook(&self) -> usize {
        self.config.codebook
    }

    pub fn states(&self) -> usize {
        self.config.states()
    }

    pub fn mask_token(&self) -> Option<usize> {
        match self.config.kernel {
            Kernel::Uniform => None,
            Kernel::MaskUniform => Some(self.config.codebook),
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    /// `Q_t`, `1 <= t <= T`.
    pub fn step_matrix(&self, t: usize) -> &Transition {
        &self.step[t - 1]
    }

    /// `Q̄_t`, `0 <= t <= T` (`Q̄_0 = I`).
    pub fn cumulative(&self, t: usize) -> &Transition {
        &self.cumulative[t]
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::range("step", t, format!("[{lo}, {}]", self.steps())));
        }
        Ok(())
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        if let Some(&bad) = seq.iter().find(|&&x| x >= self.states()) {
            return Err(Error::range("token", bad, format!("[0, {})", self.states())));
        }
        Ok(())
    }

    /// `q(x_{t-1} = · | x_t = xt, x_0 = x0)` for one position.
    ///
    /// When `xt` cannot be reached from `x0` the Bayes inverse is undefined;
    /// `None` is returned.
    pub fn posterior_row(&self, x0: usize, xt: usize, t: usize) -> Option<Vec<f64>> {
        let denom = self.cumulative(t).get(x0, xt);
        if denom <= 0.0 {
            return None;
        }
        let q = self.step_matrix(t);
        let prev = self.cumulative(t - 1);
        Some(
            (0..self.states())
                .map(|k| q.get(k, xt) * prev.get(x0, k) / denom)
                .collect(),
        )
    }

    /// Fallback reverse row used when `xt` is unreachable from a hypothesised
    /// clean token: Bayes inverse of one step under a flat prior on `x_{t-1}`.
    pub fn flat_reverse_row(&self, xt: usize, t: usize) -> Vec<f64> {
        let q = self.step_matrix(t);
        let col: Vec<f64> = (0..self.states()).map(|k| q.get(k, xt)).collect();
        let total: f64 = col.iter().sum();
        if total > 0.0 {
            col.iter().map(|v| v / total).collect()
        } else {
            let mut one = vec![0.0; self.states()];
            one[xt] = 1.0;
            one
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub class: Option<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, class: Option<usize>) -> Self {
        Self { tokens, class }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One probability vector per sequence position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionDistributions {
    states: usize,
    probs: Vec<f64>,
}

impl PositionDistributions {
    pub fn new(states: usize, probs: Vec<f64>) -> Result<Self> {
        if states == 0 || probs.len() % states != 0 {
            return Err(Error::shape(
                "position distributions",
                format!("{} values for {} states", probs.len(), states),
            ));
        }
        Ok(Self { states, probs })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let states = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != states) {
            return Err(Error::shape("position distributions", "ragged rows"));
        }
        Self::new(states, rows.concat())
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn positions(&self) -> usize {
        self.probs.len() / self.states
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.states..(pos + 1) * self.states]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.states)
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }
}

/// `q(x_t | x_0)` per position: row `x0[ℓ]` of `Q̄_t`.
pub fn forward_marginal(
    x0: &TokenSequence,
    t: usize,
    schedule: &Schedule,
) -> Result<PositionDistributions> {
    schedule.check_step(t, 1)?;
    schedule.check_tokens(&x0.tokens)?;
    let bar = schedule.cumulative(t);
    let probs = x0.tokens.iter().flat_map(|&x| bar.row(x).iter().copied()).collect();
    PositionDistributions::new(schedule.states(), probs)
}

/// Draw `x_t ~ q(x_t | x_0)` independently per position.
pub fn forward_sample(
    x0: &TokenSequence,
    t: usize,
    schedule: &Schedule,
    stream: &RngStream,
) -> Result<TokenSequence> {
    let marginal = forward_marginal(x0, t, schedule)?;
    Ok(TokenSequence::new(draw_rows(&marginal, stream), x0.class))
}

/// Draw `x_t ~ q(x_t | x_{t-1})` for a single step.
pub fn forward_step_sample(
    prev: &TokenSequence,
    t: usize,
    schedule: &Schedule,
    stream: &RngStream,
) -> Result<TokenSequence> {
    schedule.check_step(t, 1)?;
    schedule.check_tokens(&prev.tokens)?;
    let q = schedule.step_matrix(t);
    let probs = prev.tokens.iter().flat_map(|&x| q.row(x).iter().copied()).collect();
    let rows = PositionDistributions::new(schedule.states(), probs)?;
    Ok(TokenSequence::new(draw_rows(&rows, stream), prev.class))
}

fn draw_rows(rows: &PositionDistributions, stream: &RngStream) -> Vec<usize> {
    let mut rng = stream.rng();
    rows.rows()
        .map(|row| {
            // one uniform per position keeps draws aligned across sequences
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in row.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.unwrap_or_else(|| sample_categorical(&mut rng, row))
        })
        .collect()
}

/// `q(x_{t-1} | x_t, x_0)` per position, `2 <= t <= T`.
pub fn posterior(
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: usize,
    schedule: &Schedule,
) -> Result<PositionDistributions> {
    schedule.check_step(t, 2)?;
    schedule.check_tokens(&x0.tokens)?;
    schedule.check_tokens(&xt.tokens)?;
    if x0.len() != xt.len() {
        return Err(Error::shape(
            "posterior",
            format!("x0 has {} positions, xt has {}", x0.len(), xt.len()),
        ));
    }
    let mut probs = Vec::with_capacity(x0.len() * schedule.states());
    for (pos, (&a, &b)) in x0.tokens.iter().zip(&xt.tokens).enumerate() {
        let row = schedule.posterior_row(a, b, t).ok_or(Error::Unreachable {
            position: pos,
            x0: a,
            xt: b,
            step: t,
        })?;
        probs.extend(row);
    }
    PositionDistributions::new(schedule.states(), probs)
}

/// `Σ_ℓ KL(p_ℓ ‖ q_ℓ)` in nats.
pub fn kl_categorical(p: &PositionDistributions, q: &PositionDistributions) -> Result<f64> {
    if p.states() != q.states() || p.positions() != q.positions() {
        return Err(Error::shape(
            "kl",
            format!(
                "{}x{} vs {}x{}",
                p.positions(),
                p.states(),
                q.positions(),
                q.states()
            ),
        ));
    }
    let mut total = 0.0;
    for (pos, (pr, qr)) in p.rows().zip(q.rows()).enumerate() {
        for (k, (&a, &b)) in pr.iter().zip(qr).enumerate() {
            if a <= 0.0 {
                continue;
            }
            if b <= 0.0 {
                return Err(Error::Support(format!(
                    "q is zero where p > 0 (position {pos}, state {k})"
                )));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Reference prior `p(x_T)`: the average of the non-mask rows of `Q̄_T`.
/// Uniform over the codebook for the uniform kernel.
pub fn stationary_distribution(schedule: &Schedule) -> Vec<f64> {
    let k = schedule.codebook();
    let s = schedule.states();
    if schedule.config.kernel == Kernel::Uniform {
        return vec![1.0 / k as f64; k];
    }
    let bar = schedule.cumulative(schedule.steps());
    let mut prior = vec![0.0; s];
    for i in 0..k {
        for (p, v) in prior.iter_mut().zip(bar.row(i)) {
            *p += v / k as f64;
        }
    }
    prior
}

/// `L_T = Σ_ℓ KL(q(x_T | x_0) ‖ p(x_T))`.
pub fn prior_term(x0: &TokenSequence, schedule: &Schedule) -> Result<f64> {
    let q = forward_marginal(x0, schedule.steps(), schedule)?;
    let prior = stationary_distribution(schedule);
    let p = PositionDistributions::new(
        schedule.states(),
        (0..x0.len()).flat_map(|_| prior.iter().copied()).collect(),
    )?;
    kl_categorical(&q, &p)
}
