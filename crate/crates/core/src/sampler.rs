//! Ancestral sampling from the learned reverse process.

use crate::denoiser::{compose_reverse, predict_x0, Params};
use crate::diffusion::{stationary_distribution, PositionDistributions, Schedule, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::{sample_categorical, RngStream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Probability mass kept by [`truncate_distribution`].
    pub truncation: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            truncation: 0.86,
            count: 16,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return Err(Error::range("sample.truncation", self.truncation, "(0, 1]"));
        }
        Ok(())
    }
}

/// Keep the most probable entries until their mass reaches `r`, zero the
/// rest and renormalise. Ties go to the lower index; `r = 1` is the identity.
pub fn truncate_distribution(dist: &[f64], r: f64) -> Vec<f64> {
    if r >= 1.0 {
        return dist.to_vec();
    }
    let total: f64 = dist.iter().sum();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    // stable sort keeps lower indices first among equal probabilities
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    let mut out = vec![0.0; dist.len()];
    let mut kept = 0.0;
    for &i in &order {
        if dist[i] <= 0.0 {
            break;
        }
        out[i] = dist[i];
        kept += dist[i];
        if kept >= r * total {
            break;
        }
    }
    for v in &mut out {
        *v /= kept;
    }
    out
}

fn truncate_rows(p: &PositionDistributions, r: f64) -> Result<PositionDistributions> {
    PositionDistributions::from_rows(p.rows().map(|row| truncate_distribution(row, r)).collect())
}

fn draw(dist: &PositionDistributions, stream: &RngStream) -> Vec<usize> {
    let mut rng = stream.rng();
    dist.rows()
        .map(|row| {
            assert!(row.iter().any(|&v| v > 0.0), "empty reverse distribution");
            sample_categorical(&mut rng, row)
        })
        .collect()
}

/// Draw one sequence conditioned on `class`.
///
/// `x_T` comes from the stationary distribution; each reverse step
/// truncates the clean-token prediction before composing it with the
/// posterior, and the last step samples the truncated prediction directly.
/// Step `t` draws from `stream.child(t)`.
pub fn sample(
    params: &Params,
    class: usize,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    stream: &RngStream,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let steps = schedule.steps();
    let len = params.config().seq_len;
    let prior = stationary_distribution(schedule);
    let start = PositionDistributions::from_rows(vec![prior; len])?;
    let mut x = TokenSequence::new(draw(&start, &stream.child(steps as u64 + 1)), None);
    for t in (2..=steps).rev() {
        let p0 = truncate_rows(&predict_x0(params, &x, t, class)?, cfg.truncation)?;
        let rev = compose_reverse(&p0, &x, t, schedule)?;
        x = TokenSequence::new(draw(&rev, &stream.child(t as u64)), None);
    }
    let p0 = truncate_rows(&predict_x0(params, &x, 1, class)?, cfg.truncation)?;
    Ok(TokenSequence::new(draw(&p0, &stream.child(1)), Some(class)))
}

/// `count` samples of one class; sample `i` uses `stream.child(i)`.
pub fn sample_many(
    params: &Params,
    class: usize,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    count: usize,
    stream: &RngStream,
) -> Result<Vec<TokenSequence>> {
    (0..count)
        .map(|i| sample(params, class, schedule, cfg, &stream.child(i as u64)))
        .collect()
}
