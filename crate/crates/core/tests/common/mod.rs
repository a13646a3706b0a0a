#![allow(dead_code)]

use cdcd_core::denoiser::{init_params, DenoiserConfig, Params};
use cdcd_core::diffusion::{Kernel, Schedule, ScheduleConfig, ScheduleShape};
use cdcd_core::rng::RngStream;
use rand::Rng;

/// Per-step coefficients drawn at random, kept alongside the schedule so
/// oracles can rebuild the transition matrices on their own.
pub struct RandomSchedule {
    pub schedule: Schedule,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

pub fn random_schedule<R: Rng>(rng: &mut R, k: usize, steps: usize, kernel: Kernel) -> RandomSchedule {
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut gamma = Vec::new();
    for _ in 0..steps {
        match kernel {
            Kernel::Uniform => {
                let a: f64 = rng.gen_range(0.05..0.95);
                alpha.push(a);
                beta.push(1.0 - a);
                gamma.push(0.0);
            }
            Kernel::MaskUniform => {
                let w: [f64; 3] = [rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)];
                let s: f64 = w.iter().sum();
                alpha.push(w[0] / s);
                beta.push(w[1] / s);
                gamma.push(1.0 - w[0] / s - w[1] / s);
            }
        }
    }
    let cfg = ScheduleConfig {
        steps,
        codebook: k,
        kernel,
        shape: ScheduleShape::Linear,
        terminal: 1.0,
    };
    let schedule = Schedule::from_coefficients(cfg, alpha.clone(), beta.clone(), gamma.clone()).unwrap();
    RandomSchedule {
        schedule,
        alpha,
        beta,
        gamma,
    }
}

impl RandomSchedule {
    pub fn states(&self) -> usize {
        self.schedule.states()
    }

    /// One-step transition probability built directly from the coefficients.
    pub fn step_prob(&self, t: usize, from: usize, to: usize) -> f64 {
        let k = self.schedule.codebook();
        let mask = self.states() > k;
        if from == k {
            return if to == k { 1.0 } else { 0.0 };
        }
        if to == k {
            return if mask { self.gamma[t - 1] } else { 0.0 };
        }
        let mut p = self.beta[t - 1] / k as f64;
        if from == to {
            p += self.alpha[t - 1];
        }
        p
    }

    /// `q(x_t = to | x_0 = from)` by summing over every intermediate path.
    pub fn path_sum(&self, t: usize, from: usize, to: usize) -> f64 {
        if t == 0 {
            return if from == to { 1.0 } else { 0.0 };
        }
        (0..self.states())
            .map(|mid| self.path_sum(t - 1, from, mid) * self.step_prob(t, mid, to))
            .sum()
    }
}

pub fn kernel_of(i: usize) -> Kernel {
    if i % 2 == 0 {
        Kernel::Uniform
    } else {
        Kernel::MaskUniform
    }
}

/// A small denoiser with all weights jittered so outputs are far from
/// uniform.
pub fn random_params(sc: &ScheduleConfig, len: usize, classes: usize, seed: u64, jitter: f64) -> Params {
    let mut dc = DenoiserConfig::new(sc, len, classes);
    dc.width = 8;
    dc.blocks = 1;
    dc.heads = 2;
    dc.ff_mult = 2;
    dc.seed = seed;
    let mut p = init_params(&dc).unwrap();
    let mut rng = RngStream::new(seed).child(99).rng();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-jitter..jitter);
        }
    }
    p
}

pub fn decode(mut idx: usize, base: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = idx % base;
        idx /= base;
    }
    out
}
