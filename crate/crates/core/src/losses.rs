//! Training objectives.
//!
//! Every loss is built as a graph over borrowed parameters so the value and
//! its gradient always come from the same computation. The `*_with_grad`
//! entry points run the backward sweep as well.

use rand::Rng;

use crate::denoiser::{build_logits, ParamNodes, Params, ReverseConstants};
use crate::diffusion::{forward_sample, posterior, prior_term, PositionDistributions, Schedule, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::negatives::{NegativeKind, NegativeSet};
use crate::rng::{tags, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContrastiveMode {
    Vanilla,
    /// One full diffusion chain and bound per negative.
    Step,
    /// Negatives scored by the clean-token head on a shared noisy latent.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptiveWeight {
    Off,
    /// `w_t = (T - t + 1) / T` on the per-step term.
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VbEstimator {
    /// `t ~ U{1..T}`, term scaled by `T`.
    SingleTerm,
    /// `Σ_{i<=t} L_i` with every term evaluated.
    Alg1Cumulative,
}

/// Where sample-mode draws the noisy latent that negatives are scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Positive,
    Negative,
}

macro_rules! str_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$variant => $name,)+ })
            }
        }
    };
}

str_enum!(ContrastiveMode, "loss mode", Vanilla => "vanilla", Step => "step", Sample => "sample");
str_enum!(AdaptiveWeight, "adaptive weight", Off => "off", LinearDecay => "linear-decay");
str_enum!(VbEstimator, "vb estimator", SingleTerm => "single-term", Alg1Cumulative => "alg1-cumulative");
str_enum!(SampleSource, "sample source", Positive => "positive", Negative => "negative");

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub mode: ContrastiveMode,
    pub negatives: usize,
    pub kind: NegativeKind,
    /// Intra-shuffle chunk size; `None` means a quarter of the sequence.
    pub chunk: Option<usize>,
    pub adaptive: AdaptiveWeight,
    pub vb: VbEstimator,
    pub aux_weight: f64,
    pub sample_source: SampleSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-5,
            mode: ContrastiveMode::Vanilla,
            negatives: 10,
            kind: NegativeKind::Intra,
            chunk: None,
            adaptive: AdaptiveWeight::LinearDecay,
            vb: VbEstimator::SingleTerm,
            aux_weight: 1.0,
            sample_source: SampleSource::Positive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::range("loss.lambda", self.lambda, "[0, inf)"));
        }
        if self.mode != ContrastiveMode::Vanilla && self.negatives == 0 {
            return Err(Error::range("loss.negatives", 0, ">= 1 outside vanilla mode"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::range("loss.aux_weight", self.aux_weight, "[0, inf)"));
        }
        if self.chunk == Some(0) {
            return Err(Error::range("loss.chunk", 0, ">= 1"));
        }
        Ok(())
    }

    /// Whether this configuration ever needs negatives.
    pub fn contrastive(&self) -> bool {
        self.mode != ContrastiveMode::Vanilla && self.lambda > 0.0
    }

    /// Set mode and negative kind from a name such as `step-intra`.
    pub fn set_variant(&mut self, name: &str) -> Result<()> {
        if name == "vanilla" {
            self.mode = ContrastiveMode::Vanilla;
            return Ok(());
        }
        let (mode, kind) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown training variant '{name}'")))?;
        self.mode = mode.parse()?;
        self.kind = kind.parse()?;
        Ok(())
    }

    pub fn variant(&self) -> String {
        match self.mode {
            ContrastiveMode::Vanilla => "vanilla".into(),
            m => format!("{m}-{}", self.kind),
        }
    }

    fn step_weight(&self, t: usize, steps: usize) -> f64 {
        match self.adaptive {
            AdaptiveWeight::Off => 1.0,
            AdaptiveWeight::LinearDecay => (steps - t + 1) as f64 / steps as f64,
        }
    }
}

/// Per-term record of one loss evaluation, in nats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Prior term `L_T`.
    pub l_t: f64,
    /// Weighted per-step KL terms.
    pub l_tm1: f64,
    /// Weighted reconstruction term.
    pub l0: f64,
    pub l_aux: f64,
    pub l_cdcd: f64,
    pub total: f64,
    /// Sampled diffusion step.
    pub step: usize,
}

impl LossBreakdown {
    pub fn vb(&self) -> f64 {
        self.l_t + self.l_tm1 + self.l0
    }
}

/// Random streams of one diffusion chain: which step is sampled, and how
/// each `x_t` is corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainRng {
    pub step: RngStream,
    pub corrupt: RngStream,
}

impl ChainRng {
    pub fn new(stream: &RngStream) -> Self {
        Self {
            step: stream.child(tags::STEP),
            corrupt: stream.child(tags::CORRUPT),
        }
    }

    pub fn sample_step(&self, steps: usize) -> usize {
        1 + self.step.rng().gen_range(0..steps)
    }

    pub fn corruption(&self, t: usize) -> RngStream {
        self.corrupt.child(t as u64)
    }

    /// Stream of negative `j`: the same step, its own corruption.
    pub fn negative(&self, j: usize) -> Self {
        Self {
            step: self.step,
            corrupt: self.corrupt.at(&[tags::NEGATIVES, j as u64]),
        }
    }
}

fn one_hot(x: &TokenSequence, k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; x.len() * k];
    for (pos, &tok) in x.tokens.iter().enumerate() {
        if tok >= k {
            return Err(Error::range("clean token", tok, format!("[0, {k})")));
        }
        data[pos * k + tok] = 1.0;
    }
    Tensor::matrix(x.len(), k, data)
}

/// `−Σ_ℓ log p[ℓ][x_ℓ]` given a `[L, K]` log-probability node.
fn nll_node(g: &mut Graph<'_>, log_probs: NodeId, x: &TokenSequence, k: usize) -> Result<NodeId> {
    let mask = g.input(one_hot(x, k)?);
    let picked = g.mul(log_probs, mask)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// `KL(q ‖ p)` summed over positions, with `q` constant.
fn kl_node(g: &mut Graph<'_>, q: &PositionDistributions, p: NodeId) -> Result<NodeId> {
    let mut entropy_part = 0.0;
    let mut guard = vec![0.0; q.data().len()];
    for (z, &v) in guard.iter_mut().zip(q.data()) {
        if v > 0.0 {
            entropy_part += v * v.ln();
        } else {
            *z = 1.0;
        }
    }
    let rows = q.positions();
    let guard = g.input(Tensor::matrix(rows, q.states(), guard)?);
    let weights = g.input(Tensor::matrix(rows, q.states(), q.data().to_vec())?);
    let shifted = g.add(p, guard)?;
    let logp = g.ln(shifted)?;
    let cross = g.mul(logp, weights)?;
    let cross = g.sum(cross)?;
    let neg = g.scale(cross, -1.0)?;
    let c = g.input(Tensor::scalar(entropy_part));
    g.add(neg, c)
}

fn add_all(g: &mut Graph<'_>, parts: &[NodeId]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for &p in parts {
        acc = Some(match acc {
            None => p,
            Some(a) => g.add(a, p)?,
        });
    }
    Ok(acc)
}

/// `mean_j x_j` written as `x_0 + Σ (x_j − x_0) / N`, so identical inputs
/// return `x_0` bit for bit.
fn shifted_mean(g: &mut Graph<'_>, xs: &[NodeId]) -> Result<NodeId> {
    let first = xs[0];
    if xs.len() == 1 {
        return Ok(first);
    }
    let neg_first = g.scale(first, -1.0)?;
    let mut deltas = Vec::with_capacity(xs.len() - 1);
    for &x in &xs[1..] {
        deltas.push(g.add(x, neg_first)?);
    }
    let s = add_all(g, &deltas)?.expect("nonempty");
    let s = g.scale(s, 1.0 / xs.len() as f64)?;
    g.add(first, s)
}

/// Everything the loss builders share while appending to one graph.
struct Builder<'a, 'b> {
    g: Graph<'a>,
    params: &'a Params,
    nodes: ParamNodes,
    schedule: &'b Schedule,
    class: usize,
}

/// One per-step term with the logits it was computed from.
struct Term {
    logits: NodeId,
    value: NodeId,
}

struct VbNodes {
    step: usize,
    l_t: f64,
    l_tm1: Option<NodeId>,
    l0: Option<NodeId>,
    total: NodeId,
    xt: TokenSequence,
    logits: NodeId,
}

impl<'a, 'b> Builder<'a, 'b> {
    fn new(params: &'a Params, schedule: &'b Schedule, class: usize) -> Result<Self> {
        let cfg = params.config();
        if cfg.codebook != schedule.codebook() || cfg.states != schedule.states() || cfg.steps != schedule.steps() {
            return Err(Error::Config(format!(
                "denoiser (K={}, S={}, T={}) does not match schedule (K={}, S={}, T={})",
                cfg.codebook,
                cfg.states,
                cfg.steps,
                schedule.codebook(),
                schedule.states(),
                schedule.steps()
            )));
        }
        let mut g = Graph::new();
        let nodes = ParamNodes::register(&mut g, params);
        Ok(Self {
            g,
            params,
            nodes,
            schedule,
            class,
        })
    }

    fn k(&self) -> usize {
        self.schedule.codebook()
    }

    fn logits(&mut self, xt: &TokenSequence, t: usize) -> Result<NodeId> {
        build_logits(&mut self.g, self.params, &self.nodes, xt, t, self.class)
    }

    /// `L_0` at `t = 1`, `KL(q(x_{t-1}|x_t,x_0) ‖ p_θ(x_{t-1}|x_t))` above.
    fn term(&mut self, x0: &TokenSequence, xt: &TokenSequence, t: usize) -> Result<Term> {
        let logits = self.logits(xt, t)?;
        let value = if t == 1 {
            let lp = self.g.log_softmax(logits)?;
            nll_node(&mut self.g, lp, x0, self.schedule.codebook())?
        } else {
            let probs = self.g.softmax(logits)?;
            let p = ReverseConstants::new(xt, t, self.schedule)?.apply(&mut self.g, probs)?;
            let q = posterior(x0, xt, t, self.schedule)?;
            kl_node(&mut self.g, &q, p)?
        };
        Ok(Term { logits, value })
    }

    fn vb(&mut self, x0: &TokenSequence, cfg: &LossConfig, rng: &ChainRng) -> Result<VbNodes> {
        if let Some(&bad) = x0.tokens.iter().find(|&&x| x >= self.k()) {
            return Err(Error::range("clean token", bad, format!("[0, {})", self.k())));
        }
        let steps = self.schedule.steps();
        let t = rng.sample_step(steps);
        let l_t = prior_term(x0, self.schedule)?;
        let (l_tm1, l0, xt, logits) = match cfg.vb {
            VbEstimator::SingleTerm => {
                let xt = forward_sample(x0, t, self.schedule, &rng.corruption(t))?;
                let term = self.term(x0, &xt, t)?;
                let w = steps as f64 * cfg.step_weight(t, steps);
                let scaled = self.g.scale(term.value, w)?;
                if t == 1 {
                    (None, Some(scaled), xt, term.logits)
                } else {
                    (Some(scaled), None, xt, term.logits)
                }
            }
            VbEstimator::Alg1Cumulative => {
                let mut kls = Vec::new();
                let mut l0 = None;
                let mut last = None;
                for i in 1..=t {
                    let xi = forward_sample(x0, i, self.schedule, &rng.corruption(i))?;
                    let term = self.term(x0, &xi, i)?;
                    let scaled = self.g.scale(term.value, cfg.step_weight(i, steps))?;
                    if i == 1 {
                        l0 = Some(scaled);
                    } else {
                        kls.push(scaled);
                    }
                    last = Some((xi, term.logits));
                }
                let (xt, logits) = last.expect("t >= 1");
                (add_all(&mut self.g, &kls)?, l0, xt, logits)
            }
        };
        let prior = self.g.input(Tensor::scalar(l_t));
        let parts: Vec<NodeId> = [l_tm1, l0].into_iter().flatten().collect();
        let total = match add_all(&mut self.g, &parts)? {
            Some(s) => self.g.add(prior, s)?,
            None => prior,
        };
        Ok(VbNodes {
            step: t,
            l_t,
            l_tm1,
            l0,
            total,
            xt,
            logits,
        })
    }

    fn aux_from_logits(&mut self, logits: NodeId, x0: &TokenSequence) -> Result<NodeId> {
        let lp = self.g.log_softmax(logits)?;
        nll_node(&mut self.g, lp, x0, self.schedule.codebook())
    }

    fn value(&self, node: Option<NodeId>) -> f64 {
        node.map_or(0.0, |n| self.g.value(n).item())
    }

    fn vb_breakdown(&self, v: &VbNodes) -> LossBreakdown {
        LossBreakdown {
            l_t: v.l_t,
            l_tm1: self.value(v.l_tm1),
            l0: self.value(v.l0),
            total: self.value(Some(v.total)),
            step: v.step,
            ..Default::default()
        }
    }

    /// Step mode: `−(1/N) Σ_j L^j_vb`, each negative on its own chain.
    fn cdcd_step(
        &mut self,
        negatives: &NegativeSet,
        cfg: &LossConfig,
        rngs: &[ChainRng],
    ) -> Result<(NodeId, Vec<LossBreakdown>)> {
        if negatives.is_empty() {
            return Err(Error::EmptyNegatives);
        }
        if rngs.len() != negatives.len() {
            return Err(Error::Negatives(format!(
                "{} negatives but {} streams",
                negatives.len(),
                rngs.len()
            )));
        }
        let mut totals = Vec::with_capacity(negatives.len());
        let mut breakdowns = Vec::with_capacity(negatives.len());
        for (z, rng) in negatives.samples.iter().zip(rngs) {
            let v = self.vb(z, cfg, rng)?;
            breakdowns.push(self.vb_breakdown(&v));
            totals.push(v.total);
        }
        let mean = shifted_mean(&mut self.g, &totals)?;
        Ok((self.g.scale(mean, -1.0)?, breakdowns))
    }

    /// Sample mode: `−(1/N) Σ_j −log p_θ(z^j_0 | z_t, t, c)`.
    fn cdcd_sample(
        &mut self,
        negatives: &NegativeSet,
        cfg: &LossConfig,
        rng: &ChainRng,
        positive: Option<(&TokenSequence, usize, NodeId)>,
    ) -> Result<(NodeId, Vec<f64>)> {
        if negatives.is_empty() {
            return Err(Error::EmptyNegatives);
        }
        let t = rng.sample_step(self.schedule.steps());
        let mut nlls = Vec::with_capacity(negatives.len());
        match cfg.sample_source {
            SampleSource::Positive => {
                let (_, pt, logits) = positive.expect("positive chain supplied");
                debug_assert_eq!(pt, t);
                let lp = self.g.log_softmax(logits)?;
                for z in &negatives.samples {
                    nlls.push(nll_node(&mut self.g, lp, z, self.schedule.codebook())?);
                }
            }
            SampleSource::Negative => {
                for (j, z) in negatives.samples.iter().enumerate() {
                    let zt = forward_sample(z, t, self.schedule, &rng.negative(j).corruption(t))?;
                    let logits = self.logits(&zt, t)?;
                    nlls.push(self.aux_from_logits(logits, z)?);
                }
            }
        }
        let values = nlls.iter().map(|&n| self.g.value(n).item()).collect();
        let mean = shifted_mean(&mut self.g, &nlls)?;
        Ok((self.g.scale(mean, -1.0)?, values))
    }
}

/// Variational bound estimate for one sequence. Only the vb fields of the
/// breakdown are filled.
pub fn loss_vb(
    params: &Params,
    x0: &TokenSequence,
    class: usize,
    schedule: &Schedule,
    cfg: &LossConfig,
    rng: &ChainRng,
) -> Result<LossBreakdown> {
    let mut b = Builder::new(params, schedule, class)?;
    let v = b.vb(x0, cfg, rng)?;
    Ok(b.vb_breakdown(&v))
}

/// `−Σ_ℓ log p_θ(x0[ℓ] | x_t, t, c)`.
pub fn loss_aux_x0(params: &Params, x0: &TokenSequence, xt: &TokenSequence, t: usize, class: usize) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, params);
    let logits = build_logits(&mut g, params, &nodes, xt, t, class)?;
    let lp = g.log_softmax(logits)?;
    let n = nll_node(&mut g, lp, x0, params.config().codebook)?;
    Ok(g.value(n).item())
}

/// Step-mode contrastive term; negative `j` runs on `rngs[j]`.
pub fn loss_cdcd_step(
    params: &Params,
    negatives: &NegativeSet,
    class: usize,
    schedule: &Schedule,
    cfg: &LossConfig,
    rngs: &[ChainRng],
) -> Result<(f64, Vec<LossBreakdown>)> {
    let mut b = Builder::new(params, schedule, class)?;
    let (node, parts) = b.cdcd_step(negatives, cfg, rngs)?;
    Ok((b.g.value(node).item(), parts))
}

/// Sample-mode contrastive term. Returns the term and each negative's NLL.
pub fn loss_cdcd_sample(
    params: &Params,
    x0: &TokenSequence,
    negatives: &NegativeSet,
    class: usize,
    schedule: &Schedule,
    cfg: &LossConfig,
    rng: &ChainRng,
) -> Result<(f64, Vec<f64>)> {
    let mut b = Builder::new(params, schedule, class)?;
    let positive = match cfg.sample_source {
        SampleSource::Positive => {
            let t = rng.sample_step(schedule.steps());
            let xt = forward_sample(x0, t, schedule, &rng.corruption(t))?;
            let logits = b.logits(&xt, t)?;
            Some((xt, t, logits))
        }
        SampleSource::Negative => None,
    };
    let pos = positive.as_ref().map(|(xt, t, l)| (xt, *t, *l));
    let (node, parts) = b.cdcd_sample(negatives, cfg, rng, pos)?;
    Ok((b.g.value(node).item(), parts))
}

/// `−log(f / (f + Σ_j f_j))` for positive density ratios.
pub fn infonce_cdcd(positive: f64, negatives: &[f64]) -> Result<f64> {
    if !(positive > 0.0 && positive.is_finite()) {
        return Err(Error::range("positive ratio", positive, "(0, inf)"));
    }
    let mut s = 0.0;
    for &f in negatives {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::range("negative ratio", f, "(0, inf)"));
        }
        s += f / positive;
    }
    Ok(s.ln_1p())
}

/// Assemble the full objective for one item on a fresh graph.
fn build_total<'a>(
    params: &'a Params,
    x0: &TokenSequence,
    class: usize,
    negatives: Option<&NegativeSet>,
    schedule: &Schedule,
    cfg: &LossConfig,
    rng: &ChainRng,
) -> Result<(Graph<'a>, NodeId, LossBreakdown)> {
    cfg.validate()?;
    let mut b = Builder::new(params, schedule, class)?;
    let v = b.vb(x0, cfg, rng)?;
    let aux = b.aux_from_logits(v.logits, x0)?;
    let weighted_aux = b.g.scale(aux, cfg.aux_weight)?;
    let mut total = b.g.add(v.total, weighted_aux)?;
    let mut breakdown = b.vb_breakdown(&v);
    breakdown.l_aux = b.g.value(aux).item();

    let active = negatives.filter(|_| cfg.contrastive());
    if let Some(negs) = active {
        let cdcd = match cfg.mode {
            ContrastiveMode::Step => {
                let rngs: Vec<ChainRng> = (0..negs.len()).map(|j| rng.negative(j)).collect();
                b.cdcd_step(negs, cfg, &rngs)?.0
            }
            ContrastiveMode::Sample => b.cdcd_sample(negs, cfg, rng, Some((&v.xt, v.step, v.logits)))?.0,
            ContrastiveMode::Vanilla => unreachable!("vanilla is never contrastive"),
        };
        breakdown.l_cdcd = b.g.value(cdcd).item();
        let weighted = b.g.scale(cdcd, cfg.lambda)?;
        total = b.g.add(total, weighted)?;
    }
    breakdown.total = b.g.value(total).item();
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", breakdown.step)));
    }
    Ok((b.g, total, breakdown))
}

/// `vb + aux_weight · l_aux + λ · l_cdcd`.
///
/// Negatives are ignored in vanilla mode or when `λ = 0`, and passing `None`
/// skips the contrastive term; in both cases nothing is computed for them.
/// Negative `j` uses the stream `rng.negative(j)`.
pub fn total_loss(
    params: &Params,
    x0: &TokenSequence,
    class: usize,
    negatives: Option<&NegativeSet>,
    schedule: &Schedule,
    cfg: &LossConfig,
    rng: &ChainRng,
) -> Result<LossBreakdown> {
    Ok(build_total(params, x0, class, negatives, schedule, cfg, rng)?.2)
}

/// [`total_loss`] together with its gradient.
pub fn total_loss_with_grad(
    params: &Params,
    x0: &TokenSequence,
    class: usize,
    negatives: Option<&NegativeSet>,
    schedule: &Schedule,
    cfg: &LossConfig,
    rng: &ChainRng,
) -> Result<(LossBreakdown, Gradients)> {
    let (g, total, breakdown) = build_total(params, x0, class, negatives, schedule, cfg, rng)?;
    let grads = g.backward(total)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient at step {}", breakdown.step)));
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::diffusion::{build_schedule, Kernel, ScheduleConfig, ScheduleShape};

    fn setup(kernel: Kernel, k: usize, len: usize, steps: usize) -> (Schedule, Params) {
        let sc = ScheduleConfig {
            steps,
            codebook: k,
            kernel,
            shape: ScheduleShape::Linear,
            terminal: 1.0,
        };
        let sched = build_schedule(&sc).unwrap();
        let mut dc = DenoiserConfig::new(&sc, len, 3);
        dc.width = 8;
        dc.blocks = 1;
        dc.ff_mult = 2;
        (sched, init_params(&dc).unwrap())
    }

    fn randomise(p: &mut Params, seed: u64) {
        let mut rng = RngStream::new(seed).rng();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }

    /// Find a stream whose sampled step is `t`.
    fn chain_at(t: usize, steps: usize) -> ChainRng {
        (0..).map(|s| ChainRng::new(&RngStream::new(s))).find(|r| r.sample_step(steps) == t).unwrap()
    }

    #[test]
    fn zero_model_reconstruction_is_log_k() {
        let (sched, params) = setup(Kernel::Uniform, 4, 3, 3);
        let cfg = LossConfig {
            adaptive: AdaptiveWeight::Off,
            ..Default::default()
        };
        let x0 = TokenSequence::new(vec![0, 3, 1], None);
        let b = loss_vb(&params, &x0, 0, &sched, &cfg, &chain_at(1, 3)).unwrap();
        assert_eq!(b.step, 1);
        // single-term estimate scales L_0 by T
        assert!((b.l0 - 3.0 * 3.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(b.l_tm1, 0.0);
    }

    #[test]
    fn aux_examples() {
        let (_, params) = setup(Kernel::Uniform, 4, 3, 3);
        let x0 = TokenSequence::new(vec![0, 3, 1], None);
        let xt = TokenSequence::new(vec![2, 2, 1], None);
        let v = loss_aux_x0(&params, &x0, &xt, 2, 1).unwrap();
        assert!((v - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_is_zero_for_confident_correct_head() {
        let (_, mut params) = setup(Kernel::Uniform, 4, 3, 3);
        // push every position to token 2 with a huge bias
        let hb = params.index_of("head.b").unwrap();
        params.tensors_mut()[hb].data_mut()[2] = 800.0;
        let x0 = TokenSequence::new(vec![2, 2, 2], None);
        let v = loss_aux_x0(&params, &x0, &x0, 1, 0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn infonce_examples() {
        assert!((infonce_cdcd(2.0, &[2.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((infonce_cdcd(0.7, &[0.7; 9]).unwrap() - 10f64.ln()).abs() < 1e-14);
        assert!(infonce_cdcd(1e12, &[1.0, 1.0]).unwrap() < 1e-11);
        assert!(infonce_cdcd(0.0, &[1.0]).is_err());
        assert!(infonce_cdcd(1.0, &[-1.0]).is_err());
        assert_eq!(infonce_cdcd(1.0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn step_mode_duplicates_cancel() {
        let (sched, mut params) = setup(Kernel::MaskUniform, 3, 4, 4);
        randomise(&mut params, 1);
        let x0 = TokenSequence::new(vec![0, 2, 1, 1], Some(2));
        let cfg = LossConfig {
            mode: ContrastiveMode::Step,
            ..Default::default()
        };
        for s in 0..10 {
            let rng = ChainRng::new(&RngStream::new(s));
            let vb = loss_vb(&params, &x0, 2, &sched, &cfg, &rng).unwrap();
            let negs = NegativeSet::duplicates(&x0, 5);
            let (l, parts) = loss_cdcd_step(&params, &negs, 2, &sched, &cfg, &[rng; 5]).unwrap();
            assert_eq!(l, -vb.total);
            assert_eq!(parts.len(), 5);
        }
    }

    #[test]
    fn step_mode_is_mean_of_negative_bounds() {
        let (sched, mut params) = setup(Kernel::MaskUniform, 3, 4, 4);
        randomise(&mut params, 2);
        let cfg = LossConfig {
            mode: ContrastiveMode::Step,
            ..Default::default()
        };
        let a = TokenSequence::new(vec![0, 2, 1, 1], None);
        let b = TokenSequence::new(vec![2, 2, 0, 1], None);
        let ra = ChainRng::new(&RngStream::new(3));
        let rb = ChainRng::new(&RngStream::new(4));
        let va = loss_vb(&params, &a, 1, &sched, &cfg, &ra).unwrap().total;
        let vb = loss_vb(&params, &b, 1, &sched, &cfg, &rb).unwrap().total;
        let negs = NegativeSet {
            samples: vec![a, b],
            kind: NegativeKind::Intra,
            source: None,
        };
        let (l, _) = loss_cdcd_step(&params, &negs, 1, &sched, &cfg, &[ra, rb]).unwrap();
        assert!((l + (va + vb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_negatives_rejected() {
        let (sched, params) = setup(Kernel::MaskUniform, 3, 4, 4);
        let cfg = LossConfig::default();
        let empty = NegativeSet::duplicates(&TokenSequence::new(vec![0; 4], None), 0);
        let x0 = TokenSequence::new(vec![0, 1, 2, 0], None);
        let rng = ChainRng::new(&RngStream::new(0));
        assert!(matches!(
            loss_cdcd_step(&params, &empty, 0, &sched, &cfg, &[]),
            Err(Error::EmptyNegatives)
        ));
        assert!(matches!(
            loss_cdcd_sample(&params, &x0, &empty, 0, &sched, &cfg, &rng),
            Err(Error::EmptyNegatives)
        ));
    }

    #[test]
    fn sample_mode_zero_model_is_minus_l_log_k() {
        let (sched, params) = setup(Kernel::MaskUniform, 3, 4, 4);
        let x0 = TokenSequence::new(vec![0, 1, 2, 0], None);
        let negs = NegativeSet {
            samples: vec![TokenSequence::new(vec![2, 2, 2, 2], None), TokenSequence::new(vec![1, 0, 1, 0], None)],
            kind: NegativeKind::Inter,
            source: None,
        };
        for source in [SampleSource::Positive, SampleSource::Negative] {
            let cfg = LossConfig {
                mode: ContrastiveMode::Sample,
                sample_source: source,
                ..Default::default()
            };
            let (l, _) = loss_cdcd_sample(&params, &x0, &negs, 0, &sched, &cfg, &ChainRng::new(&RngStream::new(1))).unwrap();
            assert!((l + 4.0 * 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_mode_duplicates_give_minus_aux() {
        let (sched, mut params) = setup(Kernel::MaskUniform, 3, 4, 4);
        randomise(&mut params, 5);
        let x0 = TokenSequence::new(vec![0, 1, 2, 0], Some(1));
        let cfg = LossConfig {
            mode: ContrastiveMode::Sample,
            lambda: 1.0,
            ..Default::default()
        };
        let rng = ChainRng::new(&RngStream::new(7));
        let negs = NegativeSet::duplicates(&x0, 4);
        let (l, _) = loss_cdcd_sample(&params, &x0, &negs, 1, &sched, &cfg, &rng).unwrap();
        let b = total_loss(&params, &x0, 1, Some(&negs), &sched, &cfg, &rng).unwrap();
        assert_eq!(l, -b.l_aux);
        assert_eq!(b.l_cdcd, -b.l_aux);
    }

    #[test]
    fn lambda_zero_matches_vanilla_exactly() {
        let (sched, mut params) = setup(Kernel::MaskUniform, 3, 4, 4);
        randomise(&mut params, 6);
        let x0 = TokenSequence::new(vec![0, 1, 2, 0], Some(1));
        let negs = NegativeSet::duplicates(&TokenSequence::new(vec![2, 1, 0, 0], None), 3);
        let vanilla = LossConfig::default();
        for mode in [ContrastiveMode::Step, ContrastiveMode::Sample] {
            let cfg = LossConfig {
                mode,
                lambda: 0.0,
                ..Default::default()
            };
            for s in 0..5 {
                let rng = ChainRng::new(&RngStream::new(s));
                let a = total_loss_with_grad(&params, &x0, 1, Some(&negs), &sched, &cfg, &rng).unwrap();
                let b = total_loss_with_grad(&params, &x0, 1, None, &sched, &vanilla, &rng).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn step_mode_duplicates_leave_aux_at_unit_lambda() {
        let (sched, mut params) = setup(Kernel::MaskUniform, 3, 4, 4);
        randomise(&mut params, 8);
        let x0 = TokenSequence::new(vec![0, 1, 2, 0], Some(1));
        let cfg = LossConfig {
            mode: ContrastiveMode::Step,
            lambda: 1.0,
            ..Default::default()
        };
        let rng = ChainRng::new(&RngStream::new(9));
        // duplicates that share the positive's corruption stream exactly
        let negs = NegativeSet::duplicates(&x0, 3);
        let mut b = Builder::new(&params, &sched, 1).unwrap();
        let v = b.vb(&x0, &cfg, &rng).unwrap();
        let (c, _) = b.cdcd_step(&negs, &cfg, &[rng; 3]).unwrap();
        let vb_total = b.g.value(v.total).item();
        assert_eq!(b.g.value(c).item(), -vb_total);
        let aux = loss_aux_x0(&params, &x0, &v.xt, v.step, 1).unwrap();
        let total = vb_total + cfg.aux_weight * aux + cfg.lambda * b.g.value(c).item();
        assert!((total - aux).abs() < 1e-12);
    }

    #[test]
    fn breakdown_identity() {
        let (sched, mut params) = setup(Kernel::MaskUniform, 3, 4, 4);
        randomise(&mut params, 10);
        let x0 = TokenSequence::new(vec![1, 1, 2, 0], Some(0));
        let negs = NegativeSet {
            samples: vec![TokenSequence::new(vec![2, 1, 0, 0], None), TokenSequence::new(vec![0, 0, 1, 2], None)],
            kind: NegativeKind::Inter,
            source: None,
        };
        for (i, mode) in [ContrastiveMode::Vanilla, ContrastiveMode::Step, ContrastiveMode::Sample].into_iter().enumerate() {
            for s in 0..20u64 {
                let cfg = LossConfig {
                    mode,
                    lambda: 0.3,
                    aux_weight: 0.7,
                    vb: if s % 2 == 0 { VbEstimator::SingleTerm } else { VbEstimator::Alg1Cumulative },
                    ..Default::default()
                };
                let rng = ChainRng::new(&RngStream::new(s * 3 + i as u64));
                let b = total_loss(&params, &x0, 0, Some(&negs), &sched, &cfg, &rng).unwrap();
                let rebuilt = b.vb() + cfg.aux_weight * b.l_aux + cfg.lambda * b.l_cdcd;
                assert!((b.total - rebuilt).abs() < 1e-12);
                assert!(b.l_t >= -1e-12 && b.l_tm1 >= -1e-12 && b.l0 >= -1e-12);
            }
        }
    }

    #[test]
    fn mismatched_schedule_rejected() {
        let (_, params) = setup(Kernel::MaskUniform, 3, 4, 4);
        let (other, _) = setup(Kernel::MaskUniform, 3, 4, 5);
        let x0 = TokenSequence::new(vec![1, 1, 2, 0], None);
        assert!(loss_vb(&params, &x0, 0, &other, &LossConfig::default(), &ChainRng::new(&RngStream::new(0))).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        let mut c = LossConfig::default();
        for name in ["vanilla", "step-intra", "step-inter", "sample-intra", "sample-inter"] {
            c.set_variant(name).unwrap();
            assert_eq!(c.variant(), name);
        }
        assert!(c.set_variant("step").is_err());
    }
}
