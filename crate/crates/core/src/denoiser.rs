//! Learnable reverse model.
//!
//! A small pre-norm transformer reads `(x_t, t, c)` and predicts a
//! distribution over the clean token at every position. The reverse kernel
//! `p(x_{t-1} | x_t, c)` mixes the analytic posteriors with that prediction.

use rand_chacha::ChaCha8Rng;

use crate::diffusion::{PositionDistributions, Schedule, ScheduleConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{tags, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Clean codebook size `K`.
    pub codebook: usize,
    /// Input alphabet size `S` (`K` or `K + 1` with a mask state).
    pub states: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub classes: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn new(schedule: &ScheduleConfig, seq_len: usize, classes: usize) -> Self {
        Self {
            codebook: schedule.codebook,
            states: schedule.states(),
            seq_len,
            steps: schedule.steps,
            classes,
            width: 64,
            blocks: 2,
            heads: 2,
            ff_mult: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.codebook < 2 || self.states < self.codebook || self.seq_len == 0 || self.steps == 0 {
            return Err(Error::Config(format!("degenerate denoiser config {self:?}")));
        }
        if self.classes == 0 {
            return Err(Error::Config("need at least one conditioning class".into()));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// N(0, 1/fan_in)
    Scaled(usize),
    Zeros,
    Ones,
}

fn layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.width;
    let dh = cfg.head_width();
    let ff = cfg.ff_mult * d;
    let mut v = vec![
        ("tok_emb".to_string(), vec![cfg.states, d], Init::Scaled(d)),
        ("pos_emb".to_string(), vec![cfg.seq_len, d], Init::Scaled(d)),
        ("time_emb".to_string(), vec![cfg.steps, d], Init::Scaled(d)),
        ("cond_emb".to_string(), vec![cfg.classes, d], Init::Scaled(d)),
    ];
    for b in 0..cfg.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        v.push((p("ln1.gain"), vec![d], Init::Ones));
        v.push((p("ln1.bias"), vec![d], Init::Zeros));
        for h in 0..cfg.heads {
            for which in ["q", "k", "v"] {
                v.push((p(&format!("head{h}.{which}.w")), vec![d, dh], Init::Scaled(d)));
                v.push((p(&format!("head{h}.{which}.b")), vec![dh], Init::Zeros));
            }
        }
        v.push((p("attn_out.w"), vec![d, d], Init::Scaled(d)));
        v.push((p("attn_out.b"), vec![d], Init::Zeros));
        v.push((p("ln2.gain"), vec![d], Init::Ones));
        v.push((p("ln2.bias"), vec![d], Init::Zeros));
        v.push((p("ff_in.w"), vec![d, ff], Init::Scaled(d)));
        v.push((p("ff_in.b"), vec![ff], Init::Zeros));
        v.push((p("ff_out.w"), vec![ff, d], Init::Scaled(ff)));
        v.push((p("ff_out.b"), vec![d], Init::Zeros));
    }
    v.push(("final_ln.gain".into(), vec![d], Init::Ones));
    v.push(("final_ln.bias".into(), vec![d], Init::Zeros));
    v.push(("head.w".into(), vec![d, cfg.codebook], Init::Zeros));
    v.push(("head.b".into(), vec![cfg.codebook], Init::Zeros));
    v
}

/// All learnable tensors, in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Deterministic initialisation from `config.seed`. The output head starts
/// at zero, so the initial clean-token prediction is uniform.
pub fn init_params(config: &DenoiserConfig) -> Result<Params> {
    config.validate()?;
    let mut rng: ChaCha8Rng = RngStream::new(config.seed).child(tags::INIT).rng();
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in layout(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Scaled(fan_in) => {
                let std = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * standard_normal(&mut rng)).collect()
            }
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(Params {
        config: config.clone(),
        names,
        tensors,
    })
}

fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Params {
    /// Reassemble from named tensors, checking them against the layout
    /// implied by `config`.
    pub fn from_tensors(config: DenoiserConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es, _), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor '{n}' {:?} does not match expected '{en}' {es:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Parameter leaves of one graph, in layout order.
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn register<'a>(g: &mut Graph<'a>, params: &'a Params) -> Self {
        let ids = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t))
            .collect();
        Self { ids }
    }
}

struct Cursor<'p> {
    ids: &'p [NodeId],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

fn check_inputs(cfg: &DenoiserConfig, xt: &TokenSequence, t: usize, class: usize) -> Result<()> {
    if class >= cfg.classes {
        return Err(Error::range("class", class, format!("[0, {})", cfg.classes)));
    }
    if t < 1 || t > cfg.steps {
        return Err(Error::range("step", t, format!("[1, {}]", cfg.steps)));
    }
    if xt.len() != cfg.seq_len {
        return Err(Error::shape(
            "denoiser",
            format!("sequence length {} != {}", xt.len(), cfg.seq_len),
        ));
    }
    if let Some(&bad) = xt.tokens.iter().find(|&&x| x >= cfg.states) {
        return Err(Error::range("token", bad, format!("[0, {})", cfg.states)));
    }
    Ok(())
}

/// Append the denoiser to `g`; returns the `[L, K]` clean-token logits.
pub fn build_logits(
    g: &mut Graph<'_>,
    params: &Params,
    nodes: &ParamNodes,
    xt: &TokenSequence,
    t: usize,
    class: usize,
) -> Result<NodeId> {
    let cfg = &params.config;
    check_inputs(cfg, xt, t, class)?;
    let len = cfg.seq_len;
    let mut p = Cursor {
        ids: &nodes.ids,
        pos: 0,
    };
    let (tok, pos, time, cond) = (p.next(), p.next(), p.next(), p.next());
    let mut h = g.gather(tok, xt.tokens.clone())?;
    let pe = g.gather(pos, (0..len).collect())?;
    h = g.add(h, pe)?;
    let te = g.gather(time, vec![t - 1; len])?;
    h = g.add(h, te)?;
    let ce = g.gather(cond, vec![class; len])?;
    h = g.add(h, ce)?;

    let scale = 1.0 / (cfg.head_width() as f64).sqrt();
    for _ in 0..cfg.blocks {
        let (g1, b1) = (p.next(), p.next());
        let a = g.layer_norm(h, g1, b1)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            let (qw, qb, kw, kb, vw, vb) = (p.next(), p.next(), p.next(), p.next(), p.next(), p.next());
            let q = g.affine(a, qw, qb)?;
            let k = g.affine(a, kw, kb)?;
            let v = g.affine(a, vw, vb)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, v)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(heads)? };
        let (ow, ob) = (p.next(), p.next());
        let o = g.affine(cat, ow, ob)?;
        h = g.add(h, o)?;

        let (g2, b2) = (p.next(), p.next());
        let a = g.layer_norm(h, g2, b2)?;
        let (w1, c1, w2, c2) = (p.next(), p.next(), p.next(), p.next());
        let f = g.affine(a, w1, c1)?;
        let f = g.gelu(f)?;
        let f = g.affine(f, w2, c2)?;
        h = g.add(h, f)?;
    }
    let (fg, fb) = (p.next(), p.next());
    let h = g.layer_norm(h, fg, fb)?;
    let (hw, hb) = (p.next(), p.next());
    g.affine(h, hw, hb)
}

/// `p_θ(x̃_0 | x_t, t, c)`: `L` rows over the `K` clean tokens.
pub fn predict_x0(
    params: &Params,
    xt: &TokenSequence,
    t: usize,
    class: usize,
) -> Result<PositionDistributions> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, params);
    let logits = build_logits(&mut g, params, &nodes, xt, t, class)?;
    let probs = g.softmax(logits)?;
    PositionDistributions::new(params.config.codebook, g.value(probs).data().to_vec())
}

/// Mix the analytic posteriors with a clean-token prediction:
/// `p(x_{t-1} | x_t) = Σ_j q(x_{t-1} | x_t, x̃_0 = j) · p̃(j)`.
///
/// Hypotheses `j` from which `x_t` is unreachable contribute the flat
/// one-step inverse instead of an undefined posterior.
pub fn compose_reverse(
    x0_probs: &PositionDistributions,
    xt: &TokenSequence,
    t: usize,
    schedule: &Schedule,
) -> Result<PositionDistributions> {
    if t < 2 || t > schedule.steps() {
        return Err(Error::range("step", t, format!("[2, {}]", schedule.steps())));
    }
    let k = schedule.codebook();
    let s = schedule.states();
    if x0_probs.states() != k || x0_probs.positions() != xt.len() {
        return Err(Error::shape(
            "reverse step",
            format!(
                "prediction is {}x{}, expected {}x{}",
                x0_probs.positions(),
                x0_probs.states(),
                xt.len(),
                k
            ),
        ));
    }
    let mut out = vec![0.0; xt.len() * s];
    for (pos, &token) in xt.tokens.iter().enumerate() {
        let row = &mut out[pos * s..(pos + 1) * s];
        for (j, &w) in x0_probs.row(pos).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let post = schedule
                .posterior_row(j, token, t)
                .unwrap_or_else(|| schedule.flat_reverse_row(token, t));
            for (o, p) in row.iter_mut().zip(&post) {
                *o += w * p;
            }
        }
    }
    PositionDistributions::new(s, out)
}

/// `p_θ(x_{t-1} | x_t, c)` over all `S` states, `2 <= t <= T`.
pub fn reverse_step_distribution(
    params: &Params,
    xt: &TokenSequence,
    t: usize,
    class: usize,
    schedule: &Schedule,
) -> Result<PositionDistributions> {
    let p0 = predict_x0(params, xt, t, class)?;
    compose_reverse(&p0, xt, t, schedule)
}

/// Constant tensors that express [`compose_reverse`] with graph ops:
/// `out = ((p̃ ⊙ R) · Q̄_{t-1}) ⊙ C + ((p̃ ⊙ U) · 1) ⊙ F`.
pub(crate) struct ReverseConstants {
    inv_reach: Tensor,
    prev_bar: Tensor,
    step_col: Tensor,
    fallback: Option<(Tensor, Tensor, Tensor)>,
}

impl ReverseConstants {
    pub(crate) fn new(xt: &TokenSequence, t: usize, schedule: &Schedule) -> Result<Self> {
        let k = schedule.codebook();
        let s = schedule.states();
        let len = xt.len();
        let bar = schedule.cumulative(t);
        let prev = schedule.cumulative(t - 1);
        let q = schedule.step_matrix(t);
        let mut inv_reach = vec![0.0; len * k];
        let mut unreachable = vec![0.0; len * k];
        let mut step_col = vec![0.0; len * s];
        let mut fallback = vec![0.0; len * s];
        let mut any_unreachable = false;
        for (pos, &token) in xt.tokens.iter().enumerate() {
            for j in 0..k {
                let d = bar.get(j, token);
                if d > 0.0 {
                    inv_reach[pos * k + j] = 1.0 / d;
                } else {
                    unreachable[pos * k + j] = 1.0;
                    any_unreachable = true;
                }
            }
            for kk in 0..s {
                step_col[pos * s + kk] = q.get(kk, token);
            }
            fallback[pos * s..(pos + 1) * s].copy_from_slice(&schedule.flat_reverse_row(token, t));
        }
        let prev_bar: Vec<f64> = (0..k).flat_map(|j| prev.row(j).iter().copied()).collect();
        let fallback = if any_unreachable {
            Some((
                Tensor::matrix(len, k, unreachable)?,
                Tensor::filled(&[k, s], 1.0),
                Tensor::matrix(len, s, fallback)?,
            ))
        } else {
            None
        };
        Ok(Self {
            inv_reach: Tensor::matrix(len, k, inv_reach)?,
            prev_bar: Tensor::matrix(k, s, prev_bar)?,
            step_col: Tensor::matrix(len, s, step_col)?,
            fallback,
        })
    }

    /// Append the composition to `g` given the `[L, K]` probability node.
    pub(crate) fn apply(self, g: &mut Graph<'_>, x0_probs: NodeId) -> Result<NodeId> {
        let r = g.input(self.inv_reach);
        let qb = g.input(self.prev_bar);
        let c = g.input(self.step_col);
        let w = g.mul(x0_probs, r)?;
        let m = g.matmul(w, qb)?;
        let mut out = g.mul(m, c)?;
        if let Some((u, ones, f)) = self.fallback {
            let u = g.input(u);
            let ones = g.input(ones);
            let f = g.input(f);
            let w = g.mul(x0_probs, u)?;
            let spread = g.matmul(w, ones)?;
            let extra = g.mul(spread, f)?;
            out = g.add(out, extra)?;
        }
        Ok(out)
    }
}
