//! Synthetic class-conditional token worlds.
//!
//! Each class is a first-order Markov chain over `K` tokens, so sequence
//! likelihoods, the Bayes classifier and `I(z_0; c)` are all exact.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{sample_categorical, tags, RngStream};

/// Enumeration guard for [`true_mutual_information`].
pub const MI_ENUMERATION_LIMIT: usize = 65_536;

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    classes: usize,
    codebook: usize,
    seq_len: usize,
    prior: Vec<f64>,
    /// `G x K`
    initial: Vec<f64>,
    /// `G x K x K`, row-stochastic in the last axis
    transition: Vec<f64>,
}

/// Parameters of a generated world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub name: String,
    pub classes: usize,
    pub codebook: usize,
    pub seq_len: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl WorldSpec {
    /// The benchmark world: four classes, 16 tokens, length 16.
    pub fn w1() -> Self {
        Self {
            name: "W1".into(),
            classes: 4,
            codebook: 16,
            seq_len: 16,
            concentration: 0.3,
            seed: 1,
        }
    }

    pub fn build(&self) -> Result<World> {
        make_world(self.classes, self.codebook, self.seq_len, self.concentration, self.seed)
    }
}

impl World {
    /// Assemble a world from explicit tables; every distribution is
    /// checked for normalisation.
    pub fn from_tables(
        prior: Vec<f64>,
        initial: Vec<Vec<f64>>,
        transition: Vec<Vec<Vec<f64>>>,
        seq_len: usize,
    ) -> Result<Self> {
        let classes = prior.len();
        if classes == 0 || initial.len() != classes || transition.len() != classes || seq_len == 0 {
            return Err(Error::Config("world tables disagree on class count".into()));
        }
        let codebook = initial[0].len();
        check_distribution("class prior", &prior)?;
        for g in 0..classes {
            if initial[g].len() != codebook || transition[g].len() != codebook {
                return Err(Error::Config(format!("class {g} tables have the wrong size")));
            }
            check_distribution("initial distribution", &initial[g])?;
            for row in &transition[g] {
                if row.len() != codebook {
                    return Err(Error::Config(format!("class {g} transition row has the wrong size")));
                }
                check_distribution("transition row", row)?;
            }
        }
        Ok(Self {
            classes,
            codebook,
            seq_len,
            prior,
            initial: initial.concat(),
            transition: transition.into_iter().flatten().flatten().collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn codebook(&self) -> usize {
        self.codebook
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn initial(&self, g: usize) -> &[f64] {
        &self.initial[g * self.codebook..(g + 1) * self.codebook]
    }

    pub fn transition_row(&self, g: usize, from: usize) -> &[f64] {
        let k = self.codebook;
        let base = (g * k + from) * k;
        &self.transition[base..base + k]
    }

    /// `p(z_0, z_1 | g)` as a flat `K x K` table.
    pub fn first_bigram(&self, g: usize) -> Vec<f64> {
        let k = self.codebook;
        let mut out = vec![0.0; k * k];
        for a in 0..k {
            let pa = self.initial(g)[a];
            for (b, &m) in self.transition_row(g, a).iter().enumerate() {
                out[a * k + b] = pa * m;
            }
        }
        out
    }

    /// Mean over positions of the joint bigram `p(z_ℓ, z_{ℓ+1} | g)`.
    pub fn bigram_distribution(&self, g: usize) -> Vec<f64> {
        let k = self.codebook;
        let mut marginal = self.initial(g).to_vec();
        let mut out = vec![0.0; k * k];
        let pairs = self.seq_len.saturating_sub(1).max(1);
        for _ in 0..self.seq_len.saturating_sub(1) {
            let mut next = vec![0.0; k];
            for a in 0..k {
                for (b, &m) in self.transition_row(g, a).iter().enumerate() {
                    let p = marginal[a] * m;
                    out[a * k + b] += p / pairs as f64;
                    next[b] += p;
                }
            }
            marginal = next;
        }
        out
    }

    fn check_tokens(&self, x0: &TokenSequence) -> Result<()> {
        if let Some(&bad) = x0.tokens.iter().find(|&&x| x >= self.codebook) {
            return Err(Error::range("token", bad, format!("[0, {})", self.codebook)));
        }
        Ok(())
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// Symmetric Dirichlet draw, computed in log space so tiny concentrations
/// give near one-hot vectors instead of underflowing to zero.
fn dirichlet<R: Rng>(rng: &mut R, k: usize, concentration: f64) -> Vec<f64> {
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let boost = Gamma::new(concentration + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = boost.sample(rng);
            let u: f64 = 1.0 - rng.gen::<f64>();
            g.ln() + u.ln() / concentration
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let mut out: Vec<f64> = w.iter().map(|v| v / s).collect();
    // absorb rounding so the vector sums to one as tightly as possible
    let drift: f64 = 1.0 - out.iter().sum::<f64>();
    let top = out
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    out[top] += drift;
    out
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

const MAX_WORLD_ATTEMPTS: u64 = 64;

/// Draw per-class Markov chains from a symmetric Dirichlet prior. Classes
/// whose first-bigram distributions coincide are redrawn.
pub fn make_world(classes: usize, codebook: usize, seq_len: usize, concentration: f64, seed: u64) -> Result<World> {
    if classes < 2 {
        return Err(Error::range("classes", classes, ">= 2"));
    }
    if codebook < 2 {
        return Err(Error::range("codebook", codebook, ">= 2"));
    }
    if seq_len < 2 {
        return Err(Error::range("seq_len", seq_len, ">= 2"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::range("concentration", concentration, "(0, inf)"));
    }
    let root = RngStream::new(seed).child(tags::WORLD);
    for attempt in 0..MAX_WORLD_ATTEMPTS {
        let mut rng = root.child(attempt).rng();
        let mut initial = Vec::with_capacity(classes);
        let mut transition = Vec::with_capacity(classes);
        for _ in 0..classes {
            initial.push(dirichlet(&mut rng, codebook, concentration));
            transition.push((0..codebook).map(|_| dirichlet(&mut rng, codebook, concentration)).collect::<Vec<_>>());
        }
        let world = World::from_tables(vec![1.0 / classes as f64; classes], initial, transition, seq_len)?;
        let bigrams: Vec<Vec<f64>> = (0..classes).map(|g| world.first_bigram(g)).collect();
        let distinct = (0..classes).all(|a| (a + 1..classes).all(|b| total_variation(&bigrams[a], &bigrams[b]) > 1e-9));
        if distinct {
            return Ok(world);
        }
    }
    Err(Error::Config("could not draw distinguishable classes".into()))
}

/// Labelled sequences, all with a class and tokens below `codebook`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub codebook: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub items: Vec<TokenSequence>,
}

impl Dataset {
    pub fn new(codebook: usize, seq_len: usize, classes: usize, items: Vec<TokenSequence>) -> Result<Self> {
        for (i, item) in items.iter().enumerate() {
            if item.len() != seq_len {
                return Err(Error::shape("dataset", format!("item {i} has length {}", item.len())));
            }
            match item.class {
                Some(c) if c < classes => {}
                other => return Err(Error::Config(format!("item {i} has class {other:?}"))),
            }
            if let Some(&bad) = item.tokens.iter().find(|&&x| x >= codebook) {
                return Err(Error::range("token", bad, format!("[0, {codebook})")));
            }
        }
        Ok(Self {
            codebook,
            seq_len,
            classes,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.items[i].class.expect("dataset items are labelled")
    }
}

/// `n_per_class` ancestral samples from every class, grouped by class.
pub fn sample_dataset(world: &World, n_per_class: usize, stream: &RngStream) -> Dataset {
    let mut items = Vec::with_capacity(world.classes * n_per_class);
    for g in 0..world.classes {
        for i in 0..n_per_class {
            let mut rng = stream.at(&[g as u64, i as u64]).rng();
            items.push(sample_sequence(world, g, &mut rng));
        }
    }
    Dataset {
        codebook: world.codebook,
        seq_len: world.seq_len,
        classes: world.classes,
        items,
    }
}

pub fn sample_sequence<R: Rng>(world: &World, g: usize, rng: &mut R) -> TokenSequence {
    let mut tokens = Vec::with_capacity(world.seq_len);
    let mut cur = sample_categorical(rng, world.initial(g));
    tokens.push(cur);
    for _ in 1..world.seq_len {
        cur = sample_categorical(rng, world.transition_row(g, cur));
        tokens.push(cur);
    }
    TokenSequence::new(tokens, Some(g))
}

/// `ln p(x0 | g)`.
pub fn log_sequence_probability(world: &World, x0: &TokenSequence, g: usize) -> Result<f64> {
    world.check_tokens(x0)?;
    if g >= world.classes {
        return Err(Error::range("class", g, format!("[0, {})", world.classes)));
    }
    let Some(&first) = x0.tokens.first() else {
        return Ok(0.0);
    };
    let mut lp = world.initial(g)[first].ln();
    for w in x0.tokens.windows(2) {
        lp += world.transition_row(g, w[0])[w[1]].ln();
    }
    Ok(lp)
}

/// `p(x0 | g) = π_g[x_0] · Π M_g[x_{ℓ-1}][x_ℓ]`.
pub fn true_sequence_probability(world: &World, x0: &TokenSequence, g: usize) -> Result<f64> {
    world.check_tokens(x0)?;
    if g >= world.classes {
        return Err(Error::range("class", g, format!("[0, {})", world.classes)));
    }
    let Some(&first) = x0.tokens.first() else {
        return Ok(1.0);
    };
    let mut p = world.initial(g)[first];
    for w in x0.tokens.windows(2) {
        p *= world.transition_row(g, w[0])[w[1]];
    }
    Ok(p)
}

/// `p(x0) = Σ_g p(g) p(x0 | g)`.
pub fn marginal_sequence_probability(world: &World, x0: &TokenSequence) -> Result<f64> {
    let mut s = 0.0;
    for g in 0..world.classes {
        s += world.prior[g] * true_sequence_probability(world, x0, g)?;
    }
    Ok(s)
}

/// Every length-`len` sequence over `k` tokens, in lexicographic order.
pub fn enumerate_sequences(k: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k.checked_pow(len as u32).unwrap_or(usize::MAX);
    (0..total).map(move |mut idx| {
        let mut v = vec![0; len];
        for slot in v.iter_mut().rev() {
            *slot = idx % k;
            idx /= k;
        }
        v
    })
}

/// Exact `I(z_0; c)` in nats by enumerating all `K^L` sequences.
pub fn true_mutual_information(world: &World) -> Result<f64> {
    let count = world
        .codebook
        .checked_pow(world.seq_len as u32)
        .filter(|&n| n <= MI_ENUMERATION_LIMIT)
        .ok_or_else(|| {
            Error::Guard(format!(
                "K^L = {}^{} exceeds the enumeration limit {MI_ENUMERATION_LIMIT}",
                world.codebook, world.seq_len
            ))
        })?;
    let mut mi = 0.0;
    let mut cond = vec![0.0; world.classes];
    for tokens in enumerate_sequences(world.codebook, world.seq_len).take(count) {
        let x = TokenSequence::new(tokens, None);
        let mut marginal = 0.0;
        for (g, slot) in cond.iter_mut().enumerate() {
            *slot = true_sequence_probability(world, &x, g)?;
            marginal += world.prior[g] * *slot;
        }
        for (g, &p) in cond.iter().enumerate() {
            if p > 0.0 {
                mi += world.prior[g] * p * (p / marginal).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `argmax_g p(g) p(x0 | g)`, ties to the lowest class.
pub fn bayes_classify(world: &World, x0: &TokenSequence) -> Result<usize> {
    let mut best = 0;
    let mut best_lp = f64::NEG_INFINITY;
    for g in 0..world.classes {
        let lp = world.prior[g].ln() + log_sequence_probability(world, x0, g)?;
        if lp > best_lp {
            best_lp = lp;
            best = g;
        }
    }
    Ok(best)
}
