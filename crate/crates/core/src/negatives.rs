//! Negative sample construction.
//!
//! Intra negatives reorder chunks of the positive itself; inter negatives
//! are whole sequences drawn from other classes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeKind {
    Intra,
    Inter,
}

impl std::str::FromStr for NegativeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(Self::Intra),
            "inter" => Ok(Self::Inter),
            other => Err(Error::Config(format!("unknown negative kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for NegativeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Intra => "intra",
            Self::Inter => "inter",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    pub samples: Vec<TokenSequence>,
    pub kind: NegativeKind,
    /// Dataset index of the positive, when it came from one.
    pub source: Option<usize>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `n` copies of the positive. Used to probe cancellation identities.
    pub fn duplicates(x0: &TokenSequence, n: usize) -> Self {
        Self {
            samples: vec![x0.clone(); n],
            kind: NegativeKind::Intra,
            source: None,
        }
    }
}

/// Default chunk size: a quarter of the sequence, at least one token.
pub fn default_chunk(seq_len: usize) -> usize {
    (seq_len / 4).max(1)
}

const MAX_SHUFFLE_REDRAWS: usize = 256;

/// Split into `⌈L/s⌉` chunks (the last one possibly shorter) and apply a
/// uniformly random non-identity permutation of the chunks.
///
/// Draws whose output equals the input (possible when chunks repeat) are
/// rejected. If the chunks are all identical no reordering can change the
/// sequence and an error is returned.
pub fn intra_shuffle(x0: &TokenSequence, chunk: usize, stream: &RngStream) -> Result<TokenSequence> {
    let len = x0.len();
    if chunk == 0 || chunk > len {
        return Err(Error::range("chunk size", chunk, format!("[1, {len}]")));
    }
    if len < 2 * chunk {
        return Err(Error::Negatives(format!(
            "sequence of length {len} has fewer than two chunks of size {chunk}"
        )));
    }
    let chunks: Vec<&[usize]> = x0.tokens.chunks(chunk).collect();
    if chunks.iter().all(|c| *c == chunks[0]) {
        return Err(Error::Negatives("all chunks are identical; no reordering differs".into()));
    }
    let mut rng = stream.rng();
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    for _ in 0..MAX_SHUFFLE_REDRAWS {
        order.shuffle(&mut rng);
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            continue;
        }
        let tokens: Vec<usize> = order.iter().flat_map(|&i| chunks[i].iter().copied()).collect();
        if tokens != x0.tokens {
            return Ok(TokenSequence::new(tokens, x0.class));
        }
    }
    Err(Error::Negatives("no distinct chunk arrangement found".into()))
}

/// Uniform draw among dataset items whose class differs from `class`.
pub fn inter_sample(dataset: &Dataset, class: usize, stream: &RngStream) -> Result<TokenSequence> {
    let eligible = dataset.items.iter().filter(|x| x.class != Some(class)).count();
    if eligible == 0 {
        return Err(Error::Negatives(format!("no dataset item outside class {class}")));
    }
    let pick = stream.rng().gen_range(0..eligible);
    let item = dataset
        .items
        .iter()
        .filter(|x| x.class != Some(class))
        .nth(pick)
        .expect("index below eligible count");
    Ok(item.clone())
}

/// `count` independent negatives; draw `j` uses `stream.child(j)`.
pub fn build_negative_set(
    x0: &TokenSequence,
    class: usize,
    dataset: &Dataset,
    kind: NegativeKind,
    count: usize,
    chunk: usize,
    stream: &RngStream,
) -> Result<NegativeSet> {
    let samples = (0..count)
        .map(|j| {
            let s = stream.child(j as u64);
            match kind {
                NegativeKind::Intra => intra_shuffle(x0, chunk, &s),
                NegativeKind::Inter => inter_sample(dataset, class, &s),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NegativeSet {
        samples,
        kind,
        source: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_world, sample_dataset};
    use proptest::prelude::*;

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn two_chunks_must_swap() {
        let x = TokenSequence::new(vec![0, 1, 2, 3], None);
        for seed in 0..20 {
            let y = intra_shuffle(&x, 2, &RngStream::new(seed)).unwrap();
            assert_eq!(y.tokens, vec![2, 3, 0, 1]);
        }
    }

    #[test]
    fn too_few_chunks() {
        let x = TokenSequence::new(vec![0, 1, 2], None);
        assert!(intra_shuffle(&x, 2, &RngStream::new(0)).is_err());
        assert!(intra_shuffle(&x, 0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn repeated_chunks_cannot_shuffle() {
        let x = TokenSequence::new(vec![1, 2, 1, 2], None);
        assert!(matches!(intra_shuffle(&x, 2, &RngStream::new(0)), Err(Error::Negatives(_))));
        assert!(intra_shuffle(&x, 1, &RngStream::new(0)).is_ok());
    }

    #[test]
    fn uneven_last_chunk() {
        let x = TokenSequence::new(vec![0, 1, 2, 3, 4], None);
        let y = intra_shuffle(&x, 2, &RngStream::new(3)).unwrap();
        assert_eq!(sorted(y.tokens.clone()), vec![0, 1, 2, 3, 4]);
        assert_ne!(y, x);
    }

    proptest! {
        #[test]
        fn shuffle_preserves_multiset(tokens in proptest::collection::vec(0usize..5, 4..24), chunk in 1usize..5, seed: u64) {
            prop_assume!(tokens.len() >= 2 * chunk);
            let x = TokenSequence::new(tokens.clone(), Some(1));
            match intra_shuffle(&x, chunk, &RngStream::new(seed)) {
                Ok(y) => {
                    prop_assert_eq!(sorted(y.tokens.clone()), sorted(tokens));
                    prop_assert_ne!(&y.tokens, &x.tokens);
                    prop_assert_eq!(y.class, Some(1));
                }
                Err(Error::Negatives(_)) => {
                    let chunks: Vec<&[usize]> = x.tokens.chunks(chunk).collect();
                    prop_assert!(chunks.iter().all(|c| *c == chunks[0]));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }

    #[test]
    fn inter_samples_come_from_other_classes() {
        let w = make_world(3, 4, 4, 1.0, 0).unwrap();
        let d = sample_dataset(&w, 10, &RngStream::new(1));
        let mut counts = [0usize; 3];
        let n = 10_000;
        for i in 0..n {
            let y = inter_sample(&d, 1, &RngStream::new(2).child(i)).unwrap();
            let c = y.class.unwrap();
            assert_ne!(c, 1);
            assert!(d.items.contains(&y));
            counts[c] += 1;
        }
        // binomial(10000, 0.5): 3 sigma = 150
        assert!((counts[0] as f64 - 5000.0).abs() < 150.0, "{counts:?}");
    }

    #[test]
    fn single_class_dataset_has_no_inter_negatives() {
        let w = make_world(2, 4, 4, 1.0, 0).unwrap();
        let mut d = sample_dataset(&w, 5, &RngStream::new(1));
        d.items.retain(|x| x.class == Some(0));
        assert!(inter_sample(&d, 0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn negative_sets() {
        let w = make_world(4, 8, 16, 1.0, 0).unwrap();
        let d = sample_dataset(&w, 8, &RngStream::new(1));
        let x = &d.items[3];
        let intra = build_negative_set(x, 0, &d, NegativeKind::Intra, 10, 4, &RngStream::new(5)).unwrap();
        assert_eq!(intra.len(), 10);
        for y in &intra.samples {
            assert_eq!(sorted(y.tokens.clone()), sorted(x.tokens.clone()));
        }
        let inter = build_negative_set(x, 0, &d, NegativeKind::Inter, 10, 4, &RngStream::new(5)).unwrap();
        assert!(inter.samples.iter().all(|y| y.class != Some(0)));
        assert_eq!(
            inter,
            build_negative_set(x, 0, &d, NegativeKind::Inter, 10, 4, &RngStream::new(5)).unwrap()
        );
    }
}
