//! Token vocabulary and the mean-pooled embedding encoder.
//!
//! Texts are tokenized by splitting on Unicode whitespace and lowercasing.
//! Inputs and memory slots share one embedding table.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{CompGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const UNK: &str = "<unk>";

/// Name of the embedding table in a [`ParamStore`](crate::autodiff::ParamStore).
pub const EMBEDDING_PARAM: &str = "embedding";

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token to id map. Id 0 is always [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens and keeps those seen at least `min_freq` times, ordered
    /// by descending frequency and then lexicographically.
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_freq == 0 {
            return Err(Error::config("min_freq must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for stream in corpus {
            for tok in stream {
                seen_any = true;
                if tok != UNK {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(
            std::iter::once(UNK.to_string())
                .chain(kept.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::data(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// SHA-256 over the id-ordered tokens, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Randomly initialized `[vocab, dim]` embedding table.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embedding: DenseTensor,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let data = (0..vocab_size * dim).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            embedding: DenseTensor::new(vec![vocab_size, dim], data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }
}

/// Mean of the embedding rows of `tokens`, as a `[1, d]` node.
pub fn encode_text(graph: &mut CompGraph, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
    encode_batch(graph, table, &[tokens.to_vec()])
}

/// One mean-pooled `[1, d]` row per token list, stacked into `[n, d]`.
pub fn encode_batch(graph: &mut CompGraph, table: NodeId, texts: &[Vec<usize>]) -> Result<NodeId> {
    if let Some(i) = texts.iter().position(Vec::is_empty) {
        return Err(Error::data(format!("text #{i} has no tokens")));
    }
    Ok(graph.embedding_bag(table, texts.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{forward_eval, Bindings, ForwardOptions, ParamStore};
    use proptest::prelude::*;

    fn streams(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| tokenize(t)).collect()
    }

    fn build(texts: &[&str], min_freq: usize) -> Vocabulary {
        let s = streams(texts);
        Vocabulary::build(s.iter().map(Vec::as_slice), min_freq).unwrap()
    }

    #[test]
    fn full_inclusion() {
        let v = build(&["a a b"], 1);
        assert_eq!(v.tokens(), &[UNK, "a", "b"]);
    }

    #[test]
    fn frequency_cutoff_maps_rare_tokens_to_unk() {
        let v = build(&["a a b"], 2);
        assert_eq!(v.tokens(), &[UNK, "a"]);
        assert_eq!(v.id("b"), 0);
    }

    #[test]
    fn tokenizer_lowercases_and_splits_on_whitespace() {
        assert_eq!(tokenize("  The\tCAT\nsat "), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(
            Vocabulary::build(empty.iter().map(Vec::as_slice), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn same_frequencies_give_same_ids() {
        // Same token multiset, different document order and grouping.
        let a = build(&["x y z z", "w y"], 1);
        let b = build(&["y w", "z y", "z x"], 1);
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    fn table(rows: &[Vec<f64>]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(EMBEDDING_PARAM, DenseTensor::from_rows(rows).unwrap());
        p
    }

    fn run(rows: &[Vec<f64>], tokens: &[usize]) -> Vec<f64> {
        let mut g = CompGraph::new();
        let t = g.param(EMBEDDING_PARAM);
        let out = encode_text(&mut g, t, tokens).unwrap();
        let params = table(rows);
        let eval = forward_eval(&g, &Bindings::new(), &params, ForwardOptions::inference()).unwrap();
        eval.value(out).data().to_vec()
    }

    #[test]
    fn mean_pooling_examples() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 3.0], vec![3.0, 1.0]];
        assert_eq!(run(&rows, &[1]), vec![1.0, 3.0]);
        assert_eq!(run(&rows, &[1, 1]), vec![1.0, 3.0]);
        assert_eq!(run(&rows, &[1, 2]), vec![2.0, 2.0]);
    }

    #[test]
    fn empty_text_is_rejected() {
        let mut g = CompGraph::new();
        let t = g.param(EMBEDDING_PARAM);
        assert!(matches!(encode_text(&mut g, t, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn row_gradient_is_upstream_over_count() {
        // loss = sum(encode([1, 1, 2])) so each occurrence contributes 1/3.
        let rows = vec![vec![0.0; 2], vec![0.5, -1.0], vec![2.0, 0.0]];
        let mut g = CompGraph::new();
        let t = g.param(EMBEDDING_PARAM);
        let e = encode_text(&mut g, t, &[1, 1, 2]).unwrap();
        let loss = g.reduce_sum(e);
        let params = table(&rows);
        let eval = forward_eval(&g, &Bindings::new(), &params, ForwardOptions::inference()).unwrap();
        let grads = eval.backward(loss).unwrap();
        let ge = grads.param(EMBEDDING_PARAM).unwrap();
        assert_eq!(ge.row_slice(0), &[0.0, 0.0]);
        for (x, y) in ge.row_slice(1).iter().zip([2.0 / 3.0; 2]) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in ge.row_slice(2).iter().zip([1.0 / 3.0; 2]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn encoding_is_permutation_invariant(
            tokens in proptest::collection::vec(0usize..5, 1..8),
            rot in 0usize..8,
        ) {
            let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3 - 0.7, (i * i) as f64 * 0.1]).collect();
            let mut shuffled = tokens.clone();
            shuffled.rotate_left(rot % tokens.len());
            shuffled.reverse();
            let a = run(&rows, &tokens);
            let b = run(&rows, &shuffled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
