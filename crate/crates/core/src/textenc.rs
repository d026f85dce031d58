//! Toy text encoder: fixed vocabulary, embedding-table lookup, and a
//! mean-pooled class token.

use std::collections::HashMap;

use dreamview_tensor::{ops, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamStore};

pub const MAX_TOKENS: usize = 48;
pub const TEXT_DIM: usize = 64;

pub const NULL_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Token list in id order. Ids are portable across implementations.
pub const VOCABULARY: [&str; 29] = [
    "null", "pad", "unk", "a", "cube", "with", "on", "the", "and", "front", "back", "left", "right", "side", "this",
    "body", "red", "green", "blue", "yellow", "white", "black", "orange", "purple", "gray", "circle", "square",
    "triangle", "cross",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(VOCABULARY.iter().map(|s| s.to_string()).collect()).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered list; ids 0..=2 must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[NULL_ID] != "null" || tokens[PAD_ID] != "pad" || tokens[UNK_ID] != "unk" {
            return Err(Error::Format("vocabulary must start with null, pad, unk".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Exactly [`MAX_TOKENS`] ids, padded with [`PAD_ID`] as a suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// The sequence behind the unconditional branch: the null token everywhere.
    pub fn null() -> Self {
        Self(vec![NULL_ID; MAX_TOKENS])
    }

    pub fn content_len(&self) -> usize {
        self.0.iter().position(|&id| id == PAD_ID).unwrap_or(MAX_TOKENS)
    }
}

/// Lowercase, split on whitespace, map unknown words to `unk`, pad/truncate.
pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids: Vec<usize> = prompt
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID))
        .collect();
    ids.resize(MAX_TOKENS, PAD_ID);
    TokenSequence(ids)
}

/// Token embeddings `E: [MAX_TOKENS, TEXT_DIM]` and class token `CLS: [TEXT_DIM]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor,
    pub cls: Vec<f32>,
}

/// Overall and view-specific embeddings for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    pub overall: TextEmbedding,
    pub view: TextEmbedding,
}

impl TextCondition {
    pub fn to_vars(&self) -> ConditionVars {
        ConditionVars {
            overall: Var::constant(self.overall.tokens.clone()),
            view: Var::constant(self.view.tokens.clone()),
            cls_overall: self.overall.cls.clone(),
            cls_view: self.view.cls.clone(),
        }
    }
}

/// [`TextCondition`] on the autodiff tape.
#[derive(Clone, Debug)]
pub struct ConditionVars {
    pub overall: Var,
    pub view: Var,
    pub cls_overall: Vec<f32>,
    pub cls_view: Vec<f32>,
}

/// Embedding table (learned, row 0 is the null embedding) and class-token
/// projection (frozen, regenerated from the probe seed).
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    table: ParamId,
    cls_projection: Tensor,
}

pub(crate) fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    assert!(rows <= cols);
    let raw = normal(rng, &[rows, cols], 1.0).into_vec();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut v: Vec<f64> = raw[r * cols..(r + 1) * cols].iter().map(|&x| x as f64).collect();
        // two Gram-Schmidt passes keep rows orthonormal to ~1e-15
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Tensor::new(&[rows, cols], basis.into_iter().flatten().map(|x| x as f32).collect())
}

impl TextEncoder {
    pub const TABLE_NAME: &'static str = "text.token_embedding";

    pub fn new(store: &mut ParamStore, init: &mut ChaCha8Rng, probe_rng: &mut ChaCha8Rng) -> Self {
        let vocab = Vocabulary::default();
        let table = store.add(Self::TABLE_NAME, normal(init, &[vocab.len(), TEXT_DIM], 1.0));
        Self::with_table(vocab, table, probe_rng)
    }

    pub(crate) fn with_table(vocab: Vocabulary, table: ParamId, probe_rng: &mut ChaCha8Rng) -> Self {
        Self { vocab, table, cls_projection: orthonormal_rows(probe_rng, TEXT_DIM, TEXT_DIM) }
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }

    pub fn cls_projection(&self) -> &Tensor {
        &self.cls_projection
    }

    fn table<'a>(&self, store: &'a ParamStore) -> Result<&'a Tensor> {
        if !store.contains(self.table) || store.id(Self::TABLE_NAME) != Some(self.table) {
            return Err(Error::Config("text encoder parameters are not initialized".into()));
        }
        let t = store.get(self.table);
        if t.shape() != [self.vocab.len(), TEXT_DIM] {
            return Err(Error::Config(format!("embedding table has shape {:?}", t.shape())));
        }
        Ok(t)
    }

    /// Mean of non-pad rows (zeros if every token is pad), then the frozen projection.
    fn class_token(&self, e: &[f32], tokens: &TokenSequence) -> Vec<f32> {
        let mut mean = vec![0.0f64; TEXT_DIM];
        let mut count = 0usize;
        for (row, &id) in tokens.ids().iter().enumerate() {
            if id != PAD_ID {
                count += 1;
                mean.iter_mut().zip(&e[row * TEXT_DIM..(row + 1) * TEXT_DIM]).for_each(|(m, &v)| *m += v as f64);
            }
        }
        if count > 0 {
            mean.iter_mut().for_each(|m| *m /= count as f64);
        }
        let p = self.cls_projection.data();
        (0..TEXT_DIM)
            .map(|r| (0..TEXT_DIM).map(|c| p[r * TEXT_DIM + c] as f64 * mean[c]).sum::<f64>() as f32)
            .collect()
    }

    pub fn encode(&self, tokens: &TokenSequence, store: &ParamStore) -> Result<TextEmbedding> {
        let table = self.table(store)?;
        let mut e = Vec::with_capacity(MAX_TOKENS * TEXT_DIM);
        for &id in tokens.ids() {
            e.extend_from_slice(&table.data()[id * TEXT_DIM..(id + 1) * TEXT_DIM]);
        }
        let cls = self.class_token(&e, tokens);
        Ok(TextEmbedding { tokens: Tensor::new(&[MAX_TOKENS, TEXT_DIM], e), cls })
    }

    pub fn encode_pair(&self, overall: &str, view: &str, store: &ParamStore) -> Result<TextCondition> {
        Ok(TextCondition {
            overall: self.encode(&tokenize(overall, &self.vocab), store)?,
            view: self.encode(&tokenize(view, &self.vocab), store)?,
        })
    }

    pub fn null_condition(&self, store: &ParamStore) -> Result<TextEmbedding> {
        self.encode(&TokenSequence::null(), store)
    }

    /// Null embedding for both slots.
    pub fn null_pair(&self, store: &ParamStore) -> Result<TextCondition> {
        let null = self.null_condition(store)?;
        Ok(TextCondition { overall: null.clone(), view: null })
    }

    /// Differentiable lookup against bound parameters.
    pub fn encode_var(&self, tokens: &TokenSequence, bound: &Bound) -> (Var, Vec<f32>) {
        let e = ops::embedding(bound.get(self.table), tokens.ids());
        let cls = self.class_token(e.data(), tokens);
        (e, cls)
    }

    pub fn condition_vars(&self, overall: &TokenSequence, view: &TokenSequence, bound: &Bound) -> ConditionVars {
        let (o, cls_o) = self.encode_var(overall, bound);
        let (v, cls_v) = self.encode_var(view, bound);
        ConditionVars { overall: o, view: v, cls_overall: cls_o, cls_view: cls_v }
    }
}
