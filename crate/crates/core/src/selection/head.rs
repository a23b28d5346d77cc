//! Cloud-side classification from received indices.

use rand::Rng;

use super::topk::SelectionResult;
use crate::error::{contract_err, Error, Result};
use crate::modeling::{TokenEncoder, TokenSeq, ENCODER};
use crate::nn::{linear, linear_params};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const TASK_HEAD: &str = "task_head.";

/// Linear map from the encoded class token to class logits.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub d_model: usize,
    pub classes: usize,
}

impl TaskHead {
    pub fn new(d_model: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("task head needs at least 2 classes, got {classes}")));
        }
        Ok(Self { d_model, classes })
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        linear_params(store, &format!("{TASK_HEAD}fc"), self.d_model, self.classes, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
        linear(g, store, &format!("{TASK_HEAD}fc"), cls)
    }
}

/// What the receiver does with positions that were not transmitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DropPolicy {
    /// Shortened sequence of `K + 1` tokens.
    #[default]
    Omit,
    /// Dropped positions carry the class-token embedding plus their position.
    FillClassToken,
}

impl DropPolicy {
    /// Sequence for the kept indices (in ascending position order).
    pub fn sequence(self, kept_indices: &[u32], sel: &SelectionResult) -> Result<TokenSeq> {
        if kept_indices.len() != sel.k {
            return Err(contract_err!("{} indices for K = {}", kept_indices.len(), sel.k));
        }
        let seq = TokenSeq::new(kept_indices.to_vec(), sel.kept_positions.clone())?;
        Ok(match self {
            DropPolicy::Omit => seq,
            DropPolicy::FillClassToken => seq.with_filled(sel.dropped_positions()),
        })
    }

    /// Sequence for a full index map restricted to `sel`.
    pub fn select(self, indices: &[u32], sel: &SelectionResult) -> Result<TokenSeq> {
        if indices.len() != sel.total() {
            return Err(contract_err!("{} indices vs selection over {}", indices.len(), sel.total()));
        }
        let kept: Vec<u32> = sel.kept_positions.iter().map(|&p| indices[p]).collect();
        self.sequence(&kept, sel)
    }
}

/// Token encoder plus task head; the whole receiver-side model.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: TokenEncoder,
    pub head: TaskHead,
    pub policy: DropPolicy,
}

impl Classifier {
    pub const SECTIONS: [&'static str; 2] = [ENCODER, TASK_HEAD];

    /// Logits `[B, classes]` on `g`; `gate` scales token embeddings.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: &[TokenSeq],
        gate: Option<Var>,
    ) -> Result<Var> {
        let enc = self.encoder.forward(g, store, seqs, gate)?;
        let cls = self.encoder.class_rows(g, &enc)?;
        self.head.forward(g, store, cls)
    }

    /// Inference logits for equal-length sequences.
    pub fn logits_batch<T: Real>(&self, store: &ParamStore<T>, seqs: &[TokenSeq]) -> Result<Tensor<T>> {
        let mut g = Graph::with_frozen(&Self::SECTIONS);
        let y = self.forward(&mut g, store, seqs, None)?;
        g.check_finite()?;
        Ok(g.value(y).clone())
    }

    pub fn logits<T: Real>(&self, store: &ParamStore<T>, seq: &TokenSeq) -> Result<Vec<T>> {
        Ok(self.logits_batch(store, std::slice::from_ref(seq))?.into_data())
    }

    /// Argmax class for an index map restricted to `sel`.
    pub fn classify<T: Real>(&self, store: &ParamStore<T>, indices: &[u32], sel: &SelectionResult) -> Result<usize> {
        let seq = self.policy.select(indices, sel)?;
        Ok(argmax(&self.logits(store, &seq)?))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
