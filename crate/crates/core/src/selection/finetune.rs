use rand::Rng;

use super::head::{Classifier, TASK_HEAD};
use super::scorer::{Selector, SELECTOR};
use super::topk::{sample_k, select_top_k, ImportanceMap, SelectionResult};
use crate::error::{contract_err, dim_err, Result};
use crate::modeling::{TokenSeq, ENCODER};
use crate::tensor::{AdamConfig, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Fixed(usize),
    Variable { k_min: usize, k_max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Sigmoid gating of kept embeddings by their scores.
    pub gating: bool,
}

impl FinetuneConfig {
    pub fn variable(k_min: usize, k_max: usize) -> Self {
        Self {
            mode: FinetuneMode::Variable { k_min, k_max },
            gating: true,
        }
    }

    pub fn fixed(k: usize) -> Self {
        Self {
            mode: FinetuneMode::Fixed(k),
            gating: true,
        }
    }

    pub fn draw_k<R: Rng>(&self, total: usize, rng: &mut R) -> Result<usize> {
        match self.mode {
            FinetuneMode::Fixed(k) => sample_k(k, k, total, rng),
            FinetuneMode::Variable { k_min, k_max } => sample_k(k_min, k_max, total, rng),
        }
    }
}

/// Frozen-tokenizer outputs for a labelled batch.
#[derive(Clone, Debug)]
pub struct FinetuneBatch<T> {
    /// Pre-quantization latents `[B, D, h, w]`.
    pub latents: Tensor<T>,
    /// Flattened index map per sample.
    pub indices: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl<T: Real> FinetuneBatch<T> {
    pub fn new(latents: Tensor<T>, indices: Vec<Vec<u32>>, labels: Vec<usize>) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 4 || s[0] != indices.len() || labels.len() != indices.len() {
            return Err(dim_err!(
                "latents {s:?} with {} index maps and {} labels",
                indices.len(),
                labels.len()
            ));
        }
        if indices.iter().any(|m| m.len() != s[2] * s[3]) {
            return Err(dim_err!("index map size does not match the {}x{} latent grid", s[2], s[3]));
        }
        Ok(Self {
            latents,
            indices,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }
}

/// Selector plus classifier: everything trained during finetuning.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub selector: Selector,
    pub classifier: Classifier,
}

impl FinetuneModel {
    pub const SECTIONS: [&'static str; 3] = [ENCODER, SELECTOR, TASK_HEAD];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneOutcome<T> {
    pub loss: T,
    pub k: usize,
}

/// Score → Top-K → (gated) embed → encode → head → cross-entropy, for a
/// given `k`. Returns the loss and logits nodes.
pub fn finetune_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &FinetuneModel,
    batch: &FinetuneBatch<T>,
    k: usize,
    gating: bool,
) -> Result<(Var, Var)> {
    let b = batch.len();
    if b == 0 {
        return Err(contract_err!("empty finetuning batch"));
    }
    let total = batch.tokens();
    let s = batch.latents.shape();
    let (h, w) = (s[2], s[3]);
    let z = g.constant(batch.latents.clone());
    let scores = model.selector.score_graph(g, store, z)?;

    let sels = g
        .value(scores)
        .data()
        .chunks(total)
        .map(|c| select_top_k(&ImportanceMap::new(h, w, c.to_vec())?, k))
        .collect::<Result<Vec<_>>>()?;
    let policy = model.classifier.policy;
    let seqs = batch
        .indices
        .iter()
        .zip(&sels)
        .map(|(m, sel)| policy.select(m, sel))
        .collect::<Result<Vec<_>>>()?;

    let gate = if gating {
        Some(kept_gate(g, scores, &sels, &seqs, total)?)
    } else {
        None
    };
    let logits = model.classifier.forward(g, store, &seqs, gate)?;
    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
    Ok((loss, logits))
}

/// `sigmoid(score)` for every kept token in sequence order, 1 for filled slots.
fn kept_gate<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    sels: &[SelectionResult],
    seqs: &[TokenSeq],
    total: usize,
) -> Result<Var> {
    let rows: Vec<usize> = sels
        .iter()
        .enumerate()
        .flat_map(|(bi, s)| s.kept_positions.iter().map(move |&p| bi * total + p))
        .collect();
    let n = g.value(scores).len();
    let col = g.reshape(scores, &[n, 1])?;
    let kept = g.gather_rows(col, &rows)?;
    let kept = g.sigmoid(kept)?;
    let filled: usize = seqs.iter().map(|s| s.filled.len()).sum();
    if filled == 0 {
        return g.reshape(kept, &[rows.len()]);
    }
    let ones = g.constant(Tensor::full(&[filled, 1], T::one()));
    let all = g.concat_rows(kept, ones)?;
    let mut order = Vec::with_capacity(rows.len() + filled);
    let (mut ko, mut fo) = (0, rows.len());
    for s in seqs {
        order.extend(ko..ko + s.indices.len());
        order.extend(fo..fo + s.filled.len());
        ko += s.indices.len();
        fo += s.filled.len();
    }
    let gate = g.gather_rows(all, &order)?;
    g.reshape(gate, &[order.len()])
}

/// One Adam step over encoder, selector and task head. The K used is drawn
/// per call according to `cfg.mode`.
pub fn finetune_step<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    model: &FinetuneModel,
    batch: &FinetuneBatch<T>,
    cfg: &FinetuneConfig,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome<T>> {
    let k = cfg.draw_k(batch.tokens(), rng)?;
    let mut g = Graph::new();
    let (loss, _) = finetune_loss(&mut g, store, model, batch, k, cfg.gating)?;
    g.check_finite()?;
    g.backward(loss, store)?;
    store.adam_step(adam, &FinetuneModel::SECTIONS)?;
    Ok(FinetuneOutcome {
        loss: g.value(loss).data()[0],
        k,
    })
}

