use rand::Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Real;

/// One importance score per grid token, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap<T> {
    pub h: usize,
    pub w: usize,
    pub scores: Vec<T>,
}

impl<T: Real> ImportanceMap<T> {
    pub fn new(h: usize, w: usize, scores: Vec<T>) -> Result<Self> {
        if h * w == 0 || scores.len() != h * w {
            return Err(dim_err!("importance map {h}x{w} with {} scores", scores.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: "importance map".into(),
            });
        }
        Ok(Self { h, w, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Kept positions in ascending spatial order plus the matching binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionResult {
    pub k: usize,
    pub kept_positions: Vec<usize>,
    pub mask_bits: Vec<bool>,
}

impl SelectionResult {
    pub fn from_mask(mask_bits: Vec<bool>) -> Result<Self> {
        let kept_positions: Vec<usize> = (0..mask_bits.len()).filter(|&p| mask_bits[p]).collect();
        if kept_positions.is_empty() {
            return Err(contract_err!("selection keeps no tokens"));
        }
        Ok(Self {
            k: kept_positions.len(),
            kept_positions,
            mask_bits,
        })
    }

    /// `kept` must be strictly increasing and inside `0..total`.
    pub fn from_positions(total: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() || kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract_err!("kept positions must be non-empty and strictly increasing"));
        }
        if kept.last().is_some_and(|&p| p >= total) {
            return Err(contract_err!("kept position out of range for {total} tokens"));
        }
        let mut mask_bits = vec![false; total];
        kept.iter().for_each(|&p| mask_bits[p] = true);
        Ok(Self {
            k: kept.len(),
            kept_positions: kept,
            mask_bits,
        })
    }

    /// Keeps every position.
    pub fn all(total: usize) -> Self {
        Self {
            k: total,
            kept_positions: (0..total).collect(),
            mask_bits: vec![true; total],
        }
    }

    pub fn total(&self) -> usize {
        self.mask_bits.len()
    }

    pub fn dropped_positions(&self) -> Vec<usize> {
        (0..self.total()).filter(|&p| !self.mask_bits[p]).collect()
    }
}

/// Positions of the `k` largest scores, ties to the lower position, returned
/// in ascending order.
pub fn select_top_k<T: Real>(s: &ImportanceMap<T>, k: usize) -> Result<SelectionResult> {
    let n = s.len();
    if k == 0 || k > n {
        return Err(contract_err!("K = {k} outside 1..={n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).expect("finite scores"));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    SelectionResult::from_positions(n, kept)
}

/// Uniform integer in `k_min..=k_max`.
pub fn sample_k<R: Rng>(k_min: usize, k_max: usize, total: usize, rng: &mut R) -> Result<usize> {
    if k_min == 0 || k_min > k_max || k_max > total {
        return Err(contract_err!("K range [{k_min}, {k_max}] invalid for {total} tokens"));
    }
    Ok(rng.gen_range(k_min..=k_max))
}
