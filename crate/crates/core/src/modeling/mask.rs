use rand::seq::index::sample;
use rand::Rng;

use crate::error::{contract_err, Result};

/// Partition of grid positions into masked and visible sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub total: usize,
    pub ratio: f64,
    /// Hidden positions, ascending.
    pub masked: Vec<usize>,
    /// Visible positions, ascending.
    pub unmasked: Vec<usize>,
}

impl MaskSpec {
    /// Builds the partition from an explicit masked set.
    pub fn from_masked(total: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() || masked.len() >= total {
            return Err(contract_err!(
                "{} masked of {total}: both sets must be non-empty",
                masked.len()
            ));
        }
        if masked.iter().any(|&p| p >= total) {
            return Err(contract_err!("masked position out of range for {total} tokens"));
        }
        let mut is_masked = vec![false; total];
        masked.iter().for_each(|&p| is_masked[p] = true);
        let unmasked = (0..total).filter(|&p| !is_masked[p]).collect();
        Ok(Self {
            total,
            ratio: masked.len() as f64 / total as f64,
            masked,
            unmasked,
        })
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked.binary_search(&pos).is_ok()
    }
}

/// Uniformly random masked subset of size `round(ratio * total)`.
pub fn sample_mask<R: Rng>(total: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) || total < 2 {
        return Err(contract_err!("mask ratio {ratio} over {total} tokens"));
    }
    let k = (ratio * total as f64).round() as usize;
    if k == 0 || k == total {
        return Err(contract_err!(
            "mask ratio {ratio} masks {k} of {total}: both sets must be non-empty"
        ));
    }
    let masked = sample(rng, total, k).into_vec();
    let mut spec = MaskSpec::from_masked(total, masked)?;
    spec.ratio = ratio;
    Ok(spec)
}
