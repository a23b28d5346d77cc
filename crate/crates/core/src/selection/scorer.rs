use rand::Rng;

use super::topk::ImportanceMap;
use crate::error::{contract_err, dim_err, Result};
use crate::nn::{conv_params, linear, linear_params};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::vq::LatentGrid;

pub const SELECTOR: &str = "selector.";

/// Per-token importance from pre-quantization latents: depthwise 3×3, then
/// pointwise `D → D` with ReLU, then pointwise `D → 1`.
#[derive(Clone, Debug)]
pub struct Selector {
    pub code_dim: usize,
}

impl Selector {
    /// Initial output bias; keeps training-time gates near 1 at the start.
    pub const INIT_BIAS: f64 = 3.0;

    pub fn new(code_dim: usize) -> Self {
        Self { code_dim }
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let d = self.code_dim;
        conv_params(store, &format!("{SELECTOR}dw"), [d, 1, 3, 3], 9, rng)?;
        store.insert(format!("{SELECTOR}dw.b"), Tensor::zeros(&[d]))?;
        linear_params(store, &format!("{SELECTOR}pw1"), d, d, rng)?;
        linear_params(store, &format!("{SELECTOR}pw2"), d, 1, rng)?;
        store.set(&format!("{SELECTOR}pw2.b"), Tensor::full(&[1], T::lit(Self::INIT_BIAS)))
    }

    /// `z: [B, D, h, w]` → scores `[B * h * w]`, row-major per sample.
    pub fn score_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.code_dim {
            return Err(dim_err!("selector expects [B, {}, h, w], got {s:?}", self.code_dim));
        }
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let dw = g.param(store, &format!("{SELECTOR}dw.w"))?;
        let db = g.param(store, &format!("{SELECTOR}dw.b"))?;
        let x = g.depthwise_conv2d(z, dw, Some(db))?;
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let x = g.reshape(x, &[b * h * w, d])?;
        let x = linear(g, store, &format!("{SELECTOR}pw1"), x)?;
        let x = g.relu(x)?;
        let x = linear(g, store, &format!("{SELECTOR}pw2"), x)?;
        g.reshape(x, &[b * h * w])
    }

    pub fn score_batch<T: Real>(&self, store: &ParamStore<T>, grids: &[&LatentGrid<T>]) -> Result<Vec<ImportanceMap<T>>> {
        let first = grids.first().ok_or_else(|| contract_err!("no latent grids to score"))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(grids.len() * h * w * self.code_dim);
        for z in grids {
            if (z.h, z.w) != (h, w) || z.dim() != self.code_dim {
                return Err(dim_err!("latent grid {}x{}x{} in a batch of {h}x{w}", z.h, z.w, z.dim()));
            }
            data.extend_from_slice(z.to_chw().data());
        }
        let mut g = Graph::with_frozen(&[SELECTOR]);
        let x = g.constant(Tensor::new(vec![grids.len(), self.code_dim, h, w], data)?);
        let s = self.score_graph(&mut g, store, x)?;
        g.check_finite()?;
        g.value(s)
            .data()
            .chunks(h * w)
            .map(|c| ImportanceMap::new(h, w, c.to_vec()))
            .collect()
    }

    pub fn score<T: Real>(&self, store: &ParamStore<T>, z: &LatentGrid<T>) -> Result<ImportanceMap<T>> {
        Ok(self.score_batch(store, &[z])?.remove(0))
    }
}

/// Scales each kept embedding row by `sigmoid(score)`.
pub fn gate_embeddings<T: Real>(g: &mut Graph<T>, emb: Var, scores: Var) -> Result<Var> {
    let rows = g.shape(emb).first().copied().unwrap_or(0);
    if g.value(scores).len() != rows {
        return Err(contract_err!(
            "{} gate scores for {rows} embeddings",
            g.value(scores).len()
        ));
    }
    let gate = g.sigmoid(scores)?;
    g.mul_rows(emb, gate)
}
