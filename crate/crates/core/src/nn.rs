//! Parameter initialisers and the pre-norm transformer block shared by the
//! token encoder and the reconstruction decoder.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn linear_params<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub(crate) fn layernorm_params<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], T::one()))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]))?;
    Ok(())
}

pub(crate) fn conv_params<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::uniform(&shape, bound, rng))?;
    Ok(())
}

pub(crate) fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn layernorm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.layernorm(x, gamma, beta, LN_EPS)
}

/// Hyper-parameters of a stack of pre-norm transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(crate::Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub(crate) fn init<T: Real, R: Rng>(
        &self,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<()> {
        let d = self.d_model;
        let hidden = d * self.mlp_ratio;
        layernorm_params(store, &format!("{name}.ln1"), d)?;
        for p in ["wq", "wk", "wv", "wo"] {
            linear_params(store, &format!("{name}.{p}"), d, d, rng)?;
        }
        layernorm_params(store, &format!("{name}.ln2"), d)?;
        linear_params(store, &format!("{name}.fc1"), d, hidden, rng)?;
        linear_params(store, &format!("{name}.fc2"), hidden, d, rng)?;
        Ok(())
    }

    /// `x: [batch*len, d_model]` → same shape. Pushes the attention
    /// probabilities (`[batch*heads, len, len]`) onto `attn`.
    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        name: &str,
        x: Var,
        batch: usize,
        len: usize,
        attn: &mut Vec<Var>,
    ) -> Result<Var> {
        let d = self.d_model;
        if g.shape(x) != [batch * len, d] {
            return Err(dim_err!(
                "block input {:?} vs batch {batch} len {len} d {d}",
                g.shape(x)
            ));
        }
        let h = self.heads;
        let dh = d / h;
        let xn = layernorm(g, store, &format!("{name}.ln1"), x)?;
        let split = |g: &mut Graph<T>, p: &str| -> Result<Var> {
            let y = linear(g, store, &format!("{name}.{p}"), xn)?;
            let y = g.reshape(y, &[batch, len, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[batch * h, len, dh])
        };
        let q = split(g, "wq")?;
        let k = split(g, "wk")?;
        let v = split(g, "wv")?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let probs = g.softmax(scores)?;
        attn.push(probs);
        let o = g.bmm(probs, v, false, false)?;
        let o = g.reshape(o, &[batch, h, len, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[batch * len, d])?;
        let o = linear(g, store, &format!("{name}.wo"), o)?;
        let x = g.add(x, o)?;

        let xn = layernorm(g, store, &format!("{name}.ln2"), x)?;
        let m = linear(g, store, &format!("{name}.fc1"), xn)?;
        let m = g.gelu(m)?;
        let m = linear(g, store, &format!("{name}.fc2"), m)?;
        g.add(x, m)
    }
}
