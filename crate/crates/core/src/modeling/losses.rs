use rand::Rng;

use super::encoder::{
    fill_masked_graph, Projection, ReconDecoder, TokenEncoder, TokenEncoderConfig, TokenSeq,
    DECODER, ENCODER, PROJECTION,
};
use super::mask::{sample_mask, MaskSpec};
use super::teacher::SemanticTeacher;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::vq::{quantize, Tokenizer};

/// Masked-modeling objective weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainWeights {
    pub lambda_dist: f64,
    pub lambda_contra: f64,
    pub tau: f64,
    pub mask_ratio: f64,
}

impl Default for PretrainWeights {
    fn default() -> Self {
        Self {
            lambda_dist: 1.0,
            lambda_contra: 1.0,
            tau: 0.07,
            mask_ratio: 0.75,
        }
    }
}

/// Loss components of one step, in the training precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLosses<T> {
    pub rec: T,
    pub dist: T,
    pub contra: T,
    pub total: T,
    pub lambda_dist: f64,
    pub lambda_contra: f64,
}

impl<T: Real> PretrainLosses<T> {
    /// `rec + λd·dist + λc·contra`, evaluated in the same order as the graph.
    pub fn recomposed(&self) -> T {
        self.rec + self.dist * T::lit(self.lambda_dist) + self.contra * T::lit(self.lambda_contra)
    }

    pub fn is_finite(&self) -> bool {
        [self.rec, self.dist, self.contra, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tokenized images with their teacher targets.
#[derive(Clone, Debug)]
pub struct PretrainBatch<T> {
    /// Flattened index map per sample, all of the same length.
    pub indices: Vec<Vec<u32>>,
    /// `[B, d_t]` teacher image embeddings.
    pub z_img: Tensor<T>,
    /// `[B, d_t]` teacher label embeddings.
    pub z_text: Tensor<T>,
}

impl<T: Real> PretrainBatch<T> {
    pub fn new(indices: Vec<Vec<u32>>, z_img: Tensor<T>, z_text: Tensor<T>) -> Result<Self> {
        let b = indices.len();
        if b == 0 {
            return Err(contract_err!("empty pretraining batch"));
        }
        if indices.iter().any(|m| m.len() != indices[0].len()) {
            return Err(dim_err!("index maps of different sizes in one batch"));
        }
        if z_img.shape().len() != 2 || z_img.shape()[0] != b || z_img.shape() != z_text.shape() {
            return Err(dim_err!(
                "teacher targets {:?} / {:?} for a batch of {b}",
                z_img.shape(),
                z_text.shape()
            ));
        }
        Ok(Self {
            indices,
            z_img,
            z_text,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.indices[0].len()
    }
}

impl PretrainBatch<f32> {
    /// Tokenizes raw images with the frozen tokenizer and queries the teacher
    /// with the raw image and the class label of each sample.
    pub fn assemble(
        tokenizer: &Tokenizer,
        tok_store: &ParamStore<f32>,
        teacher: &dyn SemanticTeacher,
        samples: &[(&Tensor<f32>, u64, usize)],
    ) -> Result<Self> {
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| s.0).collect();
        let cb = tokenizer.codebook(tok_store)?;
        let indices = tokenizer
            .encode_batch(tok_store, &images)?
            .iter()
            .map(|z| Ok(quantize(z, &cb)?.0.indices))
            .collect::<Result<Vec<_>>>()?;
        let d = teacher.dim();
        let mut img = Vec::with_capacity(samples.len() * d);
        let mut txt = Vec::with_capacity(samples.len() * d);
        for &(image, key, label) in samples {
            img.extend(teacher.embed_image(key, image)?);
            txt.extend(teacher.embed_label(label)?);
        }
        let b = samples.len();
        Self::new(
            indices,
            Tensor::new(vec![b, d], img)?,
            Tensor::new(vec![b, d], txt)?,
        )
    }
}

/// Encoder, reconstruction decoder and projection head trained together.
#[derive(Clone, Debug)]
pub struct TokenModel {
    pub encoder: TokenEncoder,
    pub decoder: ReconDecoder,
    pub projection: Projection,
}

impl TokenModel {
    pub const SECTIONS: [&'static str; 3] = [ENCODER, DECODER, PROJECTION];

    pub fn new(cfg: TokenEncoderConfig) -> Result<Self> {
        Ok(Self {
            encoder: TokenEncoder::new(cfg.clone())?,
            decoder: ReconDecoder::new(cfg.clone())?,
            projection: Projection::new(&cfg),
        })
    }

    pub fn cfg(&self) -> &TokenEncoderConfig {
        &self.encoder.cfg
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.encoder.init_params(store, rng)?;
        self.decoder.init_params(store, rng)?;
        self.projection.init_params(store, rng)
    }
}

/// Mean cross-entropy of `logits: [B * total, N]` against the true indices,
/// restricted to masked positions.
pub fn loss_rec<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    indices: &[Vec<u32>],
    specs: &[MaskSpec],
) -> Result<Var> {
    if indices.len() != specs.len() {
        return Err(contract_err!("{} index maps vs {} masks", indices.len(), specs.len()));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for (map, spec) in indices.iter().zip(specs) {
        if spec.masked.is_empty() {
            return Err(contract_err!("reconstruction loss over an empty masked set"));
        }
        if map.len() != spec.total {
            return Err(dim_err!("index map of {} vs mask over {}", map.len(), spec.total));
        }
        for &p in &spec.masked {
            rows.push(offset + p);
            targets.push(map[p] as usize);
        }
        offset += spec.total;
    }
    if g.shape(logits).first() != Some(&offset) {
        return Err(dim_err!("logits {:?} vs {offset} positions", g.shape(logits)));
    }
    let picked = g.gather_rows(logits, &rows)?;
    g.softmax_cross_entropy(picked, &targets)
}

/// Mean squared error between teacher and projected class embeddings.
pub fn loss_dist<T: Real>(g: &mut Graph<T>, z_img: Var, z_c: Var) -> Result<Var> {
    g.mse(z_img, z_c)
}

/// Symmetric InfoNCE between label and class embeddings, matching rows positive.
pub fn loss_contra<T: Real>(g: &mut Graph<T>, z_text: Var, z_c: Var, tau: f64) -> Result<Var> {
    let s = g.shape(z_text).to_vec();
    if s.len() != 2 || g.shape(z_c) != s.as_slice() {
        return Err(dim_err!("contrastive inputs {s:?} vs {:?}", g.shape(z_c)));
    }
    if s[0] < 2 {
        return Err(contract_err!("contrastive loss needs a batch of at least 2, got {}", s[0]));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let diag: Vec<usize> = (0..s[0]).collect();
    let sim = g.matmul_t(z_text, z_c, false, true)?;
    let sim = g.scale(sim, T::lit(1.0 / tau))?;
    let a = g.softmax_cross_entropy(sim, &diag)?;
    let sim_t = g.transpose(sim)?;
    let b = g.softmax_cross_entropy(sim_t, &diag)?;
    let both = g.add(a, b)?;
    g.scale(both, T::lit(0.5))
}

/// Builds the full objective on `g`. Returns the total loss node and the
/// component values.
pub fn pretrain_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &TokenModel,
    batch: &PretrainBatch<T>,
    specs: &[MaskSpec],
    w: &PretrainWeights,
) -> Result<(Var, PretrainLosses<T>)> {
    if specs.len() != batch.len() {
        return Err(contract_err!("{} masks for a batch of {}", specs.len(), batch.len()));
    }
    let seqs = batch
        .indices
        .iter()
        .zip(specs)
        .map(|(m, s)| TokenSeq::gather(m, &s.unmasked))
        .collect::<Result<Vec<_>>>()?;
    let enc = model.encoder.forward(g, store, &seqs, None)?;
    let filled = fill_masked_graph(g, &enc, specs)?;
    let total = batch.tokens();
    let logits = model.decoder.forward(g, store, filled, batch.len(), total)?;
    let rec = loss_rec(g, logits, &batch.indices, specs)?;

    let cls = model.encoder.class_rows(g, &enc)?;
    let z_c = model.projection.forward(g, store, cls)?;
    let z_img = g.constant(batch.z_img.clone());
    let z_text = g.constant(batch.z_text.clone());
    let dist = loss_dist(g, z_img, z_c)?;
    let contra = loss_contra(g, z_text, z_c, w.tau)?;

    let wd = g.scale(dist, T::lit(w.lambda_dist))?;
    let wc = g.scale(contra, T::lit(w.lambda_contra))?;
    let partial = g.add(rec, wd)?;
    let loss = g.add(partial, wc)?;
    let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0];
    let losses = PretrainLosses {
        rec: scalar(g, rec),
        dist: scalar(g, dist),
        contra: scalar(g, contra),
        total: scalar(g, loss),
        lambda_dist: w.lambda_dist,
        lambda_contra: w.lambda_contra,
    };
    Ok((loss, losses))
}

/// Samples one mask per sample, evaluates the objective and applies one Adam
/// step to the encoder, decoder and projection. A non-finite forward aborts
/// before any parameter changes.
pub fn pretrain_step<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    model: &TokenModel,
    batch: &PretrainBatch<T>,
    w: &PretrainWeights,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<PretrainLosses<T>> {
    let specs = (0..batch.len())
        .map(|_| sample_mask(batch.tokens(), w.mask_ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let (loss, losses) = pretrain_loss(&mut g, store, model, batch, &specs, w)?;
    g.check_finite()?;
    g.backward(loss, store)?;
    store.adam_step(adam, &TokenModel::SECTIONS)?;
    Ok(losses)
}
