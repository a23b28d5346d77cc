//! Training drivers over cached frozen-tokenizer outputs.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use super::dataset::ToySample;
use crate::error::{contract_err, Result};
use crate::modeling::{pretrain_step, PretrainBatch, PretrainLosses, PretrainWeights, SemanticTeacher, TokenModel, TokenSeq};
use crate::selection::head::argmax;
use crate::selection::{
    finetune_step, select_top_k, Classifier, FinetuneBatch, FinetuneConfig, FinetuneModel, SelectionResult,
};
use crate::tensor::{AdamConfig, Graph, ParamStore, Tensor};
use crate::vq::{quantize, Tokenizer, TokenizerLosses};

const ENCODE_CHUNK: usize = 250;

/// Frozen-tokenizer view of a labelled image set.
#[derive(Clone, Debug)]
pub struct TokenizedSet {
    pub h: usize,
    pub w: usize,
    pub code_dim: usize,
    /// Pre-quantization latents per sample, channel-major `[D, h, w]`.
    pub latents: Vec<Vec<f32>>,
    pub indices: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub keys: Vec<u64>,
}

impl TokenizedSet {
    pub fn build(tokenizer: &Tokenizer, store: &ParamStore<f32>, samples: &[ToySample]) -> Result<Self> {
        let (h, w) = tokenizer.cfg.grid();
        let cb = tokenizer.codebook(store)?;
        let mut set = Self {
            h,
            w,
            code_dim: tokenizer.cfg.code_dim,
            latents: Vec::with_capacity(samples.len()),
            indices: Vec::with_capacity(samples.len()),
            labels: samples.iter().map(|s| s.label).collect(),
            keys: samples.iter().map(|s| s.index).collect(),
        };
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
            for z in tokenizer.encode_batch(store, &images)? {
                set.indices.push(quantize(&z, &cb)?.0.indices);
                set.latents.push(z.to_chw().into_data());
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn finetune_batch(&self, rows: &[usize]) -> Result<FinetuneBatch<f32>> {
        let mut data = Vec::with_capacity(rows.len() * self.code_dim * self.tokens());
        rows.iter().for_each(|&r| data.extend_from_slice(&self.latents[r]));
        FinetuneBatch::new(
            Tensor::new(vec![rows.len(), self.code_dim, self.h, self.w], data)?,
            rows.iter().map(|&r| self.indices[r].clone()).collect(),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    pub fn latent_tensor(&self, rows: &[usize]) -> Result<Tensor<f32>> {
        Ok(self.finetune_batch(rows)?.latents)
    }
}

/// Teacher embeddings for every sample of a set, queried once.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub dim: usize,
    pub z_img: Vec<Vec<f32>>,
    pub z_text: Vec<Vec<f32>>,
}

impl TeacherTargets {
    pub fn build(teacher: &dyn SemanticTeacher, samples: &[ToySample]) -> Result<Self> {
        let mut z_img = Vec::with_capacity(samples.len());
        let mut z_text = Vec::with_capacity(samples.len());
        for s in samples {
            z_img.push(teacher.embed_image(s.index, &s.image)?);
            z_text.push(teacher.embed_label(s.label)?);
        }
        Ok(Self {
            dim: teacher.dim(),
            z_img,
            z_text,
        })
    }

    pub fn pretrain_batch(&self, set: &TokenizedSet, rows: &[usize]) -> Result<PretrainBatch<f32>> {
        let stack = |v: &[Vec<f32>]| {
            let data = rows.iter().flat_map(|&r| v[r].iter().copied()).collect();
            Tensor::new(vec![rows.len(), self.dim], data)
        };
        PretrainBatch::new(
            rows.iter().map(|&r| set.indices[r].clone()).collect(),
            stack(&self.z_img)?,
            stack(&self.z_text)?,
        )
    }
}

/// Endless shuffled minibatches of row ids; the last partial batch of each
/// epoch is dropped.
pub struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batches {
    pub fn new(n: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(contract_err!("batch size {batch} for {n} samples"));
        }
        Ok(Self {
            order: (0..n).collect(),
            pos: n,
            batch,
        })
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
}

pub struct TokenizerRun {
    pub losses: Vec<TokenizerLosses>,
    pub mse_before: f64,
    pub mse_after: f64,
}

/// Codebook seeded from data, then Adam on the tokenizer objective. MSE is
/// measured on `eval` before and after.
pub fn train_tokenizer<R: Rng>(
    tokenizer: &Tokenizer,
    store: &mut ParamStore<f32>,
    train: &[ToySample],
    eval: &[ToySample],
    sched: &Schedule,
    rng: &mut R,
) -> Result<TokenizerRun> {
    let eval_images: Vec<&Tensor<f32>> = eval.iter().map(|s| &s.image).collect();
    let mut batches = Batches::new(train.len(), sched.batch)?;
    let seed_rows = batches.next(rng).to_vec();
    let seed_images: Vec<&Tensor<f32>> = seed_rows.iter().map(|&r| &train[r].image).collect();
    tokenizer.init_codebook_from_data(store, &seed_images, rng)?;
    let mse_before = tokenizer.reconstruction_mse(store, &eval_images)?;
    let mut losses = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let images: Vec<&Tensor<f32>> = batches.next(rng).iter().map(|&r| &train[r].image).collect();
        let l = tokenizer.train_step(store, &images, &sched.adam)?;
        if sched.log_every > 0 && step % sched.log_every == 0 {
            info!("tokenizer step {step}: rec {:.5} codes {}", l.reconstruction, l.codes_used);
        }
        losses.push(l);
    }
    let mse_after = tokenizer.reconstruction_mse(store, &eval_images)?;
    info!("tokenizer eval mse {mse_before:.5} -> {mse_after:.5}");
    Ok(TokenizerRun {
        losses,
        mse_before,
        mse_after,
    })
}

pub fn pretrain<R: Rng>(
    model: &TokenModel,
    store: &mut ParamStore<f32>,
    set: &TokenizedSet,
    targets: &TeacherTargets,
    weights: &PretrainWeights,
    sched: &Schedule,
    rng: &mut R,
) -> Result<Vec<PretrainLosses<f32>>> {
    let mut batches = Batches::new(set.len(), sched.batch)?;
    let mut log = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let batch = targets.pretrain_batch(set, batches.next(rng))?;
        let l = pretrain_step(store, model, &batch, weights, &sched.adam, rng)?;
        if sched.log_every > 0 && step % sched.log_every == 0 {
            info!(
                "pretrain step {step}: rec {:.4} dist {:.4} contra {:.4} total {:.4}",
                l.rec, l.dist, l.contra, l.total
            );
        }
        log.push(l);
    }
    Ok(log)
}

/// Returns `(loss, K)` per step.
pub fn finetune<R: Rng>(
    model: &FinetuneModel,
    store: &mut ParamStore<f32>,
    set: &TokenizedSet,
    cfg: &FinetuneConfig,
    sched: &Schedule,
    rng: &mut R,
) -> Result<Vec<(f32, usize)>> {
    let mut batches = Batches::new(set.len(), sched.batch)?;
    let mut log = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let batch = set.finetune_batch(batches.next(rng))?;
        let out = finetune_step(store, model, &batch, cfg, &sched.adam, rng)?;
        if sched.log_every > 0 && step % sched.log_every == 0 {
            info!("finetune step {step}: loss {:.4} K {}", out.loss, out.k);
        }
        log.push((out.loss, out.k));
    }
    Ok(log)
}

/// Selections at `k` for every sample of `set`, computed in batches.
pub fn select_all(model: &FinetuneModel, store: &ParamStore<f32>, set: &TokenizedSet, k: usize) -> Result<Vec<SelectionResult>> {
    let mut out = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let mut g = Graph::with_frozen(&FinetuneModel::SECTIONS);
        let z = g.constant(set.latent_tensor(chunk)?);
        let s = model.selector.score_graph(&mut g, store, z)?;
        g.check_finite()?;
        for c in g.value(s).data().chunks(set.tokens()) {
            out.push(select_top_k(&crate::selection::ImportanceMap::new(set.h, set.w, c.to_vec())?, k)?);
        }
    }
    Ok(out)
}

/// Predicted classes for `set` restricted to `sels`, batched (all selections
/// must share K).
pub fn predict(classifier: &Classifier, store: &ParamStore<f32>, set: &TokenizedSet, sels: &[SelectionResult]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let seqs = chunk
            .iter()
            .map(|&r| classifier.policy.select(&set.indices[r], &sels[r]))
            .collect::<Result<Vec<TokenSeq>>>()?;
        let logits = classifier.logits_batch(store, &seqs)?;
        out.extend(logits.data().chunks(classifier.head.classes).map(argmax));
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Top-1 on `set` at a fixed K, in-process.
pub fn evaluate(model: &FinetuneModel, store: &ParamStore<f32>, set: &TokenizedSet, k: usize) -> Result<f64> {
    let sels = select_all(model, store, set, k)?;
    Ok(accuracy(&predict(&model.classifier, store, set, &sels)?, &set.labels))
}

/// Encoded class tokens `[n, d_model]` over full sequences.
pub fn class_features(model: &TokenModel, store: &ParamStore<f32>, set: &TokenizedSet) -> Result<Vec<Vec<f32>>> {
    let all = SelectionResult::all(set.tokens());
    let mut out = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let seqs = chunk
            .iter()
            .map(|&r| TokenSeq::gather(&set.indices[r], &all.kept_positions))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::with_frozen(&TokenModel::SECTIONS);
        let enc = model.encoder.forward(&mut g, store, &seqs, None)?;
        let cls = model.encoder.class_rows(&mut g, &enc)?;
        g.check_finite()?;
        out.extend(g.value(cls).data().chunks(model.cfg().d_model).map(<[f32]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 1e-2 }
    }
}

/// Linear softmax classifier on standardized frozen features, trained full
/// batch. Returns test top-1.
pub fn linear_probe<R: Rng>(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<f64> {
    let d = train_x.first().map(Vec::len).ok_or_else(|| contract_err!("empty probe set"))?;
    let n = train_x.len() as f32;
    let mean: Vec<f32> = (0..d).map(|j| train_x.iter().map(|x| x[j]).sum::<f32>() / n).collect();
    let std: Vec<f32> = (0..d)
        .map(|j| {
            let v = train_x.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f32>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    let standardize = |xs: &[Vec<f32>]| -> Result<Tensor<f32>> {
        let data = xs
            .iter()
            .flat_map(|x| x.iter().enumerate().map(|(j, &v)| (v - mean[j]) / std[j]))
            .collect();
        Tensor::new(vec![xs.len(), d], data)
    };
    let xtr = standardize(train_x)?;
    let xte = standardize(test_x)?;

    let mut store = ParamStore::<f32>::new();
    store.insert("probe.w", Tensor::uniform(&[d, classes], 1.0 / (d as f64).sqrt(), rng))?;
    store.insert("probe.b", Tensor::zeros(&[classes]))?;
    let adam = AdamConfig::with_lr(cfg.lr);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let w = g.param(&store, "probe.w")?;
        let b = g.param(&store, "probe.b")?;
        let y = g.linear(x, w, Some(b))?;
        let loss = g.softmax_cross_entropy(y, train_y)?;
        g.backward(loss, &mut store)?;
        store.adam_step(&adam, &["probe."])?;
    }
    let mut g = Graph::with_frozen(&["probe."]);
    let x = g.constant(xte);
    let w = g.param(&store, "probe.w")?;
    let b = g.param(&store, "probe.b")?;
    let y = g.linear(x, w, Some(b))?;
    let pred: Vec<usize> = g.value(y).data().chunks(classes).map(argmax).collect();
    Ok(accuracy(&pred, test_y))
}

