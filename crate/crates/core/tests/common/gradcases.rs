//! Finite-difference cases shared by the gradient tests and the acceptance
//! suite. Each case builds a float64 store from a seed and a scalar loss.

use cafc_core::modeling::{pretrain_loss, sample_mask, PretrainBatch, PretrainWeights, TokenEncoderConfig, TokenModel};
use cafc_core::selection::{finetune_loss, Classifier, DropPolicy, FinetuneBatch, FinetuneModel, Selector, TaskHead};
use cafc_core::modeling::{loss_contra, loss_dist, TokenEncoder};
use cafc_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;

use super::{grad_check, project, randn, rng};

pub const SEEDS: u64 = 20;

pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    pub store: fn(u64) -> ParamStore<f64>,
    pub loss: fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var>,
}

impl Case {
    /// Worst relative error over `seeds`.
    pub fn worst(&self, seeds: u64) -> f64 {
        (0..seeds)
            .map(|seed| {
                let s = (self.store)(seed);
                grad_check(&s, |st| {
                    let mut g = Graph::new();
                    let loss = (self.loss)(&mut g, st, seed)?;
                    Ok((g, loss))
                })
            })
            .fold(0.0, f64::max)
    }
}

fn shapes(params: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, (name, shape)) in params.iter().enumerate() {
        s.insert(*name, randn(shape, 1.0, seed * 31 + i as u64)).unwrap();
    }
    s
}

const TOKENS: usize = 9;
const VOCAB: usize = 7;

fn tiny_cfg() -> TokenEncoderConfig {
    TokenEncoderConfig {
        d_model: 4,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        max_tokens: TOKENS,
        vocab: VOCAB,
        decoder_depth: 1,
        teacher_dim: 3,
    }
}

fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut t = randn(&[b, d], 1.0, seed);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn index_maps(b: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..b).map(|_| (0..TOKENS).map(|_| r.gen_range(0..VOCAB as u32)).collect()).collect()
}

/// Randomised weights: layer-norm gains and biases are perturbed too so no
/// gradient is trivially structured.
fn jitter(mut s: ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for (i, n) in names.iter().enumerate() {
        let t = s.get(n).unwrap().clone();
        let noise = randn(t.shape(), 0.3, seed * 1000 + i as u64);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        s.set(n, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    }
    s
}

fn token_model_store(seed: u64) -> ParamStore<f64> {
    let m = TokenModel::new(tiny_cfg()).unwrap();
    let mut s = ParamStore::new();
    m.init_params(&mut s, &mut rng(seed)).unwrap();
    jitter(s, seed)
}

fn finetune_model() -> FinetuneModel {
    FinetuneModel {
        selector: Selector::new(2),
        classifier: Classifier {
            encoder: TokenEncoder::new(tiny_cfg()).unwrap(),
            head: TaskHead::new(4, 3).unwrap(),
            policy: DropPolicy::Omit,
        },
    }
}

fn finetune_store(seed: u64) -> ParamStore<f64> {
    let m = finetune_model();
    let mut s = ParamStore::new();
    let mut r = rng(seed);
    m.classifier.encoder.init_params(&mut s, &mut r).unwrap();
    m.classifier.head.init_params(&mut s, &mut r).unwrap();
    m.selector.init_params(&mut s, &mut r).unwrap();
    jitter(s, seed)
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul_sum",
            tol: 1e-6,
            store: |seed| shapes(&[("a", &[3, 4]), ("b", &[4, 2])], seed),
            loss: |g, s, _| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.matmul(a, b)?;
                g.sum(c)
            },
        },
        Case {
            name: "matmul_transposed_operands",
            tol: 1e-6,
            store: |seed| shapes(&[("a", &[4, 3]), ("b", &[2, 4])], seed),
            loss: |g, s, seed| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.matmul_t(a, b, true, true)?;
                project(g, c, seed)
            },
        },
        Case {
            name: "batched_matmul",
            tol: 1e-6,
            store: |seed| shapes(&[("q", &[3, 5, 4]), ("k", &[3, 5, 4])], seed),
            loss: |g, s, seed| {
                let q = g.param(s, "q")?;
                let k = g.param(s, "k")?;
                let att = g.bmm(q, k, false, true)?;
                let p = g.softmax(att)?;
                let o = g.bmm(p, k, false, false)?;
                let o2 = g.bmm(q, o, true, false)?;
                project(g, o2, seed)
            },
        },
        Case {
            name: "elementwise_ops",
            tol: 1e-6,
            store: |seed| shapes(&[("a", &[3, 4]), ("b", &[3, 4]), ("c", &[4])], seed),
            loss: |g, s, seed| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.param(s, "c")?;
                let x = g.mul(a, b)?;
                let x = g.sub(x, b)?;
                let x = g.add_bias(x, c)?;
                let x = g.scale(x, 0.7)?;
                let y = g.sigmoid(x)?;
                let z = g.gelu(a)?;
                let w = g.add(y, z)?;
                project(g, w, seed)
            },
        },
        Case {
            name: "relu_and_row_gating",
            tol: 1e-6,
            store: |seed| shapes(&[("x", &[5, 3]), ("s", &[5])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let sc = g.param(s, "s")?;
                let sig = g.sigmoid(sc)?;
                let y = g.mul_rows(x, sig)?;
                let r = g.relu(y)?;
                project(g, r, seed)
            },
        },
        Case {
            name: "softmax_rows",
            tol: 1e-6,
            store: |seed| shapes(&[("x", &[4, 6])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let y = g.softmax(x)?;
                project(g, y, seed)
            },
        },
        Case {
            name: "layernorm_affine",
            tol: 1e-5,
            store: |seed| shapes(&[("x", &[4, 8]), ("gamma", &[8]), ("beta", &[8])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let ga = g.param(s, "gamma")?;
                let be = g.param(s, "beta")?;
                let y = g.layernorm(x, ga, be, 1e-5)?;
                project(g, y, seed)
            },
        },
        Case {
            name: "shape_ops",
            tol: 1e-6,
            store: |seed| shapes(&[("a", &[2, 3, 4]), ("t", &[5, 4]), ("u", &[2, 4])], seed),
            loss: |g, s, seed| {
                let a = g.param(s, "a")?;
                let p = g.permute(a, &[2, 0, 1])?;
                let r = g.reshape(p, &[4, 6])?;
                let tr = g.transpose(r)?;
                let t = g.param(s, "t")?;
                let u = g.param(s, "u")?;
                let cat = g.concat_rows(u, t)?;
                let gat = g.gather_rows(cat, &[0, 3, 3, 6, 1, 2])?;
                let m = g.matmul_t(tr, gat, true, false)?;
                project(g, m, seed)
            },
        },
        Case {
            name: "conv2d_stride1",
            tol: 1e-5,
            store: |seed| shapes(&[("x", &[1, 2, 5, 5]), ("w", &[3, 2, 3, 3]), ("b", &[3])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let y = g.conv2d(x, w, Some(b), 1, 0)?;
                project(g, y, seed)
            },
        },
        Case {
            name: "conv2d_strided_padded",
            tol: 1e-5,
            store: |seed| shapes(&[("x", &[2, 2, 6, 6]), ("w", &[3, 2, 4, 4])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let w = g.param(s, "w")?;
                let y = g.conv2d(x, w, None, 2, 1)?;
                project(g, y, seed)
            },
        },
        Case {
            name: "conv_transpose2d",
            tol: 1e-5,
            store: |seed| shapes(&[("x", &[2, 3, 3, 3]), ("w", &[3, 2, 4, 4]), ("b", &[2])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
                assert_eq!(g.shape(y), &[2, 2, 6, 6]);
                project(g, y, seed)
            },
        },
        Case {
            name: "depthwise_conv",
            tol: 1e-5,
            store: |seed| shapes(&[("x", &[2, 3, 4, 5]), ("w", &[3, 1, 3, 3]), ("b", &[3])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let y = g.depthwise_conv2d(x, w, Some(b))?;
                project(g, y, seed)
            },
        },
        Case {
            name: "cross_entropy",
            tol: 1e-5,
            store: |seed| shapes(&[("logits", &[4, 7])], seed),
            loss: |g, s, seed| {
                let l = g.param(s, "logits")?;
                let t: Vec<usize> = (0..4).map(|i| ((seed as usize) + i * 3) % 7).collect();
                g.softmax_cross_entropy(l, &t)
            },
        },
        Case {
            name: "mse_mean_and_normalize",
            tol: 1e-5,
            store: |seed| shapes(&[("a", &[3, 5]), ("b", &[3, 5])], seed),
            loss: |g, s, seed| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let na = g.l2_normalize_rows(a, 1e-8)?;
                let m = g.mse(na, b)?;
                let pm = project(g, na, seed)?;
                let mm = g.mean(b)?;
                let t = g.add(m, pm)?;
                g.add(t, mm)
            },
        },
        Case {
            name: "composite_mlp",
            tol: 1e-4,
            store: |seed| shapes(&[("w1", &[6, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3]), ("x", &[5, 6])], seed),
            loss: |g, s, seed| {
                let x = g.param(s, "x")?;
                let w1 = g.param(s, "w1")?;
                let b1 = g.param(s, "b1")?;
                let w2 = g.param(s, "w2")?;
                let b2 = g.param(s, "b2")?;
                let h = g.linear(x, w1, Some(b1))?;
                let h = g.gelu(h)?;
                let o = g.linear(h, w2, Some(b2))?;
                let t: Vec<usize> = (0..5).map(|i| (i + seed as usize) % 3).collect();
                g.softmax_cross_entropy(o, &t)
            },
        },
        Case {
            name: "pretrain_objective",
            tol: 1e-4,
            store: token_model_store,
            loss: |g, s, seed| {
                let model = TokenModel::new(tiny_cfg())?;
                let b = 3;
                let batch = PretrainBatch::new(index_maps(b, seed), unit_rows(b, 3, seed + 1), unit_rows(b, 3, seed + 2))?;
                let mut r = rng(seed + 3);
                let specs = (0..b).map(|_| sample_mask(TOKENS, 0.5, &mut r)).collect::<Result<Vec<_>>>()?;
                let w = PretrainWeights {
                    tau: 0.5,
                    ..PretrainWeights::default()
                };
                Ok(pretrain_loss(g, s, &model, &batch, &specs, &w)?.0)
            },
        },
        Case {
            name: "projection_distill_contrast",
            tol: 1e-4,
            store: token_model_store,
            loss: |g, s, seed| {
                let model = TokenModel::new(tiny_cfg())?;
                let cls = g.constant(randn(&[4, 4], 1.0, seed + 7));
                let z = model.projection.forward(g, s, cls)?;
                let zi = g.constant(unit_rows(4, 3, seed + 8));
                let zt = g.constant(unit_rows(4, 3, seed + 9));
                let d = loss_dist(g, zi, z)?;
                let c = loss_contra(g, zt, z, 0.3)?;
                g.add(d, c)
            },
        },
        Case {
            name: "finetune_gated_objective",
            tol: 1e-4,
            store: finetune_store,
            loss: |g, s, seed| {
                let model = finetune_model();
                let b = 3;
                let batch = FinetuneBatch::new(
                    randn(&[b, 2, 3, 3], 1.0, seed + 5),
                    index_maps(b, seed + 6),
                    (0..b).map(|i| (i + seed as usize) % 3).collect(),
                )?;
                Ok(finetune_loss(g, s, &model, &batch, 5, true)?.0)
            },
        },
    ]
}
