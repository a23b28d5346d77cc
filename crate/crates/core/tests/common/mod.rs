#![allow(dead_code)]

use cafc_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst norm-wise relative error between autodiff gradients and central
/// finite differences, over every parameter in `store`.
///
/// Each parameter's denominator is floored at `REL_FLOOR` times the global
/// gradient norm, so tensors whose true gradient is zero (an attention key
/// bias, say) compare rounding noise against the model scale.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let mut analytic = store.clone();
    let (g, loss) = f(&analytic).expect("forward");
    g.backward(loss, &mut analytic).expect("backward");

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let base = store.get(&name).unwrap().clone();
        let ana = analytic
            .grad(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let mut num = vec![0.0; base.len()];
        let mut probe = store.clone();
        for i in 0..base.len() {
            let eval = |delta: f64, probe: &mut ParamStore<f64>| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                probe.set(&name, t).unwrap();
                let (g, l) = f(probe).expect("forward");
                g.value(l).data()[0]
            };
            let up = eval(FD_STEP, &mut probe);
            let down = eval(-FD_STEP, &mut probe);
            num[i] = (up - down) / (2.0 * FD_STEP);
        }
        pairs.push((ana, num));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let global = pairs.iter().map(|(a, _)| norm(a).powi(2)).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for (ana, num) in &pairs {
        let diff: f64 = ana.iter().zip(num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let denom = norm(ana).max(norm(num)).max(REL_FLOOR * global);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut rng(seed))
}

/// Fixed random projection so vector-valued outputs reduce to a scalar loss
/// with non-trivial upstream gradients.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(randn(&shape, 1.0, seed ^ 0xABCD));
    let p = g.mul(y, w)?;
    g.sum(p)
}
pub mod deps;
pub mod gradcases;
