//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria 7 to 9 share one set of training runs on the default
//! configuration.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cafc_core::bitstream::{compute_bpp, decode_packet, encode_packet};
use cafc_core::harness::config::{ChannelKind, Config};
use cafc_core::harness::pipeline::{
    cloud_store, edge_store, finetune_stage, linear_probe_stage, load_data, make_teacher, pretrain_stage,
    rate_accuracy_sweep, records_csv, run_split, train_tokenizer_stage, EvalRecord, Models,
};
use cafc_core::harness::train::{evaluate, TeacherTargets, TokenizedSet};
use cafc_core::modeling::{loss_contra, loss_rec, pretrain_loss, sample_mask, MaskSpec, PretrainBatch, PretrainWeights, TokenModel, TokenSeq};
use cafc_core::selection::{select_top_k, FinetuneMode, ImportanceMap, SelectionResult};
use cafc_core::vq::{quantize, Codebook, LatentGrid};
use cafc_core::{Error, Graph, ParamStore, Result, Tensor};
use common::deps::{closure, SENDER_SIDE};
use common::gradcases::{cases, SEEDS};
use common::rng;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn run(n: usize, title: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t = Instant::now();
    let o = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag}  {title}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    o.pass
}

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    for c in cases() {
        let e = c.worst(SEEDS);
        if e > worst.0 || !e.is_finite() {
            worst = (e, c.name);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst.0 < 1e-4 && secs < 120.0,
        format!("{} cases x {SEEDS} seeds, worst rel err {:.2e} ({}), {secs:.1}s", cases().len(), worst.0, worst.1),
    ))
}

fn vq_oracle() -> Result<Outcome> {
    let t = Instant::now();
    let mut r = rng(2024);
    let (n, d, count) = (64, 8, 10_000);
    // Integer-valued coordinates and duplicated codewords make exact ties common.
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-3..=3) as f64).collect()).collect();
    for i in 0..8 {
        rows[n - 1 - i] = rows[i].clone();
    }
    let cb = Codebook::new(Tensor::new(vec![n, d], rows.concat())?)?;
    let z: Vec<f64> = (0..count * d)
        .map(|i| if i % 3 == 0 { r.gen_range(-3..=3) as f64 } else { r.gen_range(-3.5..3.5) })
        .collect();
    let grid = LatentGrid::new(Tensor::new(vec![100, 100, d], z)?)?;
    let (map, _) = quantize(&grid, &cb)?;
    let mut mismatches = 0;
    let mut ties = 0;
    for p in 0..count {
        let v = grid.vector(p);
        let dist: Vec<f64> = rows.iter().map(|c| v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = dist.iter().position(|&x| x == min).unwrap();
        ties += (dist.iter().filter(|&&x| x == min).count() > 1) as usize;
        mismatches += (map.indices[p] as usize != want) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        mismatches == 0 && secs < 30.0,
        format!("{count} vectors, {ties} with tied minima, {mismatches} mismatches, {secs:.2}s"),
    ))
}

fn codec() -> Result<Outcome> {
    let mut r = rng(7);
    let mut roundtrips = 0;
    let mut flips = 0;
    let mut flip_fail = 0;
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..17), r.gen_range(1..17));
        let n = r.gen_range(2..3000);
        let total = h * w;
        let idx: Vec<u32> = (0..total).map(|_| r.gen_range(0..n as u32)).collect();
        let mask: Vec<bool> = (0..total).map(|_| r.gen_bool(0.4)).collect();
        let kept: Vec<usize> = (0..total).filter(|&p| mask[p]).collect();
        let sel = SelectionResult {
            k: kept.len(),
            kept_positions: kept.clone(),
            mask_bits: mask,
        };
        let bytes = encode_packet(h, w, &idx, &sel, n)?;
        let p = decode_packet(&bytes)?;
        let want: Vec<u32> = kept.iter().map(|&q| idx[q]).collect();
        if (p.h, p.w, p.n) == (h, w, n) && p.selection == sel && p.indices == want {
            roundtrips += 1;
        }
        let bit = r.gen_range(0..total);
        let mut bad = bytes.clone();
        bad[17 + bit / 8] ^= 0x80 >> (bit % 8);
        flips += 1;
        flip_fail += !matches!(decode_packet(&bad), Err(Error::Corruption(_))) as usize;
    }

    let sel = SelectionResult::from_positions(4, vec![0, 2])?;
    let golden = encode_packet(2, 2, &[3, 0, 1, 0], &sel, 4)?;
    let want = [b'C', b'A', b'F', b'C', 1, 2, 0, 2, 0, 4, 0, 0, 0, 2, 0, 0, 0, 0xA0, 0xD0];
    let golden_ok = golden == want;
    let mut bad_magic = golden.clone();
    bad_magic[1] = b'X';
    let mut flipped = golden.clone();
    flipped[17] ^= 0x40;
    let errors_ok = matches!(decode_packet(&golden[..golden.len() - 1]), Err(Error::Length { .. }))
        && matches!(decode_packet(&bad_magic), Err(Error::Format(_)))
        && matches!(decode_packet(&flipped), Err(Error::Corruption(_)));
    Ok(Outcome::new(
        roundtrips == 1000 && flip_fail == 0 && golden_ok && errors_ok,
        format!(
            "{roundtrips}/1000 roundtrips, {}/{flips} bit flips rejected, golden {}, truncation/magic/flip classes {}",
            flips - flip_fail,
            if golden_ok { "exact" } else { "MISMATCH" },
            if errors_ok { "ok" } else { "WRONG" }
        ),
    ))
}

fn rate() -> Result<Outcome> {
    let r = compute_bpp(256, 1024, 16, 16, 256, 256)?;
    Ok(Outcome::new(
        r.bpp == 0.04296875 && r.bpp < 0.1,
        format!("{} bits / 65536 px = {} bpp", r.total_bits, r.bpp),
    ))
}

fn loss_fixed_points() -> Result<Outcome> {
    let n = 64;
    let mut r = rng(5);
    let maps: Vec<Vec<u32>> = (0..3).map(|_| (0..16).map(|_| r.gen_range(0..n as u32)).collect()).collect();
    let specs: Vec<MaskSpec> = (0..3).map(|_| sample_mask(16, 0.75, &mut r)).collect::<Result<_>>()?;
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros(&[48, n]));
    let l = loss_rec(&mut g, u, &maps, &specs)?;
    let rec = g.value(l).data()[0];
    let rec_err = (rec - (n as f64).ln()).abs();

    let b = 8;
    let mut row = common::randn(&[1, 12], 1.0, 9).into_data();
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    row.iter_mut().for_each(|x| *x /= norm);
    let same = g.constant(Tensor::new(vec![b, 12], row.repeat(b))?);
    let l = loss_contra(&mut g, same, same, 0.07)?;
    let nce = g.value(l).data()[0];
    let nce_err = (nce - (b as f64).ln()).abs();

    let cfg = cafc_core::modeling::TokenEncoderConfig {
        d_model: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        max_tokens: 16,
        vocab: n,
        decoder_depth: 1,
        teacher_dim: 12,
    };
    let model = TokenModel::new(cfg)?;
    let mut store = ParamStore::<f64>::new();
    model.init_params(&mut store, &mut rng(6))?;
    let unit = |seed| {
        let mut t = common::randn(&[3, 12], 1.0, seed);
        for row in t.data_mut().chunks_mut(12) {
            let s = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= s);
        }
        t
    };
    let batch = PretrainBatch::new(maps, unit(10), unit(11))?;
    let w = PretrainWeights {
        lambda_dist: 0.7,
        lambda_contra: 1.3,
        ..PretrainWeights::default()
    };
    let mut g = Graph::new();
    let (_, l) = pretrain_loss(&mut g, &store, &model, &batch, &specs, &w)?;
    let identity = l.total == l.rec + l.dist * 0.7 + l.contra * 1.3;
    Ok(Outcome::new(
        rec_err < 1e-5 && nce_err < 1e-5 && identity,
        format!(
            "|L_rec - ln {n}| = {rec_err:.1e}, |InfoNCE - ln {b}| = {nce_err:.1e}, total recomposition {}",
            if identity { "exact" } else { "INEXACT" }
        ),
    ))
}

fn top_k() -> Result<Outcome> {
    let mut r = rng(3);
    let mut wrong = 0;
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..10), r.gen_range(1..10));
        let total = h * w;
        // Coarse values so equal scores appear regularly.
        let scores: Vec<f64> = (0..total).map(|_| r.gen_range(0..6) as f64 * 0.5).collect();
        let k = r.gen_range(1..=total);
        let sel = select_top_k(&ImportanceMap::new(h, w, scores.clone())?, k)?;
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut want = order[..k].to_vec();
        want.sort_unstable();
        let mask: Vec<bool> = (0..total).map(|p| want.contains(&p)).collect();
        wrong += (sel.kept_positions != want || sel.mask_bits != mask || sel.k != k) as usize;
    }

    let cfg = Config::default();
    let models = Models::new(&cfg, 8)?;
    let mut r = rng(4);
    let mut store = models.tokenizer.init_params::<f32, _>(&mut r)?;
    models.token_model.init_params(&mut store, &mut r)?;
    models.finetune.selector.init_params(&mut store, &mut r)?;
    models.finetune.classifier.head.init_params(&mut store, &mut r)?;
    let (_, test) = cafc_core::harness::dataset::split(1, 0, 20);
    let c = &models.finetune.classifier;
    let tokens = cfg.tokens();
    let all: Vec<usize> = (0..tokens).collect();
    let mut max_diff = 0f32;
    let mut class_mismatch = 0;
    for s in &test {
        let packet = models.edge().run_edge(&edge_store(&store), &s.image, tokens)?;
        let p = decode_packet(&packet)?;
        let selected = c.logits(&cloud_store(&store), &c.policy.sequence(&p.indices, &p.selection)?)?;
        let (_, map) = models.tokenizer.tokenize(&store, &s.image)?;
        let direct = c.logits(&store, &TokenSeq::gather(&map.indices, &all)?)?;
        max_diff = selected.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(max_diff, f32::max);
        let cloud = models.cloud().run_cloud(&cloud_store(&store), &packet)?;
        class_mismatch += (cloud != cafc_core::selection::head::argmax(&direct)) as usize;
    }
    Ok(Outcome::new(
        wrong == 0 && max_diff <= 1e-6 && class_mismatch == 0,
        format!("{wrong}/1000 oracle mismatches; K = {tokens} logits max |diff| {max_diff:.1e} over 20 images"),
    ))
}

const SEEDS_E2E: [u64; 3] = [0, 1, 2];

struct SeedRun {
    lp_semantic: f64,
    lp_ablation: f64,
    variable_low: f64,
    fixed_low: f64,
}

struct Experiments {
    mse: (f64, f64),
    rec: (f64, f64),
    sweep: Vec<EvalRecord>,
    e2e_time: Duration,
    seeds: Vec<SeedRun>,
    cfg: Config,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn stage(msg: &str, t: Instant) {
    eprintln!("  [{:>7.1}s] {msg}", t.elapsed().as_secs_f64());
}

/// Default-config training: the tokenizer once, then per seed a semantic and
/// an ablated pretrain, and variable-K and fixed-K finetunes.
fn experiments() -> Result<Experiments> {
    let t = Instant::now();
    let cfg = Config::default();
    let low = *cfg.k_list.iter().min().expect("non-empty K list");
    let (train, test) = load_data(&cfg);
    let teacher = make_teacher(&cfg)?;
    let models = Models::new(&cfg, teacher.dim())?;
    let (tok_store, tok_run) = train_tokenizer_stage(&cfg, &models, &train, &test)?;
    stage(&format!("tokenizer mse {:.5} -> {:.5}", tok_run.mse_before, tok_run.mse_after), t);
    let train_set = TokenizedSet::build(&models.tokenizer, &tok_store, &train)?;
    let test_set = TokenizedSet::build(&models.tokenizer, &tok_store, &test)?;
    let targets = TeacherTargets::build(teacher.as_ref(), &train)?;

    let mut rec = (0.0, 0.0);
    let mut sweep = Vec::new();
    let mut e2e_time = Duration::ZERO;
    let mut seeds = Vec::new();
    for seed in SEEDS_E2E {
        let with_seed = |f: &dyn Fn(&mut Config)| {
            let mut c = cfg.clone();
            c.seed = seed;
            f(&mut c);
            c
        };
        let semantic = with_seed(&|_| {});
        let ablated = with_seed(&|c| {
            c.lambda_dist = 0.0;
            c.lambda_contra = 0.0;
        });
        let fixed = with_seed(&|c| c.finetune_mode = FinetuneMode::Fixed(c.tokens()));

        let mut store = tok_store.clone();
        let log = pretrain_stage(&semantic, &models, &mut store, &train_set, &targets)?;
        let lp_semantic = linear_probe_stage(&semantic, &models, &store, &train_set, &test_set)?;
        stage(&format!("seed {seed}: pretrain done, LP {lp_semantic:.4}"), t);
        if seed == 0 {
            let window = 50.min(log.len());
            let mean = |s: &[cafc_core::modeling::PretrainLosses<f32>]| {
                s.iter().map(|l| l.rec as f64).sum::<f64>() / s.len() as f64
            };
            rec = (mean(&log[..window]), mean(&log[log.len() - window..]));
        }

        let mut variable_store = store.clone();
        finetune_stage(&semantic, &models, &mut variable_store, &train_set)?;
        if seed == 0 {
            sweep = rate_accuracy_sweep(&semantic, &models, &variable_store, &test, &cfg.k_list)?;
            e2e_time = t.elapsed();
            eprint!("{}", records_csv(&sweep));
        }
        let variable_low = evaluate(&models.finetune, &variable_store, &test_set, low)?;
        stage(&format!("seed {seed}: variable-K finetune, top1@{low} {variable_low:.4}"), t);

        let mut fixed_store = store;
        finetune_stage(&fixed, &models, &mut fixed_store, &train_set)?;
        let fixed_low = evaluate(&models.finetune, &fixed_store, &test_set, low)?;
        stage(&format!("seed {seed}: fixed-K finetune, top1@{low} {fixed_low:.4}"), t);

        let mut ablated_store = tok_store.clone();
        pretrain_stage(&ablated, &models, &mut ablated_store, &train_set, &targets)?;
        let lp_ablation = linear_probe_stage(&ablated, &models, &ablated_store, &train_set, &test_set)?;
        stage(&format!("seed {seed}: ablated pretrain, LP {lp_ablation:.4}"), t);

        seeds.push(SeedRun {
            lp_semantic,
            lp_ablation,
            variable_low,
            fixed_low,
        });
    }
    Ok(Experiments {
        mse: (tok_run.mse_before, tok_run.mse_after),
        rec,
        sweep,
        e2e_time,
        seeds,
        cfg,
    })
}

fn learning(e: &Experiments) -> Result<Outcome> {
    let mse_ok = e.mse.1 <= 0.5 * e.mse.0;
    let rec_drop = 1.0 - e.rec.1 / e.rec.0;
    let top = e
        .sweep
        .iter()
        .find(|r| r.k == e.cfg.tokens())
        .map(|r| r.top1)
        .unwrap_or(0.0);
    let mins = e.e2e_time.as_secs_f64() / 60.0;
    Ok(Outcome::new(
        mse_ok && rec_drop >= 0.30 && top >= 0.85 && mins < 45.0,
        format!(
            "tokenizer mse {:.5} -> {:.5}; L_rec {:.3} -> {:.3} (-{:.0}%); top1@{} {top:.4}; {mins:.1} min",
            e.mse.0,
            e.mse.1,
            e.rec.0,
            e.rec.1,
            100.0 * rec_drop,
            e.cfg.tokens()
        ),
    ))
}

fn probe_gap(e: &Experiments) -> Result<Outcome> {
    let gaps: Vec<f64> = e.seeds.iter().map(|s| s.lp_semantic - s.lp_ablation).collect();
    let gap = median(gaps);
    let per: Vec<String> = e
        .seeds
        .iter()
        .map(|s| format!("{:.4}/{:.4}", s.lp_semantic, s.lp_ablation))
        .collect();
    Ok(Outcome::new(
        gap >= 0.02,
        format!("LP semantic/ablated per seed [{}], median gap {:+.2} points", per.join(", "), 100.0 * gap),
    ))
}

fn variable_vs_fixed(e: &Experiments) -> Result<Outcome> {
    let within = e.seeds.iter().all(|s| s.variable_low >= s.fixed_low - 0.01);
    let var_med = median(e.seeds.iter().map(|s| s.variable_low).collect());
    let fix_med = median(e.seeds.iter().map(|s| s.fixed_low).collect());
    let bpp_up = e.sweep.windows(2).all(|w| (w[0].k > w[1].k) == (w[0].bpp > w[1].bpp));
    let worst_drop = e
        .sweep
        .windows(2)
        .map(|w| w[0].top1 - w[1].top1)
        .fold(f64::NEG_INFINITY, f64::max);
    let curve: Vec<String> = e.sweep.iter().map(|r| format!("{}:{:.3}", r.k, r.top1)).collect();
    Ok(Outcome::new(
        within && var_med > fix_med && bpp_up && worst_drop <= 0.15,
        format!(
            "median top1@16 variable {var_med:.4} vs fixed {fix_med:.4}; sweep [{}], largest adjacent drop {:.1} points, bpp {}",
            curve.join(" "),
            100.0 * worst_drop,
            if bpp_up { "increasing in K" } else { "NOT MONOTONE" }
        ),
    ))
}

fn split_equivalence() -> Result<Outcome> {
    let cfg = Config::default();
    let models = Models::new(&cfg, 8)?;
    let mut r = rng(8);
    let mut store = models.tokenizer.init_params::<f32, _>(&mut r)?;
    models.token_model.init_params(&mut store, &mut r)?;
    models.finetune.selector.init_params(&mut store, &mut r)?;
    models.finetune.classifier.head.init_params(&mut store, &mut r)?;
    let (_, test) = cafc_core::harness::dataset::split(3, 0, 100);
    let images: Vec<&Tensor<f32>> = test.iter().map(|s| &s.image).collect();
    let ks = [64, 32, 16];
    let mem = run_split(&models, &store, &images, &ks, ChannelKind::InProcess)?;
    let tcp = run_split(&models, &store, &images, &ks, ChannelKind::Tcp)?;
    let same = mem == tcp;
    let reach = closure("harness/cloud.rs");
    let leaks: Vec<&str> = SENDER_SIDE.iter().copied().filter(|f| reach.contains(std::path::Path::new(f))).collect();
    let deps_ok = leaks.is_empty() && reach.contains(std::path::Path::new("harness/cloud.rs"));
    Ok(Outcome::new(
        same && deps_ok,
        format!(
            "tcp vs in-process on 100 images x {} K values: {}; cloud reaches {} files, sender-side leaks {:?}",
            ks.len(),
            if same { "identical" } else { "DIFFERENT" },
            reach.len(),
            leaks
        ),
    ))
}

fn main() -> ExitCode {
    let t = Instant::now();
    let mut ok = true;
    ok &= run(1, "gradient correctness", gradients);
    ok &= run(2, "VQ oracle equivalence", vq_oracle);
    ok &= run(3, "codec bit-exactness", codec);
    ok &= run(4, "rate arithmetic", rate);
    ok &= run(5, "loss fixed points", loss_fixed_points);
    ok &= run(6, "Top-K oracle and full-K identity", top_k);

    eprintln!("training on the default configuration ({} seeds)...", SEEDS_E2E.len());
    match experiments() {
        Ok(e) => {
            ok &= run(7, "toy end-to-end learning", || learning(&e));
            ok &= run(8, "semantic guidance improves linear probe", || probe_gap(&e));
            ok &= run(9, "variable-K vs fixed-K at low rate", || variable_vs_fixed(&e));
        }
        Err(err) => {
            for (n, title) in [(7, "toy end-to-end learning"), (8, "semantic guidance"), (9, "variable-K vs fixed-K")] {
                ok &= run(n, title, || Err(Error::Contract(format!("training failed: {err}"))));
            }
        }
    }
    ok &= run(10, "split-deployment equivalence", split_equivalence);
    println!("acceptance: {} in {:.1} min", if ok { "all criteria pass" } else { "FAILURES" }, t.elapsed().as_secs_f64() / 60.0);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
