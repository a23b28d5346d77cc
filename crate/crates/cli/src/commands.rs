use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::Path;

use cafc_core::bitstream::{compute_bpp, decode_packet, index_bits};
use cafc_core::harness::channel::StreamChannel;
use cafc_core::harness::checkpoint::Checkpoint;
use cafc_core::harness::config::Config;
use cafc_core::harness::dataset::{generate_toy_dataset, SIDE};
use cafc_core::harness::edge::classify_remote;
use cafc_core::harness::pipeline::{
    cloud_store, edge_store, finetune_stage, linear_probe_stage, load_data, make_teacher, pretrain_stage,
    rate_accuracy_sweep, records_csv, train_tokenizer_stage, Models, SECTIONS,
};
use cafc_core::harness::train::{evaluate, TeacherTargets, TokenizedSet};
use cafc_core::modeling::{DECODER, ENCODER, PROJECTION};
use cafc_core::selection::{FinetuneMode, SELECTOR, TASK_HEAD};
use cafc_core::vq::SECTION as TOKENIZER;
use cafc_core::{Error, ParamStore, Result};
use log::info;

use crate::{Cli, Command, Global, Mode};

/// `--config` wins over the configuration stored in the checkpoint, which
/// wins over the defaults. `--seed` overrides either.
fn resolve_config(g: &Global, ck: Option<&Checkpoint>) -> Result<Config> {
    let mut cfg = match (&g.config, ck) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(c)) => Config::from_text(&c.config)?,
        (None, None) => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Loaded {
    cfg: Config,
    models: Models,
    store: ParamStore<f32>,
}

fn load(g: &Global, needs: &[&str]) -> Result<Loaded> {
    let ck = Checkpoint::load(&g.checkpoint)?;
    for s in needs {
        if !ck.has_section(s.trim_end_matches('.')) {
            return Err(Error::Missing(format!(
                "section `{}` in {} (run the earlier stages first)",
                s.trim_end_matches('.'),
                g.checkpoint.display()
            )));
        }
    }
    let cfg = resolve_config(g, Some(&ck))?;
    let teacher = make_teacher(&cfg)?;
    let models = Models::new(&cfg, teacher.dim())?;
    Ok(Loaded {
        cfg,
        models,
        store: ck.to_store(),
    })
}

fn save(g: &Global, cfg: &Config, store: &ParamStore<f32>) -> Result<()> {
    Checkpoint::from_store(store, cfg.to_text(), cfg.seed).save(&g.checkpoint)?;
    info!("wrote {}", g.checkpoint.display());
    Ok(())
}

fn emit(g: &Global, text: &str) -> Result<()> {
    match &g.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData { count } => gen_data(g, count),
        Command::TrainTokenizer => train_tokenizer(g),
        Command::Pretrain => pretrain(g),
        Command::Finetune { mode, k, k_min, k_max } => finetune(g, mode, k, k_min, k_max),
        Command::LinearProbe => linear_probe(g),
        Command::Sweep { k_list } => sweep(g, k_list.map(|k| k.0)),
        Command::Compare { k_list } => compare(g, k_list.map(|k| k.0)),
        Command::ServeCloud { listen, max_connections } => {
            let l = load(g, &[ENCODER, TASK_HEAD])?;
            let listener = TcpListener::bind(listen)?;
            info!("cloud listening on {}", listener.local_addr()?);
            l.models.cloud().serve_tcp(&cloud_store(&l.store), &listener, max_connections)
        }
        Command::RunEdge { connect, k, count, dump } => run_edge(g, &connect, k, count, dump.as_deref()),
        Command::InspectPacket { packet } => inspect(g, &packet),
        Command::Params => params(g),
    }
}

fn gen_data(g: &Global, count: usize) -> Result<()> {
    let cfg = resolve_config(g, None)?;
    let dir = g
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("gen-data needs --out <dir>".into()))?;
    fs::create_dir_all(dir)?;
    let mut labels = String::from("index,label,label_name\n");
    for s in generate_toy_dataset(cfg.data_seed, count) {
        let d = s.image.data();
        let plane = SIDE * SIDE;
        let mut ppm = format!("P6\n{SIDE} {SIDE}\n255\n").into_bytes();
        for p in 0..plane {
            for c in 0..3 {
                ppm.push((d[c * plane + p] * 255.0).round() as u8);
            }
        }
        fs::write(dir.join(format!("{:05}.ppm", s.index)), ppm)?;
        writeln!(labels, "{},{},{}", s.index, s.label, s.label_name).expect("string write");
    }
    fs::write(dir.join("labels.csv"), labels)?;
    info!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn train_tokenizer(g: &Global) -> Result<()> {
    let cfg = resolve_config(g, None)?;
    let (train, test) = load_data(&cfg);
    let models = Models::new(&cfg, make_teacher(&cfg)?.dim())?;
    let (store, run) = train_tokenizer_stage(&cfg, &models, &train, &test)?;
    println!("tokenizer reconstruction mse {:.6} -> {:.6}", run.mse_before, run.mse_after);
    save(g, &cfg, &store)
}

fn pretrain(g: &Global) -> Result<()> {
    let Loaded { cfg, models, mut store } = load(g, &[TOKENIZER])?;
    let (train, _) = load_data(&cfg);
    let set = TokenizedSet::build(&models.tokenizer, &store, &train)?;
    let targets = TeacherTargets::build(make_teacher(&cfg)?.as_ref(), &train)?;
    let log = pretrain_stage(&cfg, &models, &mut store, &set, &targets)?;
    if let (Some(a), Some(b)) = (log.first(), log.last()) {
        println!(
            "pretrain L_rec {:.4} -> {:.4}, L_dist {:.4} -> {:.4}, L_contra {:.4} -> {:.4}",
            a.rec, b.rec, a.dist, b.dist, a.contra, b.contra
        );
    }
    save(g, &cfg, &store)
}

fn finetune(g: &Global, mode: Option<Mode>, k: Option<usize>, k_min: Option<usize>, k_max: Option<usize>) -> Result<()> {
    let Loaded { mut cfg, models, mut store } = load(g, &[TOKENIZER, ENCODER])?;
    let tokens = cfg.tokens();
    let mode = mode.unwrap_or(match (k, &cfg.finetune_mode) {
        (Some(_), _) | (None, FinetuneMode::Fixed(_)) => Mode::Fixed,
        _ => Mode::Variable,
    });
    cfg.finetune_mode = match mode {
        Mode::Fixed => FinetuneMode::Fixed(k.unwrap_or(tokens)),
        Mode::Variable => {
            let (lo, hi) = match cfg.finetune_mode {
                FinetuneMode::Variable { k_min, k_max } => (k_min, k_max),
                FinetuneMode::Fixed(_) => (1, tokens),
            };
            FinetuneMode::Variable {
                k_min: k_min.unwrap_or(lo),
                k_max: k_max.unwrap_or(hi),
            }
        }
    };
    cfg.validate()?;
    let (train, test) = load_data(&cfg);
    let train_set = TokenizedSet::build(&models.tokenizer, &store, &train)?;
    let test_set = TokenizedSet::build(&models.tokenizer, &store, &test)?;
    finetune_stage(&cfg, &models, &mut store, &train_set)?;
    for &k in &cfg.k_list {
        println!("K={k} top1 {:.4}", evaluate(&models.finetune, &store, &test_set, k)?);
    }
    save(g, &cfg, &store)
}

fn linear_probe(g: &Global) -> Result<()> {
    let Loaded { cfg, models, store } = load(g, &[TOKENIZER, ENCODER])?;
    let (train, test) = load_data(&cfg);
    let tr = TokenizedSet::build(&models.tokenizer, &store, &train)?;
    let te = TokenizedSet::build(&models.tokenizer, &store, &test)?;
    let top1 = linear_probe_stage(&cfg, &models, &store, &tr, &te)?;
    println!("linear probe top1 {top1:.4}");
    Ok(())
}

fn sweep(g: &Global, k_list: Option<Vec<usize>>) -> Result<()> {
    let Loaded { mut cfg, models, store } = load(g, &[TOKENIZER, ENCODER, SELECTOR, TASK_HEAD])?;
    if let Some(ks) = k_list {
        cfg.k_list = ks;
        cfg.validate()?;
    }
    let (_, test) = load_data(&cfg);
    let records = rate_accuracy_sweep(&cfg, &models, &store, &test, &cfg.k_list)?;
    emit(g, &records_csv(&records))
}

fn compare(g: &Global, k_list: Option<Vec<usize>>) -> Result<()> {
    let Loaded { mut cfg, models, store } = load(g, &[TOKENIZER, ENCODER])?;
    if let Some(ks) = k_list {
        cfg.k_list = ks;
    }
    let variable = match cfg.finetune_mode {
        v @ FinetuneMode::Variable { .. } => v,
        FinetuneMode::Fixed(_) => FinetuneMode::Variable {
            k_min: *cfg.k_list.iter().min().expect("validated K list"),
            k_max: cfg.tokens(),
        },
    };
    let fixed = FinetuneMode::Fixed(cfg.tokens());
    cfg.validate()?;
    let (train, test) = load_data(&cfg);
    let train_set = TokenizedSet::build(&models.tokenizer, &store, &train)?;
    let test_set = TokenizedSet::build(&models.tokenizer, &store, &test)?;
    let mut base = ParamStore::new();
    for s in [TOKENIZER, ENCODER, DECODER, PROJECTION] {
        base.merge(store.subset(s))?;
    }
    let mut top1 = Vec::new();
    for mode in [fixed, variable] {
        let mut c = cfg.clone();
        c.finetune_mode = mode;
        let mut s = base.clone();
        finetune_stage(&c, &models, &mut s, &train_set)?;
        top1.push(
            cfg.k_list
                .iter()
                .map(|&k| evaluate(&models.finetune, &s, &test_set, k))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut out = String::from("K,fixed,variable\n");
    for (i, k) in cfg.k_list.iter().enumerate() {
        writeln!(out, "{k},{:.6},{:.6}", top1[0][i], top1[1][i]).expect("string write");
    }
    emit(g, &out)?;
    let lowest = (0..cfg.k_list.len()).min_by_key(|&i| cfg.k_list[i]).expect("non-empty");
    let (f, v) = (top1[0][lowest], top1[1][lowest]);
    eprintln!(
        "lowest K = {}: variable {v:.4} vs fixed {f:.4} ({:+.2} points); variable >= fixed - 1 point: {}",
        cfg.k_list[lowest],
        100.0 * (v - f),
        v >= f - 0.01
    );
    Ok(())
}

fn run_edge(g: &Global, addr: &str, k: usize, count: usize, dump: Option<&Path>) -> Result<()> {
    let Loaded { cfg, models, store } = load(g, &[TOKENIZER, SELECTOR])?;
    let (_, test) = load_data(&cfg);
    let samples = &test[..count.min(test.len())];
    let edge = models.edge();
    let es = edge_store(&store);
    if let Some(d) = dump {
        fs::create_dir_all(d)?;
    }
    let mut chan = StreamChannel::connect(addr)?;
    let mut correct = 0;
    for s in samples {
        let packet = edge.run_edge(&es, &s.image, k)?;
        if let Some(d) = dump {
            fs::write(d.join(format!("{:05}.pkt", s.index)), &packet)?;
        }
        let class = classify_remote(&mut chan, &packet)?;
        correct += (class == s.label) as usize;
        info!("sample {} label {} predicted {class}", s.index, s.label);
    }
    let (h, w) = cfg.tokenizer_config().grid();
    let bpp = compute_bpp(k, cfg.codebook_size, h, w, SIDE, SIDE)?.bpp;
    println!("K={k} bpp {bpp} top1 {:.4} over {}", correct as f64 / samples.len() as f64, samples.len());
    Ok(())
}

fn inspect(g: &Global, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let p = decode_packet(&bytes)?;
    let join = |v: Vec<String>| v.join(",");
    let mut out = String::new();
    writeln!(out, "h: {}", p.h).expect("string write");
    writeln!(out, "w: {}", p.w).expect("string write");
    writeln!(out, "N: {}", p.n).expect("string write");
    writeln!(out, "K: {}", p.selection.k).expect("string write");
    writeln!(out, "bits per index: {}", index_bits(p.n)).expect("string write");
    writeln!(out, "bytes: {}", bytes.len()).expect("string write");
    writeln!(out, "positions: {}", join(p.selection.kept_positions.iter().map(usize::to_string).collect())).expect("string write");
    writeln!(out, "indices: {}", join(p.indices.iter().map(u32::to_string).collect())).expect("string write");
    emit(g, &out)
}

fn params(g: &Global) -> Result<()> {
    let Loaded { store, .. } = load(g, &[])?;
    let mut out = String::new();
    for s in SECTIONS {
        writeln!(out, "{:<16}{:>10}", s.trim_end_matches('.'), store.count(s)).expect("string write");
    }
    let edge = store.count(TOKENIZER) + store.count(SELECTOR);
    let cloud = store.count(ENCODER) + store.count(TASK_HEAD);
    let training = store.count(DECODER) + store.count(PROJECTION);
    writeln!(out, "edge role       {edge:>10}").expect("string write");
    writeln!(out, "cloud role      {cloud:>10}").expect("string write");
    writeln!(out, "training only   {training:>10}").expect("string write");
    emit(g, &out)
}
