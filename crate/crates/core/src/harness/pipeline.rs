//! Stage wiring shared by the CLI and the end-to-end tests.

use std::net::TcpListener;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitstream::compute_bpp;
use crate::error::{Error, Result};
use crate::modeling::{
    FileTeacher, PretrainLosses, SemanticTeacher, TokenModel, ToyTeacher, DECODER, ENCODER, PROJECTION,
};
use crate::selection::{Classifier, FinetuneModel, Selector, TaskHead, SELECTOR, TASK_HEAD};
use crate::tensor::{ParamStore, Tensor};
use crate::vq::{Tokenizer, SECTION as TOKENIZER};

use super::channel::{memory_pair, StreamChannel};
use super::cloud::CloudModel;
use super::config::{ChannelKind, Config, TeacherKind};
use super::dataset::{split, ToySample, SIDE};
use super::edge::{classify_remote, EdgeModel};
use super::train::{self, TeacherTargets, TokenizedSet, TokenizerRun};

/// Independent RNG stream per stage so stages can be rerun in isolation.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage as u64);
    r
}

#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Tokenizer = 1,
    Pretrain = 2,
    Finetune = 3,
    Probe = 4,
}

pub fn load_data(cfg: &Config) -> (Vec<ToySample>, Vec<ToySample>) {
    split(cfg.data_seed, cfg.train_size, cfg.test_size)
}

pub fn make_teacher(cfg: &Config) -> Result<Box<dyn SemanticTeacher>> {
    Ok(match cfg.teacher {
        TeacherKind::Toy => Box::new(ToyTeacher::new(cfg.teacher_seed, cfg.classes())?),
        TeacherKind::File => {
            let (Some(i), Some(l)) = (&cfg.teacher_images, &cfg.teacher_labels) else {
                return Err(Error::Config("file teacher needs teacher_images and teacher_labels".into()));
            };
            Box::new(FileTeacher::load(i, l)?)
        }
    })
}

/// Every model of the pipeline, built from one configuration.
#[derive(Clone, Debug)]
pub struct Models {
    pub tokenizer: Tokenizer,
    pub token_model: TokenModel,
    pub finetune: FinetuneModel,
}

impl Models {
    pub fn new(cfg: &Config, teacher_dim: usize) -> Result<Self> {
        let tokenizer = Tokenizer::new(cfg.tokenizer_config())?;
        let token_model = TokenModel::new(cfg.encoder_config(teacher_dim))?;
        let finetune = FinetuneModel {
            selector: Selector::new(cfg.code_dim),
            classifier: Classifier {
                encoder: token_model.encoder.clone(),
                head: TaskHead::new(cfg.d_model, cfg.classes())?,
                policy: cfg.drop_policy,
            },
        };
        Ok(Self {
            tokenizer,
            token_model,
            finetune,
        })
    }

    pub fn edge(&self) -> EdgeModel {
        EdgeModel {
            tokenizer: self.tokenizer.clone(),
            selector: self.finetune.selector.clone(),
        }
    }

    pub fn cloud(&self) -> CloudModel {
        CloudModel::new(self.finetune.classifier.clone())
    }
}

/// Parameters the sender needs.
pub fn edge_store(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut s = store.subset(TOKENIZER);
    s.merge(store.subset(SELECTOR)).expect("disjoint sections");
    s
}

/// Parameters the receiver needs.
pub fn cloud_store(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut s = store.subset(ENCODER);
    s.merge(store.subset(TASK_HEAD)).expect("disjoint sections");
    s
}

pub fn train_tokenizer_stage(
    cfg: &Config,
    models: &Models,
    train: &[ToySample],
    eval: &[ToySample],
) -> Result<(ParamStore<f32>, TokenizerRun)> {
    let mut rng = stage_rng(cfg.seed, Stage::Tokenizer);
    let mut store = models.tokenizer.init_params(&mut rng)?;
    let run = train::train_tokenizer(&models.tokenizer, &mut store, train, eval, &cfg.tokenizer_schedule(), &mut rng)?;
    Ok((store, run))
}

/// Initialises encoder, decoder and projection in `store` (which must hold
/// the tokenizer) and pretrains them.
pub fn pretrain_stage(
    cfg: &Config,
    models: &Models,
    store: &mut ParamStore<f32>,
    set: &TokenizedSet,
    targets: &TeacherTargets,
) -> Result<Vec<PretrainLosses<f32>>> {
    let mut rng = stage_rng(cfg.seed, Stage::Pretrain);
    if !store.contains(&format!("{ENCODER}cls")) {
        models.token_model.init_params(store, &mut rng)?;
    }
    train::pretrain(
        &models.token_model,
        store,
        set,
        targets,
        &cfg.pretrain_weights(),
        &cfg.pretrain_schedule(),
        &mut rng,
    )
}

/// Adds selector and task head to a pretrained `store` and finetunes.
pub fn finetune_stage(cfg: &Config, models: &Models, store: &mut ParamStore<f32>, set: &TokenizedSet) -> Result<Vec<(f32, usize)>> {
    let mut rng = stage_rng(cfg.seed, Stage::Finetune);
    if !store.contains(&format!("{SELECTOR}pw2.b")) {
        models.finetune.selector.init_params(store, &mut rng)?;
    }
    if !store.contains(&format!("{TASK_HEAD}fc.w")) {
        models.finetune.classifier.head.init_params(store, &mut rng)?;
    }
    train::finetune(&models.finetune, store, set, &cfg.finetune_config(), &cfg.finetune_schedule(), &mut rng)
}

/// Linear-probe top-1 of the encoded class token.
pub fn linear_probe_stage(cfg: &Config, models: &Models, store: &ParamStore<f32>, train_set: &TokenizedSet, test_set: &TokenizedSet) -> Result<f64> {
    let mut rng = stage_rng(cfg.seed, Stage::Probe);
    let tr = train::class_features(&models.token_model, store, train_set)?;
    let te = train::class_features(&models.token_model, store, test_set)?;
    train::linear_probe(&tr, &train_set.labels, &te, &test_set.labels, cfg.classes(), &cfg.probe_config(), &mut rng)
}

/// One row of the rate–accuracy table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub k: usize,
    pub bpp: f64,
    pub top1: f64,
    pub n: usize,
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("K,bpp,top1,n\n");
    for r in records {
        s.push_str(&format!("{},{},{:.6},{}\n", r.k, r.bpp, r.top1, r.n));
    }
    s
}

const EDGE_CHUNK: usize = 100;

/// Edge → channel → cloud over `images` at each K in turn. The cloud runs on
/// its own thread with only the receiver's parameters. Returns the predicted
/// classes per K.
pub fn run_split(
    models: &Models,
    store: &ParamStore<f32>,
    images: &[&Tensor<f32>],
    ks: &[usize],
    channel: ChannelKind,
) -> Result<Vec<Vec<usize>>> {
    let edge = models.edge();
    let cloud = models.cloud();
    let es = edge_store(store);
    let cs = cloud_store(store);
    let drive = |chan: &mut dyn FnMut(&[u8]) -> Result<usize>| -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(ks.len());
        for &k in ks {
            let mut preds = Vec::with_capacity(images.len());
            for chunk in images.chunks(EDGE_CHUNK) {
                for p in edge.packets(&es, chunk, k)? {
                    preds.push(chan(&p)?);
                }
            }
            out.push(preds);
        }
        Ok(out)
    };
    std::thread::scope(|scope| match channel {
        ChannelKind::InProcess => {
            let (mut near, mut far) = memory_pair();
            let server = scope.spawn(move || cloud.serve(&cs, &mut far));
            let res = drive(&mut |p| classify_remote(&mut near, p));
            drop(near);
            server.join().map_err(|_| Error::ChannelClosed)??;
            res
        }
        ChannelKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?.to_string();
            let server = scope.spawn(move || cloud.serve_tcp(&cs, &listener, Some(1)));
            let mut chan = StreamChannel::connect(&addr)?;
            let res = drive(&mut |p| classify_remote(&mut chan, p));
            drop(chan);
            server.join().map_err(|_| Error::ChannelClosed)??;
            res
        }
    })
}

/// Edge → channel → cloud top-1 for each K over the test samples.
pub fn rate_accuracy_sweep(
    cfg: &Config,
    models: &Models,
    store: &ParamStore<f32>,
    test: &[ToySample],
    ks: &[usize],
) -> Result<Vec<EvalRecord>> {
    let images: Vec<&Tensor<f32>> = test.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let preds = run_split(models, store, &images, ks, cfg.channel)?;
    let (h, w) = cfg.tokenizer_config().grid();
    ks.iter()
        .zip(preds)
        .map(|(&k, p)| {
            Ok(EvalRecord {
                k,
                bpp: compute_bpp(k, cfg.codebook_size, h, w, SIDE, SIDE)?.bpp,
                top1: train::accuracy(&p, &labels),
                n: labels.len(),
            })
        })
        .collect()
}

/// Checkpoint sections written by each stage.
pub const SECTIONS: [&str; 6] = [TOKENIZER, ENCODER, DECODER, PROJECTION, SELECTOR, TASK_HEAD];
