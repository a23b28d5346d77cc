//! Sender role: tokenizer and selector, producing packets.

use crate::bitstream::encode_packet;
use crate::error::Result;
use crate::selection::{select_top_k, Selector};
use crate::tensor::{ParamStore, Tensor};
use crate::vq::{quantize, Tokenizer, TokenizerConfig};

use super::channel::Channel;
use super::cloud::decode_response;

#[derive(Clone, Debug)]
pub struct EdgeModel {
    pub tokenizer: Tokenizer,
    pub selector: Selector,
}

impl EdgeModel {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        let selector = Selector::new(cfg.code_dim);
        Ok(Self {
            tokenizer: Tokenizer::new(cfg)?,
            selector,
        })
    }

    /// encode → score → Top-K → quantize → pack, for a batch of images.
    pub fn packets(&self, store: &ParamStore<f32>, images: &[&Tensor<f32>], k: usize) -> Result<Vec<Vec<u8>>> {
        let cb = self.tokenizer.codebook(store)?;
        let grids = self.tokenizer.encode_batch(store, images)?;
        let refs: Vec<_> = grids.iter().collect();
        let scores = self.selector.score_batch(store, &refs)?;
        grids
            .iter()
            .zip(&scores)
            .map(|(z, s)| {
                let sel = select_top_k(s, k)?;
                let (map, _) = quantize(z, &cb)?;
                encode_packet(map.h, map.w, &map.indices, &sel, cb.size())
            })
            .collect()
    }

    pub fn run_edge(&self, store: &ParamStore<f32>, image: &Tensor<f32>, k: usize) -> Result<Vec<u8>> {
        Ok(self.packets(store, &[image], k)?.remove(0))
    }
}

/// Sends one packet and waits for the cloud's class decision.
pub fn classify_remote(chan: &mut impl Channel, packet: &[u8]) -> Result<usize> {
    chan.send(packet)?;
    decode_response(&chan.recv()?)
}
