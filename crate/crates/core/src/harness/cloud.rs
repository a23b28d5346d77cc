//! Receiver role. Works from packets alone: this module must not depend on
//! pixels, the tokenizer or the selector.

use std::net::TcpListener;

use log::{info, warn};

use crate::bitstream::decode_packet;
use crate::error::{contract_err, Error, Result};
use crate::selection::head::Classifier;
use crate::tensor::ParamStore;

use super::channel::{Channel, StreamChannel};

const OK: u8 = 0;
const ERR: u8 = 1;

#[derive(Clone, Debug)]
pub struct CloudModel {
    pub classifier: Classifier,
}

impl CloudModel {
    pub fn new(classifier: Classifier) -> Self {
        Self { classifier }
    }

    /// decode → classify on the received tokens only.
    pub fn run_cloud(&self, store: &ParamStore<f32>, packet: &[u8]) -> Result<usize> {
        let p = decode_packet(packet)?;
        let cfg = &self.classifier.encoder.cfg;
        if p.n != cfg.vocab || p.h * p.w != cfg.max_tokens {
            return Err(contract_err!(
                "packet for {}x{} tokens with N = {} does not match the model ({} tokens, N = {})",
                p.h,
                p.w,
                p.n,
                cfg.max_tokens,
                cfg.vocab
            ));
        }
        let seq = self.classifier.policy.sequence(&p.indices, &p.selection)?;
        let logits = self.classifier.logits(store, &seq)?;
        Ok(crate::selection::head::argmax(&logits))
    }

    /// Answers requests until the peer closes the channel. Returns the number
    /// of requests handled.
    pub fn serve(&self, store: &ParamStore<f32>, chan: &mut impl Channel) -> Result<usize> {
        let mut served = 0;
        loop {
            let msg = match chan.recv() {
                Ok(m) => m,
                Err(Error::ChannelClosed) => return Ok(served),
                Err(e) => return Err(e),
            };
            let reply = self.run_cloud(store, &msg);
            if let Err(e) = &reply {
                warn!("request {served}: {e}");
            }
            chan.send(&encode_response(&reply))?;
            served += 1;
        }
    }

    /// Sequentially serves TCP connections; stops after `max_connections`
    /// if given.
    pub fn serve_tcp(&self, store: &ParamStore<f32>, listener: &TcpListener, max_connections: Option<usize>) -> Result<()> {
        let mut handled = 0;
        for stream in listener.incoming() {
            let stream = stream?;
            stream.set_nodelay(true)?;
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            let n = self.serve(store, &mut StreamChannel::new(stream))?;
            info!("connection {peer} closed after {n} requests");
            handled += 1;
            if max_connections.is_some_and(|m| handled >= m) {
                break;
            }
        }
        Ok(())
    }
}

/// `[0, class u32 LE]` or `[1, utf-8 message]`.
pub fn encode_response(r: &Result<usize>) -> Vec<u8> {
    match r {
        Ok(c) => {
            let mut v = vec![OK];
            v.extend_from_slice(&(*c as u32).to_le_bytes());
            v
        }
        Err(e) => {
            let mut v = vec![ERR];
            v.extend_from_slice(e.to_string().as_bytes());
            v
        }
    }
}

pub fn decode_response(msg: &[u8]) -> Result<usize> {
    match msg.split_first() {
        Some((&OK, rest)) if rest.len() == 4 => Ok(u32::from_le_bytes(rest.try_into().expect("4 bytes")) as usize),
        Some((&ERR, rest)) => Err(Error::Remote(String::from_utf8_lossy(rest).into_owned())),
        _ => Err(Error::Format("malformed cloud response".into())),
    }
}
