//! Wire format for the selected indices and rate accounting.
//!
//! ```text
//! "CAFC" | version u8 = 1 | h u16 | w u16 | N u32 | K u32      (17 bytes, LE)
//! mask    ceil(h*w / 8) bytes, row-major, MSB first, 1 = transmitted
//! payload ceil(K * ceil(log2 N) / 8) bytes, MSB-first packed indices in
//!         ascending position order, zero padded
//! ```

use crate::error::{contract_err, Error, Result};
use crate::selection::SelectionResult;

/// Bits per transmitted index, `ceil(log2 N)`.
pub fn index_bits(n: usize) -> u32 {
    debug_assert!(n >= 2);
    usize::BITS - (n - 1).leading_zeros()
}

pub const MAGIC: &[u8; 4] = b"CAFC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

/// Decoded packet contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPacket {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    /// Kept positions and mask; `selection.k` may be 0 for an empty packet.
    pub selection: SelectionResult,
    /// Indices at the kept positions, ascending position order.
    pub indices: Vec<u32>,
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn push(&mut self, value: u32, bits: u32) {
        for i in (0..bits).rev() {
            if self.used.is_multiple_of(8) {
                self.bytes.push(0);
            }
            let bit = ((value >> i) & 1) as u8;
            *self.bytes.last_mut().expect("pushed above") |= bit << (7 - self.used % 8);
            self.used += 1;
        }
    }
}

fn read_bits(bytes: &[u8], start: usize, bits: u32) -> u32 {
    (0..bits as usize).fold(0, |acc, i| {
        let p = start + i;
        (acc << 1) | ((bytes[p / 8] >> (7 - p % 8)) & 1) as u32
    })
}

pub fn packet_len(h: usize, w: usize, n: usize, k: usize) -> usize {
    HEADER_LEN + (h * w).div_ceil(8) + (k * index_bits(n) as usize).div_ceil(8)
}

/// Serializes the indices of `indices` (a full `h*w` map) kept by `sel`.
pub fn encode_packet(h: usize, w: usize, indices: &[u32], sel: &SelectionResult, n: usize) -> Result<Vec<u8>> {
    let total = h * w;
    if total == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Encode(format!("grid {h}x{w} not encodable")));
    }
    if n < 2 || n > u32::MAX as usize {
        return Err(Error::Encode(format!("codebook size {n} not encodable")));
    }
    if indices.len() != total || sel.mask_bits.len() != total {
        return Err(contract_err!(
            "{} indices and a {}-bit mask for a {h}x{w} grid",
            indices.len(),
            sel.mask_bits.len()
        ));
    }
    let popcount = sel.mask_bits.iter().filter(|&&b| b).count();
    if popcount != sel.k || sel.kept_positions.len() != sel.k {
        return Err(contract_err!("mask popcount {popcount} vs K = {}", sel.k));
    }
    let bits = index_bits(n);
    let mut out = Vec::with_capacity(packet_len(h, w, n, sel.k));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(sel.k as u32).to_le_bytes());

    let mut mask = BitWriter::default();
    sel.mask_bits.iter().for_each(|&b| mask.push(b as u32, 1));
    out.extend(mask.bytes);

    let mut payload = BitWriter::default();
    for p in (0..total).filter(|&p| sel.mask_bits[p]) {
        let idx = indices[p];
        if idx as usize >= n {
            return Err(Error::Encode(format!("index {idx} at position {p} not below N = {n}")));
        }
        payload.push(idx, bits);
    }
    out.extend(payload.bytes);
    Ok(out)
}

pub fn decode_packet(bytes: &[u8]) -> Result<TokenPacket> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(Error::Length {
                needed,
                have: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(5)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    need(HEADER_LEN)?;
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, n, k) = (u16_at(5), u16_at(7), u32_at(9), u32_at(13));
    let total = h * w;
    if total == 0 || n < 2 {
        return Err(Error::Format(format!("invalid header: grid {h}x{w}, N = {n}")));
    }
    if k > total {
        return Err(Error::Corruption(format!("K = {k} exceeds {total} positions")));
    }
    let mask_len = total.div_ceil(8);
    need(HEADER_LEN + mask_len)?;
    let mask = &bytes[HEADER_LEN..HEADER_LEN + mask_len];
    let mask_bits: Vec<bool> = (0..total).map(|p| read_bits(mask, p, 1) == 1).collect();
    let popcount = mask_bits.iter().filter(|&&b| b).count();
    if popcount != k {
        return Err(Error::Corruption(format!("mask popcount {popcount} vs K = {k}")));
    }
    let bits = index_bits(n);
    let payload_len = (k * bits as usize).div_ceil(8);
    let expected = HEADER_LEN + mask_len + payload_len;
    need(expected)?;
    if bytes.len() > expected {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let payload = &bytes[HEADER_LEN + mask_len..];
    let indices = (0..k)
        .map(|i| {
            let v = read_bits(payload, i * bits as usize, bits);
            if v as usize >= n {
                Err(Error::Corruption(format!("index {v} not below N = {n}")))
            } else {
                Ok(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let kept_positions = (0..total).filter(|&p| mask_bits[p]).collect();
    Ok(TokenPacket {
        h,
        w,
        n,
        selection: SelectionResult {
            k,
            kept_positions,
            mask_bits,
        },
        indices,
    })
}

/// Raw bit budget of one image; the fixed header is not counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub index_bits: u64,
    pub mask_bits: u64,
    pub total_bits: u64,
    pub bpp: f64,
}

pub fn compute_bpp(k: usize, n: usize, h: usize, w: usize, height: usize, width: usize) -> Result<RateReport> {
    if n < 2 || h * w == 0 || height * width == 0 || k > h * w {
        return Err(contract_err!(
            "rate of K = {k}, N = {n}, grid {h}x{w}, image {height}x{width}"
        ));
    }
    let index_bits = (k as u64) * index_bits(n) as u64;
    let mask_bits = (h * w) as u64;
    let total_bits = index_bits + mask_bits;
    Ok(RateReport {
        index_bits,
        mask_bits,
        total_bits,
        bpp: total_bits as f64 / (height * width) as f64,
    })
}
