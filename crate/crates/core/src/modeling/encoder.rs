use rand::Rng;

use super::mask::MaskSpec;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{layernorm, layernorm_params, linear, linear_params, BlockConfig};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const ENCODER: &str = "token_encoder.";
pub const DECODER: &str = "recon_decoder.";
pub const PROJECTION: &str = "projection.";

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoderConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Grid positions (`h * w`); the class token comes on top.
    pub max_tokens: usize,
    /// Index-embedding table size, equal to the codebook size.
    pub vocab: usize,
    pub decoder_depth: usize,
    /// Output dimension of the class-token projection (teacher space).
    pub teacher_dim: usize,
}

impl Default for TokenEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_tokens: 64,
            vocab: 64,
            decoder_depth: 2,
            teacher_dim: 32,
        }
    }
}

impl TokenEncoderConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.max_tokens == 0 || self.vocab < 2 || self.teacher_dim == 0 {
            return Err(Error::Config(format!("invalid token encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Visible tokens of one sample: codeword indices and their grid positions.
/// `filled` lists extra positions that carry the class-token embedding instead
/// of an index embedding; they follow the indexed tokens in the sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub indices: Vec<u32>,
    pub positions: Vec<usize>,
    pub filled: Vec<usize>,
}

impl TokenSeq {
    pub fn new(indices: Vec<u32>, positions: Vec<usize>) -> Result<Self> {
        if indices.len() != positions.len() {
            return Err(contract_err!(
                "{} indices vs {} positions",
                indices.len(),
                positions.len()
            ));
        }
        Ok(Self {
            indices,
            positions,
            filled: Vec::new(),
        })
    }

    /// Tokens of `map` at `positions`, in the given order.
    pub fn gather(indices: &[u32], positions: &[usize]) -> Result<Self> {
        let picked = positions
            .iter()
            .map(|&p| {
                indices
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("position {p} outside grid of {}", indices.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(picked, positions.to_vec())
    }

    pub fn with_filled(mut self, filled: Vec<usize>) -> Self {
        self.filled = filled;
        self
    }

    /// Sequence length without the class token.
    pub fn len(&self) -> usize {
        self.indices.len() + self.filled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct EncoderOutput {
    /// `[batch * len, d_model]`; row `b * len` is sample `b`'s encoded class token.
    pub out: Var,
    /// Per-layer attention probabilities, `[batch * heads, len, len]`.
    pub attn: Vec<Var>,
    pub batch: usize,
    pub len: usize,
}

/// Mini-ViT over codebook indices. Weights live under `token_encoder.`.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    pub cfg: TokenEncoderConfig,
}

impl TokenEncoder {
    pub fn new(cfg: TokenEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        store.insert(format!("{ENCODER}index_embed"), Tensor::randn(&[c.vocab, c.d_model], EMBED_STD, rng))?;
        store.insert(format!("{ENCODER}pos_embed"), Tensor::randn(&[c.max_tokens, c.d_model], EMBED_STD, rng))?;
        store.insert(format!("{ENCODER}cls"), Tensor::randn(&[1, c.d_model], EMBED_STD, rng))?;
        for i in 0..c.depth {
            c.block().init(store, &format!("{ENCODER}block{i}"), rng)?;
        }
        layernorm_params(store, &format!("{ENCODER}ln_f"), c.d_model)
    }

    fn check_seq(&self, s: &TokenSeq) -> Result<()> {
        if s.indices.len() != s.positions.len() {
            return Err(contract_err!("token sequence with mismatched lengths"));
        }
        if s.len() > self.cfg.max_tokens {
            return Err(contract_err!(
                "{} tokens exceed the maximum of {}",
                s.len(),
                self.cfg.max_tokens
            ));
        }
        if let Some(&i) = s.indices.iter().find(|&&i| i as usize >= self.cfg.vocab) {
            return Err(Error::Index(format!("index {i} out of range for vocab {}", self.cfg.vocab)));
        }
        if let Some(&p) = s.positions.iter().chain(&s.filled).find(|&&p| p >= self.cfg.max_tokens) {
            return Err(Error::Index(format!("position {p} out of range for {} tokens", self.cfg.max_tokens)));
        }
        Ok(())
    }

    /// Input sequences `[batch * (L + 1), d_model]`: class token first, then
    /// `e[index] + pos[position]` for every token in the given order, then
    /// `cls + pos[position]` for filled slots. An optional `gate: [batch * L]`
    /// scales each token's embedding.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: &[TokenSeq],
        gate: Option<Var>,
    ) -> Result<(Var, usize)> {
        let b = seqs.len();
        if b == 0 {
            return Err(contract_err!("empty batch"));
        }
        let l = seqs[0].len();
        for s in seqs {
            if s.len() != l {
                return Err(contract_err!("ragged batch: {} vs {l} tokens", s.len()));
            }
            self.check_seq(s)?;
        }
        let cls = g.param(store, &format!("{ENCODER}cls"))?;
        if l == 0 {
            let out = g.gather_rows(cls, &vec![0; b])?;
            return Ok((out, 1));
        }
        let vocab = self.cfg.vocab;
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| {
                let fill = std::iter::repeat_n(vocab, s.filled.len());
                s.indices.iter().map(|&i| i as usize).chain(fill)
            })
            .collect();
        let pos: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.positions.iter().chain(&s.filled).copied())
            .collect();
        let mut table = g.param(store, &format!("{ENCODER}index_embed"))?;
        if seqs.iter().any(|s| !s.filled.is_empty()) {
            table = g.concat_rows(table, cls)?;
        }
        let pos_table = g.param(store, &format!("{ENCODER}pos_embed"))?;
        let tok = g.gather_rows(table, &ids)?;
        let pe = g.gather_rows(pos_table, &pos)?;
        let mut x = g.add(tok, pe)?;
        if let Some(gate) = gate {
            x = g.mul_rows(x, gate)?;
        }
        let all = g.concat_rows(cls, x)?;
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| std::iter::once(0).chain((0..l).map(move |j| 1 + bi * l + j)))
            .collect();
        Ok((g.gather_rows(all, &order)?, l + 1))
    }

    /// Pre-norm transformer over `x: [batch * len, d_model]`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        len: usize,
    ) -> Result<EncoderOutput> {
        if len > self.cfg.max_tokens + 1 {
            return Err(contract_err!(
                "sequence of {len} exceeds {} + class token",
                self.cfg.max_tokens
            ));
        }
        let mut attn = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for i in 0..self.cfg.depth {
            h = self
                .cfg
                .block()
                .forward(g, store, &format!("{ENCODER}block{i}"), h, batch, len, &mut attn)?;
        }
        let out = layernorm(g, store, &format!("{ENCODER}ln_f"), h)?;
        Ok(EncoderOutput {
            out,
            attn,
            batch,
            len,
        })
    }

    /// Embed then encode.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: &[TokenSeq],
        gate: Option<Var>,
    ) -> Result<EncoderOutput> {
        let (x, len) = self.embed(g, store, seqs, gate)?;
        self.encode(g, store, x, seqs.len(), len)
    }

    /// Encoded class tokens `[batch, d_model]`.
    pub fn class_rows<T: Real>(&self, g: &mut Graph<T>, enc: &EncoderOutput) -> Result<Var> {
        let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.len).collect();
        g.gather_rows(enc.out, &rows)
    }

    /// Single-sample input sequence for the visible positions of `indices`.
    pub fn embed_unmasked<T: Real>(
        &self,
        store: &ParamStore<T>,
        indices: &[u32],
        spec: &MaskSpec,
    ) -> Result<Tensor<T>> {
        if indices.len() != spec.total {
            return Err(dim_err!("{} indices vs mask over {}", indices.len(), spec.total));
        }
        let seq = TokenSeq::gather(indices, &spec.unmasked)?;
        let mut g = Graph::with_frozen(&[ENCODER]);
        let (x, _) = self.embed(&mut g, store, &[seq], None)?;
        Ok(g.value(x).clone())
    }
}

/// Scatters encoder outputs back onto the full grid: visible positions take
/// their encoded vectors, masked positions the encoded class token.
pub fn fill_masked_graph<T: Real>(
    g: &mut Graph<T>,
    enc: &EncoderOutput,
    specs: &[MaskSpec],
) -> Result<Var> {
    if specs.len() != enc.batch {
        return Err(contract_err!("{} masks for a batch of {}", specs.len(), enc.batch));
    }
    let mut rows = Vec::new();
    for (bi, spec) in specs.iter().enumerate() {
        if spec.unmasked.len() + 1 != enc.len {
            return Err(contract_err!(
                "mask leaves {} visible tokens but encoder saw {}",
                spec.unmasked.len(),
                enc.len - 1
            ));
        }
        let base = bi * enc.len;
        let mut rank = 0;
        for p in 0..spec.total {
            if spec.unmasked.get(rank) == Some(&p) {
                rank += 1;
                rows.push(base + rank);
            } else {
                rows.push(base);
            }
        }
    }
    g.gather_rows(enc.out, &rows)
}

/// [`fill_masked_graph`] on a single `[len, d_model]` encoded sequence.
pub fn fill_masked<T: Real>(encoded: &Tensor<T>, spec: &MaskSpec) -> Result<Tensor<T>> {
    let s = encoded.shape();
    if s.len() != 2 {
        return Err(dim_err!("encoded sequence must be 2-D, got {s:?}"));
    }
    let mut g = Graph::new();
    let out = g.constant(encoded.clone());
    let enc = EncoderOutput {
        out,
        attn: Vec::new(),
        batch: 1,
        len: s[0],
    };
    let filled = fill_masked_graph(&mut g, &enc, std::slice::from_ref(spec))?;
    Ok(g.value(filled).clone())
}

/// Shallow transformer predicting codeword logits at every grid position.
#[derive(Clone, Debug)]
pub struct ReconDecoder {
    pub cfg: TokenEncoderConfig,
}

impl ReconDecoder {
    pub fn new(cfg: TokenEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        store.insert(format!("{DECODER}pos_embed"), Tensor::randn(&[c.max_tokens, c.d_model], EMBED_STD, rng))?;
        for i in 0..c.decoder_depth {
            c.block().init(store, &format!("{DECODER}block{i}"), rng)?;
        }
        layernorm_params(store, &format!("{DECODER}ln_f"), c.d_model)?;
        linear_params(store, &format!("{DECODER}head"), c.d_model, c.vocab, rng)
    }

    /// `filled: [batch * total, d_model]` → logits `[batch * total, vocab]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        filled: Var,
        batch: usize,
        total: usize,
    ) -> Result<Var> {
        if total > self.cfg.max_tokens {
            return Err(contract_err!("{total} positions exceed {}", self.cfg.max_tokens));
        }
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..total).collect();
        let table = g.param(store, &format!("{DECODER}pos_embed"))?;
        let pe = g.gather_rows(table, &pos)?;
        let mut h = g.add(filled, pe)?;
        let mut attn = Vec::new();
        for i in 0..self.cfg.decoder_depth {
            h = self
                .cfg
                .block()
                .forward(g, store, &format!("{DECODER}block{i}"), h, batch, total, &mut attn)?;
        }
        let h = layernorm(g, store, &format!("{DECODER}ln_f"), h)?;
        linear(g, store, &format!("{DECODER}head"), h)
    }
}

/// Two-layer MLP (GELU) from the encoded class token into the teacher space,
/// followed by L2 normalisation.
#[derive(Clone, Debug)]
pub struct Projection {
    pub d_model: usize,
    pub out_dim: usize,
}

impl Projection {
    pub const NORM_EPS: f64 = 1e-8;

    pub fn new(cfg: &TokenEncoderConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            out_dim: cfg.teacher_dim,
        }
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        linear_params(store, &format!("{PROJECTION}fc1"), self.d_model, self.d_model, rng)?;
        linear_params(store, &format!("{PROJECTION}fc2"), self.d_model, self.out_dim, rng)
    }

    /// `cls: [batch, d_model]` → unit rows `[batch, out_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
        let h = linear(g, store, &format!("{PROJECTION}fc1"), cls)?;
        let h = g.gelu(h)?;
        let z = linear(g, store, &format!("{PROJECTION}fc2"), h)?;
        g.l2_normalize_rows(z, Self::NORM_EPS)
    }
}
