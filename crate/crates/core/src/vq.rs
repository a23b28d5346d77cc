//! Convolutional VQ tokenizer: image → latent grid → nearest-codeword index
//! map, with a transposed-conv pixel decoder used only while training it.

use rand::seq::index::sample;
use rand::Rng;

use crate::bitstream::index_bits;
use crate::error::{dim_err, Error, Result};
use crate::nn::conv_params;
use crate::tensor::{AdamConfig, Graph, ParamStore, Real, Tensor, Var};

pub const SECTION: &str = "tokenizer.";
pub const CODEBOOK: &str = "tokenizer.codebook";

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Spatial downsample factor `n`; a power of two, one stride-2 block per factor of two.
    pub downsample: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            downsample: 4,
            hidden: 32,
            codebook_size: 64,
            code_dim: 16,
            beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.downsample;
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Config(format!("downsample {n} must be a power of two >= 2")));
        }
        if !self.height.is_multiple_of(n) || !self.width.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by downsample {n}",
                self.height, self.width
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if self.channels == 0 || self.hidden == 0 || self.code_dim == 0 {
            return Err(Error::Config("zero channel width".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.downsample, self.width / self.downsample)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// The `N x D` table of codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    vectors: Tensor<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        let s = vectors.shape();
        if s.len() != 2 {
            return Err(dim_err!("codebook must be [N, D], got {s:?}"));
        }
        if s[0] < 2 {
            return Err(Error::Config(format!("codebook has {} entries, need >= 2", s[0])));
        }
        if !vectors.is_finite() {
            return Err(Error::Config("codebook contains non-finite values".into()));
        }
        Ok(Self { vectors })
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, i: usize) -> &[T] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    /// Bits per transmitted index, `ceil(log2 N)`.
    pub fn index_bits(&self) -> u32 {
        index_bits(self.size())
    }

    /// Index of the codeword closest to `v`; the lowest index wins ties.
    pub fn nearest(&self, v: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for i in 0..self.size() {
            let d = self
                .vector(i)
                .iter()
                .zip(v)
                .fold(T::zero(), |s, (&c, &x)| s + (x - c) * (x - c));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Encoder output for one image: `z: [h, w, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub h: usize,
    pub w: usize,
    pub z: Tensor<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn new(z: Tensor<T>) -> Result<Self> {
        let s = z.shape();
        if s.len() != 3 {
            return Err(dim_err!("latent grid must be [h, w, D], got {s:?}"));
        }
        Ok(Self { h: s[0], w: s[1], z })
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[2]
    }

    pub fn vector(&self, pos: usize) -> &[T] {
        self.z.row(pos)
    }

    /// Channel-major copy `[D, h, w]`.
    pub fn to_chw(&self) -> Tensor<T> {
        let d = self.dim();
        let hw = self.h * self.w;
        let src = self.z.data();
        let mut out = vec![T::zero(); d * hw];
        for p in 0..hw {
            for c in 0..d {
                out[c * hw + p] = src[p * d + c];
            }
        }
        Tensor::new(vec![d, self.h, self.w], out).expect("non-empty grid")
    }
}

/// Row-major `h x w` grid of codeword indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl IndexMap {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        if h * w == 0 || indices.len() != h * w {
            return Err(dim_err!("index map {h}x{w} with {} indices", indices.len()));
        }
        Ok(Self { h, w, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check_range(&self, n: usize) -> Result<()> {
        match self.indices.iter().position(|&i| i as usize >= n) {
            Some(p) => Err(Error::Index(format!(
                "index {} at position {p} out of range for codebook of {n}",
                self.indices[p]
            ))),
            None => Ok(()),
        }
    }
}

/// Nearest-codeword quantization of every grid vector.
pub fn quantize<T: Real>(z: &LatentGrid<T>, cb: &Codebook<T>) -> Result<(IndexMap, LatentGrid<T>)> {
    if z.dim() != cb.dim() {
        return Err(dim_err!("latent dim {} vs codebook dim {}", z.dim(), cb.dim()));
    }
    let hw = z.h * z.w;
    let indices: Vec<u32> = (0..hw).map(|p| cb.nearest(z.vector(p)) as u32).collect();
    let map = IndexMap::new(z.h, z.w, indices)?;
    let zq = lookup(&map, cb)?;
    Ok((map, zq))
}

/// Codeword gather: `zq[p] = c[I[p]]`.
pub fn lookup<T: Real>(map: &IndexMap, cb: &Codebook<T>) -> Result<LatentGrid<T>> {
    map.check_range(cb.size())?;
    let d = cb.dim();
    let mut data = Vec::with_capacity(map.len() * d);
    for &i in &map.indices {
        data.extend_from_slice(cb.vector(i as usize));
    }
    LatentGrid::new(Tensor::new(vec![map.h, map.w, d], data)?)
}

/// Indices of the nearest codewords for a `[rows, D]` buffer.
pub(crate) fn nearest_rows<T: Real>(rows: &[T], cb: &Codebook<T>) -> Vec<usize> {
    rows.chunks(cb.dim()).map(|v| cb.nearest(v)).collect()
}

/// Loss components of one tokenizer optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Distinct codewords selected in the batch.
    pub codes_used: usize,
}

impl TokenizerLosses {
    pub fn total(&self, beta: f64) -> f64 {
        self.reconstruction + self.codebook + beta * self.commitment
    }
}

/// Encoder/codebook/decoder weights live in a [`ParamStore`] under
/// `tokenizer.`; this type only carries the architecture.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<T: Real, R: Rng>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let c = &self.cfg;
        let mut s = ParamStore::new();
        let mut cin = c.channels;
        for i in 0..c.stages() {
            let name = format!("tokenizer.enc{i}");
            conv_params(&mut s, &name, [c.hidden, cin, 4, 4], cin * 16, rng)?;
            s.insert(format!("{name}.b"), Tensor::zeros(&[c.hidden]))?;
            cin = c.hidden;
        }
        conv_params(&mut s, "tokenizer.enc_proj", [c.code_dim, c.hidden, 1, 1], c.hidden, rng)?;
        s.insert("tokenizer.enc_proj.b", Tensor::zeros(&[c.code_dim]))?;
        s.insert(CODEBOOK, Tensor::uniform(&[c.codebook_size, c.code_dim], 1.0 / c.codebook_size as f64, rng))?;
        conv_params(&mut s, "tokenizer.dec_proj", [c.hidden, c.code_dim, 1, 1], c.code_dim, rng)?;
        s.insert("tokenizer.dec_proj.b", Tensor::zeros(&[c.hidden]))?;
        let stages = c.stages();
        for i in 0..stages {
            let name = format!("tokenizer.dec{i}");
            let cout = if i + 1 == stages { c.channels } else { c.hidden };
            conv_params(&mut s, &name, [c.hidden, cout, 4, 4], c.hidden * 4, rng)?;
            s.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        }
        Ok(s)
    }

    pub fn codebook<T: Real>(&self, store: &ParamStore<T>) -> Result<Codebook<T>> {
        let t = store
            .get(CODEBOOK)
            .ok_or_else(|| Error::Missing(CODEBOOK.into()))?;
        Codebook::new(t.clone())
    }

    /// `images: [B, C, H, W]` → pre-quantization latents `[B, D, h, w]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let c = &self.cfg;
        let s = g.shape(images);
        if s.len() != 4 || s[1] != c.channels || s[2] != c.height || s[3] != c.width {
            return Err(Error::Config(format!(
                "image batch {s:?} does not match {}x{}x{}",
                c.channels, c.height, c.width
            )));
        }
        let mut x = images;
        for i in 0..c.stages() {
            let w = g.param(store, &format!("tokenizer.enc{i}.w"))?;
            let b = g.param(store, &format!("tokenizer.enc{i}.b"))?;
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.relu(x)?;
        }
        let w = g.param(store, "tokenizer.enc_proj.w")?;
        let b = g.param(store, "tokenizer.enc_proj.b")?;
        g.conv2d(x, w, Some(b), 1, 0)
    }

    /// `zq: [B, D, h, w]` → reconstructed images `[B, C, H, W]`.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, zq: Var) -> Result<Var> {
        let c = &self.cfg;
        let (h, w) = c.grid();
        let s = g.shape(zq);
        if s.len() != 4 || s[1] != c.code_dim || s[2] != h || s[3] != w {
            return Err(Error::Config(format!(
                "latent batch {s:?} does not match [_, {}, {h}, {w}]",
                c.code_dim
            )));
        }
        let wt = g.param(store, "tokenizer.dec_proj.w")?;
        let b = g.param(store, "tokenizer.dec_proj.b")?;
        let mut x = g.conv2d(zq, wt, Some(b), 1, 0)?;
        x = g.relu(x)?;
        let stages = c.stages();
        for i in 0..stages {
            let wt = g.param(store, &format!("tokenizer.dec{i}.w"))?;
            let b = g.param(store, &format!("tokenizer.dec{i}.b"))?;
            x = g.conv_transpose2d(x, wt, Some(b), 2, 1)?;
            if i + 1 < stages {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    fn stack_images<T: Real>(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let want = [c.channels, c.height, c.width];
        let mut data = Vec::with_capacity(images.len() * c.channels * c.height * c.width);
        for im in images {
            if im.shape() != want {
                return Err(Error::Config(format!(
                    "image shape {:?} does not match {want:?}",
                    im.shape()
                )));
            }
            data.extend_from_slice(im.data());
        }
        Tensor::new(vec![images.len(), c.channels, c.height, c.width], data)
    }

    /// Latent grids for a batch of `[C, H, W]` images.
    pub fn encode_batch<T: Real>(&self, store: &ParamStore<T>, images: &[&Tensor<T>]) -> Result<Vec<LatentGrid<T>>> {
        let batch = self.stack_images(images)?;
        let mut g = Graph::with_frozen(&[SECTION]);
        let x = g.constant(batch);
        let z = self.encode_graph(&mut g, store, x)?;
        let z = g.permute(z, &[0, 2, 3, 1])?;
        g.check_finite()?;
        let (h, w) = self.cfg.grid();
        let d = self.cfg.code_dim;
        g.value(z)
            .data()
            .chunks(h * w * d)
            .map(|c| LatentGrid::new(Tensor::new(vec![h, w, d], c.to_vec())?))
            .collect()
    }

    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<LatentGrid<T>> {
        Ok(self.encode_batch(store, &[image])?.remove(0))
    }

    /// Encode then quantize.
    pub fn tokenize<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<(LatentGrid<T>, IndexMap)> {
        let z = self.encode(store, image)?;
        let (map, _) = quantize(&z, &self.codebook(store)?)?;
        Ok((z, map))
    }

    pub fn decode_pixels<T: Real>(&self, store: &ParamStore<T>, zq: &LatentGrid<T>) -> Result<Tensor<T>> {
        let (h, w) = self.cfg.grid();
        if zq.h != h || zq.w != w || zq.dim() != self.cfg.code_dim {
            return Err(Error::Config(format!(
                "grid {}x{}x{} does not match {h}x{w}x{}",
                zq.h,
                zq.w,
                zq.dim(),
                self.cfg.code_dim
            )));
        }
        let mut g = Graph::with_frozen(&[SECTION]);
        let chw = zq.to_chw().reshape(&[1, zq.dim(), h, w])?;
        let x = g.constant(chw);
        let y = self.decode_graph(&mut g, store, x)?;
        g.check_finite()?;
        let c = &self.cfg;
        g.value(y).clone().reshape(&[c.channels, c.height, c.width])
    }

    /// Replaces the codebook by `N` distinct latent vectors drawn from the
    /// encoder's output on `images`.
    pub fn init_codebook_from_data<T: Real, R: Rng>(
        &self,
        store: &mut ParamStore<T>,
        images: &[&Tensor<T>],
        rng: &mut R,
    ) -> Result<()> {
        let grids = self.encode_batch(store, images)?;
        let d = self.cfg.code_dim;
        let rows: Vec<&[T]> = grids.iter().flat_map(|g| g.z.data().chunks(d)).collect();
        let n = self.cfg.codebook_size;
        if rows.len() < n {
            return Err(Error::Config(format!(
                "need at least {n} latent vectors to seed the codebook, got {}",
                rows.len()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for i in sample(rng, rows.len(), n).into_iter() {
            data.extend(rows[i].iter().map(|&v| v + T::lit(rng.gen_range(-1e-3..1e-3))));
        }
        store.set(CODEBOOK, Tensor::new(vec![n, d], data)?)
    }

    /// Forward pass of the tokenizer training objective on `[B, C, H, W]`
    /// images. Returns the graph, total loss node and the component values.
    pub fn training_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<(Var, TokenizerLosses)> {
        let c = &self.cfg;
        let (h, w) = c.grid();
        let b = g.shape(images)[0];
        let z = self.encode_graph(g, store, images)?;
        let zp = g.permute(z, &[0, 2, 3, 1])?;
        let zr = g.reshape(zp, &[b * h * w, c.code_dim])?;
        let cb = g.param(store, CODEBOOK)?;
        let codebook = Codebook::new(g.value(cb).clone())?;
        let idx = nearest_rows(g.value(zr).data(), &codebook);
        let mut used = idx.clone();
        used.sort_unstable();
        used.dedup();
        let zq = g.gather_rows(cb, &idx)?;

        let z_sg = g.detach(zr);
        let zq_sg = g.detach(zq);
        let cb_loss = g.mse(z_sg, zq)?;
        let commit = g.mse(zr, zq_sg)?;

        let zst = straight_through(g, zr, zq)?;
        let zst = g.reshape(zst, &[b, h, w, c.code_dim])?;
        let zst = g.permute(zst, &[0, 3, 1, 2])?;
        let recon = self.decode_graph(g, store, zst)?;
        let rec_loss = g.mse(recon, images)?;

        let commit_w = g.scale(commit, T::lit(c.beta))?;
        let total = g.add(rec_loss, cb_loss)?;
        let total = g.add(total, commit_w)?;
        let f = |v: Var| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
        let losses = TokenizerLosses {
            reconstruction: f(rec_loss),
            codebook: f(cb_loss),
            commitment: f(commit),
            codes_used: used.len(),
        };
        Ok((total, losses))
    }

    /// One Adam step on the tokenizer objective.
    pub fn train_step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        images: &[&Tensor<T>],
        adam: &AdamConfig,
    ) -> Result<TokenizerLosses> {
        let batch = self.stack_images(images)?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let (total, losses) = self.training_loss(&mut g, store, x)?;
        g.backward(total, store)?;
        store.adam_step(adam, &[SECTION])?;
        Ok(losses)
    }

    /// Mean per-pixel squared error of encode → quantize → decode.
    pub fn reconstruction_mse<T: Real>(&self, store: &ParamStore<T>, images: &[&Tensor<T>]) -> Result<f64> {
        let batch = self.stack_images(images)?;
        let mut g = Graph::with_frozen(&[SECTION]);
        let x = g.constant(batch);
        let (_, losses) = self.training_loss(&mut g, store, x)?;
        Ok(losses.reconstruction)
    }
}

/// `z + sg(zq - z)`: forward value of `zq`, gradient passed to `z` unchanged.
pub fn straight_through<T: Real>(g: &mut Graph<T>, z: Var, zq: Var) -> Result<Var> {
    let diff = g.sub(zq, z)?;
    let diff = g.detach(diff);
    g.add(z, diff)
}
