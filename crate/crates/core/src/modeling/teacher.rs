use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::conv_params;
use crate::tensor::{Graph, ParamStore, Tensor};

/// Frozen semantic embedder for images and class labels. Outputs are unit
/// vectors of length [`SemanticTeacher::dim`].
pub trait SemanticTeacher: Send + Sync {
    fn dim(&self) -> usize;

    /// `key` identifies the image for teachers backed by precomputed vectors.
    fn embed_image(&self, key: u64, image: &Tensor<f32>) -> Result<Vec<f32>>;

    fn embed_label(&self, class: usize) -> Result<Vec<f32>>;
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random frozen conv net over the image plus a random label table.
pub struct ToyTeacher {
    params: ParamStore<f32>,
    labels: Vec<Vec<f32>>,
    dim: usize,
}

impl ToyTeacher {
    pub const DIM: usize = 32;
    const MAX_COS: f32 = 0.99;

    /// Teacher for 32×32 RGB images and `classes` labels.
    pub fn new(seed: u64, classes: usize) -> Result<Self> {
        let d = Self::DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        conv_params(&mut params, "conv1", [8, 3, 4, 4], 48, &mut rng)?;
        conv_params(&mut params, "conv2", [16, 8, 4, 4], 128, &mut rng)?;
        params.insert("head", Tensor::randn(&[16 * 8 * 8, d], 1.0 / 32.0, &mut rng))?;

        let labels = loop {
            let mut rows: Vec<Vec<f32>> = (0..classes)
                .map(|_| Tensor::<f32>::randn(&[d], 1.0, &mut rng).into_data())
                .collect();
            rows.iter_mut().for_each(|r| normalize(r));
            let distinct = (0..classes)
                .all(|i| (0..i).all(|j| cosine(&rows[i], &rows[j]) < Self::MAX_COS));
            if distinct {
                break rows;
            }
        };
        Ok(Self {
            params,
            labels,
            dim: d,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }
}

impl SemanticTeacher for ToyTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, _key: u64, image: &Tensor<f32>) -> Result<Vec<f32>> {
        if image.shape() != [3, 32, 32] {
            return Err(dim_err!("toy teacher expects [3, 32, 32], got {:?}", image.shape()));
        }
        let mut g = Graph::with_frozen(&[""]);
        let x = g.constant(image.clone().reshape(&[1, 3, 32, 32])?);
        let w1 = g.param(&self.params, "conv1.w")?;
        let h = g.conv2d(x, w1, None, 2, 1)?;
        let h = g.relu(h)?;
        let w2 = g.param(&self.params, "conv2.w")?;
        let h = g.conv2d(h, w2, None, 2, 1)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[1, 16 * 8 * 8])?;
        let head = g.param(&self.params, "head")?;
        let z = g.matmul(h, head)?;
        g.check_finite()?;
        let mut out = g.value(z).data().to_vec();
        normalize(&mut out);
        Ok(out)
    }

    fn embed_label(&self, class: usize) -> Result<Vec<f32>> {
        self.labels
            .get(class)
            .cloned()
            .ok_or_else(|| Error::Index(format!("class {class} out of range for {}", self.labels.len())))
    }
}

/// Precomputed embeddings read from disk: one file keyed by image key, one
/// keyed by class id. Vectors are normalised on load.
pub struct FileTeacher {
    images: BTreeMap<u32, Vec<f32>>,
    labels: BTreeMap<u32, Vec<f32>>,
    dim: usize,
}

impl FileTeacher {
    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let (di, images) = read_embedding_file(images)?;
        let (dl, labels) = read_embedding_file(labels)?;
        if di != dl {
            return Err(dim_err!("image embeddings of dim {di} vs label embeddings of dim {dl}"));
        }
        Ok(Self::from_maps(di, images, labels))
    }

    pub fn from_maps(dim: usize, mut images: BTreeMap<u32, Vec<f32>>, mut labels: BTreeMap<u32, Vec<f32>>) -> Self {
        images.values_mut().chain(labels.values_mut()).for_each(|v| normalize(v));
        Self { images, labels, dim }
    }

    fn lookup(map: &BTreeMap<u32, Vec<f32>>, key: u64, what: &str) -> Result<Vec<f32>> {
        u32::try_from(key)
            .ok()
            .and_then(|k| map.get(&k))
            .cloned()
            .ok_or_else(|| Error::Missing(format!("{what} embedding {key}")))
    }
}

impl SemanticTeacher for FileTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, key: u64, _image: &Tensor<f32>) -> Result<Vec<f32>> {
        Self::lookup(&self.images, key, "image")
    }

    fn embed_label(&self, class: usize) -> Result<Vec<f32>> {
        Self::lookup(&self.labels, class as u64, "label")
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `(count u32, dim u32)` then `count` records of `(key u32, dim f32)`,
/// all little-endian.
pub fn read_embedding_file(path: &Path) -> Result<(usize, BTreeMap<u32, Vec<f32>>)> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let header = |r: &mut &[u8]| read_u32(r).map_err(|_| Error::Format("embedding file header truncated".into()));
    let count = header(&mut r)? as usize;
    let dim = header(&mut r)? as usize;
    if dim == 0 {
        return Err(Error::Format("embedding dimension 0".into()));
    }
    let needed = 8 + count * 4 * (1 + dim);
    if bytes.len() != needed {
        return Err(Error::Format(format!(
            "embedding file of {} bytes, expected {needed} for {count} records of dim {dim}",
            bytes.len()
        )));
    }
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let key = read_u32(&mut r)?;
        let v = (0..dim)
            .map(|_| read_u32(&mut r).map(f32::from_bits))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(key, v).is_some() {
            return Err(Error::Format(format!("duplicate embedding key {key}")));
        }
    }
    Ok((dim, out))
}

pub fn write_embedding_file(path: &Path, dim: usize, records: &[(u32, Vec<f32>)]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + records.len() * 4 * (1 + dim));
    buf.write_all(&(records.len() as u32).to_le_bytes())?;
    buf.write_all(&(dim as u32).to_le_bytes())?;
    for (key, v) in records {
        if v.len() != dim {
            return Err(dim_err!("record {key} has {} values, expected {dim}", v.len()));
        }
        buf.write_all(&key.to_le_bytes())?;
        for x in v {
            buf.write_all(&x.to_le_bytes())?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}
