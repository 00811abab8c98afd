use std::path::Path;

use crate::error::{Error, Result};
use crate::persist::{write_atomic, ByteReader};
use crate::tensor::Tensor;
use crate::tokens::{Modality, TokenSequence, N_SPECIALS};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"EMFCODE\0";
pub const CODEBOOK_VERSION: u32 = 1;

/// `K` centroid vectors; centroid `i` maps to token `N_SPECIALS + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Tensor,
    version: u32,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the lowest index.
pub(crate) fn nearest<'a>(p: &[f64], centroids: impl Iterator<Item = &'a [f64]>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl Codebook {
    /// Wraps a `[K x dim]` matrix, rejecting duplicate rows.
    pub fn new(centroids: Tensor) -> Result<Self> {
        let k = match centroids.shape() {
            &[k, d] if k > 0 && d > 0 => k,
            s => return Err(Error::Input(format!("codebook must be K x dim, got {s:?}"))),
        };
        for i in 0..k {
            for j in 0..i {
                if centroids.row(i) == centroids.row(j) {
                    return Err(Error::Input(format!("centroids {j} and {i} are identical")));
                }
            }
        }
        Ok(Self {
            centroids,
            version: CODEBOOK_VERSION,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    /// Vocabulary size of a speech encoder fed by this codebook.
    pub fn vocab_size(&self) -> usize {
        self.k() + N_SPECIALS as usize
    }

    pub fn nearest(&self, frame: &[f64]) -> usize {
        nearest(frame, (0..self.k()).map(|i| self.centroids.row(i))).0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.centroids.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.centroids.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(8)? != CODEBOOK_MAGIC {
            return Err(Error::format(origin, "bad codebook magic"));
        }
        let version = r.u32()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let data = r.f64s(k * dim)?;
        r.finish()?;
        let mut cb = Self::new(Tensor::new(vec![k, dim], data)?)?;
        cb.version = version;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Maps every frame to its nearest centroid and prepends CLS.
///
/// The body is truncated to `max_len - 1` tokens so the full sequence fits a
/// speech encoder with context `max_len`.
pub fn discretize(frames: &Tensor, cb: &Codebook, max_len: usize) -> Result<TokenSequence> {
    if frames.shape().len() != 2 || frames.cols() != cb.dim() {
        return Err(Error::Input(format!(
            "frame shape {:?} does not match codebook dim {}",
            frames.shape(),
            cb.dim()
        )));
    }
    let keep = frames.rows().min(max_len.saturating_sub(1));
    let body = (0..keep).map(|i| cb.nearest(frames.row(i)) as u32 + N_SPECIALS);
    Ok(TokenSequence::with_cls(Modality::Speech, body))
}
