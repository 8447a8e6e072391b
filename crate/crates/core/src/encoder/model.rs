use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::hashing::{derive_seed, StableHasher};

const MAGIC: &[u8; 8] = b"URAGENC\0";
const FORMAT_VERSION: u32 = 1;
const INIT_RANGE: f64 = 0.05;

/// Anything that maps text to a fixed-width vector.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_hash_dim: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_hash_dim: 1 << 15,
            embed_dim: 64,
            output_dim: 256,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_hash_dim == 0 || self.embed_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Hashed-vocabulary bag-of-words encoder:
/// tokens → bucket rows of `token_table` → mean pool → `projectionᵀ·h + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub(crate) cfg: EncoderConfig,
    pub(crate) seed: u64,
    /// Row-major `[vocab_hash_dim × embed_dim]`.
    pub(crate) token_table: Vec<f64>,
    /// Row-major `[embed_dim × output_dim]`.
    pub(crate) projection: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TokenTable,
    Projection,
    Bias,
}

/// Bucket ids and counts for one text, in ascending bucket order.
pub(crate) type BagOfBuckets = Vec<(usize, u32)>;

/// Cached activations from a forward pass, for backprop.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub n_tokens: usize,
    /// Pooled features after dropout.
    pub hidden: Vec<f64>,
    /// Dropout multipliers (0 or 1/(1-p)); `None` in eval mode.
    pub mask: Option<Vec<f64>>,
    pub output: Vec<f64>,
}

impl EncoderModel {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder-init"));
        let token_table = (0..cfg.vocab_hash_dim * cfg.embed_dim)
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        let mut projection = vec![0.0; cfg.embed_dim * cfg.output_dim];
        for i in 0..cfg.embed_dim.min(cfg.output_dim) {
            projection[i * cfg.output_dim + i] = 1.0;
        }
        Ok(EncoderModel {
            cfg,
            seed,
            token_table,
            projection,
            bias: vec![0.0; cfg.output_dim],
        })
    }

    /// All-zero parameters.
    pub fn zeros(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(EncoderModel {
            cfg,
            seed: 0,
            token_table: vec![0.0; cfg.vocab_hash_dim * cfg.embed_dim],
            projection: vec![0.0; cfg.embed_dim * cfg.output_dim],
            bias: vec![0.0; cfg.output_dim],
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.token_table.len() + self.projection.len() + self.bias.len()
    }

    pub fn bucket(&self, token: &str) -> usize {
        (StableHasher::new().str(&token.to_lowercase()).finish() % self.cfg.vocab_hash_dim as u64) as usize
    }

    pub(crate) fn bag(&self, text: &str) -> BagOfBuckets {
        let mut m: BTreeMap<usize, u32> = BTreeMap::new();
        for t in text.split_whitespace() {
            *m.entry(self.bucket(t)).or_default() += 1;
        }
        m.into_iter().collect()
    }

    pub(crate) fn forward(&self, text: &str, dropout: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        self.forward_bag(&self.bag(text), dropout, self.cfg.output_dim)
    }

    /// Length of the shortest output prefix outside of which every projection
    /// column and bias entry is zero. Those outputs are identically zero, get
    /// zero gradient, and so stay zero under training.
    pub(crate) fn live_outputs(&self) -> usize {
        let d = self.cfg.output_dim;
        let mut live = 0;
        for row in self.projection.chunks_exact(d) {
            if let Some(j) = row[live..].iter().rposition(|&x| x != 0.0) {
                live += j + 1;
            }
        }
        if let Some(j) = self.bias[live..].iter().rposition(|&x| x != 0.0) {
            live += j + 1;
        }
        live
    }

    /// Forward pass computing only the first `live` outputs, which must be at
    /// least `live_outputs()`.
    pub(crate) fn forward_bag(
        &self,
        bag: &[(usize, u32)],
        dropout: Option<&mut ChaCha8Rng>,
        live: usize,
    ) -> Result<Forward> {
        if bag.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        let e = self.cfg.embed_dim;
        let d = self.cfg.output_dim;
        let n_tokens: usize = bag.iter().map(|b| b.1 as usize).sum();
        let mut hidden = vec![0.0; e];
        for &(b, count) in bag {
            let row = &self.token_table[b * e..(b + 1) * e];
            let w = f64::from(count);
            for (h, r) in hidden.iter_mut().zip(row) {
                *h += w * r;
            }
        }
        let inv = 1.0 / n_tokens as f64;
        hidden.iter_mut().for_each(|h| *h *= inv);
        let mask = match dropout {
            Some(rng) if self.cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - self.cfg.dropout_rate;
                let m: Vec<f64> = (0..e)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                hidden.iter_mut().zip(&m).for_each(|(h, k)| *h *= k);
                Some(m)
            }
            _ => None,
        };
        let mut output = self.bias[..live].to_vec();
        for (i, &h) in hidden.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &self.projection[i * d..i * d + live];
            for (o, p) in output.iter_mut().zip(row) {
                *o += h * p;
            }
        }
        Ok(Forward {
            n_tokens,
            hidden,
            mask,
            output,
        })
    }

    /// Embedding with seeded dropout applied to the pooled features.
    pub fn embed_train(&self, text: &str, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.forward(text, Some(rng))?.output)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.cfg.vocab_hash_dim, self.cfg.embed_dim, self.cfg.output_dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.cfg.dropout_rate.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for xs in [&self.token_table, &self.projection, &self.bias] {
            for x in xs.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an encoder model file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let cfg = EncoderConfig {
            vocab_hash_dim: r.u64()? as usize,
            embed_dim: r.u64()? as usize,
            output_dim: r.u64()? as usize,
            dropout_rate: r.f64()?,
        };
        cfg.validate()?;
        let seed = r.u64()?;
        let token_table = r.f64s(cfg.vocab_hash_dim * cfg.embed_dim)?;
        let projection = r.f64s(cfg.embed_dim * cfg.output_dim)?;
        let bias = r.f64s(cfg.output_dim)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in model file".into()));
        }
        Ok(EncoderModel {
            cfg,
            seed,
            token_table,
            projection,
            bias,
        })
    }

    /// SHA-256 of the serialized parameters, hex encoded.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn param(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::TokenTable => &self.token_table,
            ParamGroup::Projection => &self.projection,
            ParamGroup::Bias => &self.bias,
        }
    }

    pub fn param_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::TokenTable => &mut self.token_table,
            ParamGroup::Projection => &mut self.projection,
            ParamGroup::Bias => &mut self.bias,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.token_table
            .iter()
            .chain(&self.projection)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }
}

impl Encoder for EncoderModel {
    fn dim(&self) -> usize {
        self.cfg.output_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.forward(text, None)?.output)
    }
}
