//! Training checkpoints: weights, EMA shadow, optimizer moments, RNG
//! position and step counter in one versioned file.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::io::{FormatError, Reader, Writer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XMDPTCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub type TensorTable = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical run configuration text.
    pub config: String,
    pub params: TensorTable,
    pub ema: TensorTable,
    pub adam_first: TensorTable,
    pub adam_second: TensorTable,
    pub adam_steps: u64,
    pub rng: RngState,
    pub step: u64,
}

fn refs(t: &TensorTable) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
    t.iter().map(|(n, v)| (n.as_str(), v))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.blob(self.config.as_bytes());
        w.tensor_table(refs(&self.params));
        w.tensor_table(refs(&self.ema));
        w.tensor_table(refs(&self.adam_first));
        w.tensor_table(refs(&self.adam_second));
        w.u64(self.adam_steps);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u64(self.step);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::Version { found: version, supported: VERSION });
        }
        let config = String::from_utf8(r.blob("config")?.to_vec())
            .map_err(|_| FormatError::Invalid("config is not UTF-8".into()))?;
        let params = r.tensor_table()?;
        let ema = r.tensor_table()?;
        let adam_first = r.tensor_table()?;
        let adam_second = r.tensor_table()?;
        let adam_steps = r.u64("adam steps")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let step = r.u64("step")?;
        if !r.is_done() {
            return Err(FormatError::Invalid("trailing bytes after checkpoint".into()));
        }
        for table in [&ema, &adam_first, &adam_second] {
            if table.len() != params.len() {
                return Err(FormatError::Invalid("tensor tables differ in length".into()));
            }
        }
        Ok(Self {
            config,
            params,
            ema,
            adam_first,
            adam_second,
            adam_steps,
            rng: RngState { seed, stream, word_pos },
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Ok(Self::from_bytes(&buf)?)
    }
}
