//! ToyCodec: a small patch autoencoder mapping 32×32×3 images to an
//! 8×8×C latent and back. Trained once, then frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::render::{Image, CANVAS};
use super::ToyError;
use crate::io::{FormatError, Reader, Writer};
use crate::nn::{patchify, unpatchify, Linear, TokenRole};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Bindings, Graph, Init, ParamStore, Result as TResult, Tensor, TensorError, Var};

pub const DOWNSAMPLE: usize = 4;
pub const LATENT_SIDE: usize = CANVAS / DOWNSAMPLE;
pub const LATENT_CHANNELS: usize = 4;

const CELLS: usize = LATENT_SIDE * LATENT_SIDE;
/// Encoder receptive field: an 8×8 window centred on each 4×4 cell.
const WINDOW: usize = 2 * DOWNSAMPLE;
const WINDOW_DIM: usize = WINDOW * WINDOW * 3;
const CELL_DIM: usize = DOWNSAMPLE * DOWNSAMPLE * 3;
const HIDDEN: usize = 128;

const MAGIC: &[u8; 8] = b"XMDPTCD1";
const VERSION: u32 = 1;
static FIXTURE: &[u8] = include_bytes!("../../fixtures/codec.bin");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 10_000, batch: 16, lr: 3e-3, seed: 7 }
    }
}

#[derive(Clone, Debug)]
pub struct ToyCodec {
    store: ParamStore<f32>,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    dec3: Linear,
    /// Per-channel statistics that bring latents to zero mean, unit variance.
    shift: Vec<f32>,
    scale: Vec<f32>,
}

fn check_image(img: &Image) -> Result<(), TensorError> {
    if img.shape() != [CANVAS, CANVAS, 3] {
        return Err(TensorError::Shape { op: "codec.encode", lhs: img.shape().to_vec(), rhs: vec![CANVAS, CANVAS, 3] });
    }
    Ok(())
}

/// Overlapping encoder windows, edge-clamped: `[B·64, 192]`.
fn windows(images: &[&Image]) -> Tensor<f32> {
    let pad = (WINDOW - DOWNSAMPLE) / 2;
    let mut out = Vec::with_capacity(images.len() * CELLS * WINDOW_DIM);
    for img in images {
        let d = img.data();
        for ci in 0..LATENT_SIDE {
            for cj in 0..LATENT_SIDE {
                for wi in 0..WINDOW {
                    let y = (ci * DOWNSAMPLE + wi).saturating_sub(pad).min(CANVAS - 1);
                    for wj in 0..WINDOW {
                        let x = (cj * DOWNSAMPLE + wj).saturating_sub(pad).min(CANVAS - 1);
                        out.extend(d[(y * CANVAS + x) * 3..(y * CANVAS + x) * 3 + 3].iter().map(|&v| 2.0 * v - 1.0));
                    }
                }
            }
        }
    }
    Tensor::new([images.len() * CELLS, WINDOW_DIM], out).expect("window buffer")
}

/// For each cell, the row indices of its 3×3 latent neighbourhood; cells
/// off the grid point at the zero row `batch·64`.
fn neighbour_index(batch: usize) -> Vec<usize> {
    let zero = batch * CELLS;
    let mut idx = Vec::with_capacity(batch * CELLS * 9);
    for b in 0..batch {
        for i in 0..LATENT_SIDE as isize {
            for j in 0..LATENT_SIDE as isize {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (ni, nj) = (i + di, j + dj);
                        let inside = (0..LATENT_SIDE as isize).contains(&ni) && (0..LATENT_SIDE as isize).contains(&nj);
                        idx.push(if inside { b * CELLS + (ni as usize) * LATENT_SIDE + nj as usize } else { zero });
                    }
                }
            }
        }
    }
    idx
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl ToyCodec {
    /// Untrained codec with seeded random weights.
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        let c = LATENT_CHANNELS;
        Self {
            enc1: Linear::new(&mut store, "enc1", WINDOW_DIM, HIDDEN, Init::XavierUniform, true),
            enc2: Linear::new(&mut store, "enc2", HIDDEN, c, Init::XavierUniform, true),
            dec1: Linear::new(&mut store, "dec1", 9 * c, HIDDEN, Init::XavierUniform, true),
            dec2: Linear::new(&mut store, "dec2", HIDDEN, HIDDEN, Init::XavierUniform, true),
            dec3: Linear::new(&mut store, "dec3", HIDDEN, CELL_DIM, Init::XavierUniform, true),
            store,
            shift: vec![0.0; c],
            scale: vec![1.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        LATENT_CHANNELS
    }

    fn encode_raw<'g>(&self, p: &Bindings<'g, '_, f32>, images: &[&Image]) -> TResult<Var<'g, f32>> {
        let x = p.graph().constant(windows(images));
        let h = self.enc1.forward(p, x)?.gelu();
        self.enc2.forward(p, h)
    }

    /// `[B·64, C]` raw latents → `[B·64, 48]` pixel cells.
    fn decode_raw<'g>(&self, p: &Bindings<'g, '_, f32>, z: Var<'g, f32>, batch: usize) -> TResult<Var<'g, f32>> {
        let c = LATENT_CHANNELS;
        let zero = p.graph().constant(Tensor::zeros([1, c]));
        let padded = p.graph().concat_rows(&[z, zero])?;
        let ctx = padded.gather_rows(&neighbour_index(batch))?.reshape([batch * CELLS, 9 * c])?;
        let h = self.dec1.forward(p, ctx)?.gelu();
        let h = self.dec2.forward(p, h)?.gelu();
        self.dec3.forward(p, h)
    }

    fn cell_targets(images: &[&Image]) -> Tensor<f32> {
        let mut out = Vec::with_capacity(images.len() * CELLS * CELL_DIM);
        for img in images {
            out.extend(patchify(img, DOWNSAMPLE, TokenRole::Source).expect("canvas divides").into_tokens().into_data());
        }
        Tensor::new([images.len() * CELLS, CELL_DIM], out).expect("cell buffer")
    }

    /// Trains encoder and decoder jointly on pixel MSE, then fixes the
    /// latent normalization from the training images.
    pub fn train(images: &[Image], cfg: &CodecTrainConfig) -> Result<Self, ToyError> {
        if images.is_empty() {
            return Err(ToyError::Invalid("codec training needs at least one image".into()));
        }
        for img in images {
            check_image(img)?;
        }
        let mut codec = Self::new(cfg.seed);
        let mut opt = Adam::new(&codec.store, AdamConfig { lr: cfg.lr, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        for step in 0..cfg.steps {
            // linear decay over the last 30% of steps
            let tail = (step as f64 / cfg.steps as f64 - 0.7).max(0.0) / 0.3;
            opt.config.lr = cfg.lr * (1.0 - 0.9 * tail);
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch.min(images.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&images[order[cursor]]);
                cursor += 1;
            }
            let g = Graph::new();
            let p = Bindings::new(&g, &codec.store);
            let z = codec.encode_raw(&p, &batch)?;
            let out = codec.decode_raw(&p, z, batch.len())?;
            let diff = out.sub(g.constant(Self::cell_targets(&batch)))?;
            let loss = diff.mul(diff)?.mean();
            g.backward(loss)?;
            let grads = p.grads();
            drop(p);
            opt.step(&mut codec.store, &grads);
        }
        codec.fit_normalization(images)?;
        Ok(codec)
    }

    fn fit_normalization(&mut self, images: &[Image]) -> TResult<()> {
        let c = LATENT_CHANNELS;
        let (mut sum, mut sq, mut n) = (vec![0f64; c], vec![0f64; c], 0usize);
        for chunk in images.chunks(64) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let g = Graph::inference();
            let p = Bindings::new(&g, &self.store);
            let z = self.encode_raw(&p, &refs)?.value();
            for row in z.data().chunks(c) {
                for k in 0..c {
                    sum[k] += row[k] as f64;
                    sq[k] += (row[k] as f64).powi(2);
                }
                n += 1;
            }
        }
        for k in 0..c {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(1e-12);
            self.shift[k] = mean as f32;
            self.scale[k] = var.sqrt() as f32;
        }
        Ok(())
    }

    /// Image → normalized `[8, 8, C]` latent.
    pub fn encode(&self, img: &Image) -> TResult<Tensor<f32>> {
        Ok(self.encode_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Image]) -> TResult<Vec<Tensor<f32>>> {
        for img in images {
            check_image(img)?;
        }
        let c = LATENT_CHANNELS;
        let refs: Vec<&Image> = images.iter().collect();
        let g = Graph::inference();
        let p = Bindings::new(&g, &self.store);
        let z = self.encode_raw(&p, &refs)?.value();
        Ok(z
            .data()
            .chunks(CELLS * c)
            .map(|chunk| {
                let data = chunk.iter().enumerate().map(|(i, &v)| (v - self.shift[i % c]) / self.scale[i % c]).collect();
                Tensor::new([LATENT_SIDE, LATENT_SIDE, c], data).expect("latent buffer")
            })
            .collect())
    }

    /// Normalized latent → image, clamped to `[0, 1]` and quantized to 1/255.
    pub fn decode(&self, latent: &Tensor<f32>) -> TResult<Image> {
        Ok(self.decode_batch(std::slice::from_ref(latent))?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[Tensor<f32>]) -> TResult<Vec<Image>> {
        let c = LATENT_CHANNELS;
        let mut raw = Vec::with_capacity(latents.len() * CELLS * c);
        for z in latents {
            if z.shape() != [LATENT_SIDE, LATENT_SIDE, c] {
                return Err(TensorError::Shape { op: "codec.decode", lhs: z.shape().to_vec(), rhs: vec![LATENT_SIDE, LATENT_SIDE, c] });
            }
            raw.extend(z.data().iter().enumerate().map(|(i, &v)| v * self.scale[i % c] + self.shift[i % c]));
        }
        let g = Graph::inference();
        let p = Bindings::new(&g, &self.store);
        let z = g.constant(Tensor::new([latents.len() * CELLS, c], raw)?);
        let cells = self.decode_raw(&p, z, latents.len())?.value();
        cells
            .data()
            .chunks(CELLS * CELL_DIM)
            .map(|chunk| {
                let t = Tensor::new([CELLS, CELL_DIM], chunk.iter().map(|&v| quantize(v)).collect())?;
                unpatchify(&t, DOWNSAMPLE, CANVAS, CANVAS, 3)
            })
            .collect()
    }

    /// The codec shipped with the crate: [`ToyCodec::train`] with the
    /// default [`CodecTrainConfig`] on the training-split person images of
    /// the default corpus. `cargo run --release --example train_codec`
    /// rebuilds it.
    pub fn fixture() -> Self {
        Self::from_bytes(FIXTURE).expect("bundled codec fixture is valid")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(LATENT_CHANNELS as u32);
        let shift = Tensor::new([LATENT_CHANNELS], self.shift.clone()).expect("channel vector");
        let scale = Tensor::new([LATENT_CHANNELS], self.scale.clone()).expect("channel vector");
        let params = self.store.ids().map(|id| (self.store.name(id), self.store.get(id)));
        w.tensor_table(params.chain([("latent.shift", &shift), ("latent.scale", &scale)]));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::Version { found: version, supported: VERSION });
        }
        let channels = r.u32("channels")? as usize;
        if channels != LATENT_CHANNELS {
            return Err(FormatError::Invalid(format!("codec has {channels} latent channels, this build uses {LATENT_CHANNELS}")));
        }
        let mut codec = Self::new(0);
        for (name, t) in r.tensor_table()? {
            match name.as_str() {
                "latent.shift" => codec.shift = t.into_data(),
                "latent.scale" => codec.scale = t.into_data(),
                _ => {
                    let id = codec.store.find(&name).ok_or_else(|| FormatError::Invalid(format!("unknown codec tensor {name:?}")))?;
                    if codec.store.shape(id) != t.shape() {
                        return Err(FormatError::Invalid(format!("codec tensor {name:?} has shape {:?}", t.shape())));
                    }
                    codec.store.set(id, t);
                }
            }
        }
        Ok(codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_shape_is_eight_by_eight_by_channels() {
        let codec = ToyCodec::new(1);
        let z = codec.encode(&Tensor::full([CANVAS, CANVAS, 3], 0.5)).unwrap();
        assert_eq!(z.shape(), &[8, 8, LATENT_CHANNELS]);
        assert_eq!(codec.decode(&z).unwrap().shape(), &[CANVAS, CANVAS, 3]);
        assert!(codec.encode(&Tensor::zeros([16, 16, 3])).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_batch_consistent() {
        let codec = ToyCodec::new(2);
        let a = Tensor::from_fn([CANVAS, CANVAS, 3], |i| ((i * 37) % 255) as f32 / 255.0);
        let b = Tensor::from_fn([CANVAS, CANVAS, 3], |i| ((i * 11) % 255) as f32 / 255.0);
        assert_eq!(codec.encode(&a).unwrap(), codec.encode(&a).unwrap());
        let both = codec.encode_batch(&[a.clone(), b]).unwrap();
        assert_eq!(both[0], codec.encode(&a).unwrap());
    }

    #[test]
    fn bytes_round_trip() {
        let codec = ToyCodec::new(3);
        let back = ToyCodec::from_bytes(&codec.to_bytes()).unwrap();
        let img = Tensor::full([CANVAS, CANVAS, 3], 0.25);
        assert_eq!(codec.encode(&img).unwrap(), back.encode(&img).unwrap());
        let mut bytes = codec.to_bytes();
        bytes[8] = 9;
        assert!(matches!(ToyCodec::from_bytes(&bytes), Err(FormatError::Version { .. })));
    }
}
