//! Image to latent maps and back, with the round-trip reconstruction ceiling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{psnr, PSNR_CAP_DB};
use crate::nn::{load_params, save_params, Conv};
use crate::optim::{Adam, GradBuffer};
use crate::tensor::{ImageTensor, LatentTensor};

/// Latent channels produced by the trained autoencoder.
pub const AE_LATENT_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecMode {
    SpaceToDepth { block: usize },
    Identity,
    TrainedAutoencoder { hidden: usize },
}

impl Default for CodecMode {
    fn default() -> Self {
        CodecMode::SpaceToDepth { block: 2 }
    }
}

/// Affine standardisation `z = (raw - shift) * scale`.
///
/// The shift is a multiple of 1/1024 and the scale a power of two, so the
/// map and its inverse are exact in double precision for any image whose
/// nonzero intensities exceed 2^-20 (every 8-bit image qualifies).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub shift: f64,
    pub scale: f64,
}

impl Default for LatentStats {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl LatentStats {
    /// Rounds the sample mean and inverse standard deviation to the
    /// nearest representable shift and power-of-two scale.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("cannot fit latent statistics to no samples".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let shift = (mean * 1024.0).round() / 1024.0;
        let scale = if var > 0.0 {
            2f64.powi((-0.5 * var.log2()).round() as i32)
        } else {
            1.0
        };
        Ok(Self { shift, scale })
    }

    fn forward(&self, raw: f64) -> f64 {
        (raw - self.shift) * self.scale
    }

    fn inverse(&self, z: f64) -> f64 {
        z / self.scale + self.shift
    }
}

#[derive(Clone, Debug)]
struct Autoencoder {
    params: ParamSet,
    enc_a: Conv,
    enc_b: Conv,
    dec_a: Conv,
    dec_b: Conv,
}

impl Autoencoder {
    fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let p = &mut params;
        let enc_a = Conv::new(p, "enc.conv_a", (channels, hidden), 3, 2, 1.0, rng);
        let enc_b = Conv::new(p, "enc.conv_b", (hidden, AE_LATENT_CHANNELS), 3, 1, 1.0, rng);
        let dec_a = Conv::new(p, "dec.conv_a", (AE_LATENT_CHANNELS, hidden), 3, 1, 1.0, rng);
        let dec_b = Conv::new(p, "dec.conv_b", (hidden, channels), 3, 1, 1.0, rng);
        Self {
            params,
            enc_a,
            enc_b,
            dec_a,
            dec_b,
        }
    }

    fn encode_var<'p>(&'p self, t: &mut Tape<'p>, x: crate::autodiff::Var, h: usize, w: usize) -> crate::autodiff::Var {
        let ps = &self.params;
        let a = self.enc_a.forward(t, ps, x, h, w);
        let a = t.silu(a);
        self.enc_b.forward(t, ps, a, h / 2, w / 2)
    }

    fn decode_var<'p>(&'p self, t: &mut Tape<'p>, z: crate::autodiff::Var, h: usize, w: usize) -> crate::autodiff::Var {
        let ps = &self.params;
        let u = t.upsample2x(z, h / 2, w / 2);
        let a = self.dec_a.forward(t, ps, u, h, w);
        let a = t.silu(a);
        let b = self.dec_b.forward(t, ps, a, h, w);
        t.sigmoid(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderTrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
}

impl Default for AutoencoderTrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 8,
            learning_rate: 3e-3,
            hidden: 16,
        }
    }
}

/// Encoder/decoder pair for a fixed image shape. Immutable once built.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    mode: CodecMode,
    image_shape: (usize, usize, usize),
    stats: LatentStats,
    autoencoder: Option<Autoencoder>,
}

#[derive(Serialize, Deserialize)]
struct CodecManifest {
    mode: CodecMode,
    image_shape: (usize, usize, usize),
    stats: LatentStats,
}

impl LatentCodec {
    pub fn space_to_depth(image_shape: (usize, usize, usize), block: usize) -> Result<Self> {
        let (_, h, w) = image_shape;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::Config(format!(
                "space-to-depth block {block} does not tile a {h}x{w} image"
            )));
        }
        Ok(Self {
            mode: CodecMode::SpaceToDepth { block },
            image_shape,
            stats: LatentStats::default(),
            autoencoder: None,
        })
    }

    pub fn identity(image_shape: (usize, usize, usize)) -> Self {
        Self {
            mode: CodecMode::Identity,
            image_shape,
            stats: LatentStats::default(),
            autoencoder: None,
        }
    }

    /// Fits a two-layer convolutional autoencoder by pixel MSE.
    pub fn train_autoencoder(images: &[ImageTensor], opts: &AutoencoderTrainOptions) -> Result<(Self, Vec<f64>)> {
        let first = images
            .first()
            .ok_or_else(|| Error::Usage("autoencoder training needs at least one image".into()))?;
        let image_shape = first.shape();
        let (c, h, w) = image_shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("autoencoder needs even image sides, got {h}x{w}")));
        }
        if opts.batch_size == 0 || opts.hidden == 0 {
            return Err(Error::Config("batch size and hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut ae = Autoencoder::new(c, opts.hidden, &mut rng);
        let targets: Vec<Matrix> = images
            .iter()
            .map(|img| {
                if img.shape() != image_shape {
                    return Err(Error::Shape(format!("image {:?} vs {:?}", img.shape(), image_shape)));
                }
                Ok(image_matrix(img))
            })
            .collect::<Result<_>>()?;
        let mut adam = Adam::new(&ae.params, opts.learning_rate);
        let mut grads = GradBuffer::zeros_like(&ae.params);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut trace = Vec::new();
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(opts.batch_size) {
                grads.clear();
                for &i in batch {
                    let mut t = Tape::training();
                    let x = t.constant(targets[i].clone());
                    let z = ae.encode_var(&mut t, x, h, w);
                    let y = ae.decode_var(&mut t, z, h, w);
                    let loss = t.mse_loss(y, targets[i].clone());
                    let value = t.value(loss).get(0, 0);
                    if !value.is_finite() {
                        return Err(Error::numeric(format!("autoencoder loss diverged in epoch {epoch}")));
                    }
                    epoch_loss += value;
                    grads.accumulate(&t.backward(loss), 1.0 / batch.len() as f64);
                }
                adam.step(&mut ae.params, &grads, Some(1.0));
            }
            trace.push(epoch_loss / images.len() as f64);
        }
        let mut codec = Self {
            mode: CodecMode::TrainedAutoencoder { hidden: opts.hidden },
            image_shape,
            stats: LatentStats::default(),
            autoencoder: Some(ae),
        };
        codec.fit_stats(images)?;
        Ok((codec, trace))
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn stats(&self) -> LatentStats {
        self.stats
    }

    pub fn with_stats(mut self, stats: LatentStats) -> Self {
        self.stats = stats;
        self
    }

    /// Replaces the stored statistics with ones fitted to `images`.
    pub fn fit_stats(&mut self, images: &[ImageTensor]) -> Result<LatentStats> {
        self.stats = LatentStats::default();
        let mut raw = Vec::new();
        for img in images {
            raw.extend(self.encode(img)?.into_vec());
        }
        self.stats = LatentStats::from_samples(&raw)?;
        Ok(self.stats)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.image_shape;
        match self.mode {
            CodecMode::SpaceToDepth { block } => (c * block * block, h / block, w / block),
            CodecMode::Identity => (c, h, w),
            CodecMode::TrainedAutoencoder { .. } => (AE_LATENT_CHANNELS, h / 2, w / 2),
        }
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        if image.shape() != self.image_shape {
            return Err(Error::Config(format!(
                "codec expects images of shape {:?}, got {:?}",
                self.image_shape,
                image.shape()
            )));
        }
        let (c, h, w) = self.image_shape;
        let raw: Vec<f64> = match self.mode {
            CodecMode::Identity => image.as_slice().iter().map(|&v| v as f64).collect(),
            CodecMode::SpaceToDepth { block } => {
                let (lc, lh, lw) = self.latent_shape();
                let mut out = vec![0.0; lc * lh * lw];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let oc = (ch * block + y % block) * block + x % block;
                            out[(oc * lh + y / block) * lw + x / block] = image.get(ch, y, x) as f64;
                        }
                    }
                }
                out
            }
            CodecMode::TrainedAutoencoder { .. } => {
                let ae = self.autoencoder.as_ref().expect("trained mode carries weights");
                let mut t = Tape::inference();
                let x = t.constant(image_matrix(image));
                let z = ae.encode_var(&mut t, x, h, w);
                t.value(z).as_slice().to_vec()
            }
        };
        let z = raw.into_iter().map(|v| self.stats.forward(v)).collect();
        LatentTensor::from_vec(self.latent_shape(), z)
    }

    /// Inverse of [`encode`](Self::encode); intensities are clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        if latent.shape() != self.latent_shape() {
            return Err(Error::Shape(format!(
                "codec expects latents of shape {:?}, got {:?}",
                self.latent_shape(),
                latent.shape()
            )));
        }
        if !latent.is_finite() {
            return Err(Error::numeric("cannot decode a non-finite latent"));
        }
        let (c, h, w) = self.image_shape;
        let raw: Vec<f64> = latent.as_slice().iter().map(|&z| self.stats.inverse(z)).collect();
        let pixels: Vec<f64> = match self.mode {
            CodecMode::Identity => raw,
            CodecMode::SpaceToDepth { block } => {
                let (_, lh, lw) = self.latent_shape();
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let oc = (ch * block + y % block) * block + x % block;
                            out[(ch * h + y) * w + x] = raw[(oc * lh + y / block) * lw + x / block];
                        }
                    }
                }
                out
            }
            CodecMode::TrainedAutoencoder { .. } => {
                let ae = self.autoencoder.as_ref().expect("trained mode carries weights");
                let (lc, lh, lw) = self.latent_shape();
                let mut t = Tape::inference();
                let z = t.constant(Matrix::from_vec(lc, lh * lw, raw)?);
                let y = ae.decode_var(&mut t, z, h, w);
                t.value(y).as_slice().to_vec()
            }
        };
        ImageTensor::from_vec(
            self.image_shape,
            pixels.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        )
    }

    /// PSNR of `decode(encode(x))` against `x` over a set of images.
    pub fn roundtrip_psnr(&self, images: &[ImageTensor]) -> Result<RoundtripStats> {
        if images.is_empty() {
            return Err(Error::Usage("round-trip PSNR needs at least one image".into()));
        }
        let per_image = images
            .iter()
            .map(|img| psnr(img, &self.decode(&self.encode(img)?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundtripStats::from_values(per_image))
    }

    /// Writes `codec.json` plus the autoencoder weights when present.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = CodecManifest {
            mode: self.mode,
            image_shape: self.image_shape,
            stats: self.stats,
        };
        let path = dir.join("codec.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        if let Some(ae) = &self.autoencoder {
            save_params(dir.join("weights"), &ae.params)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("codec.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: CodecManifest = serde_json::from_slice(&bytes)?;
        let codec = match m.mode {
            CodecMode::Identity => Self::identity(m.image_shape),
            CodecMode::SpaceToDepth { block } => Self::space_to_depth(m.image_shape, block)?,
            CodecMode::TrainedAutoencoder { hidden } => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ae = Autoencoder::new(m.image_shape.0, hidden, &mut rng);
                load_params(dir.join("weights"), &mut ae.params)?;
                Self {
                    mode: m.mode,
                    image_shape: m.image_shape,
                    stats: LatentStats::default(),
                    autoencoder: Some(ae),
                }
            }
        };
        Ok(codec.with_stats(m.stats))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundtripStats {
    pub mean_db: f64,
    pub min_db: f64,
    pub per_image_db: Vec<f64>,
    pub cap_db: f64,
}

impl RoundtripStats {
    fn from_values(per_image_db: Vec<f64>) -> Self {
        let mean_db = per_image_db.iter().sum::<f64>() / per_image_db.len() as f64;
        let min_db = per_image_db.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            mean_db,
            min_db,
            per_image_db,
            cap_db: PSNR_CAP_DB,
        }
    }
}

fn image_matrix(img: &ImageTensor) -> Matrix {
    let (c, h, w) = img.shape();
    Matrix::from_vec(c, h * w, img.as_slice().iter().map(|&v| v as f64).collect()).expect("image shape is consistent")
}
