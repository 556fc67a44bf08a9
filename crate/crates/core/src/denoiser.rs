//! The noise predictor: a small U-Net with hookable attention, classifier-free
//! guidance, an analytic Gaussian predictor, training and gradient checks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{mha_forward, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{load_params, save_params, Conv, GroupNorm, LayerNorm, Linear};
use crate::optim::{Adam, GradBuffer};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::LatentTensor;
use crate::vocab::{Prompt, PROMPT_LEN, VOCAB_SIZE, WORDS};

/// Self-attention layers in the toy network, in forward order.
pub const NUM_ATTENTION_LAYERS: usize = 8;

/// Binary edge map at image resolution that conditions the layout adapter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl LayoutMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} cells for a {height}x{width} layout", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            1,
            self.height * self.width,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("layout shape is consistent")
    }
}

/// Scaled dot-product attention, `softmax(Q Kᵀ / √d) V` per head with the
/// head outputs concatenated along the feature axis.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    if heads == 0 || !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "{heads} heads cannot split query width {} and value width {}",
            q.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::Shape(format!("{} keys against {} values", k.rows(), v.rows())));
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!("query width {} vs key width {}", q.cols(), k.cols())));
    }
    Ok(mha_forward(q, k, v, heads).0)
}

/// `eps_uncond + w (eps_cond - eps_uncond)`, evaluated as
/// `eps_cond + (w - 1)(eps_cond - eps_uncond)` so `w = 1` is exact.
pub fn cfg_combine(eps_uncond: &LatentTensor, eps_cond: &LatentTensor, w: f64) -> Result<LatentTensor> {
    eps_uncond.check_same(eps_cond)?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Usage(format!("guidance scale must be finite and non-negative, got {w}")));
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_cond.zip(eps_uncond, |c, u| c + (w - 1.0) * (c - u)))
}

/// Where a forward pass is on the sampling grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Inference index `t`.
    pub t_index: usize,
    /// Training index `τ[t]` fed to the timestep embedding.
    pub timestep: usize,
    pub alpha_bar: f64,
}

impl StepInfo {
    pub fn at(schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        Ok(Self {
            t_index: t,
            timestep: schedule.timestep(t)?,
            alpha_bar: schedule.alpha_bar_at(t)?,
        })
    }
}

/// A self-attention layer as seen by hooks and controllers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
}

impl LayerInfo {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Intercepts attention inside a forward pass.
pub trait AttentionHook {
    /// Sees the projected `Q, K, V` of a self-attention layer. Returning a
    /// matrix replaces the attention output before the output projection.
    fn self_attention(&mut self, _layer: &LayerInfo, _q: &Matrix, _k: &Matrix, _v: &Matrix) -> Result<Option<Matrix>> {
        Ok(None)
    }

    /// Post-softmax cross-attention probabilities `(positions, PROMPT_LEN)`,
    /// averaged over heads.
    fn cross_attention(&mut self, _layer: &LayerInfo, _probs: &Matrix) -> Result<()> {
        Ok(())
    }
}

/// Plain forward pass.
pub struct NoHook;

impl AttentionHook for NoHook {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Conditional,
    Unconditional,
    Inversion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFeatures {
    pub layer: usize,
    pub t_index: usize,
    pub branch: Branch,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionMap {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Matrix,
}

/// Records every feature an inner hook sees and forwards to it.
pub struct Capture<'a> {
    inner: &'a mut dyn AttentionHook,
    t_index: usize,
    branch: Branch,
    pub features: Vec<AttentionFeatures>,
    pub cross_maps: Vec<CrossAttentionMap>,
}

impl<'a> Capture<'a> {
    pub fn new(inner: &'a mut dyn AttentionHook, t_index: usize, branch: Branch) -> Self {
        Self {
            inner,
            t_index,
            branch,
            features: Vec::new(),
            cross_maps: Vec::new(),
        }
    }
}

impl AttentionHook for Capture<'_> {
    fn self_attention(&mut self, layer: &LayerInfo, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Option<Matrix>> {
        self.features.push(AttentionFeatures {
            layer: layer.index,
            t_index: self.t_index,
            branch: self.branch,
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
        });
        self.inner.self_attention(layer, q, k, v)
    }

    fn cross_attention(&mut self, layer: &LayerInfo, probs: &Matrix) -> Result<()> {
        self.cross_maps.push(CrossAttentionMap {
            layer: layer.index,
            height: layer.height,
            width: layer.width,
            probs: probs.clone(),
        });
        self.inner.cross_attention(layer, probs)
    }
}

/// Anything that predicts the noise in a latent.
pub trait NoisePredictor {
    fn latent_shape(&self) -> (usize, usize, usize);

    /// Self-attention layers in forward order; empty for attention-free predictors.
    fn roster(&self) -> &[LayerInfo];

    fn predict_noise(
        &self,
        z: &LatentTensor,
        step: &StepInfo,
        cond: &Prompt,
        layout: Option<&LayoutMap>,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentTensor>;

    /// Content hash used to tie caches to the weights that produced them.
    fn fingerprint(&self) -> String;

    /// Forward pass that also returns the captured attention features.
    fn predict_noise_captured(
        &self,
        z: &LatentTensor,
        step: &StepInfo,
        cond: &Prompt,
        layout: Option<&LayoutMap>,
        branch: Branch,
        hook: &mut dyn AttentionHook,
    ) -> Result<(LatentTensor, Vec<AttentionFeatures>, Vec<CrossAttentionMap>)> {
        let mut cap = Capture::new(hook, step.t_index, branch);
        let eps = self.predict_noise(z, step, cond, layout, &mut cap)?;
        Ok((eps, cap.features, cap.cross_maps))
    }
}

/// Exact noise predictor for a Gaussian latent prior `N(μ, s² I)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussian {
    mu: LatentTensor,
    s: f64,
}

impl AnalyticGaussian {
    pub fn new(mu: LatentTensor, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("prior scale must be positive, got {s}")));
        }
        Ok(Self { mu, s })
    }

    pub fn mu(&self) -> &LatentTensor {
        &self.mu
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Posterior mean of `z0` given `z`.
    pub fn denoised(&self, z: &LatentTensor, alpha_bar: f64) -> Result<LatentTensor> {
        z.check_same(&self.mu)?;
        let s2 = self.s * self.s;
        let d = (1.0 - alpha_bar) + alpha_bar * s2;
        let sa = alpha_bar.sqrt();
        Ok(z.zip(&self.mu, |z, m| (m * (1.0 - alpha_bar) + sa * s2 * z) / d))
    }
}

impl NoisePredictor for AnalyticGaussian {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.mu.shape()
    }

    fn roster(&self) -> &[LayerInfo] {
        &[]
    }

    fn predict_noise(
        &self,
        z: &LatentTensor,
        step: &StepInfo,
        _cond: &Prompt,
        _layout: Option<&LayoutMap>,
        _hook: &mut dyn AttentionHook,
    ) -> Result<LatentTensor> {
        z.check_same(&self.mu)?;
        let a = step.alpha_bar;
        let d = (1.0 - a) + a * self.s * self.s;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let eps = z.zip(&self.mu, |z, m| sn * (z - sa * m) / d);
        if !eps.is_finite() {
            return Err(Error::numeric("analytic prediction is not finite").at_step(step.t_index));
        }
        Ok(eps)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"analytic-gaussian");
        h.update(self.s.to_le_bytes());
        for m in self.mu.as_slice() {
            h.update(m.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Channel width at each of the three resolutions.
    pub widths: [usize; 3],
    pub heads: usize,
    pub groups: usize,
    pub text_width: usize,
    pub time_features: usize,
    /// Adds the layout adapter; its input is twice the latent resolution.
    pub layout_adapter: bool,
    /// Kernel side of the residual-block convolutions.
    pub res_kernel: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            widths: [32, 64, 128],
            heads: 4,
            groups: 8,
            text_width: 64,
            time_features: 32,
            layout_adapter: true,
            res_kernel: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.latent_size.is_multiple_of(4) || self.latent_size == 0 {
            return Err(Error::Config(format!(
                "latent size {} must be a positive multiple of 4",
                self.latent_size
            )));
        }
        for &w in &self.widths {
            if w == 0 || w % self.groups != 0 || w % self.heads != 0 {
                return Err(Error::Config(format!(
                    "width {w} must be divisible by {} groups and {} heads",
                    self.groups, self.heads
                )));
            }
        }
        if !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(Error::Config("time features must be a positive even count".into()));
        }
        if self.res_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("residual kernel {} must be odd", self.res_kernel)));
        }
        if self.latent_channels == 0 || self.text_width == 0 {
            return Err(Error::Config("latent channels and text width must be positive".into()));
        }
        Ok(())
    }

    pub fn layout_size(&self) -> usize {
        2 * self.latent_size
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let temb = cfg.text_width;
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv::new(ps, &format!("{name}.conv1"), (cin, cout), cfg.res_kernel, 1, 1.0, rng),
            time: Linear::new(ps, &format!("{name}.time"), temb, cout, true, 1.0, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv::new(ps, &format!("{name}.conv2"), (cout, cout), cfg.res_kernel, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), (cin, cout), 1, 1, 1.0, rng)),
        }
    }

    fn forward<'p>(&self, t: &mut Tape<'p>, ps: &'p ParamSet, x: Var, temb: Var, h: usize, w: usize) -> Var {
        let a = self.norm1.forward(t, ps, x);
        let a = t.silu(a);
        let a = self.conv1.forward(t, ps, a, h, w);
        let tb = self.time.forward(t, ps, temb);
        let tb = t.transpose(tb);
        let a = t.add_col_bias(a, tb);
        let a = self.norm2.forward(t, ps, a);
        let a = t.silu(a);
        let a = self.conv2.forward(t, ps, a, h, w);
        let s = match &self.skip {
            Some(c) => c.forward(t, ps, x, h, w),
            None => x,
        };
        t.add(s, a)
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    info: LayerInfo,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    xq: Linear,
    xk: Linear,
    xv: Linear,
    xout: Linear,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    fn new(ps: &mut ParamSet, info: LayerInfo, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = info.channels;
        let name = format!("attn{}", info.index);
        let lin = |ps: &mut ParamSet, part: &str, din: usize, dout: usize, bias: bool, gain: f64, rng: &mut ChaCha8Rng| {
            Linear::new(ps, &format!("{name}.{part}"), din, dout, bias, gain, rng)
        };
        Self {
            info,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c),
            q: lin(ps, "self.q", c, c, false, 1.0, rng),
            k: lin(ps, "self.k", c, c, false, 1.0, rng),
            v: lin(ps, "self.v", c, c, false, 1.0, rng),
            out: lin(ps, "self.out", c, c, true, 0.5, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c),
            xq: lin(ps, "cross.q", c, c, false, 1.0, rng),
            xk: lin(ps, "cross.k", cfg.text_width, c, false, 1.0, rng),
            xv: lin(ps, "cross.v", cfg.text_width, c, false, 1.0, rng),
            xout: lin(ps, "cross.out", c, c, true, 0.5, rng),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), c),
            ff1: lin(ps, "ff1", c, 2 * c, true, 1.0, rng),
            ff2: lin(ps, "ff2", 2 * c, c, true, 0.5, rng),
        }
    }

    /// `x` is a `(channels, positions)` feature map; `text` is `(PROMPT_LEN, text_width)`.
    fn forward<'p>(
        &self,
        t: &mut Tape<'p>,
        ps: &'p ParamSet,
        x: Var,
        text: Var,
        hook: &mut dyn AttentionHook,
    ) -> Result<Var> {
        let heads = self.info.heads;
        let tokens = t.transpose(x);

        let n = self.ln1.forward(t, ps, tokens);
        let q = self.q.forward(t, ps, n);
        let k = self.k.forward(t, ps, n);
        let v = self.v.forward(t, ps, n);
        let replaced = hook.self_attention(&self.info, t.value(q), t.value(k), t.value(v))?;
        let a = match replaced {
            Some(m) => {
                if m.shape() != t.value(q).shape() {
                    return Err(Error::Shape(format!(
                        "hook output {:?} at layer {} should be {:?}",
                        m.shape(),
                        self.info.index,
                        t.value(q).shape()
                    )));
                }
                t.constant(m)
            }
            None => t.attention(q, k, v, heads),
        };
        let a = self.out.forward(t, ps, a);
        let tokens = t.add(tokens, a);

        let n = self.ln2.forward(t, ps, tokens);
        let q = self.xq.forward(t, ps, n);
        let k = self.xk.forward(t, ps, text);
        let v = self.xv.forward(t, ps, text);
        let a = t.attention(q, k, v, heads);
        let probs = t.attention_probs(a).expect("attention node keeps probabilities");
        let mut avg = probs[0].clone();
        for p in &probs[1..] {
            avg.add_assign(p);
        }
        avg.scale_assign(1.0 / heads as f64);
        hook.cross_attention(&self.info, &avg)?;
        let a = self.xout.forward(t, ps, a);
        let tokens = t.add(tokens, a);

        let n = self.ln3.forward(t, ps, tokens);
        let f = self.ff1.forward(t, ps, n);
        let f = t.silu(f);
        let f = self.ff2.forward(t, ps, f);
        let tokens = t.add(tokens, f);

        let out = t.transpose(tokens);
        if !t.value(out).is_finite() {
            return Err(Error::Numeric {
                step: None,
                layer: Some(self.info.index),
                message: "non-finite activation".into(),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct LayoutAdapter {
    convs: [Conv; 3],
    zero: [Conv; 3],
}

#[derive(Clone, Debug)]
struct Modules {
    token_embedding: crate::autodiff::ParamId,
    position_embedding: crate::autodiff::ParamId,
    text_proj: Linear,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    enc: [ResBlock; 3],
    down: [Conv; 2],
    mid: [ResBlock; 2],
    dec: [ResBlock; 3],
    up: [Conv; 2],
    attn: Vec<TransformerBlock>,
    out_norm: GroupNorm,
    conv_out: Conv,
    adapter: Option<LayoutAdapter>,
}

/// Three-resolution U-Net with a transformer block after every residual
/// stage; eight self-attention layers, indexed in forward order.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    params: ParamSet,
    modules: Modules,
    roster: Vec<LayerInfo>,
    seed: u64,
    schedule: ScheduleConfig,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DenoiserConfig,
    vocabulary: Vec<String>,
    prompt_length: usize,
    schedule: ScheduleConfig,
    seed: u64,
    parameter_count: usize,
    fingerprint: String,
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [c0, c1, c2] = config.widths;
        let s = config.latent_size;
        let e = config.text_width;
        let r = &mut rng;

        let grids = [s, s / 2, s / 4, s / 4, s / 4, s / 2, s, s];
        let chans = [c0, c1, c2, c2, c2, c1, c0, c0];
        let roster: Vec<LayerInfo> = (0..NUM_ATTENTION_LAYERS)
            .map(|i| LayerInfo {
                index: i,
                height: grids[i],
                width: grids[i],
                channels: chans[i],
                heads: config.heads,
            })
            .collect();

        let normal = |rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng| {
            Matrix::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal))
        };
        let token_embedding = ps.add("text.token_embedding", normal(VOCAB_SIZE, e, 1.0, r));
        let position_embedding = ps.add("text.position_embedding", normal(PROMPT_LEN, e, 0.3, r));
        let text_proj = Linear::new(&mut ps, "text.proj", e, e, true, 1.0, r);
        let time1 = Linear::new(&mut ps, "time.fc1", config.time_features, e, true, 1.0, r);
        let time2 = Linear::new(&mut ps, "time.fc2", e, e, true, 1.0, r);
        let conv_in = Conv::new(&mut ps, "conv_in", (config.latent_channels, c0), 3, 1, 1.0, r);

        let enc = [
            ResBlock::new(&mut ps, "enc0", c0, c0, &config, r),
            ResBlock::new(&mut ps, "enc1", c0, c1, &config, r),
            ResBlock::new(&mut ps, "enc2", c1, c2, &config, r),
        ];
        let down = [
            Conv::new(&mut ps, "down0", (c0, c0), 3, 2, 1.0, r),
            Conv::new(&mut ps, "down1", (c1, c1), 3, 2, 1.0, r),
        ];
        let mid = [
            ResBlock::new(&mut ps, "mid0", c2, c2, &config, r),
            ResBlock::new(&mut ps, "mid1", c2, c2, &config, r),
        ];
        let dec = [
            ResBlock::new(&mut ps, "dec2", 2 * c2, c2, &config, r),
            ResBlock::new(&mut ps, "dec1", 2 * c1, c1, &config, r),
            ResBlock::new(&mut ps, "dec0", 2 * c0, c0, &config, r),
        ];
        let up = [
            Conv::new(&mut ps, "up2", (c2, c1), 3, 1, 1.0, r),
            Conv::new(&mut ps, "up1", (c1, c0), 3, 1, 1.0, r),
        ];
        let attn = roster
            .iter()
            .map(|info| TransformerBlock::new(&mut ps, *info, &config, r))
            .collect();
        let out_norm = GroupNorm::new(&mut ps, "out.norm", c0, config.groups);
        let conv_out = Conv::new(&mut ps, "out.conv", (c0, config.latent_channels), 3, 1, 0.3, r);

        let adapter = config.layout_adapter.then(|| {
            let a = 16;
            let convs = [
                Conv::new(&mut ps, "layout.conv0", (1, a), 3, 2, 1.0, r),
                Conv::new(&mut ps, "layout.conv1", (a, a), 3, 2, 1.0, r),
                Conv::new(&mut ps, "layout.conv2", (a, a), 3, 2, 1.0, r),
            ];
            let mut zero = [
                Conv::new(&mut ps, "layout.zero0", (a, c0), 1, 1, 1.0, r),
                Conv::new(&mut ps, "layout.zero1", (a, c1), 1, 1, 1.0, r),
                Conv::new(&mut ps, "layout.zero2", (a, c2), 1, 1, 1.0, r),
            ];
            for z in &mut zero {
                ps.get_mut(z.w).scale_assign(0.0);
            }
            LayoutAdapter { convs, zero }
        });

        Ok(Self {
            config,
            params: ps,
            modules: Modules {
                token_embedding,
                position_embedding,
                text_proj,
                time1,
                time2,
                conv_in,
                enc,
                down,
                mid,
                dec,
                up,
                attn,
                out_norm,
                conv_out,
                adapter,
            },
            roster,
            seed,
            schedule: ScheduleConfig::default(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Schedule recorded in the checkpoint manifest.
    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn set_schedule_config(&mut self, schedule: ScheduleConfig) {
        self.schedule = schedule;
    }

    fn time_features(&self, timestep: usize) -> Matrix {
        let half = self.config.time_features / 2;
        let tau = timestep as f64;
        Matrix::from_fn(1, 2 * half, |_, i| {
            let freq = (-(10000f64.ln()) * (i % half) as f64 / half as f64).exp();
            if i < half {
                (tau * freq).sin()
            } else {
                (tau * freq).cos()
            }
        })
    }

    /// Builds the forward graph for one latent and returns the prediction var.
    fn forward<'p>(
        &self,
        ps: &'p ParamSet,
        t: &mut Tape<'p>,
        z: Matrix,
        timestep: usize,
        cond: &Prompt,
        layout: Option<&LayoutMap>,
        hook: &mut dyn AttentionHook,
    ) -> Result<Var> {
        let m = &self.modules;
        let s = self.config.latent_size;
        let (s1, s2) = (s / 2, s / 4);

        let table = t.param(ps, m.token_embedding);
        let tok = t.gather_rows(table, cond.tokens());
        let pos = t.param(ps, m.position_embedding);
        let text = t.add(tok, pos);
        let text = m.text_proj.forward(t, ps, text);

        let tf = t.constant(self.time_features(timestep));
        let temb = m.time1.forward(t, ps, tf);
        let temb = t.silu(temb);
        let temb = m.time2.forward(t, ps, temb);
        let temb = t.silu(temb);

        let residuals = match (layout, &m.adapter) {
            (Some(map), Some(ad)) => {
                let ls = self.config.layout_size();
                if map.height() != ls || map.width() != ls {
                    return Err(Error::Config(format!(
                        "layout map is {}x{}, the adapter expects {ls}x{ls}",
                        map.height(),
                        map.width()
                    )));
                }
                let mut a = t.constant(map.to_matrix());
                let mut out = Vec::with_capacity(3);
                let mut side = ls;
                for (conv, zero) in ad.convs.iter().zip(&ad.zero) {
                    a = conv.forward(t, ps, a, side, side);
                    a = t.silu(a);
                    side /= 2;
                    out.push(zero.forward(t, ps, a, side, side));
                }
                Some(out)
            }
            (Some(_), None) => return Err(Error::Config("model has no layout adapter".into())),
            (None, _) => None,
        };
        let add_residual = |t: &mut Tape<'p>, x: Var, i: usize| match &residuals {
            Some(r) => t.add(x, r[i]),
            None => x,
        };

        let x = t.constant(z);
        let x = m.conv_in.forward(t, ps, x, s, s);
        let x = m.enc[0].forward(t, ps, x, temb, s, s);
        let x = m.attn[0].forward(t, ps, x, text, hook)?;
        let skip0 = add_residual(t, x, 0);

        let x = m.down[0].forward(t, ps, skip0, s, s);
        let x = m.enc[1].forward(t, ps, x, temb, s1, s1);
        let x = m.attn[1].forward(t, ps, x, text, hook)?;
        let skip1 = add_residual(t, x, 1);

        let x = m.down[1].forward(t, ps, skip1, s1, s1);
        let x = m.enc[2].forward(t, ps, x, temb, s2, s2);
        let x = m.attn[2].forward(t, ps, x, text, hook)?;
        let skip2 = add_residual(t, x, 2);

        let x = m.mid[0].forward(t, ps, skip2, temb, s2, s2);
        let x = m.attn[3].forward(t, ps, x, text, hook)?;
        let x = m.mid[1].forward(t, ps, x, temb, s2, s2);

        let x = t.concat_rows(x, skip2);
        let x = m.dec[0].forward(t, ps, x, temb, s2, s2);
        let x = m.attn[4].forward(t, ps, x, text, hook)?;
        let x = t.upsample2x(x, s2, s2);
        let x = m.up[0].forward(t, ps, x, s1, s1);

        let x = t.concat_rows(x, skip1);
        let x = m.dec[1].forward(t, ps, x, temb, s1, s1);
        let x = m.attn[5].forward(t, ps, x, text, hook)?;
        let x = t.upsample2x(x, s1, s1);
        let x = m.up[1].forward(t, ps, x, s, s);

        let x = t.concat_rows(x, skip0);
        let x = m.dec[2].forward(t, ps, x, temb, s, s);
        let x = m.attn[6].forward(t, ps, x, text, hook)?;
        let x = m.attn[7].forward(t, ps, x, text, hook)?;

        let x = m.out_norm.forward(t, ps, x);
        let x = t.silu(x);
        Ok(m.conv_out.forward(t, ps, x, s, s))
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(Error::Shape(format!(
                "model expects latents of shape {:?}, got {:?}",
                self.latent_shape(),
                z.shape()
            )));
        }
        Ok(())
    }

    /// Training loss for one example: `mean ‖ε_θ(z_t, τ, c) − ε‖²`.
    pub fn loss<'p>(
        &'p self,
        t: &mut Tape<'p>,
        z_t: &LatentTensor,
        timestep: usize,
        cond: &Prompt,
        layout: Option<&LayoutMap>,
        target: &LatentTensor,
    ) -> Result<Var> {
        self.loss_with(&self.params, t, z_t, timestep, cond, layout, target)
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_with<'p>(
        &self,
        ps: &'p ParamSet,
        t: &mut Tape<'p>,
        z_t: &LatentTensor,
        timestep: usize,
        cond: &Prompt,
        layout: Option<&LayoutMap>,
        target: &LatentTensor,
    ) -> Result<Var> {
        self.check_latent(z_t)?;
        let out = self.forward(ps, t, z_t.to_matrix(), timestep, cond, layout, &mut NoHook)?;
        Ok(t.mse_loss(out, target.to_matrix()))
    }

    /// Fits the model with the standard denoising objective.
    pub fn train(
        &mut self,
        data: &[TrainingExample],
        schedule: &NoiseSchedule,
        opts: &TrainOptions,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Usage("training needs at least one example".into()));
        }
        if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        for ex in data {
            self.check_latent(&ex.z0)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(&self.params, opts.learning_rate);
        let mut grads = GradBuffer::zeros_like(&self.params);
        let alpha_bar = schedule.alpha_bar().to_vec();
        let n_train = schedule.num_train_steps();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut report = TrainReport::default();
        let total_steps = opts.epochs * data.len().div_ceil(opts.batch_size);
        let mut step = 0usize;
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(opts.batch_size) {
                grads.clear();
                let mut batch_loss = 0.0;
                for &i in batch {
                    let ex = &data[i];
                    let tau = rng.random_range(1..=n_train);
                    let a = alpha_bar[tau];
                    let noise: Vec<f64> = (0..ex.z0.len()).map(|_| rng.sample(StandardNormal)).collect();
                    let noise = LatentTensor::from_vec(ex.z0.shape(), noise)?;
                    let z_t = ex.z0.zip(&noise, |z, e| a.sqrt() * z + (1.0 - a).sqrt() * e);
                    let cond = if rng.random_bool(opts.cond_drop) { Prompt::null() } else { ex.prompt.clone() };
                    let use_layout = ex.layout.is_some() && rng.random_bool(opts.layout_prob);
                    let layout = if use_layout { ex.layout.as_ref() } else { None };
                    let mut t = Tape::training();
                    let loss = self.loss(&mut t, &z_t, tau, &cond, layout, &noise)?;
                    let value = t.value(loss).get(0, 0);
                    if !value.is_finite() {
                        return Err(Error::Numeric {
                            step: Some(step),
                            layer: None,
                            message: format!("training loss diverged in epoch {epoch}"),
                        });
                    }
                    batch_loss += value;
                    grads.accumulate(&t.backward(loss), 1.0 / batch.len() as f64);
                }
                let lr = opts.learning_rate * lr_factor(step, total_steps, opts.warmup_steps);
                adam.lr = lr;
                adam.step(&mut self.params, &grads, opts.clip_norm);
                report.step_losses.push(batch_loss / batch.len() as f64);
                epoch_loss += batch_loss;
                step += 1;
            }
            let mean = epoch_loss / data.len() as f64;
            log::debug!("epoch {epoch}: loss {mean:.5}");
            report.epoch_losses.push(mean);
        }
        Ok(report)
    }

    /// Writes `manifest.json` and one tensor file per parameter.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_params(dir.join("params"), &self.params)?;
        let manifest = Manifest {
            config: self.config.clone(),
            vocabulary: WORDS.iter().map(|w| w.to_string()).collect(),
            prompt_length: PROMPT_LEN,
            schedule: self.schedule,
            seed: self.seed,
            parameter_count: self.params.scalar_count(),
            fingerprint: self.fingerprint(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.vocabulary.iter().map(String::as_str).ne(WORDS.iter().copied())
            || manifest.prompt_length != PROMPT_LEN
        {
            return Err(Error::Integrity("checkpoint vocabulary differs from this build".into()));
        }
        let mut model = Self::new(manifest.config, manifest.seed)?;
        model.schedule = manifest.schedule;
        load_params(dir.join("params"), &mut model.params)?;
        if model.fingerprint() != manifest.fingerprint {
            return Err(Error::Integrity(format!("checkpoint {} fails its fingerprint", dir.display())));
        }
        Ok(model)
    }
}

/// Linear warm-up followed by cosine decay to a tenth of the base rate.
fn lr_factor(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

impl NoisePredictor for ToyDenoiser {
    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.config.latent_size;
        (self.config.latent_channels, s, s)
    }

    fn roster(&self) -> &[LayerInfo] {
        &self.roster
    }

    fn predict_noise(
        &self,
        z: &LatentTensor,
        step: &StepInfo,
        cond: &Prompt,
        layout: Option<&LayoutMap>,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentTensor> {
        self.check_latent(z)?;
        if !z.is_finite() {
            return Err(Error::numeric("non-finite input latent").at_step(step.t_index));
        }
        let mut t = Tape::inference();
        let out = self
            .forward(&self.params, &mut t, z.to_matrix(), step.timestep, cond, layout, hook)
            .map_err(|e| e.at_step(step.t_index))?;
        let value = t.value(out).clone();
        if !value.is_finite() {
            return Err(Error::numeric("non-finite noise prediction").at_step(step.t_index));
        }
        let s = self.config.latent_size;
        LatentTensor::from_matrix(value, s, s)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, m) in self.params.iter() {
            h.update(name.as_bytes());
            for x in m.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub z0: LatentTensor,
    pub prompt: Prompt,
    pub layout: Option<LayoutMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    /// Probability of replacing the prompt with the null prompt.
    pub cond_drop: f64,
    /// Probability of feeding the layout map when one is available.
    pub layout_prob: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 16,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 50,
            clip_norm: Some(1.0),
            cond_drop: 0.1,
            layout_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckProbe {
    pub seed: u64,
    /// Number of scalar parameters perturbed.
    pub samples: usize,
    pub step: f64,
    /// Gradients smaller than this are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckProbe {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 128,
            step: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst_parameter: String,
}

/// Compares tape gradients of `loss` with central differences on a random
/// subset of scalar parameters. `loss` must build a scalar on the tape.
pub fn grad_check_with<F>(params: &mut ParamSet, probe: &GradCheckProbe, loss: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var>,
{
    let analytic = {
        let mut t = Tape::training();
        let l = loss(&mut t, params)?;
        let g = t.backward(l);
        let mut dense = GradBuffer::zeros_like(params);
        dense.accumulate(&g, 1.0);
        dense
    };
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::inference();
        let l = loss(&mut t, ps)?;
        Ok(t.value(l).get(0, 0))
    };
    let mut coords: Vec<(usize, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |i| (id.0, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    coords.shuffle(&mut rng);
    coords.truncate(probe.samples);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst_parameter: String::new(),
    };
    let ids: Vec<_> = params.ids().collect();
    for (p, i) in coords {
        let id = ids[p];
        let orig = params.get(id).as_slice()[i];
        params.get_mut(id).as_mut_slice()[i] = orig + probe.step;
        let up = eval(params)?;
        params.get_mut(id).as_mut_slice()[i] = orig - probe.step;
        let down = eval(params)?;
        params.get_mut(id).as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * probe.step);
        let exact = analytic.as_slice()[p].as_slice()[i];
        let err = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(probe.floor);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = format!("{}[{i}]", params.name(id));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of the training loss on one fixed random example.
pub fn grad_check(model: &mut ToyDenoiser, probe: &GradCheckProbe) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed ^ 0x5eed);
    let shape = model.latent_shape();
    let n = shape.0 * shape.1 * shape.2;
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let z = LatentTensor::from_vec(shape, gauss(n))?;
    let target = LatentTensor::from_vec(shape, gauss(n))?;
    let prompt = Prompt::parse("disc left top small bright")?;
    let ls = model.config.layout_size();
    let layout = model
        .config
        .layout_adapter
        .then(|| LayoutMap::new(ls, ls, (0..ls * ls).map(|i| (i * 7) % 5 == 0).collect()))
        .transpose()?;
    let mut params = std::mem::take(&mut model.params);
    let report = grad_check_with(&mut params, probe, |t, ps| {
        model.loss_with(ps, t, &z, 500, &prompt, layout.as_ref(), &target)
    });
    model.params = params;
    report
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::Linear;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    pub(crate) fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 4,
            latent_size: 8,
            widths: [8, 8, 16],
            heads: 2,
            groups: 4,
            text_width: 16,
            time_features: 8,
            layout_adapter: true,
            res_kernel: 3,
        }
    }

    /// Two-loop softmax attention for a single head.
    fn attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let d = q.cols() as f64;
        Matrix::from_fn(q.rows(), v.cols(), |i, c| {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|x| q.get(i, x) * k.get(j, x)).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..k.rows()).map(|j| w[j] / z * v.get(j, c)).sum()
        })
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, k, v) = (random(5, 4, &mut rng), random(1, 4, &mut rng), random(1, 4, &mut rng));
        let out = attention(&q, &k, &v, 2).unwrap();
        for r in 0..5 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn saturated_softmax_selects_the_matching_value() {
        let k = Matrix::from_fn(3, 3, |r, c| if r == c { 100.0 } else { 0.0 });
        let v = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let q = Matrix::from_vec(1, 3, vec![0.0, 100.0, 0.0]).unwrap();
        let out = attention(&q, &k, &v, 1).unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-6 && (out.get(0, 1) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn attention_matches_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(3, 4, &mut rng), random(3, 4, &mut rng), random(3, 4, &mut rng));
        assert!(attention(&q, &k, &v, 1).unwrap().max_abs_diff(&attention_oracle(&q, &k, &v)) < 1e-10);

        // two heads are two independent column blocks
        let out = attention(&q, &k, &v, 2).unwrap();
        for h in 0..2 {
            let block = |m: &Matrix| Matrix::from_fn(m.rows(), 2, |r, c| m.get(r, 2 * h + c));
            let expected = attention_oracle(&block(&q), &block(&k), &block(&v));
            for r in 0..3 {
                for c in 0..2 {
                    assert!((out.get(r, 2 * h + c) - expected.get(r, c)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let m = Matrix::zeros(3, 4);
        assert!(attention(&m, &Matrix::zeros(2, 4), &m, 1).is_err());
        assert!(attention(&m, &m, &m, 3).is_err());
        assert!(attention(&Matrix::zeros(3, 2), &m, &m, 1).is_err());
    }

    proptest! {
        #[test]
        fn attention_rows_lie_in_the_value_box(seed in 0u64..300, nk in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k) = (random(4, 2, &mut rng), random(nk, 2, &mut rng));
            let v = random(nk, 1, &mut rng);
            let out = attention(&q, &k, &v, 1).unwrap();
            let lo = v.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for x in out.as_slice() {
                prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
            }
            prop_assert!(out.max_abs_diff(&attention_oracle(&q, &k, &v)) < 1e-10);
        }

        #[test]
        fn cfg_is_affine_in_the_difference(seed in 0u64..300, w in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = LatentTensor::from_vec((1, 2, 3), (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let b = LatentTensor::from_vec((1, 2, 3), (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let out = cfg_combine(&a, &b, w).unwrap();
            if w != 0.0 {
                for ((o, x), y) in out.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()) {
                    prop_assert_eq!(*o, y + (w - 1.0) * (y - x));
                }
            }
        }
    }

    #[test]
    fn cfg_examples() {
        let u = LatentTensor::from_vec((1, 1, 1), vec![0.0]).unwrap();
        let c = LatentTensor::from_vec((1, 1, 1), vec![1.0]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 7.5).unwrap().as_slice(), &[7.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = LatentTensor::from_vec((2, 2, 2), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = LatentTensor::from_vec((2, 2, 2), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(cfg_combine(&a, &b, 1.0).unwrap(), b);
        assert_eq!(cfg_combine(&a, &b, 0.0).unwrap(), a);
        assert!(matches!(cfg_combine(&a, &b, -1.0), Err(Error::Usage(_))));
        assert!(cfg_combine(&a, &LatentTensor::zeros(1, 2, 2), 2.0).is_err());
    }

    fn step(alpha_bar: f64) -> StepInfo {
        StepInfo {
            t_index: 1,
            timestep: 1,
            alpha_bar,
        }
    }

    #[test]
    fn analytic_standard_prior_is_linear_in_z() {
        let p = AnalyticGaussian::new(LatentTensor::zeros(1, 2, 2), 1.0).unwrap();
        let z = LatentTensor::from_vec((1, 2, 2), vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        for a in [0.9, 0.5, 0.01] {
            let eps = p.predict_noise(&z, &step(a), &Prompt::null(), None, &mut NoHook).unwrap();
            let z0 = p.denoised(&z, a).unwrap();
            for i in 0..4 {
                assert!((eps.as_slice()[i] - (1.0 - a).sqrt() * z.as_slice()[i]).abs() < 1e-15);
                assert!((z0.as_slice()[i] - a.sqrt() * z.as_slice()[i]).abs() < 1e-15);
            }
        }
        let at_clean = p.predict_noise(&z, &step(1.0), &Prompt::null(), None, &mut NoHook).unwrap();
        assert!(at_clean.as_slice().iter().all(|&e| e == 0.0));
        assert!(AnalyticGaussian::new(LatentTensor::zeros(1, 1, 1), 0.0).is_err());
    }

    #[test]
    fn analytic_noiseless_point_collapses_as_scale_shrinks() {
        let mu = LatentTensor::from_vec((1, 1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let a = 0.6f64;
        let z = mu.scale(a.sqrt());
        let mut last = f64::INFINITY;
        for s in [1.0, 0.3, 0.1, 0.01] {
            let p = AnalyticGaussian::new(mu.clone(), s).unwrap();
            let n = p.predict_noise(&z, &step(a), &Prompt::null(), None, &mut NoHook).unwrap().norm();
            assert!(n <= last);
            last = n;
        }
        assert!(last < 1e-12);
    }

    /// Posterior-mean noise by self-normalised importance sampling over the prior.
    #[test]
    fn analytic_prediction_matches_monte_carlo_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let mu: f64 = rng.random_range(-1.0..1.0);
            let s: f64 = rng.random_range(0.3..1.5);
            let a: f64 = rng.random_range(0.2..0.9);
            let z: f64 = a.sqrt() * mu + rng.random_range(-1.0..1.0);
            let n = 200_000;
            let draws: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    let z0 = mu + s * rng.sample::<f64, _>(StandardNormal);
                    let e = (z - a.sqrt() * z0) / (1.0 - a).sqrt();
                    ((-0.5 * e * e).exp(), e)
                })
                .collect();
            let sw: f64 = draws.iter().map(|(w, _)| w).sum();
            let mean = draws.iter().map(|(w, e)| w * e).sum::<f64>() / sw;
            // delta-method standard error of a self-normalised estimate
            let se = (draws.iter().map(|(w, e)| (w * (e - mean)).powi(2)).sum::<f64>()).sqrt() / sw;
            let p = AnalyticGaussian::new(LatentTensor::from_vec((1, 1, 1), vec![mu]).unwrap(), s).unwrap();
            let zt = LatentTensor::from_vec((1, 1, 1), vec![z]).unwrap();
            let eps = p.predict_noise(&zt, &step(a), &Prompt::null(), None, &mut NoHook).unwrap().as_slice()[0];
            assert!((eps - mean).abs() < 2.0 * se, "analytic {eps} vs mc {mean} ± {se}");
        }
    }

    /// Posterior-mean noise by Simpson quadrature over the prior.
    #[test]
    fn analytic_prediction_matches_quadrature_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let s: f64 = rng.random_range(0.05..2.0);
            let a: f64 = rng.random_range(0.01..0.99);
            let z: f64 = a.sqrt() * mu + rng.random_range(-2.0..2.0);
            let eps_of = |z0: f64| (z - a.sqrt() * z0) / (1.0 - a).sqrt();
            let density = |z0: f64| (-0.5 * ((z0 - mu) / s).powi(2) - 0.5 * eps_of(z0).powi(2)).exp();
            let (lo, hi, n) = (mu - 12.0 * s, mu + 12.0 * s, 20_000);
            let h = (hi - lo) / n as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..=n {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                num += w * density(x) * eps_of(x);
                den += w * density(x);
            }
            let p = AnalyticGaussian::new(LatentTensor::from_vec((1, 1, 1), vec![mu]).unwrap(), s).unwrap();
            let zt = LatentTensor::from_vec((1, 1, 1), vec![z]).unwrap();
            let eps = p.predict_noise(&zt, &step(a), &Prompt::null(), None, &mut NoHook).unwrap().as_slice()[0];
            assert!((eps - num / den).abs() < 1e-9, "{eps} vs {}", num / den);
        }
    }

    #[test]
    fn analytic_sampling_returns_to_the_prior_mean() {
        let schedule = NoiseSchedule::new(1000, 0.00085, 0.012, 50).unwrap();
        let mu = LatentTensor::from_vec((1, 2, 2), vec![0.7, -0.4, 1.1, 0.2]).unwrap();
        for s in [0.1, 0.05] {
            let p = AnalyticGaussian::new(mu.clone(), s).unwrap();
            let mut z = mu.scale(schedule.alpha_bar_at(50).unwrap().sqrt());
            for t in (1..=50).rev() {
                let eps = p
                    .predict_noise(&z, &StepInfo::at(&schedule, t).unwrap(), &Prompt::null(), None, &mut NoHook)
                    .unwrap();
                z = schedule.sample_step(&z, &eps, t).unwrap();
            }
            assert!(z.sub(&mu).unwrap().norm() < 1e-3 * mu.norm());
        }
    }

    fn tiny_model(seed: u64) -> ToyDenoiser {
        ToyDenoiser::new(tiny_config(), seed).unwrap()
    }

    fn gaussian_latent(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentTensor {
        let n = shape.0 * shape.1 * shape.2;
        LatentTensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_conditioned() {
        let model = tiny_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian_latent(model.latent_shape(), &mut rng);
        let st = StepInfo {
            t_index: 3,
            timestep: 60,
            alpha_bar: 0.9,
        };
        let p = Prompt::parse("disc left").unwrap();
        let a = model.predict_noise(&z, &st, &p, None, &mut NoHook).unwrap();
        let b = model.predict_noise(&z, &st, &p, None, &mut NoHook).unwrap();
        assert_eq!(a, b);
        let c = model.predict_noise(&z, &st, &Prompt::null(), None, &mut NoHook).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.shape(), z.shape());
    }

    struct Recompute;

    impl AttentionHook for Recompute {
        fn self_attention(&mut self, l: &LayerInfo, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Option<Matrix>> {
            attention(q, k, v, l.heads).map(Some)
        }
    }

    struct Scramble;

    impl AttentionHook for Scramble {
        fn self_attention(&mut self, l: &LayerInfo, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Option<Matrix>> {
            attention(q, &k.map(|x| -x), v, l.heads).map(Some)
        }
    }

    #[test]
    fn hooks_see_every_layer_and_can_replace_outputs() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian_latent(model.latent_shape(), &mut rng);
        let st = StepInfo {
            t_index: 2,
            timestep: 40,
            alpha_bar: 0.95,
        };
        let p = Prompt::parse("square right").unwrap();
        let (plain, feats, maps) = model
            .predict_noise_captured(&z, &st, &p, None, Branch::Conditional, &mut NoHook)
            .unwrap();
        assert_eq!(feats.iter().map(|f| f.layer).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        for (f, info) in feats.iter().zip(model.roster()) {
            assert_eq!(f.k.shape(), (info.positions(), info.channels));
            assert_eq!(f.t_index, 2);
        }
        assert_eq!(model.roster().iter().map(|l| l.height).collect::<Vec<_>>(), vec![8, 4, 2, 2, 2, 4, 8, 8]);
        assert_eq!(maps.len(), 8);
        for m in &maps {
            assert_eq!(m.probs.shape(), (m.height * m.width, PROMPT_LEN));
            for r in 0..m.probs.rows() {
                assert!((m.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let same = model.predict_noise(&z, &st, &p, None, &mut Recompute).unwrap();
        assert_eq!(same, plain);
        let other = model.predict_noise(&z, &st, &p, None, &mut Scramble).unwrap();
        assert_ne!(other, plain);
    }

    #[test]
    fn zero_initialised_adapter_is_inert_until_trained() {
        let mut model = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = gaussian_latent(model.latent_shape(), &mut rng);
        let st = StepInfo {
            t_index: 1,
            timestep: 20,
            alpha_bar: 0.98,
        };
        let layout = LayoutMap::new(16, 16, (0..256).map(|i| i % 3 == 0).collect()).unwrap();
        let p = Prompt::null();
        let without = model.predict_noise(&z, &st, &p, None, &mut NoHook).unwrap();
        let with = model.predict_noise(&z, &st, &p, Some(&layout), &mut NoHook).unwrap();
        assert_eq!(without, with);
        let id = model.params().find("layout.zero0.weight").unwrap();
        model.params_mut().get_mut(id).as_mut_slice()[0] = 0.5;
        let with = model.predict_noise(&z, &st, &p, Some(&layout), &mut NoHook).unwrap();
        assert_ne!(without, with);
        let wrong = LayoutMap::new(8, 8, vec![false; 64]).unwrap();
        assert!(matches!(model.predict_noise(&z, &st, &p, Some(&wrong), &mut NoHook), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_latent_is_a_numeric_error_at_the_step() {
        let model = tiny_model(0);
        let mut z = LatentTensor::zeros(4, 8, 8);
        z.as_mut_slice()[3] = f64::NAN;
        let st = StepInfo {
            t_index: 7,
            timestep: 140,
            alpha_bar: 0.5,
        };
        match model.predict_noise(&z, &st, &Prompt::null(), None, &mut NoHook) {
            Err(Error::Numeric { step: Some(7), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn tiny_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| TrainingExample {
                z0: gaussian_latent((4, 8, 8), rng).scale(0.5),
                prompt: Prompt::parse(if i % 2 == 0 { "disc left" } else { "square right" }).unwrap(),
                layout: Some(LayoutMap::new(16, 16, (0..256).map(|j| (i + j) % 4 == 0).collect()).unwrap()),
            })
            .collect()
    }

    #[test]
    fn training_is_reproducible_and_zero_epochs_is_a_no_op() {
        let schedule = NoiseSchedule::new(1000, 0.00085, 0.012, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = tiny_data(6, &mut rng);
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 3,
            warmup_steps: 1,
            ..Default::default()
        };
        let mut a = tiny_model(3);
        let mut b = tiny_model(3);
        let ra = a.train(&data, &schedule, &opts).unwrap();
        let rb = b.train(&data, &schedule, &opts).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.step_losses.len(), 4);
        assert!(ra.step_losses.iter().all(|l| l.is_finite()));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), tiny_model(3).fingerprint());

        let mut c = tiny_model(3);
        let before = c.fingerprint();
        let rc = c.train(&data, &schedule, &TrainOptions { epochs: 0, ..opts }).unwrap();
        assert!(rc.epoch_losses.is_empty());
        assert_eq!(c.fingerprint(), before);
        assert!(matches!(c.train(&[], &schedule, &TrainOptions::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_head_gradients_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let head = Linear::new(&mut ps, "head", 6, 3, true, 1.0, &mut rng);
        let x = random(5, 6, &mut rng);
        let target = random(5, 3, &mut rng);
        let probe = GradCheckProbe {
            samples: 21,
            ..Default::default()
        };
        let report = grad_check_with(&mut ps, &probe, |t, ps| {
            let xv = t.constant(x.clone());
            let y = head.forward(t, ps, xv);
            Ok(t.mse_loss(y, target.clone()))
        })
        .unwrap();
        assert_eq!(report.checked, 21);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let mut model = tiny_model(4);
        // the zero-initialised adapter outputs would hide upstream gradients
        for name in ["layout.zero0.weight", "layout.zero1.weight", "layout.zero2.weight"] {
            let id = model.params().find(name).unwrap();
            let m = model.params_mut().get_mut(id);
            for (i, x) in m.as_mut_slice().iter_mut().enumerate() {
                *x = ((i % 7) as f64 - 3.0) * 0.05;
            }
        }
        let before = model.fingerprint();
        let report = grad_check(&mut model, &GradCheckProbe::default()).unwrap();
        assert!(report.checked >= 100);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert_eq!(model.fingerprint(), before);
    }

    #[test]
    fn gradient_vanishes_at_an_exact_fit() {
        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = gaussian_latent(model.latent_shape(), &mut rng);
        let p = Prompt::parse("triangle middle").unwrap();
        let st = StepInfo {
            t_index: 0,
            timestep: 300,
            alpha_bar: 0.5,
        };
        let target = model.predict_noise(&z, &st, &p, None, &mut NoHook).unwrap();
        let mut t = Tape::training();
        let loss = model.loss(&mut t, &z, 300, &p, None, &target).unwrap();
        assert_eq!(t.value(loss).get(0, 0), 0.0);
        let mut g = GradBuffer::zeros_like(model.params());
        g.accumulate(&t.backward(loss), 1.0);
        assert!(g.norm() < 1e-8);
    }

    #[test]
    fn checkpoints_round_trip_and_detect_tampering() {
        let model = tiny_model(6);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = ToyDenoiser::load(dir.path()).unwrap();
        assert_eq!(back.fingerprint(), model.fingerprint());
        assert_eq!(back.config(), model.config());
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["vocabulary"][1], "disc");
        assert_eq!(manifest["schedule"]["num_inference_steps"], 50);

        let path = dir.path().join("params/conv_in.bias.tns");
        crate::tensor_io::write_matrix(&path, &Matrix::filled(8, 1, 0.25)).unwrap();
        assert!(matches!(ToyDenoiser::load(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = DenoiserConfig {
            widths: [6, 8, 16],
            ..tiny_config()
        };
        assert!(matches!(ToyDenoiser::new(bad, 0), Err(Error::Config(_))));
        let bad = DenoiserConfig {
            latent_size: 6,
            ..tiny_config()
        };
        assert!(ToyDenoiser::new(bad, 0).is_err());
        let full = ToyDenoiser::new(DenoiserConfig::default(), 0).unwrap();
        let n = full.params().scalar_count();
        assert!((100_000..=3_000_000).contains(&n), "{n} parameters");
    }
}
