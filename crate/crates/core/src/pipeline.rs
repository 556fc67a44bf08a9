//! Inversion, policy-controlled sampling, reconstruction, editing and the
//! per-step error trace.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention_control::{
    aggregate_cross_attention, build_edit_mask, policy_plan, AttentionPlan, CacheMetadata, ControllerPolicy, EditMask,
    KVCache, KvSource, PolicyKind, StepController,
};
use crate::denoiser::{cfg_combine, Branch, LayoutMap, NoHook, NoisePredictor, StepInfo, TrainingExample};
use crate::error::{Error, Result};
use crate::latent_codec::LatentCodec;
use crate::metrics::{psnr, ssim};
use crate::schedule::NoiseSchedule;
use crate::synth_data::{render_scene, scene_prompt, SceneSpec};
use crate::tensor::{ImageTensor, LatentTensor};
use crate::tensor_io::{read_latent, write_latent};
use crate::vocab::Prompt;

pub const EDIT_CFG_SCALE: f64 = 7.5;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.3;

/// The pivotal trajectory, its noise predictions and the attention cache.
#[derive(Clone, Debug)]
pub struct InversionResult {
    /// `z*_0 ..= z*_T`.
    pub trajectory: Vec<LatentTensor>,
    /// `ε*_0 .. ε*_{T-1}`; `ε*_t` moved `z*_t` to `z*_{t+1}`.
    pub eps: Vec<LatentTensor>,
    pub cache: KVCache,
    pub conditioning: Prompt,
}

#[derive(Serialize, Deserialize)]
struct InversionManifest {
    steps: usize,
    conditioning: Prompt,
    model_fingerprint: String,
    schedule_fingerprint: String,
}

impl InversionResult {
    pub fn steps(&self) -> usize {
        self.eps.len()
    }

    pub fn z0(&self) -> &LatentTensor {
        &self.trajectory[0]
    }

    pub fn z_t(&self) -> &LatentTensor {
        self.trajectory.last().expect("trajectory is never empty")
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, z) in self.trajectory.iter().enumerate() {
            write_latent(dir.join(format!("z_t{t}.tns")), z)?;
        }
        for (t, e) in self.eps.iter().enumerate() {
            write_latent(dir.join(format!("eps_t{t}.tns")), e)?;
        }
        self.cache.save(dir.join("cache"))?;
        let meta = self.cache.metadata();
        let manifest = InversionManifest {
            steps: self.steps(),
            conditioning: self.conditioning.clone(),
            model_fingerprint: meta.model_fingerprint.clone(),
            schedule_fingerprint: meta.schedule_fingerprint.clone(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: InversionManifest = serde_json::from_slice(&bytes)?;
        let trajectory = (0..=m.steps)
            .map(|t| read_latent(dir.join(format!("z_t{t}.tns"))))
            .collect::<Result<Vec<_>>>()?;
        let eps = (0..m.steps)
            .map(|t| read_latent(dir.join(format!("eps_t{t}.tns"))))
            .collect::<Result<Vec<_>>>()?;
        let cache = KVCache::load(dir.join("cache"))?;
        if cache.steps() != m.steps || cache.metadata().model_fingerprint != m.model_fingerprint {
            return Err(Error::Integrity("inversion cache does not match its manifest".into()));
        }
        if !cache.is_frozen() {
            return Err(Error::Integrity("inversion cache is incomplete".into()));
        }
        Ok(Self {
            trajectory,
            eps,
            cache,
            conditioning: m.conditioning,
        })
    }

    /// Checks that the stored trajectory matches `schedule` and `model`.
    pub fn check_compatible(&self, model: &dyn NoisePredictor, schedule: &NoiseSchedule) -> Result<()> {
        let meta = self.cache.metadata();
        if self.steps() != schedule.steps() || meta.schedule_fingerprint != schedule.fingerprint() {
            return Err(Error::Integrity("inversion was run with a different schedule".into()));
        }
        if meta.model_fingerprint != model.fingerprint() {
            return Err(Error::Integrity("inversion was run with a different model".into()));
        }
        Ok(())
    }
}

/// DDIM inversion of `z0`, recording self-attention features and
/// cross-attention maps at every step.
pub fn invert(z0: &LatentTensor, model: &dyn NoisePredictor, schedule: &NoiseSchedule, cond: &Prompt) -> Result<InversionResult> {
    if z0.shape() != model.latent_shape() {
        return Err(Error::Shape(format!("latent {:?} but the model expects {:?}", z0.shape(), model.latent_shape())));
    }
    let steps = schedule.steps();
    let metadata = CacheMetadata {
        model_fingerprint: model.fingerprint(),
        schedule_fingerprint: schedule.fingerprint(),
        prompt: cond.clone(),
    };
    let mut cache = KVCache::new(steps, model.roster().to_vec(), metadata);
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut eps = Vec::with_capacity(steps);
    trajectory.push(z0.clone());
    for t in 0..steps {
        let info = StepInfo::at(schedule, t)?;
        let z = &trajectory[t];
        let (e, features, maps) = model
            .predict_noise_captured(z, &info, cond, None, Branch::Inversion, &mut NoHook)
            .map_err(|e| e.at_step(t))?;
        cache.record_features(t, &features)?;
        cache.record_cross(t, maps)?;
        let next = schedule.invert_step(z, &e, t + 1)?;
        eps.push(e);
        trajectory.push(next);
    }
    cache.finalize()?;
    Ok(InversionResult {
        trajectory,
        eps,
        cache,
        conditioning: cond.clone(),
    })
}

pub fn invert_image(
    image: &ImageTensor,
    codec: &LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<InversionResult> {
    invert(&codec.encode(image)?, model, schedule, &Prompt::null())
}

/// Everything that controls one sampling run besides the inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerRun {
    pub policy: ControllerPolicy,
    pub cfg_scale: f64,
    pub conditioning: Prompt,
    pub layout: Option<LayoutMap>,
    /// Route the unconditional guidance branch through the controller too.
    pub control_unconditional: bool,
}

impl SamplerRun {
    /// Null conditioning, no guidance.
    pub fn reconstruction(policy: ControllerPolicy) -> Self {
        Self {
            policy,
            cfg_scale: 1.0,
            conditioning: Prompt::null(),
            layout: None,
            control_unconditional: true,
        }
    }

    pub fn editing(policy: ControllerPolicy, target: Prompt) -> Self {
        Self {
            policy,
            cfg_scale: EDIT_CFG_SCALE,
            conditioning: target,
            layout: None,
            control_unconditional: true,
        }
    }

    pub fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(Error::Config(format!("guidance scale {} must be finite and ≥ 0", self.cfg_scale)));
        }
        self.policy.validate(steps, layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_index: usize,
    /// Whether the policy gate was open at any layer.
    pub gated: bool,
    /// `‖ε_t - ε*_{t-1}‖` for the guided prediction actually used.
    pub eps_error: f64,
    /// `‖z_{t-1} - z*_{t-1}‖` after the step.
    pub z_error: f64,
    pub mask_cells: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub z0: LatentTensor,
    pub records: Vec<StepRecord>,
    /// Edit masks by step, when the policy derives them.
    pub masks: Vec<EditMask>,
}

impl SampleOutput {
    /// `Σ ‖ε_t - ε*_{t-1}‖` over steps where `gate` would be open.
    pub fn eps_error_sum(&self, gate: impl Fn(&StepRecord) -> bool) -> f64 {
        self.records.iter().filter(|r| gate(r)).map(|r| r.eps_error).sum()
    }
}

fn gate_open_anywhere(policy: &ControllerPolicy, t_progress: usize, t: usize, layers: usize) -> bool {
    policy.kind != PolicyKind::NaiveDdim && (0..layers).any(|l| policy.gate_open(t_progress, t, l))
}

/// Per-run state advanced one denoising step at a time.
struct Sampler<'a> {
    inv: &'a InversionResult,
    model: &'a dyn NoisePredictor,
    schedule: &'a NoiseSchedule,
    run: &'a SamplerRun,
    recon_z: Option<LatentTensor>,
}

struct StepOutcome {
    eps: LatentTensor,
    gated: bool,
    mask: Option<EditMask>,
}

impl<'a> Sampler<'a> {
    fn new(
        inv: &'a InversionResult,
        model: &'a dyn NoisePredictor,
        schedule: &'a NoiseSchedule,
        run: &'a SamplerRun,
    ) -> Result<Self> {
        inv.check_compatible(model, schedule)?;
        run.validate(schedule.steps(), model.roster().len())?;
        let recon_z = (run.policy.kind == PolicyKind::ReconQuery).then(|| inv.z_t().clone());
        Ok(Self {
            inv,
            model,
            schedule,
            run,
            recon_z,
        })
    }

    fn mask_for_step(&self, z: &LatentTensor, info: &StepInfo) -> Result<Option<EditMask>> {
        let mp = &self.run.policy.mask;
        if let Some(fixed) = &mp.fixed {
            return Ok(Some(fixed.clone()));
        }
        let resolution = match mp.resolution {
            Some(r) => r,
            None => self
                .model
                .roster()
                .iter()
                .map(|l| l.height)
                .min()
                .ok_or_else(|| Error::Config("mask-guided editing needs attention layers".into()))?,
        };
        let (_, _, maps) = self.model.predict_noise_captured(
            z,
            info,
            &self.run.conditioning,
            self.run.layout.as_ref(),
            Branch::Conditional,
            &mut NoHook,
        )?;
        let a_t = aggregate_cross_attention(&maps, resolution)?;
        let mut mask = build_edit_mask(&a_t, &mp.token_indices, mp.threshold)?;
        mask.step = Some(info.t_index);
        Ok(Some(mask))
    }

    /// Guided noise prediction at `z` for denoising step `t`.
    fn predict(&mut self, z: &LatentTensor, t: usize) -> Result<StepOutcome> {
        let steps = self.schedule.steps();
        let progress = steps - t;
        let info = StepInfo::at(self.schedule, t)?;
        let policy = &self.run.policy;
        let gated = gate_open_anywhere(policy, progress, t, self.model.roster().len());

        let mut live = Vec::new();
        if let Some(rz) = &self.recon_z {
            let (e, features, _) = self.model.predict_noise_captured(
                rz,
                &info,
                &Prompt::null(),
                None,
                Branch::Conditional,
                &mut NoHook,
            )?;
            live = features;
            self.recon_z = Some(self.schedule.sample_step(rz, &e, t)?);
        }
        let source = if policy.kind == PolicyKind::ReconQuery {
            KvSource::Live(&live)
        } else {
            KvSource::Cache(&self.inv.cache)
        };
        let mask = if policy.kind == PolicyKind::MaskGuided && gated {
            self.mask_for_step(z, &info)?
        } else {
            None
        };

        let layout = self.run.layout.as_ref();
        let mut ctl = StepController::new(policy, source, t, progress, mask.as_ref());
        let cond = self
            .model
            .predict_noise(z, &info, &self.run.conditioning, layout, &mut ctl)?;
        let eps = if self.run.cfg_scale == 1.0 {
            cond
        } else {
            let null = Prompt::null();
            let uncond = if self.run.control_unconditional {
                let mut ctl = StepController::new(policy, source, t, progress, mask.as_ref());
                self.model.predict_noise(z, &info, &null, layout, &mut ctl)?
            } else {
                self.model.predict_noise(z, &info, &null, layout, &mut NoHook)?
            };
            cfg_combine(&uncond, &cond, self.run.cfg_scale)?
        };
        Ok(StepOutcome { eps, gated, mask })
    }
}

/// Denoises from `z*_T` under `run`, recording per-step errors against the
/// inversion trajectory.
pub fn sample(
    inv: &InversionResult,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    run: &SamplerRun,
) -> Result<SampleOutput> {
    let mut sampler = Sampler::new(inv, model, schedule, run)?;
    let steps = schedule.steps();
    let mut z = inv.z_t().clone();
    let mut records = Vec::with_capacity(steps);
    let mut masks = Vec::new();
    for t in (1..=steps).rev() {
        let out = sampler.predict(&z, t).map_err(|e| e.at_step(t))?;
        z = schedule.sample_step(&z, &out.eps, t)?;
        records.push(StepRecord {
            t_index: t,
            gated: out.gated,
            eps_error: out.eps.sub(&inv.eps[t - 1])?.norm(),
            z_error: z.sub(&inv.trajectory[t - 1])?.norm(),
            mask_cells: out.mask.as_ref().map(EditMask::count),
        });
        masks.extend(out.mask);
    }
    Ok(SampleOutput { z0: z, records, masks })
}

/// Sampling that consumes the cached `ε*_{t-1}` at step `t`.
pub fn epsilon_replay(inv: &InversionResult, schedule: &NoiseSchedule) -> Result<LatentTensor> {
    if inv.steps() != schedule.steps() {
        return Err(Error::Integrity("inversion was run with a different schedule".into()));
    }
    let mut z = inv.z_t().clone();
    for t in (1..=schedule.steps()).rev() {
        z = schedule.sample_step(&z, &inv.eps[t - 1], t)?;
    }
    Ok(z)
}

/// A decoded result and its fidelity to the input image.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: ImageTensor,
    pub z0: LatentTensor,
    pub psnr_db: f64,
    pub ssim: f64,
    pub records: Vec<StepRecord>,
}

/// How a reconstruction is produced from an inversion.
#[derive(Clone, Debug, PartialEq)]
pub enum ReconMethod {
    Sample(ControllerPolicy),
    Replay,
}

pub fn reconstruct_from(
    image: &ImageTensor,
    inv: &InversionResult,
    codec: &LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    method: &ReconMethod,
) -> Result<Reconstruction> {
    let (z0, records) = match method {
        ReconMethod::Replay => (epsilon_replay(inv, schedule)?, Vec::new()),
        ReconMethod::Sample(policy) => {
            let out = sample(inv, model, schedule, &SamplerRun::reconstruction(policy.clone()))?;
            (out.z0, out.records)
        }
    };
    let decoded = codec.decode(&z0)?;
    Ok(Reconstruction {
        psnr_db: psnr(&decoded, image)?,
        ssim: ssim(&decoded, image)?,
        image: decoded,
        z0,
        records,
    })
}

pub fn reconstruct(
    image: &ImageTensor,
    codec: &LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    method: &ReconMethod,
) -> Result<Reconstruction> {
    let inv = invert_image(image, codec, model, schedule)?;
    reconstruct_from(image, &inv, codec, model, schedule, method)
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    pub image: ImageTensor,
    pub z0: LatentTensor,
    pub records: Vec<StepRecord>,
    pub masks: Vec<EditMask>,
}

pub fn edit_from(
    inv: &InversionResult,
    codec: &LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    run: &SamplerRun,
) -> Result<EditOutput> {
    let out = sample(inv, model, schedule, run)?;
    Ok(EditOutput {
        image: codec.decode(&out.z0)?,
        z0: out.z0,
        records: out.records,
        masks: out.masks,
    })
}

pub fn edit(
    image: &ImageTensor,
    codec: &LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    run: &SamplerRun,
) -> Result<EditOutput> {
    let inv = invert_image(image, codec, model, schedule)?;
    edit_from(&inv, codec, model, schedule, run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t_index: usize,
    pub gated: bool,
    pub step_constant: f64,
    /// From `z_t := z*_t`.
    pub forced_z_error: f64,
    pub forced_eps_error: f64,
    /// `‖(z_{t-1} - z*_{t-1}) - C_t (ε_t - ε*_{t-1})‖` from `z_t := z*_t`.
    pub forced_residual: f64,
    pub free_z_error: f64,
    pub free_eps_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub steps: Vec<TraceStep>,
    /// `‖z_0 - z*_0‖` of the free-running branch.
    pub final_error: f64,
    /// Share of free-running steps whose error did not decrease.
    pub monotone_fraction: f64,
}

impl ErrorTrace {
    pub fn max_forced_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.forced_residual).fold(0.0, f64::max)
    }
}

pub fn stepwise_error_trace(
    inv: &InversionResult,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    run: &SamplerRun,
) -> Result<ErrorTrace> {
    let free = sample(inv, model, schedule, run)?;
    let mut sampler = Sampler::new(inv, model, schedule, run)?;
    let mut steps = Vec::with_capacity(free.records.len());
    for rec in &free.records {
        let t = rec.t_index;
        let z_star = &inv.trajectory[t];
        let out = sampler.predict(z_star, t).map_err(|e| e.at_step(t))?;
        let z_prev = schedule.sample_step(z_star, &out.eps, t)?;
        let c = schedule.step_error_constant(t)?;
        let dz = z_prev.sub(&inv.trajectory[t - 1])?;
        let de = out.eps.sub(&inv.eps[t - 1])?;
        steps.push(TraceStep {
            t_index: t,
            gated: rec.gated,
            step_constant: c,
            forced_z_error: dz.norm(),
            forced_eps_error: de.norm(),
            forced_residual: dz.sub(&de.scale(c))?.norm(),
            free_z_error: rec.z_error,
            free_eps_error: rec.eps_error,
        });
    }
    let rising = free.records.windows(2).filter(|w| w[1].z_error >= w[0].z_error).count();
    Ok(ErrorTrace {
        final_error: free.z0.sub(inv.z0())?.norm(),
        monotone_fraction: rising as f64 / free.records.len().saturating_sub(1).max(1) as f64,
        steps,
    })
}

/// Thresholded, min-max normalised central-difference gradient magnitude of
/// the channel-mean luminance.
pub fn edge_map(image: &ImageTensor, threshold: f64) -> Result<LayoutMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("edge threshold {threshold} outside (0, 1)")));
    }
    let (c, h, w) = image.shape();
    let lum = |y: usize, x: usize| (0..c).map(|ch| image.get(ch, y, x) as f64).sum::<f64>() / c as f64;
    let mut mag = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gx = (lum(y, (x + 1).min(w - 1)) - lum(y, x.saturating_sub(1))) / 2.0;
            let gy = (lum((y + 1).min(h - 1), x) - lum(y.saturating_sub(1), x)) / 2.0;
            mag.push(gx.hypot(gy));
        }
    }
    let lo = mag.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        mag.iter().map(|m| (m - lo) / (hi - lo) >= threshold).collect()
    } else {
        vec![false; h * w]
    };
    LayoutMap::new(h, w, data)
}

/// Encoded scenes with their prompts and edge layouts, ready for training.
pub fn training_examples(scenes: &[SceneSpec], codec: &LatentCodec, edge_threshold: f64) -> Result<Vec<TrainingExample>> {
    scenes
        .iter()
        .map(|spec| {
            let scene = render_scene(spec);
            Ok(TrainingExample {
                z0: codec.encode(&scene.image)?,
                prompt: scene_prompt(spec),
                layout: Some(edge_map(&scene.image, edge_threshold)?),
            })
        })
        .collect()
}

/// Plans chosen at every `(step, layer)` of a run, for inspection.
pub fn plan_table(policy: &ControllerPolicy, steps: usize, layers: usize) -> Result<Vec<Vec<AttentionPlan>>> {
    let dummy = EditMask::filled(1, true);
    (1..=steps)
        .rev()
        .map(|t| {
            (0..layers)
                .map(|l| policy_plan(policy, steps - t, t, l, Some(&dummy)))
                .collect()
        })
        .collect()
}
