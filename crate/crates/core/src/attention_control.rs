//! Inversion-time key/value cache, controller policies, attention plans,
//! cross-attention aggregation and edit masks.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{attention, AttentionFeatures, AttentionHook, CrossAttentionMap, LayerInfo};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::{read_matrix, write_matrix};
use crate::vocab::{Prompt, PROMPT_LEN};

/// Keys and values of one self-attention layer, `(positions, channels)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMetadata {
    pub model_fingerprint: String,
    pub schedule_fingerprint: String,
    pub prompt: Prompt,
}

/// Per-(timestep, layer) store filled by one inversion pass, then frozen.
///
/// Entry `t` holds the features of the inversion forward pass evaluated at
/// timestep argument `t`, for `t` in `0..T`.
#[derive(Clone, Debug)]
pub struct KVCache {
    steps: usize,
    roster: Vec<LayerInfo>,
    metadata: CacheMetadata,
    entries: Vec<Vec<Option<Arc<KvEntry>>>>,
    cross: Vec<Option<Vec<CrossAttentionMap>>>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    steps: usize,
    roster: Vec<LayerInfo>,
    metadata: CacheMetadata,
    frozen: bool,
    /// Per timestep, the `(layer, height, width)` of each stacked cross-attention map.
    cross_layers: Vec<Option<Vec<(usize, usize, usize)>>>,
}

impl KVCache {
    pub fn new(steps: usize, roster: Vec<LayerInfo>, metadata: CacheMetadata) -> Self {
        let layers = roster.len();
        Self {
            steps,
            roster,
            metadata,
            entries: vec![vec![None; layers]; steps],
            cross: vec![None; steps],
            frozen: false,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn roster(&self) -> &[LayerInfo] {
        &self.roster
    }

    pub fn metadata(&self) -> &CacheMetadata {
        &self.metadata
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn slot(&self, l: usize) -> Result<usize> {
        self.roster
            .iter()
            .position(|info| info.index == l)
            .ok_or_else(|| Error::Config(format!("layer {l} is not in the attention roster")))
    }

    fn writable(&self, t: usize) -> Result<()> {
        if self.frozen {
            return Err(Error::Integrity("the cache is frozen after inversion".into()));
        }
        if t >= self.steps {
            return Err(Error::Integrity(format!("timestep {t} outside 0..{}", self.steps)));
        }
        Ok(())
    }

    pub fn record(&mut self, t: usize, l: usize, k: Matrix, v: Matrix) -> Result<()> {
        self.writable(t)?;
        let slot = self.slot(l)?;
        let info = self.roster[slot];
        let expected = (info.positions(), info.channels);
        if k.shape() != expected || v.shape() != expected {
            return Err(Error::Integrity(format!(
                "layer {l} expects {expected:?} keys and values, got {:?} and {:?}",
                k.shape(),
                v.shape()
            )));
        }
        let cell = &mut self.entries[t][slot];
        if cell.is_some() {
            return Err(Error::Integrity(format!("entry ({t}, {l}) is already recorded")));
        }
        *cell = Some(Arc::new(KvEntry { k, v }));
        Ok(())
    }

    pub fn record_cross(&mut self, t: usize, maps: Vec<CrossAttentionMap>) -> Result<()> {
        self.writable(t)?;
        if self.cross[t].is_some() {
            return Err(Error::Integrity(format!("cross-attention maps at {t} are already recorded")));
        }
        self.cross[t] = Some(maps);
        Ok(())
    }

    /// Records the self-attention features of one forward pass.
    pub fn record_features(&mut self, t: usize, features: &[AttentionFeatures]) -> Result<()> {
        for f in features {
            self.record(t, f.layer, f.k.clone(), f.v.clone())?;
        }
        Ok(())
    }

    pub fn recorded(&self) -> usize {
        self.entries.iter().flatten().filter(|e| e.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.recorded() == self.steps * self.roster.len()
    }

    /// Freezes the cache; fails if any entry is missing.
    pub fn finalize(&mut self) -> Result<()> {
        for (t, row) in self.entries.iter().enumerate() {
            for (slot, e) in row.iter().enumerate() {
                if e.is_none() {
                    return Err(Error::Integrity(format!(
                        "entry ({t}, {}) missing at finalisation",
                        self.roster[slot].index
                    )));
                }
            }
        }
        self.frozen = true;
        Ok(())
    }

    /// The entry recorded at timestep argument `t`.
    pub fn entry(&self, t: usize, l: usize) -> Result<Arc<KvEntry>> {
        let slot = self.slot(l)?;
        self.entries
            .get(t)
            .and_then(|row| row[slot].clone())
            .ok_or_else(|| Error::Integrity(format!("no cache entry at ({t}, {l})")))
    }

    /// Features for sampling step `t` in `1..=T`: the entry recorded at `t - 1`.
    pub fn lookup(&self, t: usize, l: usize) -> Result<Arc<KvEntry>> {
        if t == 0 || t > self.steps {
            return Err(Error::Usage(format!("lookup step {t} outside 1..={}", self.steps)));
        }
        self.entry(t - 1, l)
            .map_err(|_| Error::Integrity(format!("missing cache entry for sampling step {t}, layer {l}")))
    }

    pub fn cross_maps(&self, t: usize) -> Option<&[CrossAttentionMap]> {
        self.cross.get(t).and_then(|c| c.as_deref())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, row) in self.entries.iter().enumerate() {
            for (slot, e) in row.iter().enumerate() {
                if let Some(e) = e {
                    let l = self.roster[slot].index;
                    write_matrix(dir.join(format!("kv_t{t}_l{l}_k.tns")), &e.k)?;
                    write_matrix(dir.join(format!("kv_t{t}_l{l}_v.tns")), &e.v)?;
                }
            }
        }
        let mut cross_layers = Vec::with_capacity(self.steps);
        for (t, maps) in self.cross.iter().enumerate() {
            match maps {
                Some(maps) if !maps.is_empty() => {
                    let mut stacked = maps[0].probs.clone();
                    for m in &maps[1..] {
                        stacked = stacked.vstack(&m.probs)?;
                    }
                    write_matrix(dir.join(format!("xattn_t{t}.tns")), &stacked)?;
                    cross_layers.push(Some(maps.iter().map(|m| (m.layer, m.height, m.width)).collect()));
                }
                Some(_) => cross_layers.push(Some(Vec::new())),
                None => cross_layers.push(None),
            }
        }
        let manifest = CacheManifest {
            steps: self.steps,
            roster: self.roster.clone(),
            metadata: self.metadata.clone(),
            frozen: self.frozen,
            cross_layers,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: CacheManifest = serde_json::from_slice(&bytes)?;
        if m.cross_layers.len() != m.steps {
            return Err(Error::Integrity("cache manifest lists the wrong number of steps".into()));
        }
        let mut cache = KVCache::new(m.steps, m.roster.clone(), m.metadata);
        for t in 0..m.steps {
            for info in &m.roster {
                let l = info.index;
                let kp = dir.join(format!("kv_t{t}_l{l}_k.tns"));
                if !kp.exists() {
                    continue;
                }
                let k = read_matrix(&kp)?;
                let v = read_matrix(dir.join(format!("kv_t{t}_l{l}_v.tns")))?;
                cache.record(t, l, k, v)?;
            }
            if let Some(layers) = &m.cross_layers[t] {
                let mut maps = Vec::with_capacity(layers.len());
                if !layers.is_empty() {
                    let stacked = read_matrix(dir.join(format!("xattn_t{t}.tns")))?;
                    let mut row = 0;
                    for &(layer, height, width) in layers {
                        let n = height * width;
                        if row + n > stacked.rows() {
                            return Err(Error::Integrity(format!("xattn_t{t} is shorter than its manifest")));
                        }
                        let probs = Matrix::from_vec(
                            n,
                            stacked.cols(),
                            stacked.as_slice()[row * stacked.cols()..(row + n) * stacked.cols()].to_vec(),
                        )?;
                        maps.push(CrossAttentionMap {
                            layer,
                            height,
                            width,
                            probs,
                        });
                        row += n;
                    }
                }
                cache.record_cross(t, maps)?;
            }
        }
        if m.frozen {
            cache.finalize()?;
        }
        Ok(cache)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    NaiveDdim,
    Tic,
    Concat,
    MaskGuided,
    ReconQuery,
}

impl PolicyKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "naive" | "naive_ddim" => PolicyKind::NaiveDdim,
            "tic" => PolicyKind::Tic,
            "concat" => PolicyKind::Concat,
            "mask_guided" | "mask-guided" => PolicyKind::MaskGuided,
            "recon_query" | "recon-query" => PolicyKind::ReconQuery,
            other => return Err(Error::Usage(format!("unknown policy {other:?}"))),
        })
    }
}

/// Which step counter the `t0` threshold compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    /// Active once `t0` sampling iterations have completed.
    #[default]
    Progress,
    /// Active while the step index `t` exceeds `t0`.
    StepIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    /// Prompt positions whose cross-attention defines the edit region.
    pub token_indices: Vec<usize>,
    pub threshold: f64,
    /// Side of the aggregation grid; the coarsest attention grid when unset.
    pub resolution: Option<usize>,
    /// Use this mask at every step instead of deriving one.
    pub fixed: Option<EditMask>,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            token_indices: Vec::new(),
            threshold: 0.3,
            resolution: None,
            fixed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerPolicy {
    pub kind: PolicyKind,
    pub t0: usize,
    pub l0: isize,
    pub gate: GateRule,
    pub mask: MaskParams,
}

impl Default for ControllerPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Tic,
            t0: 4,
            l0: 4,
            gate: GateRule::Progress,
            mask: MaskParams::default(),
        }
    }
}

impl ControllerPolicy {
    pub fn naive() -> Self {
        Self {
            kind: PolicyKind::NaiveDdim,
            ..Default::default()
        }
    }

    pub fn of_kind(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    /// Gate open at every step and layer.
    pub fn always(kind: PolicyKind) -> Self {
        Self {
            kind,
            t0: 0,
            l0: -1,
            ..Default::default()
        }
    }

    pub fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        if self.kind == PolicyKind::NaiveDdim {
            return Ok(());
        }
        if self.t0 > steps {
            return Err(Error::Config(format!("t0 = {} outside 0..={steps}", self.t0)));
        }
        if self.l0 < -1 || self.l0 >= layers as isize {
            return Err(Error::Config(format!("l0 = {} outside -1..={}", self.l0, layers as isize - 1)));
        }
        let m = &self.mask;
        if !(0.0..=1.0).contains(&m.threshold) {
            return Err(Error::Config(format!("mask threshold {} outside [0, 1]", m.threshold)));
        }
        if self.kind == PolicyKind::MaskGuided && m.fixed.is_none() {
            if m.token_indices.is_empty() {
                return Err(Error::Config("mask-guided editing needs explicit token indices".into()));
            }
            if let Some(&bad) = m.token_indices.iter().find(|&&i| i >= PROMPT_LEN) {
                return Err(Error::Config(format!("token index {bad} outside 0..{PROMPT_LEN}")));
            }
        }
        Ok(())
    }

    /// Whether the non-local plan applies at this step and layer.
    pub fn gate_open(&self, t_progress: usize, t_index: usize, l: usize) -> bool {
        let step_ok = match self.gate {
            GateRule::Progress => t_progress >= self.t0,
            GateRule::StepIndex => t_index > self.t0,
        };
        step_ok && (l as isize) > self.l0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPlan {
    UseLocal,
    Replace,
    Concat,
    MaskedBlend,
}

pub fn policy_plan(
    policy: &ControllerPolicy,
    t_progress: usize,
    t_index: usize,
    l: usize,
    mask: Option<&EditMask>,
) -> Result<AttentionPlan> {
    if policy.kind == PolicyKind::NaiveDdim || !policy.gate_open(t_progress, t_index, l) {
        return Ok(AttentionPlan::UseLocal);
    }
    Ok(match policy.kind {
        PolicyKind::NaiveDdim => AttentionPlan::UseLocal,
        PolicyKind::Tic | PolicyKind::ReconQuery => AttentionPlan::Replace,
        PolicyKind::Concat => AttentionPlan::Concat,
        PolicyKind::MaskGuided => {
            if mask.is_none() {
                return Err(Error::Usage("mask-guided plan requested without a mask".into()));
            }
            AttentionPlan::MaskedBlend
        }
    })
}

/// Evaluates one self-attention layer under `plan`. `mask` must already be
/// at this layer's resolution (one flag per query row).
pub fn attend_with_plan(
    plan: AttentionPlan,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cached: Option<&KvEntry>,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<Matrix> {
    if plan == AttentionPlan::UseLocal {
        return attention(q, k, v, heads);
    }
    let c = cached.ok_or_else(|| Error::Integrity("non-local plan without cached features".into()))?;
    if c.k.shape() != k.shape() || c.v.shape() != v.shape() {
        return Err(Error::Integrity(format!(
            "cached keys/values {:?}/{:?} do not match the layer's {:?}/{:?}",
            c.k.shape(),
            c.v.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let replace = || attention(q, &c.k, &c.v, heads);
    let concat = || attention(q, &k.vstack(&c.k)?, &v.vstack(&c.v)?, heads);
    match plan {
        AttentionPlan::UseLocal => unreachable!(),
        AttentionPlan::Replace => replace(),
        AttentionPlan::Concat => concat(),
        AttentionPlan::MaskedBlend => {
            let mask = mask.ok_or_else(|| Error::Usage("masked blend needs a mask".into()))?;
            if mask.len() != q.rows() {
                return Err(Error::Shape(format!("mask of {} cells for {} queries", mask.len(), q.rows())));
            }
            if mask.iter().all(|&m| m) {
                return concat();
            }
            if mask.iter().all(|&m| !m) {
                return replace();
            }
            let (a, mut out) = (concat()?, replace()?);
            for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                out.row_mut(r).copy_from_slice(a.row(r));
            }
            Ok(out)
        }
    }
}

/// Averages the maps captured at grid side `resolution` into `A_t`,
/// `(resolution², PROMPT_LEN)`.
pub fn aggregate_cross_attention(maps: &[CrossAttentionMap], resolution: usize) -> Result<Matrix> {
    let selected: Vec<&CrossAttentionMap> = maps
        .iter()
        .filter(|m| m.height == resolution && m.width == resolution)
        .collect();
    let Some(first) = selected.first() else {
        return Err(Error::Config(format!("no cross-attention layer at resolution {resolution}")));
    };
    let mut acc = first.probs.clone();
    for m in &selected[1..] {
        acc.add_assign(&m.probs);
    }
    acc.scale_assign(1.0 / selected.len() as f64);
    Ok(acc)
}

/// Binary square mask with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMask {
    pub side: usize,
    pub cells: Vec<bool>,
    pub step: Option<usize>,
    pub token_indices: Vec<usize>,
    pub threshold: f64,
}

impl EditMask {
    pub fn filled(side: usize, value: bool) -> Self {
        Self {
            side,
            cells: vec![value; side * side],
            step: None,
            token_indices: Vec::new(),
            threshold: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Thresholds the min-max normalised mean over `token_indices` of `A_t`.
pub fn build_edit_mask(a_t: &Matrix, token_indices: &[usize], threshold: f64) -> Result<EditMask> {
    if token_indices.is_empty() {
        return Err(Error::Usage("edit mask needs at least one token index".into()));
    }
    if let Some(&bad) = token_indices.iter().find(|&&i| i >= a_t.cols()) {
        return Err(Error::Usage(format!("token index {bad} outside 0..{}", a_t.cols())));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Usage(format!("threshold {threshold} outside [0, 1]")));
    }
    let side = (a_t.rows() as f64).sqrt().round() as usize;
    if side * side != a_t.rows() {
        return Err(Error::Shape(format!("{} positions do not form a square grid", a_t.rows())));
    }
    let values: Vec<f64> = (0..a_t.rows())
        .map(|r| token_indices.iter().map(|&i| a_t.get(r, i)).sum::<f64>() / token_indices.len() as f64)
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cells = if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo) >= threshold).collect()
    } else {
        log::warn!("constant cross-attention map; the edit mask covers everything");
        vec![true; values.len()]
    };
    Ok(EditMask {
        side,
        cells,
        step: None,
        token_indices: token_indices.to_vec(),
        threshold,
    })
}

/// Area-average resample to `target` cells per side, re-binarised at 0.5.
pub fn resize_mask(mask: &EditMask, target: usize) -> Result<EditMask> {
    let src = mask.side;
    let compatible = target > 0
        && src > 0
        && ((src >= target && src.is_multiple_of(target) && (src / target).is_power_of_two())
            || (target > src && target.is_multiple_of(src) && (target / src).is_power_of_two()));
    if !compatible {
        return Err(Error::Config(format!("cannot resample a {src}-cell mask to {target} cells")));
    }
    let cells = if src >= target {
        let f = src / target;
        (0..target * target)
            .map(|i| {
                let (ty, tx) = (i / target, i % target);
                let set = (0..f * f)
                    .filter(|j| mask.cells[(ty * f + j / f) * src + tx * f + j % f])
                    .count();
                2 * set >= f * f
            })
            .collect()
    } else {
        let f = target / src;
        (0..target * target)
            .map(|i| mask.cells[(i / target / f) * src + (i % target) / f])
            .collect()
    };
    Ok(EditMask {
        side: target,
        cells,
        ..mask.clone()
    })
}

/// Where replaced keys and values come from.
#[derive(Clone, Copy)]
pub enum KvSource<'a> {
    /// The inversion cache, read at `t - 1`.
    Cache(&'a KVCache),
    /// Features captured live by a parallel pass at the same step.
    Live(&'a [AttentionFeatures]),
}

/// Hook applying a policy at one sampling step.
pub struct StepController<'a> {
    policy: &'a ControllerPolicy,
    source: KvSource<'a>,
    t_index: usize,
    t_progress: usize,
    mask: Option<&'a EditMask>,
    resized: Vec<(usize, Vec<bool>)>,
    plans: Vec<(usize, AttentionPlan)>,
}

impl<'a> StepController<'a> {
    pub fn new(
        policy: &'a ControllerPolicy,
        source: KvSource<'a>,
        t_index: usize,
        t_progress: usize,
        mask: Option<&'a EditMask>,
    ) -> Self {
        Self {
            policy,
            source,
            t_index,
            t_progress,
            mask,
            resized: Vec::new(),
            plans: Vec::new(),
        }
    }

    /// Plans chosen so far, as `(layer, plan)`.
    pub fn plans(&self) -> &[(usize, AttentionPlan)] {
        &self.plans
    }

    fn cached(&self, l: usize) -> Result<Arc<KvEntry>> {
        match self.source {
            KvSource::Cache(cache) => cache.lookup(self.t_index, l),
            KvSource::Live(features) => features
                .iter()
                .find(|f| f.layer == l)
                .map(|f| {
                    Arc::new(KvEntry {
                        k: f.k.clone(),
                        v: f.v.clone(),
                    })
                })
                .ok_or_else(|| Error::Integrity(format!("no live features for layer {l}"))),
        }
    }

    fn mask_for(&mut self, side: usize) -> Result<Option<&[bool]>> {
        let Some(mask) = self.mask else { return Ok(None) };
        if !self.resized.iter().any(|(s, _)| *s == side) {
            let m = resize_mask(mask, side)?;
            self.resized.push((side, m.cells));
        }
        Ok(self.resized.iter().find(|(s, _)| *s == side).map(|(_, c)| c.as_slice()))
    }
}

impl AttentionHook for StepController<'_> {
    fn self_attention(&mut self, layer: &LayerInfo, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Option<Matrix>> {
        let plan = policy_plan(self.policy, self.t_progress, self.t_index, layer.index, self.mask)?;
        self.plans.push((layer.index, plan));
        if plan == AttentionPlan::UseLocal {
            return Ok(None);
        }
        if layer.height != layer.width {
            return Err(Error::Config(format!("layer {} has a non-square grid", layer.index)));
        }
        let cached = self.cached(layer.index)?;
        let mask = if plan == AttentionPlan::MaskedBlend {
            self.mask_for(layer.height)?.map(|m| m.to_vec())
        } else {
            None
        };
        attend_with_plan(plan, q, k, v, Some(&cached), mask.as_deref(), layer.heads)
            .map(Some)
            .map_err(|e| match e {
                Error::Numeric { step, message, .. } => Error::Numeric {
                    step,
                    layer: Some(layer.index),
                    message,
                },
                other => other,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn roster() -> Vec<LayerInfo> {
        (0..8)
            .map(|index| LayerInfo {
                index,
                height: 2,
                width: 2,
                channels: 3,
                heads: 1,
            })
            .collect()
    }

    fn meta() -> CacheMetadata {
        CacheMetadata {
            model_fingerprint: "m".into(),
            schedule_fingerprint: "s".into(),
            prompt: Prompt::null(),
        }
    }

    fn filled_cache(steps: usize, rng: &mut ChaCha8Rng) -> KVCache {
        let mut cache = KVCache::new(steps, roster(), meta());
        for t in 0..steps {
            for l in 0..8 {
                cache.record(t, l, random(4, 3, rng), random(4, 3, rng)).unwrap();
            }
        }
        cache
    }

    #[test]
    fn full_recording_completes_and_freezes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cache = KVCache::new(50, roster(), meta());
        assert!(cache.finalize().is_err());
        for t in 0..50 {
            for l in 0..8 {
                assert!(!cache.is_complete());
                cache.record(t, l, random(4, 3, &mut rng), random(4, 3, &mut rng)).unwrap();
            }
        }
        assert!(cache.is_complete());
        cache.finalize().unwrap();
        assert!(matches!(
            cache.record(0, 0, Matrix::zeros(4, 3), Matrix::zeros(4, 3)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn duplicates_and_bad_shapes_are_integrity_errors() {
        let mut cache = KVCache::new(5, roster(), meta());
        cache.record(3, 2, Matrix::zeros(4, 3), Matrix::zeros(4, 3)).unwrap();
        assert!(matches!(
            cache.record(3, 2, Matrix::zeros(4, 3), Matrix::zeros(4, 3)),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            cache.record(1, 2, Matrix::zeros(5, 3), Matrix::zeros(5, 3)),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(cache.record(1, 9, Matrix::zeros(4, 3), Matrix::zeros(4, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn lookup_reads_the_previous_timestep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cache = filled_cache(50, &mut rng);
        cache.finalize().unwrap();
        assert_eq!(cache.lookup(1, 3).unwrap(), cache.entry(0, 3).unwrap());
        assert_eq!(cache.lookup(50, 7).unwrap(), cache.entry(49, 7).unwrap());
        assert!(cache.lookup(0, 0).is_err());
        assert!(cache.lookup(51, 0).is_err());
        let partial = KVCache::new(3, roster(), meta());
        assert!(matches!(partial.lookup(2, 1), Err(Error::Integrity(_))));
    }

    #[test]
    fn cache_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cache = filled_cache(3, &mut rng);
        for t in 0..3 {
            let maps = (0..2)
                .map(|layer| CrossAttentionMap {
                    layer,
                    height: 2,
                    width: 2,
                    probs: random(4, PROMPT_LEN, &mut rng),
                })
                .collect();
            cache.record_cross(t, maps).unwrap();
        }
        cache.finalize().unwrap();
        let dir = tempfile::tempdir().unwrap();
        cache.save(dir.path()).unwrap();
        assert!(dir.path().join("kv_t2_l7_v.tns").exists());
        assert!(dir.path().join("xattn_t1.tns").exists());
        let back = KVCache::load(dir.path()).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.metadata(), cache.metadata());
        for t in 0..3 {
            for l in 0..8 {
                let (a, b) = (cache.entry(t, l).unwrap(), back.entry(t, l).unwrap());
                let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.k), bits(&b.k));
                assert_eq!(bits(&a.v), bits(&b.v));
            }
            assert_eq!(cache.cross_maps(t), back.cross_maps(t));
        }
    }

    #[test]
    fn gate_follows_progress_and_strict_layer_bound() {
        let tic = ControllerPolicy::default();
        for progress in 0..4 {
            for l in 0..8 {
                assert_eq!(policy_plan(&tic, progress, 50 - progress, l, None).unwrap(), AttentionPlan::UseLocal);
            }
        }
        assert_eq!(policy_plan(&tic, 4, 46, 5, None).unwrap(), AttentionPlan::Replace);
        for progress in 0..50 {
            assert_eq!(policy_plan(&tic, progress, 50 - progress, 4, None).unwrap(), AttentionPlan::UseLocal);
        }
        let always = ControllerPolicy::always(PolicyKind::Tic);
        for progress in 0..50 {
            for l in 0..8 {
                assert_eq!(policy_plan(&always, progress, 50 - progress, l, None).unwrap(), AttentionPlan::Replace);
            }
        }
        let naive = ControllerPolicy::naive();
        assert_eq!(policy_plan(&naive, 10, 40, 7, None).unwrap(), AttentionPlan::UseLocal);

        let literal = ControllerPolicy {
            gate: GateRule::StepIndex,
            ..Default::default()
        };
        assert_eq!(policy_plan(&literal, 0, 50, 7, None).unwrap(), AttentionPlan::Replace);
        assert_eq!(policy_plan(&literal, 46, 4, 7, None).unwrap(), AttentionPlan::UseLocal);

        let masked = ControllerPolicy::always(PolicyKind::MaskGuided);
        assert!(matches!(policy_plan(&masked, 0, 1, 0, None), Err(Error::Usage(_))));
        let m = EditMask::filled(2, true);
        assert_eq!(policy_plan(&masked, 0, 1, 0, Some(&m)).unwrap(), AttentionPlan::MaskedBlend);
    }

    #[test]
    fn degenerate_gates_never_fire() {
        for policy in [
            ControllerPolicy { t0: 50, ..Default::default() },
            ControllerPolicy { l0: 7, ..Default::default() },
        ] {
            policy.validate(50, 8).unwrap();
            for progress in 0..50 {
                for l in 0..8 {
                    assert_eq!(policy_plan(&policy, progress, 50 - progress, l, None).unwrap(), AttentionPlan::UseLocal);
                }
            }
        }
        assert!(ControllerPolicy { l0: 8, ..Default::default() }.validate(50, 8).is_err());
        assert!(ControllerPolicy { t0: 51, ..Default::default() }.validate(50, 8).is_err());
        assert!(ControllerPolicy::always(PolicyKind::MaskGuided).validate(50, 8).is_err());
    }

    /// Concat output against a log-sum-exp mixture of the two block attentions.
    pub(crate) fn concat_mixture_error(rng: &mut ChaCha8Rng) -> f64 {
        let (q, k, v) = (random(4, 8, rng), random(4, 8, rng), random(4, 8, rng));
        let cached = KvEntry {
            k: random(4, 8, rng),
            v: random(4, 8, rng),
        };
        let concat = attend_with_plan(AttentionPlan::Concat, &q, &k, &v, Some(&cached), None, 1).unwrap();
        let local = attention(&q, &k, &v, 1).unwrap();
        let inv = attention(&q, &cached.k, &cached.v, 1).unwrap();
        let lse = |q: &[f64], keys: &Matrix| {
            let s: Vec<f64> = (0..keys.rows())
                .map(|j| q.iter().zip(keys.row(j)).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let mut worst = 0.0f64;
        for r in 0..4 {
            let (a, b) = (lse(q.row(r), &k), lse(q.row(r), &cached.k));
            let lambda = 1.0 / (1.0 + (b - a).exp());
            for c in 0..8 {
                let mix = lambda * local.get(r, c) + (1.0 - lambda) * inv.get(r, c);
                worst = worst.max((concat.get(r, c) - mix).abs());
            }
        }
        worst
    }

    #[test]
    fn concat_is_the_log_sum_exp_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert!(concat_mixture_error(&mut rng) < 1e-10);
        }
    }

    #[test]
    fn masked_blend_boundaries_are_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(4, 6, &mut rng), random(4, 6, &mut rng), random(4, 6, &mut rng));
        let c = KvEntry {
            k: random(4, 6, &mut rng),
            v: random(4, 6, &mut rng),
        };
        let run = |plan, mask: Option<&[bool]>| attend_with_plan(plan, &q, &k, &v, Some(&c), mask, 2).unwrap();
        let concat = run(AttentionPlan::Concat, None);
        let replace = run(AttentionPlan::Replace, None);
        assert_eq!(run(AttentionPlan::MaskedBlend, Some(&[true; 4])), concat);
        assert_eq!(run(AttentionPlan::MaskedBlend, Some(&[false; 4])), replace);
        let mixed = run(AttentionPlan::MaskedBlend, Some(&[true, false, false, true]));
        assert_eq!(mixed.row(0), concat.row(0));
        assert_eq!(mixed.row(1), replace.row(1));
        assert_eq!(run(AttentionPlan::UseLocal, None), attention(&q, &k, &v, 2).unwrap());
        let wrong = KvEntry {
            k: Matrix::zeros(3, 6),
            v: Matrix::zeros(3, 6),
        };
        assert!(matches!(
            attend_with_plan(AttentionPlan::Replace, &q, &k, &v, Some(&wrong), None, 2),
            Err(Error::Integrity(_))
        ));
    }

    fn stochastic(rows: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::from_fn(rows, PROMPT_LEN, |_, _| rng.random_range(0.0..1.0));
        for r in 0..rows {
            let s: f64 = m.row(r).iter().sum();
            m.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        m
    }

    #[test]
    fn aggregation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = stochastic(16, &mut rng);
        let one = CrossAttentionMap {
            layer: 2,
            height: 4,
            width: 4,
            probs: p.clone(),
        };
        assert_eq!(aggregate_cross_attention(std::slice::from_ref(&one), 4).unwrap(), p);
        let two = vec![one.clone(), CrossAttentionMap { layer: 3, ..one.clone() }];
        assert!(aggregate_cross_attention(&two, 4).unwrap().max_abs_diff(&p) < 1e-15);
        assert!(matches!(aggregate_cross_attention(&two, 8), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn aggregated_maps_stay_row_stochastic(seed in 0u64..200, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<_> = (0..n)
                .map(|layer| CrossAttentionMap { layer, height: 4, width: 4, probs: stochastic(16, &mut rng) })
                .collect();
            let a = aggregate_cross_attention(&maps, 4).unwrap();
            for r in 0..16 {
                prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(a.row(r).iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn resize_round_trip_keeps_full_blocks(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = EditMask::filled(8, false);
            for _ in 0..rng.random_range(1..4) {
                let (w, h) = (rng.random_range(2..6), rng.random_range(2..6));
                let (x0, y0) = (rng.random_range(0..=8 - w), rng.random_range(0..=8 - h));
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        m.cells[y * 8 + x] = true;
                    }
                }
            }
            for small in [4usize, 2] {
                let f = 8 / small;
                let back = resize_mask(&resize_mask(&m, small).unwrap(), 8).unwrap();
                for y in 0..8 {
                    for x in 0..8 {
                        let (by, bx) = (y / f * f, x / f * f);
                        let full = (0..f * f).all(|j| m.cells[(by + j / f) * 8 + bx + j % f]);
                        if full {
                            prop_assert!(back.cells[y * 8 + x]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn edit_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = stochastic(16, &mut rng);
        assert_eq!(build_edit_mask(&a, &[1], 0.0).unwrap().count(), 16);

        let mut peak = Matrix::zeros(16, PROMPT_LEN);
        for r in 0..16 {
            peak.set(r, 0, 1.0);
        }
        peak.set(2 * 4 + 3, 0, 0.0);
        peak.set(2 * 4 + 3, 2, 1.0);
        let m = build_edit_mask(&peak, &[2], 0.5).unwrap();
        assert_eq!(m.side, 4);
        assert_eq!(m.cells.iter().position(|&c| c), Some(11));
        assert_eq!(m.count(), 1);

        let top = build_edit_mask(&a, &[3], 1.0).unwrap();
        assert!(top.count() >= 1);
        let flat = Matrix::filled(16, PROMPT_LEN, 1.0 / PROMPT_LEN as f64);
        assert_eq!(build_edit_mask(&flat, &[0], 0.9).unwrap().count(), 16);
        assert!(build_edit_mask(&a, &[], 0.3).is_err());
        assert!(build_edit_mask(&a, &[PROMPT_LEN], 0.3).is_err());
        assert!(build_edit_mask(&a, &[0], 1.5).is_err());
    }

    #[test]
    fn resize_examples() {
        let ones = EditMask::filled(8, true);
        assert_eq!(resize_mask(&ones, 4).unwrap().cells, vec![true; 16]);
        let zeros = EditMask::filled(8, false);
        assert_eq!(resize_mask(&zeros, 16).unwrap().cells, vec![false; 256]);
        let mut checker = EditMask::filled(8, false);
        for i in 0..64 {
            checker.cells[i] = (i / 8 + i % 8) % 2 == 0;
        }
        assert_eq!(resize_mask(&checker, 4).unwrap().cells, vec![true; 16]);
        assert!(resize_mask(&ones, 3).is_err());
        assert_eq!(resize_mask(&checker, 8).unwrap(), checker);
    }
}
