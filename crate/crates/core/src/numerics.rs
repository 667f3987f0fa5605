//! Flat parameter storage, the AdamW optimizer, global-norm clipping and a
//! central-difference gradient oracle.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment table. Offsets are assigned back to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new<S: Into<String>>(parts: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.into(),
                    offset,
                    shape,
                };
                offset += seg.len();
                seg
            })
            .collect();
        Layout { segments }
    }

    /// Rebuilds a layout from stored segments, checking that they tile `0..total`.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &segments {
            if seg.offset != expected {
                return Err(Error::Shape(format!(
                    "segment {} starts at {} but previous segments end at {}",
                    seg.name, seg.offset, expected
                )));
            }
            expected += seg.len();
        }
        Ok(Layout { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }
}

/// Flat vector of double-precision parameters (or gradients) with a segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {} entries",
                values.len(),
                layout.total_len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", values[i])));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let seg = self
            .layout
            .segment(name)
            .unwrap_or_else(|| panic!("unknown segment {name}"));
        &self.values[seg.range()]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self
            .layout
            .segment(name)
            .unwrap_or_else(|| panic!("unknown segment {name}"))
            .range();
        &mut self.values[range]
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len() && *self.layout == *other.layout
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        check_same(self, other, "add")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Deep copy used for the old and behavior policy snapshots.
pub fn snapshot(params: &ParamVector) -> ParamVector {
    params.clone()
}

fn check_same(a: &ParamVector, b: &ParamVector, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: vectors of length {} and {}",
            a.len(),
            b.len()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 3e-3,
            warmup_steps: 10,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon >= 0.0
            && self.grad_clip_norm > 0.0
            && self.base_lr >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_at_step(step: u64, cfg: &OptimConfig) -> f64 {
    if step >= cfg.warmup_steps {
        cfg.base_lr
    } else {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamVector, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    if let Some(i) = grads.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {}",
            grads.values[i]
        )));
    }
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            step_count: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }
}

/// One AdamW update in place. Returns the learning rate that was applied.
pub fn adamw_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut OptimizerState,
    cfg: &OptimConfig,
) -> Result<f64> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::Shape(format!(
            "adamw: params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    let lr = lr_at_step(state.step_count, cfg);
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads.values[i];
        let m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let denom = (v / bc2).sqrt() + cfg.epsilon;
        let adaptive = if denom > 0.0 { (m / bc1) / denom } else { 0.0 };
        let p = params.values[i];
        params.values[i] = p - lr * (cfg.weight_decay * p + adaptive);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after optimizer step".into()));
    }
    Ok(lr)
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &ParamVector, eps: f64) -> ParamVector
where
    F: FnMut(&ParamVector) -> f64,
{
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let up = loss(&probe);
        probe.values[i] = orig - eps;
        let down = loss(&probe);
        probe.values[i] = orig;
        grad.values[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Five-point-stencil gradient; truncation error is O(eps^4).
pub fn finite_diff_grad_5pt<F>(mut loss: F, params: &ParamVector, eps: f64) -> ParamVector
where
    F: FnMut(&ParamVector) -> f64,
{
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for i in 0..params.len() {
        let orig = probe.values[i];
        let mut at = |offset: f64| {
            probe.values[i] = orig + offset;
            loss(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0 * eps), at(-eps), at(eps), at(2.0 * eps));
        probe.values[i] = orig;
        grad.values[i] = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps);
    }
    grad
}
