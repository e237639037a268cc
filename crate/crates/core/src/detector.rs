//! Online domain change detection.
//!
//! Each incoming episode is embedded (mean support embedding), smoothed by an
//! exponential moving average, and turned into a projection vector z_t whose
//! i-th entry is the distance between the current embedding and the i-th most
//! recent EMA value. A sliding buffer of 2B projections feeds an MMD²
//! U-statistic between its older and newer halves; the statistic is compared
//! against an adaptively estimated threshold μ_t + δ·σ_t.
//!
//! Detections increment a monotone latent domain label. After a detection the
//! projection buffer is reset and further detections are suppressed for a
//! refractory window, since the test window straddles the boundary.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelConfig, WindowPair};
use crate::learner::{forward_embed, Episode, Model};

/// Which powers of the detection statistic feed the online moment estimates.
///
/// `Squared` tracks EMAs of W² and W⁴ (the printed recursion); `Raw` tracks W
/// and W², making μ_t + δ·σ_t a quantile of W itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    Squared,
    Raw,
}

/// Kernel bandwidth selection: frozen median heuristic over the first full
/// projection buffer, or a fixed value. Serializes as the string "auto" or
/// a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Auto,
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Auto => s.serialize_str("auto"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Bandwidth::Fixed(v)),
            Repr::Word(w) if w == "auto" => Ok(Bandwidth::Auto),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "bandwidth must be \"auto\" or a number, got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// EMA weight α in (0, 1].
    pub alpha: f64,
    /// Projection dimension m: how many past EMA values form z_t.
    pub history_len: usize,
    /// Window size B; the statistic compares two windows of B projections.
    pub window_size: usize,
    /// Moment EMA weight ρ in (0, 1).
    pub rho: f64,
    /// Threshold multiplier δ (1.64 targets the 95% normal quantile).
    pub delta: f64,
    pub moment_source: MomentSource,
    pub bandwidth: Bandwidth,
    /// Detections are suppressed for this many moment updates while the
    /// zero-initialized moments warm up.
    pub moment_warmup: usize,
    /// Steps to suppress detection after a flag; `None` means 2B.
    pub refractory: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            alpha: 0.1,
            history_len: 5,
            window_size: 100,
            rho: 0.05,
            delta: 1.64,
            moment_source: MomentSource::Squared,
            bandwidth: Bandwidth::Auto,
            moment_warmup: 100,
            refractory: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if self.history_len == 0 {
            return Err(Error::Config("history_len must be >= 1".into()));
        }
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be >= 2".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must be in (0,1), got {}", self.rho)));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if let Bandwidth::Fixed(b) = self.bandwidth {
            if !(b > 0.0) {
                return Err(Error::Config(format!("fixed bandwidth must be > 0, got {b}")));
            }
        }
        Ok(())
    }

    pub fn effective_refractory(&self) -> usize {
        self.refractory.unwrap_or(2 * self.window_size)
    }

    /// Steps before any detection is considered: the buffer pipeline needs
    /// 2B + m + 1 steps to produce trustworthy statistics.
    pub fn burn_in_steps(&self) -> u64 {
        (2 * self.window_size + self.history_len + 1) as u64
    }
}

/// EMA of task embeddings plus a ring of the last `m` EMA values.
#[derive(Debug, Clone)]
pub struct EmaState {
    alpha: f64,
    current: Option<Vec<f64>>,
    history: VecDeque<Vec<f64>>,
    history_len: usize,
}

impl EmaState {
    pub fn new(alpha: f64, history_len: usize) -> Self {
        EmaState {
            alpha,
            current: None,
            history: VecDeque::with_capacity(history_len + 1),
            history_len,
        }
    }

    pub fn current(&self) -> Option<&[f64]> {
        self.current.as_deref()
    }

    /// Feeds one embedding: pushes the previous EMA into history, updates
    /// O_t = α·o_t + (1-α)·O_{t-1} (the first call sets O_1 = o_1), and
    /// returns z_t with z_t[i] = ||o_t - O_{t-i}||₂. Returns `None` until m
    /// history entries exist.
    pub fn update_and_project(&mut self, o_t: &[f64]) -> Result<Option<Vec<f64>>> {
        match self.current.take() {
            None => {
                self.current = Some(o_t.to_vec());
                Ok(None)
            }
            Some(prev) => {
                if prev.len() != o_t.len() {
                    let expected = prev.len();
                    self.current = Some(prev);
                    return Err(Error::DimensionMismatch(expected, o_t.len()));
                }
                self.history.push_back(prev.clone());
                if self.history.len() > self.history_len {
                    self.history.pop_front();
                }
                let z = if self.history.len() == self.history_len {
                    let mut z = Vec::with_capacity(self.history_len);
                    for past in self.history.iter().rev() {
                        z.push(kernel::euclidean_distance(o_t, past)?);
                    }
                    Some(z)
                } else {
                    None
                };
                let next: Vec<f64> = prev
                    .iter()
                    .zip(o_t)
                    .map(|(p, o)| self.alpha * o + (1.0 - self.alpha) * p)
                    .collect();
                self.current = Some(next);
                Ok(z)
            }
        }
    }
}

/// Per-step detector output, also usable as a trace record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorStep {
    pub step: u64,
    pub statistic: Option<f64>,
    pub threshold: Option<f64>,
    pub changed: bool,
    pub label: u64,
}

/// Online domain change detector: EMA embedding, projection buffer, MMD
/// statistic, and adaptive-threshold test.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    ema: EmaState,
    projections: VecDeque<Vec<f64>>,
    kernel: Option<KernelConfig>,
    mu: f64,
    mu2: f64,
    moment_updates: usize,
    steps: u64,
    refractory_remaining: usize,
    label: u64,
}

/// Mean support embedding of an episode: o_t = (1/K) Σ_k f_θ(x^k). Labels
/// and the query set are unused.
pub fn embed_task(ep: &Episode, model: &Model) -> Result<Vec<f64>> {
    if ep.support.is_empty() {
        return Err(Error::invalid("cannot embed an episode with no support examples"));
    }
    let mut acc = vec![0.0; model.config.embed_dim];
    for example in &ep.support {
        let emb = forward_embed(model, &example.x)?;
        for (a, v) in acc.iter_mut().zip(&emb) {
            *a += v;
        }
    }
    let k = ep.support.len() as f64;
    for a in acc.iter_mut() {
        *a /= k;
    }
    Ok(acc)
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let kernel = match cfg.bandwidth {
            Bandwidth::Fixed(b) => Some(KernelConfig::new(b)?),
            Bandwidth::Auto => None,
        };
        Ok(Detector {
            ema: EmaState::new(cfg.alpha, cfg.history_len),
            projections: VecDeque::with_capacity(2 * cfg.window_size + 1),
            kernel,
            mu: 0.0,
            mu2: 0.0,
            moment_updates: 0,
            steps: 0,
            refractory_remaining: 0,
            label: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn label(&self) -> u64 {
        self.label
    }

    pub fn sigma(&self) -> f64 {
        (self.mu2 - self.mu * self.mu).max(0.0).sqrt()
    }

    pub fn threshold(&self) -> f64 {
        self.mu + self.cfg.delta * self.sigma()
    }

    /// The frozen kernel bandwidth, once chosen.
    pub fn bandwidth(&self) -> Option<f64> {
        self.kernel.map(|k| k.bandwidth)
    }

    fn burn_in_complete(&self) -> bool {
        self.steps > self.cfg.burn_in_steps() && self.moment_updates > self.cfg.moment_warmup
    }

    /// Feeds one embedding through the EMA and pushes the resulting
    /// projection (if any) into the statistic buffer. Freezes the median
    /// heuristic bandwidth the first time the buffer fills.
    pub fn update_and_project(&mut self, o_t: &[f64]) -> Result<Option<Vec<f64>>> {
        let z = self.ema.update_and_project(o_t)?;
        if let Some(z) = &z {
            self.projections.push_back(z.clone());
            if self.projections.len() > 2 * self.cfg.window_size {
                self.projections.pop_front();
            }
            if self.projections.len() == 2 * self.cfg.window_size && self.kernel.is_none() {
                let samples: Vec<Vec<f64>> = self.projections.iter().cloned().collect();
                let bw = kernel::median_heuristic_bandwidth(&samples)?;
                self.kernel = Some(KernelConfig::new(bw)?);
            }
        }
        Ok(z)
    }

    /// MMD² U-statistic between the older and newer halves of the projection
    /// buffer. `NotReady` until the buffer holds 2B projections.
    pub fn detection_statistic(&self) -> Result<f64> {
        let b = self.cfg.window_size;
        if self.projections.len() < 2 * b {
            return Err(Error::NotReady("projection buffer not yet full"));
        }
        let kernel_cfg = self
            .kernel
            .as_ref()
            .ok_or(Error::NotReady("kernel bandwidth not yet frozen"))?;
        let reference: Vec<Vec<f64>> = self.projections.iter().take(b).cloned().collect();
        let test: Vec<Vec<f64>> = self.projections.iter().skip(b).cloned().collect();
        kernel::mmd2_ustat(&WindowPair::new(reference, test)?, kernel_cfg)
    }

    /// One adaptive-threshold update: folds W into the moment estimates
    /// (update first, then test) and reports whether the statistic exceeds
    /// μ_t + δ·σ_t once burn-in is complete.
    pub fn odcd_step(&mut self, w: f64) -> Result<bool> {
        if !w.is_finite() {
            return Err(Error::RunAbort {
                step: self.steps,
                detail: format!("non-finite detection statistic {w}"),
            });
        }
        let (x, x2) = match self.cfg.moment_source {
            MomentSource::Squared => (w * w, w * w * w * w),
            MomentSource::Raw => (w, w * w),
        };
        self.mu = (1.0 - self.cfg.rho) * self.mu + self.cfg.rho * x;
        self.mu2 = (1.0 - self.cfg.rho) * self.mu2 + self.cfg.rho * x2;
        self.moment_updates += 1;
        Ok(self.burn_in_complete() && w > self.threshold())
    }

    /// Full detector step: embed, project, test, and manage the label and
    /// refractory window. Returns the per-step trace record.
    pub fn step(&mut self, ep: &Episode, model: &Model) -> Result<DetectorStep> {
        let o_t = embed_task(ep, model)?;
        self.step_embedding(&o_t)
    }

    /// Same as [`Detector::step`] but takes a precomputed embedding.
    pub fn step_embedding(&mut self, o_t: &[f64]) -> Result<DetectorStep> {
        self.steps += 1;
        if o_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::RunAbort {
                step: self.steps,
                detail: "non-finite task embedding".into(),
            });
        }
        if self.refractory_remaining > 0 {
            self.refractory_remaining -= 1;
        }
        self.update_and_project(o_t)?;
        let mut statistic = None;
        let mut threshold = None;
        let mut changed = false;
        match self.detection_statistic() {
            Ok(w) => {
                let exceeded = self.odcd_step(w)?;
                statistic = Some(w);
                threshold = Some(self.threshold());
                if exceeded && self.refractory_remaining == 0 {
                    changed = true;
                    self.label += 1;
                    self.refractory_remaining = self.cfg.effective_refractory();
                    // The buffer straddles the boundary; restart it so the
                    // next statistic compares post-change windows only.
                    self.projections.clear();
                }
            }
            Err(Error::NotReady(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(DetectorStep {
            step: self.steps,
            statistic,
            threshold,
            changed,
            label: self.label,
        })
    }
}
