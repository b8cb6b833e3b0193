//! Meta-consistency training.
//!
//! Each iteration takes a minibatch of source scenes and an AmpAug-shifted
//! copy of it:
//!
//! 1. `g_s = grad CE(source; theta)`, `theta' = theta - inner_lr * g_s`
//! 2. at `theta'`: `L_meta = CE(target) + beta * MMD^2(z_s, z_t)`, both
//!    latent batches extracted with `theta'`
//! 3. `theta <- theta - outer_lr * (g_s + grad L_meta)`
//!
//! By default `grad L_meta` is taken with respect to `theta'` and applied at
//! `theta` (first order). With `second_order` set, the Jacobian of the inner
//! step `I - inner_lr * H` is applied through a finite-difference
//! Hessian-vector product.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{median_bandwidth, mmd2, mmd2_grad, KernelParams};
use crate::domains::Scene;
use crate::error::{Error, Result};
use crate::image::{Image, SegMask};
use crate::model::{
    backward_latent, backward_with_consistency, batch_ce, cross_entropy, forward_batch,
    init_params, latent_batch, sgd_step, ArchConfig, ForwardTrace, ModelParams,
};
use crate::spectral::{ampaug_with_amplitude, AmplitudeBank, DEFAULT_MASK_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Step size of the inner (meta-train) update.
    pub inner_lr: f64,
    /// Step size of the combined outer update.
    pub outer_lr: f64,
    /// Weight of the consistency term.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub second_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-3,
            outer_lr: 2e-4,
            beta: 0.1,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            mask_ratio: DEFAULT_MASK_RATIO,
            second_order: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.inner_lr) || !finite_nonneg(self.outer_lr) {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        if !finite_nonneg(self.beta) {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// What an iteration optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Inner step, meta-test CE plus consistency, combined outer step.
    Meta,
    /// Plain gradient step on the source CE, plus the augmented CE when a
    /// target branch exists.
    Erm,
}

/// Source scenes and their shifted counterparts. Target labels are the
/// source labels.
#[derive(Debug, Clone)]
pub struct MetaBatch {
    pub source: Vec<Scene>,
    pub target: Vec<Scene>,
}

impl MetaBatch {
    /// A batch whose target branch is the source itself.
    pub fn identity(source: Vec<Scene>) -> Self {
        Self {
            target: source.clone(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.source.len() != self.target.len() {
            return Err(Error::invalid(format!(
                "batch with {} source and {} target scenes",
                self.source.len(),
                self.target.len()
            )));
        }
        Ok(())
    }

    fn labels(&self) -> Vec<SegMask> {
        self.source.iter().map(|s| s.label.clone()).collect()
    }
}

fn inputs(scenes: &[Scene]) -> Vec<&[Image]> {
    scenes.iter().map(|s| s.cav_images.as_slice()).collect()
}

/// Applies one bank entry (by index) to every CAV image of each scene.
pub fn augment_batch(
    source: &[Scene],
    bank: &AmplitudeBank,
    picks: &[usize],
    mask_ratio: f64,
) -> Result<Vec<Scene>> {
    if picks.len() != source.len() {
        return Err(Error::dims("one bank pick per scene is required"));
    }
    source
        .par_iter()
        .zip(picks)
        .map(|(scene, &k)| {
            let amp = bank
                .entries()
                .get(k)
                .ok_or_else(|| Error::invalid(format!("bank index {k} out of range")))?;
            scene.map_images(|_, img| ampaug_with_amplitude(img, amp, mask_ratio))
        })
        .collect()
}

/// Result of the inner update.
#[derive(Debug, Clone)]
pub struct InnerStep {
    pub params_prime: ModelParams,
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub traces: Vec<ForwardTrace>,
}

/// `theta' = theta - inner_lr * grad CE(source; theta)`. `params` is left
/// untouched.
pub fn inner_update(params: &ModelParams, source: &[Scene], inner_lr: f64) -> Result<InnerStep> {
    let labels: Vec<SegMask> = source.iter().map(|s| s.label.clone()).collect();
    let (loss, gradient, traces) = batch_ce(params, &inputs(source), &labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("meta-train loss".into()));
    }
    let params_prime = sgd_step(params, &gradient, inner_lr)?;
    Ok(InnerStep {
        params_prime,
        loss,
        gradient,
        traces,
    })
}

#[derive(Debug, Clone)]
pub struct MetaObjective {
    pub value: f64,
    pub ce: f64,
    pub cons: f64,
    pub kernel: KernelParams,
    /// Gradient with respect to `theta'`.
    pub gradient: Vec<f64>,
    pub traces: Vec<ForwardTrace>,
}

/// `CE(target; theta') + beta * MMD^2(z_s, z_t)` with both latent batches
/// taken at `theta'`, so the gradient flows through both branches. The
/// kernel bandwidth defaults to the median heuristic on the pooled latents
/// and is treated as a constant.
pub fn meta_objective(
    params_prime: &ModelParams,
    batch: &MetaBatch,
    beta: f64,
    kernel: Option<KernelParams>,
) -> Result<MetaObjective> {
    batch.validate()?;
    let labels = batch.labels();
    let outputs = forward_batch(params_prime, &inputs(&batch.target))?;
    let mut ce = 0.0;
    let mut traces = Vec::with_capacity(outputs.len());
    for ((pred, trace), label) in outputs.into_iter().zip(&labels) {
        ce += cross_entropy(&pred, label)?;
        traces.push(trace);
    }
    ce /= labels.len() as f64;
    let source_traces: Vec<ForwardTrace> = forward_batch(params_prime, &inputs(&batch.source))?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let zs = latent_batch(&source_traces)?;
    let zt = latent_batch(&traces)?;
    let kernel = match kernel {
        Some(k) => k,
        None => median_bandwidth(&zs, &zt)?,
    };
    let cons = mmd2(&zs, &zt, &kernel)?;
    let mut gradient =
        backward_with_consistency(params_prime, &source_traces, &traces, &labels, beta, &kernel)?;
    if beta != 0.0 {
        // MMD^2 is symmetric, so swapping the arguments gives d/dz_s.
        let dzs: Vec<f64> = mmd2_grad(&zt, &zs, &kernel)?.into_iter().map(|v| beta * v).collect();
        let g_zs = backward_latent(params_prime, &source_traces, &dzs)?;
        gradient.iter_mut().zip(&g_zs).for_each(|(g, h)| *g += h);
    }
    Ok(MetaObjective {
        value: ce + beta * cons,
        ce,
        cons,
        kernel,
        gradient,
        traces,
    })
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub epoch: usize,
    pub objective: Objective,
    pub l_ce_train: f64,
    pub l_ce_test: f64,
    pub l_cons: f64,
}

impl LogRecord {
    fn check(&self) -> Result<()> {
        if [self.l_ce_train, self.l_ce_test, self.l_cons].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("losses at iteration {}: {self:?}", self.iter)))
        }
    }
}

pub type TrainLog = Vec<LogRecord>;

/// Mean CE of the source batch at `params` and its gradient.
fn source_ce_grad(params: &ModelParams, source: &[Scene]) -> Result<Vec<f64>> {
    let labels: Vec<SegMask> = source.iter().map(|s| s.label.clone()).collect();
    Ok(batch_ce(params, &inputs(source), &labels)?.1)
}

/// Hessian of the source CE applied to `v`, by central differences along
/// `v` with a perturbation of norm `1e-5`.
fn source_hvp(params: &ModelParams, source: &[Scene], v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = 1e-5 / norm;
    let shifted = |sign: f64| -> Result<ModelParams> {
        let theta = params.theta().iter().zip(v).map(|(t, d)| t + sign * eps * d).collect();
        params.with_theta(theta)
    };
    let gp = source_ce_grad(&shifted(1.0)?, source)?;
    let gm = source_ce_grad(&shifted(-1.0)?, source)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// The combined objective `CE(source; theta) + L_meta(theta'(theta))` as a
/// plain function of `theta`, with the kernel bandwidth held fixed. Used to
/// check the outer gradient numerically.
pub fn combined_objective(
    params: &ModelParams,
    batch: &MetaBatch,
    cfg: &MetaConfig,
    kernel: &KernelParams,
) -> Result<f64> {
    let inner = inner_update(params, &batch.source, cfg.inner_lr)?;
    let meta = meta_objective(&inner.params_prime, batch, cfg.beta, Some(*kernel))?;
    Ok(inner.loss + meta.value)
}

/// Outer gradient of [`combined_objective`] plus the iteration's losses.
pub fn outer_gradient(
    params: &ModelParams,
    batch: &MetaBatch,
    cfg: &MetaConfig,
) -> Result<(Vec<f64>, f64, MetaObjective)> {
    batch.validate()?;
    let inner = inner_update(params, &batch.source, cfg.inner_lr)?;
    let meta = meta_objective(&inner.params_prime, batch, cfg.beta, None)?;
    let mut meta_grad = meta.gradient.clone();
    if cfg.second_order {
        let hvp = source_hvp(params, &batch.source, &meta.gradient)?;
        for (g, h) in meta_grad.iter_mut().zip(&hvp) {
            *g -= cfg.inner_lr * h;
        }
    }
    let total = inner.gradient.iter().zip(&meta_grad).map(|(a, b)| a + b).collect();
    Ok((total, inner.loss, meta))
}

/// One combined step at `outer_lr`. The log record carries the meta-train
/// CE, the meta-test CE and the consistency loss.
pub fn outer_update(
    params: &ModelParams,
    batch: &MetaBatch,
    cfg: &MetaConfig,
) -> Result<(ModelParams, LogRecord)> {
    let (gradient, ce_train, meta) = outer_gradient(params, batch, cfg)?;
    let record = LogRecord {
        iter: 0,
        epoch: 0,
        objective: Objective::Meta,
        l_ce_train: ce_train,
        l_ce_test: meta.ce,
        l_cons: meta.cons,
    };
    record.check()?;
    Ok((sgd_step(params, &gradient, cfg.outer_lr)?, record))
}

/// ERM step. With a distinct target branch the gradient is the sum of the
/// source and augmented CE gradients; otherwise only the source CE is used.
/// The logged consistency is the MMD between the two branches at `theta`.
pub fn erm_update(
    params: &ModelParams,
    batch: &MetaBatch,
    augmented: bool,
    lr: f64,
) -> Result<(ModelParams, LogRecord)> {
    batch.validate()?;
    let labels = batch.labels();
    let (ce_s, mut gradient, traces_s) = batch_ce(params, &inputs(&batch.source), &labels)?;
    let (ce_t, l_cons) = if augmented {
        let (ce_t, g_t, traces_t) = batch_ce(params, &inputs(&batch.target), &labels)?;
        for (g, h) in gradient.iter_mut().zip(&g_t) {
            *g += h;
        }
        let zs = latent_batch(&traces_s)?;
        let zt = latent_batch(&traces_t)?;
        (ce_t, mmd2(&zs, &zt, &median_bandwidth(&zs, &zt)?)?)
    } else {
        (ce_s, 0.0)
    };
    let record = LogRecord {
        iter: 0,
        epoch: 0,
        objective: Objective::Erm,
        l_ce_train: ce_s,
        l_ce_test: ce_t,
        l_cons,
    };
    record.check()?;
    Ok((sgd_step(params, &gradient, lr)?, record))
}

/// Full meta-consistency training from a seeded initialization.
pub fn train(
    dataset: &[Scene],
    bank: &AmplitudeBank,
    cfg: &MetaConfig,
) -> Result<(ModelParams, TrainLog)> {
    let params = init_params(&ArchConfig::default(), cfg.seed)?;
    train_from(params, dataset, Some(bank), cfg, Objective::Meta)
}

/// Runs `cfg.epochs` epochs of `objective` starting at `params`.
///
/// Without a bank the target branch equals the source. Every epoch
/// reshuffles the dataset; each source scene draws one bank entry, applied
/// to all of its CAV images. All randomness comes from one stream seeded
/// with `cfg.seed`, consumed in a fixed order.
pub fn train_from(
    params: ModelParams,
    dataset: &[Scene],
    bank: Option<&AmplitudeBank>,
    cfg: &MetaConfig,
    objective: Objective,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    if let Some(bank) = bank {
        let (h, w) = dataset[0].dims();
        let (bh, bw, _) = bank.dims();
        if bank.is_empty() || (bh, bw) != (h, w) {
            return Err(Error::dims(format!(
                "bank of {}x{bw} entries for {h}x{w} scenes",
                bh
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_5EED);
    let mut params = params;
    let mut log = TrainLog::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let source: Vec<Scene> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let batch = match bank {
                Some(bank) => {
                    let picks: Vec<usize> =
                        chunk.iter().map(|_| rng.gen_range(0..bank.len())).collect();
                    let target = augment_batch(&source, bank, &picks, cfg.mask_ratio)?;
                    MetaBatch { source, target }
                }
                None => MetaBatch::identity(source),
            };
            let iter = log.len();
            let (next, mut record) = match objective {
                Objective::Meta => outer_update(&params, &batch, cfg),
                Objective::Erm => erm_update(&params, &batch, bank.is_some(), cfg.outer_lr),
            }
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, iteration {iter}: {msg}")),
                other => other,
            })?;
            record.iter = iter;
            record.epoch = epoch;
            log::debug!(
                "iter {iter} epoch {epoch}: ce_train {:.5} ce_test {:.5} cons {:.3e}",
                record.l_ce_train,
                record.l_ce_test,
                record.l_cons
            );
            log.push(record);
            params = next;
        }
    }
    Ok((params, log))
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_scene, style_bank};

    fn scenes(n: u64, side: usize) -> Vec<Scene> {
        (0..n).map(|s| generate_scene(s, side, side, 2).unwrap()).collect()
    }

    #[test]
    fn config_validation() {
        assert!(MetaConfig::default().validate().is_ok());
        for bad in [
            MetaConfig { inner_lr: -1.0, ..Default::default() },
            MetaConfig { beta: f64::NAN, ..Default::default() },
            MetaConfig { mask_ratio: 1.0, ..Default::default() },
            MetaConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_inner_lr_keeps_params() {
        let p = init_params(&ArchConfig::default(), 1).unwrap();
        let step = inner_update(&p, &scenes(2, 8), 0.0).unwrap();
        assert_eq!(step.params_prime, p);
    }

    #[test]
    fn zero_outer_lr_still_logs() {
        let p = init_params(&ArchConfig::default(), 1).unwrap();
        let batch = MetaBatch::identity(scenes(2, 8));
        let cfg = MetaConfig { outer_lr: 0.0, ..Default::default() };
        let (q, rec) = outer_update(&p, &batch, &cfg).unwrap();
        assert_eq!(q, p);
        assert!(rec.l_ce_train > 0.0 && rec.l_ce_test > 0.0 && rec.l_cons >= 0.0);
    }

    #[test]
    fn beta_zero_value_is_plain_ce() {
        let p = init_params(&ArchConfig::default(), 2).unwrap();
        let batch = MetaBatch::identity(scenes(3, 8));
        let inner = inner_update(&p, &batch.source, 1e-3).unwrap();
        let meta = meta_objective(&inner.params_prime, &batch, 0.0, None).unwrap();
        assert_eq!(meta.value, meta.ce);
    }

    #[test]
    fn shared_forward_has_no_discrepancy() {
        let p = init_params(&ArchConfig::default(), 3).unwrap();
        let batch = MetaBatch::identity(scenes(3, 8));
        let inner = inner_update(&p, &batch.source, 0.0).unwrap();
        let meta = meta_objective(&inner.params_prime, &batch, 0.1, None).unwrap();
        assert!(meta.cons < 1e-9);
    }

    #[test]
    fn epochs_zero_returns_init() {
        let data = scenes(3, 8);
        let bank = style_bank(2, 8, 8, 1).unwrap();
        let cfg = MetaConfig { epochs: 0, ..Default::default() };
        let (p, log) = train(&data, &bank, &cfg).unwrap();
        assert_eq!(p, init_params(&ArchConfig::default(), 0).unwrap());
        assert!(log.is_empty());
    }

    #[test]
    fn log_length_and_reproducibility() {
        let data = scenes(5, 8);
        let bank = style_bank(3, 8, 8, 1).unwrap();
        let cfg = MetaConfig { epochs: 2, batch_size: 2, mask_ratio: 0.1, outer_lr: 0.1, ..Default::default() };
        let (p1, log1) = train(&data, &bank, &cfg).unwrap();
        let (p2, log2) = train(&data, &bank, &cfg).unwrap();
        assert_eq!(log1.len(), 2 * 3);
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert_eq!(log1.last().unwrap().epoch, 1);
    }

    #[test]
    fn bank_dims_must_match() {
        let data = scenes(2, 8);
        let bank = style_bank(2, 16, 16, 1).unwrap();
        assert!(train(&data, &bank, &MetaConfig::default()).is_err());
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
