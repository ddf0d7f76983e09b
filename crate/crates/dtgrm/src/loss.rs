//! Training objectives: frame classification, temporal smoothing,
//! exchange detection, correction, and their weighted sum across stages.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to likelihoods before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Temporal-smoothing weight.
    pub omega: f64,
    /// Exchange-detection weight.
    pub lambda_e: f64,
    /// Correction-classification weight (exchanged pass).
    pub lambda_c: f64,
    /// Truncation threshold on adjacent log-likelihood differences.
    pub tmse_tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { omega: 0.15, lambda_e: 2.0, lambda_c: 0.5, tmse_tau: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.omega < 0.0 || self.lambda_e < 0.0 || self.lambda_c < 0.0 || self.tmse_tau < 0.0 {
            return Err(crate::error::Error::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Self-supervision disabled: no exchanged pass, no detection term.
    pub fn without_self_supervision(mut self) -> Self {
        self.lambda_e = 0.0;
        self.lambda_c = 0.0;
        self
    }
}

/// Mean negative log-likelihood of the target class per frame.
pub fn cls_loss<T: Scalar>(y: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    let (t_len, c) = y.dims2("cls_loss likelihoods");
    assert_eq!(t_len, targets.len(), "one target per frame");
    assert!(
        targets.iter().all(|&t| t < c),
        "target class out of range for {c} classes"
    );
    y.gather_per_row(targets)
        .clamp(Some(T::of(LOG_FLOOR)), Some(T::one()))
        .log()
        .neg()
        .mean()
}

/// Truncated mean squared difference of adjacent log-likelihoods. The
/// earlier frame is a constant (no gradient), matching the smoothing
/// term's stop-gradient convention. Zero for single-frame sequences.
pub fn tmse_loss<T: Scalar>(y: &Tensor<T>, tau: f64) -> Tensor<T> {
    tmse_loss_ref(y, &y.detach(), tau)
}

/// Smoothing loss with an explicit constant for the earlier-frame term:
/// row t of `y` is compared against row t-1 of `reference` (likelihood
/// space). Training uses a detached copy of `y` itself; gradient
/// checking passes a snapshot frozen at the baseline so the
/// stop-gradient convention stays finite-difference-consistent.
pub fn tmse_loss_ref<T: Scalar>(y: &Tensor<T>, reference: &Tensor<T>, tau: f64) -> Tensor<T> {
    let (t_len, c) = y.dims2("tmse likelihoods");
    assert_eq!(y.shape(), reference.shape(), "reference shape mismatch");
    assert!(
        !reference.requires_grad(),
        "smoothing reference must be constant"
    );
    if t_len < 2 {
        return Tensor::scalar(T::zero());
    }
    let cur_rows: Vec<Option<usize>> = (1..t_len).map(Some).collect();
    let prev_rows: Vec<Option<usize>> = (0..t_len - 1).map(Some).collect();
    let cur = y
        .clamp(Some(T::of(LOG_FLOOR)), Some(T::one()))
        .log()
        .index_rows(&cur_rows);
    let prev = reference
        .clamp(Some(T::of(LOG_FLOOR)), Some(T::one()))
        .log()
        .index_rows(&prev_rows);
    let delta = cur.sub(&prev).abs().clamp(None, Some(T::of(tau)));
    delta
        .mul(&delta)
        .sum()
        .scale(T::of(1.0 / (t_len as f64 * c as f64)))
}

/// Named loss components, pre-weighting, plus the weighted total.
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub tmse: f64,
    pub cls_exchanged: f64,
    pub tmse_exchanged: f64,
    pub exchange_detect: f64,
}

/// Weighted multi-stage objective.
///
/// `ordered` and `exchanged` hold backbone plus stage predictions on
/// the ordered and frame-exchanged inputs; `heads` holds the per-stage
/// exchange-detection outputs for the exchanged pass. `exchanged` and
/// `heads` are empty when self-supervision is off. Correction targets
/// are the ordered ground truth; detection targets are the binary
/// exchange labels.
pub fn total_loss<T: Scalar>(
    ordered: &[Tensor<T>],
    exchanged: &[Tensor<T>],
    heads: &[Tensor<T>],
    targets: &[usize],
    exchange_labels: &[usize],
    w: &LossWeights,
) -> (Tensor<T>, LossBreakdown) {
    assert!(!ordered.is_empty(), "need at least the backbone prediction");
    assert!(
        exchanged.is_empty() || exchanged.len() == ordered.len(),
        "exchanged pass must cover the same {} stages",
        ordered.len()
    );
    assert!(
        heads.is_empty() || heads.len() == ordered.len() - 1,
        "one exchange head per refinement stage"
    );

    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<Tensor<T>> = Vec::new();

    for y in ordered {
        let cls = cls_loss(y, targets);
        let tmse = tmse_loss(y, w.tmse_tau);
        breakdown.cls += cls.item().to_f64();
        breakdown.tmse += tmse.item().to_f64();
        terms.push(cls);
        terms.push(tmse.scale(T::of(w.omega)));
    }
    for y in exchanged {
        let cls = cls_loss(y, targets);
        let tmse = tmse_loss(y, w.tmse_tau);
        breakdown.cls_exchanged += cls.item().to_f64();
        breakdown.tmse_exchanged += tmse.item().to_f64();
        terms.push(cls.scale(T::of(w.lambda_c)));
        terms.push(tmse.scale(T::of(w.omega)));
    }
    for e in heads {
        let det = cls_loss(e, exchange_labels);
        breakdown.exchange_detect += det.item().to_f64();
        terms.push(det.scale(T::of(w.lambda_e)));
    }

    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t);
    }
    breakdown.total = total.item().to_f64();
    (total, breakdown)
}
