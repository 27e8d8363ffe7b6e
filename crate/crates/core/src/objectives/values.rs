//! Plain `f64` versions of every estimator, one example at a time.
//!
//! These are the reference implementations: reported objective values,
//! VIMCO baselines and the oracle's enumerations all go through here, and the
//! tape-based versions are tested against them.

use super::{ObjectiveKind, ObjectiveSpec};
use crate::{Error, Result};

/// The K log-weight triples drawn for one observation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogWeights {
    pub log_lik: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub log_prop: Vec<f64>,
}

impl LogWeights {
    pub fn new(log_lik: Vec<f64>, log_prior: Vec<f64>, log_prop: Vec<f64>) -> Result<Self> {
        if log_lik.len() != log_prior.len() || log_lik.len() != log_prop.len() || log_lik.is_empty() {
            return Err(Error::shape(
                "log_weights",
                format!(
                    "need K ≥ 1 aligned entries, got {}/{}/{}",
                    log_lik.len(),
                    log_prior.len(),
                    log_prop.len()
                ),
            ));
        }
        Ok(LogWeights {
            log_lik,
            log_prior,
            log_prop,
        })
    }

    pub fn k(&self) -> usize {
        self.log_lik.len()
    }

    /// `ℓᵢ = ln p(x|zᵢ) + ln p(zᵢ) − ln q(zᵢ|x)`.
    pub fn ell(&self) -> Vec<f64> {
        self.ell_alpha(1.0)
    }

    /// `α·ln p(x|zᵢ) + ln p(zᵢ) − ln q(zᵢ|x)`.
    pub fn ell_alpha(&self, alpha: f64) -> Vec<f64> {
        (0..self.k())
            .map(|i| alpha * self.log_lik[i] + self.log_prior[i] - self.log_prop[i])
            .collect()
    }

    /// Copy with entry `i` replaced by the arithmetic mean of the others.
    /// Since `ℓ` and `ℓ^(α)` are linear in the triple, this replaces both of
    /// them (and `ln p(x|zᵢ)`) by the mean over the remaining samples.
    pub fn leave_one_out(&self, i: usize) -> LogWeights {
        let k = self.k();
        assert!(k >= 2, "leave-one-out needs at least two samples");
        let others = |v: &[f64]| (v.iter().sum::<f64>() - v[i]) / (k - 1) as f64;
        let mut out = self.clone();
        out.log_lik[i] = others(&self.log_lik);
        out.log_prior[i] = others(&self.log_prior);
        out.log_prop[i] = others(&self.log_prop);
        out
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// `softmax(xs)` computed as `exp(xᵢ − logsumexp(xs))`.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// How `Ŝ` aggregates the log-weights of one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundForm {
    /// `ln (1/K) Σ exp(ℓᵢ)` — the importance-weighted bound.
    LogMeanExp,
    /// `(1/K) Σ ℓᵢ` — the sampled ELBO.
    Mean,
    /// `(1/K) Σ ln p(x|zᵢ) − KL(q‖p(z))` with the KL in closed form.
    Analytic { kl: f64 },
}

/// `Ŝ` in the given form.
pub fn s_hat(w: &LogWeights, form: BoundForm) -> f64 {
    s_hat_alpha_form(w, 1.0, form)
}

/// `Ŝ_α`: `Ŝ` with `p(x|z)` raised to the power `α`.
pub fn s_hat_alpha_form(w: &LogWeights, alpha: f64, form: BoundForm) -> f64 {
    match form {
        BoundForm::LogMeanExp => log_mean_exp(&w.ell_alpha(alpha)),
        BoundForm::Mean => mean(&w.ell_alpha(alpha)),
        BoundForm::Analytic { kl } => alpha * mean(&w.log_lik) - kl,
    }
}

pub fn s_hat_iwae(w: &LogWeights) -> f64 {
    s_hat(w, BoundForm::LogMeanExp)
}

pub fn s_hat_alpha(w: &LogWeights, alpha: f64) -> f64 {
    s_hat_alpha_form(w, alpha, BoundForm::LogMeanExp)
}

/// Self-normalised estimate of `E_{p(z|x)}[ln p(x|z)]`.
pub fn u_hat(w: &LogWeights) -> f64 {
    let u: f64 = softmax(&w.ell()).iter().zip(&w.log_lik).map(|(a, b)| a * b).sum();
    if cfg!(feature = "mutation-u-hat") {
        -u
    } else {
        u
    }
}

pub fn kl_estimate(w: &LogWeights, base_value: f64) -> f64 {
    u_hat(w) - base_value
}

/// `(Ŝ_α − α·Ŝ)/(α − 1)`.
pub fn renyi_estimate(s_alpha: f64, s: f64, alpha: f64) -> f64 {
    (s_alpha - alpha * s) / (alpha - 1.0)
}

/// [`renyi_estimate`] from the batches. Every form shifts by `α·c` when all
/// log-likelihoods move by `c`, so subtracting their maximum first leaves
/// the difference unchanged while avoiding cancellation between the large
/// `α·ln p(x|z)` terms.
fn renyi_estimate_shifted(lik: &LogWeights, alpha_batch: &LogWeights, alpha: f64, form: BoundForm) -> f64 {
    let c = lik
        .log_lik
        .iter()
        .chain(&alpha_batch.log_lik)
        .cloned()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !c.is_finite() {
        return renyi_estimate(s_hat_alpha_form(alpha_batch, alpha, form), s_hat(lik, form), alpha);
    }
    let shift = |w: &LogWeights| LogWeights {
        log_lik: w.log_lik.iter().map(|v| v - c).collect(),
        ..w.clone()
    };
    renyi_estimate(
        s_hat_alpha_form(&shift(alpha_batch), alpha, form),
        s_hat(&shift(lik), form),
        alpha,
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-example by-products of an objective estimate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub s_hat: f64,
    pub u_hat: Option<f64>,
    pub kl_est: Option<f64>,
    pub s_alpha_hat: Option<f64>,
    pub renyi_est: Option<f64>,
    pub implied_lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueOutput {
    pub value: f64,
    pub diagnostics: Diagnostics,
}

pub(crate) fn check_renyi_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || (alpha - 1.0).abs() < 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "renyi objective needs alpha > 0 and |alpha − 1| ≥ 1e-6, got {alpha}"
        )));
    }
    Ok(())
}

pub(crate) fn check_power_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "power objective needs alpha > 0, got {alpha}"
        )));
    }
    Ok(())
}

/// `(1−λ)·Ŝ(lik) + λ·Û(mi)`.
pub fn objective_kl(lik: &LogWeights, mi: &LogWeights, lambda: f64, form: BoundForm) -> ValueOutput {
    let s = s_hat(lik, form);
    let u = u_hat(mi);
    let value = if lambda == 0.0 {
        s
    } else if lambda == 1.0 {
        u
    } else {
        (1.0 - lambda) * s + lambda * u
    };
    ValueOutput {
        value,
        diagnostics: Diagnostics {
            s_hat: s,
            u_hat: Some(u),
            kl_est: Some(u - s),
            ..Diagnostics::default()
        },
    }
}

/// `λ/(α−1)·Ŝ_α − (λα/(α−1) − 1)·Ŝ`.
pub fn objective_renyi(
    lik: &LogWeights,
    alpha_batch: &LogWeights,
    lambda: f64,
    alpha: f64,
    form: BoundForm,
) -> Result<ValueOutput> {
    check_renyi_alpha(alpha)?;
    let s = s_hat(lik, form);
    let sa = s_hat_alpha_form(alpha_batch, alpha, form);
    let value = if lambda == 0.0 {
        s
    } else {
        lambda / (alpha - 1.0) * sa - (lambda * alpha / (alpha - 1.0) - 1.0) * s
    };
    Ok(ValueOutput {
        value,
        diagnostics: Diagnostics {
            s_hat: s,
            s_alpha_hat: Some(sa),
            renyi_est: Some(renyi_estimate_shifted(lik, alpha_batch, alpha, form)),
            ..Diagnostics::default()
        },
    })
}

/// `Ŝ_α / α`, the Rényi objective at `λ = (α−1)/α`.
pub fn objective_power(batch: &LogWeights, alpha: f64, form: BoundForm) -> Result<ValueOutput> {
    check_power_alpha(alpha)?;
    let s = s_hat(batch, form);
    let sa = s_hat_alpha_form(batch, alpha, form);
    let renyi = if (alpha - 1.0).abs() < 1e-6 {
        None
    } else {
        Some(renyi_estimate_shifted(batch, batch, alpha, form))
    };
    Ok(ValueOutput {
        value: if alpha == 1.0 { s } else { sa / alpha },
        diagnostics: Diagnostics {
            s_hat: s,
            s_alpha_hat: Some(sa),
            renyi_est: renyi,
            implied_lambda: Some((alpha - 1.0) / alpha),
            ..Diagnostics::default()
        },
    })
}

/// The configured objective on one example. `mi` is the separately drawn
/// batch for the KL / Rényi term, or `None` when the likelihood batch is
/// reused.
pub fn objective_value(
    spec: &ObjectiveSpec,
    form: BoundForm,
    lik: &LogWeights,
    mi: Option<&LogWeights>,
) -> Result<ValueOutput> {
    let mi = mi.unwrap_or(lik);
    match spec.objective {
        ObjectiveKind::None => Ok(ValueOutput {
            value: s_hat(lik, form),
            diagnostics: Diagnostics {
                s_hat: s_hat(lik, form),
                ..Diagnostics::default()
            },
        }),
        ObjectiveKind::Kl => Ok(objective_kl(lik, mi, spec.lambda, form)),
        ObjectiveKind::Renyi => objective_renyi(lik, mi, spec.lambda, spec.alpha, form),
        ObjectiveKind::Power => objective_power(lik, spec.alpha, form),
    }
}

/// VIMCO learning signals `Ô − bᵢ` for every sample of each batch, where `bᵢ`
/// is the objective recomputed with sample `i` replaced by the mean of the
/// other samples of its batch.
pub fn vimco_signals(
    spec: &ObjectiveSpec,
    form: BoundForm,
    lik: &LogWeights,
    mi: Option<&LogWeights>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let value = objective_value(spec, form, lik, mi)?.value;
    let lik_signals = (0..lik.k())
        .map(|i| Ok(value - objective_value(spec, form, &lik.leave_one_out(i), mi)?.value))
        .collect::<Result<Vec<_>>>()?;
    let mi_signals = match mi {
        Some(m) => (0..m.k())
            .map(|j| Ok(value - objective_value(spec, form, lik, Some(&m.leave_one_out(j)))?.value))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok((lik_signals, mi_signals))
}
