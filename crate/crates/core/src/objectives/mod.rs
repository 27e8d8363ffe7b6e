//! Monte-Carlo objectives: log-weight draws, the marginal-likelihood
//! estimators `Ŝ`, `Ŝ_α`, the self-normalised `Û`, the KL / Rényi / power
//! composites and the gradient surrogates for each base estimator.

mod batch;
mod eval;
mod surrogate;
mod values;

use std::fmt;
use std::str::FromStr;

use crate::models::LatentKind;
use crate::{Error, Result};

pub use batch::{draw_log_weights, graph_s_hat, graph_u_hat, DrawOptions, GraphForm, Latents, LogWeightBatch};
pub use eval::{evaluate, mi_estimate, nll_estimate, EvalEstimate, EVAL_CHUNK_ROWS};
pub use surrogate::{build_objective, build_surrogate, draw_objective_batches, EstimatorOutput, ObjectiveBatches};
pub use values::{
    kl_estimate, log_mean_exp, log_sum_exp, objective_kl, objective_power, objective_renyi, objective_value,
    renyi_estimate, s_hat, s_hat_alpha, s_hat_alpha_form, s_hat_iwae, softmax, u_hat, vimco_signals, BoundForm,
    Diagnostics, LogWeights, ValueOutput,
};

/// How `Ŝ` is formed and how its gradient is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseEstimator {
    /// Sampled likelihood term with the Gaussian KL in closed form.
    ElboAnalytic,
    ElboSampled,
    Iwae,
    /// Sticking-the-landing: drops the score term of `ln q` (single sample).
    Stl,
    /// Doubly reparameterised importance-weighted gradients.
    Dreg,
    /// Score-function gradients without a baseline.
    Reinforce,
    /// Score-function gradients with leave-one-out baselines.
    Vimco,
}

impl BaseEstimator {
    pub const ALL: [BaseEstimator; 7] = [
        BaseEstimator::ElboAnalytic,
        BaseEstimator::ElboSampled,
        BaseEstimator::Iwae,
        BaseEstimator::Stl,
        BaseEstimator::Dreg,
        BaseEstimator::Reinforce,
        BaseEstimator::Vimco,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaseEstimator::ElboAnalytic => "elbo_analytic",
            BaseEstimator::ElboSampled => "elbo_sampled",
            BaseEstimator::Iwae => "iwae",
            BaseEstimator::Stl => "stl",
            BaseEstimator::Dreg => "dreg",
            BaseEstimator::Reinforce => "reinforce",
            BaseEstimator::Vimco => "vimco",
        }
    }

    /// Latent kind the estimator's gradient is valid for.
    pub fn latent_kind(&self) -> LatentKind {
        match self {
            BaseEstimator::Reinforce | BaseEstimator::Vimco => LatentKind::Categorical,
            _ => LatentKind::Continuous,
        }
    }
}

impl fmt::Display for BaseEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaseEstimator::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown base estimator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// The marginal-likelihood bound alone.
    None,
    Kl,
    Renyi,
    Power,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::None => "none",
            ObjectiveKind::Kl => "kl",
            ObjectiveKind::Renyi => "renyi",
            ObjectiveKind::Power => "power",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ObjectiveKind::None),
            "kl" => Ok(ObjectiveKind::Kl),
            "renyi" => Ok(ObjectiveKind::Renyi),
            "power" => Ok(ObjectiveKind::Power),
            _ => Err(Error::InvalidConfig(format!("unknown objective `{s}`"))),
        }
    }
}

/// The composite objective without the sampling details.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub objective: ObjectiveKind,
    pub lambda: f64,
    pub alpha: f64,
}

impl ObjectiveSpec {
    pub fn none() -> Self {
        ObjectiveSpec {
            objective: ObjectiveKind::None,
            lambda: 0.0,
            alpha: 1.0,
        }
    }

    pub fn kl(lambda: f64) -> Self {
        ObjectiveSpec {
            objective: ObjectiveKind::Kl,
            lambda,
            alpha: 1.0,
        }
    }

    pub fn renyi(lambda: f64, alpha: f64) -> Self {
        ObjectiveSpec {
            objective: ObjectiveKind::Renyi,
            lambda,
            alpha,
        }
    }

    /// λ is implied: `(α−1)/α`.
    pub fn power(alpha: f64) -> Self {
        ObjectiveSpec {
            objective: ObjectiveKind::Power,
            lambda: (alpha - 1.0) / alpha,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite, got {}",
                self.lambda
            )));
        }
        match self.objective {
            ObjectiveKind::Renyi => values::check_renyi_alpha(self.alpha),
            ObjectiveKind::Power => values::check_power_alpha(self.alpha),
            _ => Ok(()),
        }
    }

    /// Coefficients of `Ŝ`, `Ŝ_α` and `Û` in the objective.
    pub(crate) fn coefficients(&self) -> Coefficients {
        let (l, a) = (self.lambda, self.alpha);
        match self.objective {
            ObjectiveKind::None => Coefficients {
                s: 1.0,
                s_alpha: 0.0,
                u: 0.0,
            },
            ObjectiveKind::Kl => Coefficients {
                s: 1.0 - l,
                s_alpha: 0.0,
                u: l,
            },
            ObjectiveKind::Renyi if l == 0.0 => Coefficients {
                s: 1.0,
                s_alpha: 0.0,
                u: 0.0,
            },
            ObjectiveKind::Renyi => Coefficients {
                s: 1.0 - l * a / (a - 1.0),
                s_alpha: l / (a - 1.0),
                u: 0.0,
            },
            ObjectiveKind::Power => Coefficients {
                s: 0.0,
                s_alpha: 1.0 / a,
                u: 0.0,
            },
        }
    }

    /// Whether any term reads the second (`K_mi`) batch.
    pub fn uses_mi_batch(&self) -> bool {
        matches!(self.objective, ObjectiveKind::Kl | ObjectiveKind::Renyi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Coefficients {
    pub s: f64,
    pub s_alpha: f64,
    pub u: f64,
}

/// Full objective configuration: estimator, sample counts and composite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub base: BaseEstimator,
    pub k_lik: usize,
    pub k_mi: usize,
    pub spec: ObjectiveSpec,
}

impl ObjectiveConfig {
    pub fn new(base: BaseEstimator, k: usize, spec: ObjectiveSpec) -> Self {
        ObjectiveConfig {
            base,
            k_lik: k,
            k_mi: k,
            spec,
        }
    }

    pub fn form_kind(&self) -> FormKind {
        match self.base {
            BaseEstimator::ElboAnalytic => FormKind::Analytic,
            BaseEstimator::ElboSampled => FormKind::Mean,
            _ => FormKind::LogMeanExp,
        }
    }

    /// A second, independent batch is drawn only when an MI term is present
    /// and its sample count differs; otherwise the likelihood batch is reused.
    pub fn separate_mi_batch(&self) -> bool {
        self.spec.uses_mi_batch() && self.k_mi != self.k_lik
    }

    /// Checks every constraint that does not depend on data.
    pub fn validate(&self, latent: LatentKind) -> Result<()> {
        self.spec.validate()?;
        if self.k_lik == 0 || self.k_mi == 0 {
            return Err(Error::InvalidConfig(
                "sample counts k_lik and k_mi must be at least 1".into(),
            ));
        }
        if self.base.latent_kind() != latent {
            return Err(Error::InvalidConfig(format!(
                "base estimator `{}` requires {} latents, model has {} latents",
                self.base,
                self.base.latent_kind(),
                latent
            )));
        }
        let ks: Vec<usize> = if self.separate_mi_batch() {
            vec![self.k_lik, self.k_mi]
        } else {
            vec![self.k_lik]
        };
        match self.base {
            BaseEstimator::Stl if ks.iter().any(|&k| k != 1) => Err(Error::InvalidConfig(
                "stl is a single-sample estimator: k_lik and k_mi must be 1 (use dreg for K > 1)".into(),
            )),
            BaseEstimator::Vimco if ks.iter().any(|&k| k < 2) => Err(Error::InvalidConfig(
                "vimco needs at least 2 samples per batch for its leave-one-out baseline".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `Ŝ` aggregation without its per-example analytic KL value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    LogMeanExp,
    Mean,
    Analytic,
}
