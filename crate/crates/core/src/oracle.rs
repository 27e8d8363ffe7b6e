//! Exact enumeration over tiny discrete models.
//!
//! A [`TinyModel`] holds explicit tables `p(z)`, `p(x|z)` and `q(z|x)`. Every
//! quantity here is a deterministic sum over the tables (or over all `K`-tuples
//! of latents), which gives ground truth for the Monte-Carlo estimators.

use crate::diffcore::{NodeRef, Reduce, Tape, Tensor};
use crate::objectives::{
    build_objective, build_surrogate, kl_estimate, objective_value, s_hat_alpha, s_hat_iwae, u_hat, BaseEstimator,
    BoundForm, Latents, LogWeightBatch, LogWeights, ObjectiveBatches, ObjectiveConfig, ObjectiveSpec,
};
use crate::stochastics::RngStream;
use crate::{Error, Result};

/// Largest number of `K`-tuples an exact expectation will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Entries of random tables are floored here before renormalising.
pub const RANDOM_FLOOR: f64 = 1e-9;

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    prior: Vec<f64>,
    /// `|Z| × |X|`, row `z` is `p(·|z)`.
    lik: Vec<Vec<f64>>,
    /// `|X| × |Z|`, row `x` is `q(·|x)`.
    proposal: Vec<Vec<f64>>,
}

fn check_distribution(what: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::domain(
            "tiny_model",
            format!("{what} has a negative or non-finite entry"),
        ));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::domain("tiny_model", format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

fn floored(mut row: Vec<f64>) -> Vec<f64> {
    for p in row.iter_mut() {
        *p = p.max(RANDOM_FLOOR);
    }
    let total: f64 = row.iter().sum();
    row.into_iter().map(|p| p / total).collect()
}

impl TinyModel {
    /// Validates shapes and normalisation. Zero entries are allowed so that
    /// deterministic decoders can be expressed; random models are strictly
    /// positive.
    pub fn new(prior: Vec<f64>, lik: Vec<Vec<f64>>, proposal: Vec<Vec<f64>>) -> Result<Self> {
        let nz = prior.len();
        let nx = lik.first().map_or(0, Vec::len);
        if nz == 0 || nx == 0 || nz > 16 || nx > 16 {
            return Err(Error::shape(
                "tiny_model",
                format!("need 1..=16 states, got |Z|={nz}, |X|={nx}"),
            ));
        }
        if lik.len() != nz || lik.iter().any(|r| r.len() != nx) {
            return Err(Error::shape("tiny_model", "likelihood table must be |Z| × |X|"));
        }
        if proposal.len() != nx || proposal.iter().any(|r| r.len() != nz) {
            return Err(Error::shape("tiny_model", "proposal table must be |X| × |Z|"));
        }
        check_distribution("prior", &prior)?;
        for (z, row) in lik.iter().enumerate() {
            check_distribution(&format!("likelihood row {z}"), row)?;
        }
        for (x, row) in proposal.iter().enumerate() {
            check_distribution(&format!("proposal row {x}"), row)?;
        }
        Ok(TinyModel { prior, lik, proposal })
    }

    /// Flat-Dirichlet rows for every table, floored at [`RANDOM_FLOOR`].
    pub fn random(nz: usize, nx: usize, rng: &mut RngStream) -> Self {
        let prior = floored(rng.dirichlet_ones(nz));
        let lik = (0..nz).map(|_| floored(rng.dirichlet_ones(nx))).collect();
        let proposal = (0..nx).map(|_| floored(rng.dirichlet_ones(nz))).collect();
        TinyModel::new(prior, lik, proposal).expect("random tables are normalised")
    }

    /// `p(x|z)` is one-hot at `decode[z]`.
    pub fn deterministic_decoder(
        prior: Vec<f64>,
        decode: &[usize],
        nx: usize,
        proposal: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let lik = decode
            .iter()
            .map(|&x| {
                let mut row = vec![0.0; nx];
                if x < nx {
                    row[x] = 1.0;
                }
                row
            })
            .collect();
        TinyModel::new(prior, lik, proposal)
    }

    /// Same tables with the proposal replaced by the exact posterior (rows
    /// for unreachable `x` keep their old proposal).
    pub fn with_exact_posterior(&self) -> Self {
        let mut m = self.clone();
        for x in 0..self.n_x() {
            if self.marginal(x) > 0.0 {
                m.proposal[x] = exact_posterior(self, x);
            }
        }
        m
    }

    pub fn n_z(&self) -> usize {
        self.prior.len()
    }

    pub fn n_x(&self) -> usize {
        self.lik[0].len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn lik(&self, z: usize, x: usize) -> f64 {
        self.lik[z][x]
    }

    pub fn proposal(&self, x: usize, z: usize) -> f64 {
        self.proposal[x][z]
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.prior.iter().all(|&p| p > 0.0)
            && self.lik.iter().flatten().all(|&p| p > 0.0)
            && self.proposal.iter().flatten().all(|&p| p > 0.0)
    }

    fn marginal(&self, x: usize) -> f64 {
        (0..self.n_z()).map(|z| self.prior[z] * self.lik[z][x]).sum()
    }

    /// Log-weight triples of a latent tuple for observation `x`.
    pub fn log_weights(&self, x: usize, zs: &[usize]) -> LogWeights {
        LogWeights {
            log_lik: zs.iter().map(|&z| self.lik[z][x].ln()).collect(),
            log_prior: zs.iter().map(|&z| self.prior[z].ln()).collect(),
            log_prop: zs.iter().map(|&z| self.proposal[x][z].ln()).collect(),
        }
    }

    /// Draws `k` latents from `q(·|x)` by inverse CDF.
    pub fn sample(&self, x: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
        let log_q: Vec<f64> = self.proposal[x].iter().map(|p| p.ln()).collect();
        (0..k).map(|_| rng.categorical_from_log_probs(&log_q)).collect()
    }
}

/// `ln p(x)`.
pub fn exact_marginal(m: &TinyModel, x: usize) -> f64 {
    m.marginal(x).ln()
}

/// `p(z|x)` as a probability vector.
pub fn exact_posterior(m: &TinyModel, x: usize) -> Vec<f64> {
    let px = m.marginal(x);
    (0..m.n_z()).map(|z| m.prior[z] * m.lik[z][x] / px).collect()
}

/// `KL(p(z|x) ‖ p(z))`.
pub fn exact_posterior_kl(m: &TinyModel, x: usize) -> f64 {
    exact_posterior(m, x)
        .iter()
        .zip(&m.prior)
        .filter(|(&post, _)| post > 0.0)
        .map(|(&post, &prior)| post * (post / prior).ln())
        .sum()
}

/// `E_{p(z|x)}[ln p(x|z)]`; equals `KL(p(z|x)‖p(z)) + ln p(x)`.
pub fn exact_posterior_expected_log_lik(m: &TinyModel, x: usize) -> f64 {
    exact_posterior(m, x)
        .iter()
        .enumerate()
        .filter(|(_, &post)| post > 0.0)
        .map(|(z, &post)| post * m.lik[z][x].ln())
        .sum()
}

/// `KL(q(z|x) ‖ p(z))`.
pub fn exact_representational_kl(m: &TinyModel, x: usize) -> f64 {
    m.proposal[x]
        .iter()
        .zip(&m.prior)
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &p)| q * (q / p).ln())
        .sum()
}

/// `KL(q(z|x) ‖ p(z|x))`.
pub fn exact_proposal_posterior_kl(m: &TinyModel, x: usize) -> f64 {
    m.proposal[x]
        .iter()
        .zip(exact_posterior(m, x))
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, p)| q * (q / p).ln())
        .sum()
}

/// `ln p^α(x) = ln Σ_z p(z)·p(x|z)^α`.
pub fn exact_p_alpha(m: &TinyModel, x: usize, alpha: f64) -> f64 {
    (0..m.n_z())
        .map(|z| m.prior[z] * m.lik[z][x].powf(alpha))
        .sum::<f64>()
        .ln()
}

/// `D_α(p(z|x) ‖ p(z)) = (ln p^α(x) − α·ln p(x))/(α − 1)`.
pub fn exact_renyi(m: &TinyModel, x: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || alpha == 1.0 {
        return Err(Error::domain(
            "exact_renyi",
            format!("alpha must be positive and ≠ 1, got {alpha}"),
        ));
    }
    Ok((exact_p_alpha(m, x, alpha) - alpha * exact_marginal(m, x)) / (alpha - 1.0))
}

/// `D_α` from its definition, `(α−1)⁻¹ ln Σ_z p(z|x)^α p(z)^(1−α)`,
/// independently of `p^α`.
pub fn renyi_by_definition(m: &TinyModel, x: usize, alpha: f64) -> f64 {
    let post = exact_posterior(m, x);
    let s: f64 = post
        .iter()
        .zip(&m.prior)
        .map(|(&q, &p)| q.powf(alpha) * p.powf(1.0 - alpha))
        .sum();
    s.ln() / (alpha - 1.0)
}

/// Calls `f(tuple, Π q(zᵢ|x))` for every `K`-tuple of latents.
pub fn for_each_tuple(m: &TinyModel, x: usize, k: usize, mut f: impl FnMut(&[usize], f64) -> Result<()>) -> Result<()> {
    let nz = m.n_z();
    let size = (nz as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut zs = vec![0usize; k];
    loop {
        let weight: f64 = zs.iter().map(|&z| m.proposal[x][z]).product();
        f(&zs, weight)?;
        // Odometer increment, first position fastest.
        let mut pos = 0;
        loop {
            if pos == k {
                return Ok(());
            }
            zs[pos] += 1;
            if zs[pos] < nz {
                break;
            }
            zs[pos] = 0;
            pos += 1;
        }
    }
}

/// A function of one example's log-weights whose expectation the oracle
/// computes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Statistic {
    /// `Ŝ_IWAE`.
    SHat,
    UHat,
    /// `Û − Ŝ_IWAE`.
    KlEstimate,
    SAlpha(f64),
    /// A composite objective on a single shared batch, importance-weighted form.
    Objective(ObjectiveSpec),
}

impl Statistic {
    pub fn eval(&self, w: &LogWeights) -> Result<f64> {
        Ok(match *self {
            Statistic::SHat => s_hat_iwae(w),
            Statistic::UHat => u_hat(w),
            Statistic::KlEstimate => kl_estimate(w, s_hat_iwae(w)),
            Statistic::SAlpha(a) => s_hat_alpha(w, a),
            Statistic::Objective(spec) => objective_value(&spec, BoundForm::LogMeanExp, w, None)?.value,
        })
    }
}

/// Exact mean and variance of a statistic of `K` draws from `q(·|x)`.
pub fn exact_estimator_moments(m: &TinyModel, x: usize, stat: Statistic, k: usize) -> Result<(f64, f64)> {
    let (mut s1, mut s2) = (0.0, 0.0);
    for_each_tuple(m, x, k, |zs, weight| {
        if weight > 0.0 {
            let v = stat.eval(&m.log_weights(x, zs))?;
            s1 += weight * v;
            s2 += weight * v * v;
        }
        Ok(())
    })?;
    Ok((s1, (s2 - s1 * s1).max(0.0)))
}

pub fn exact_estimator_expectation(m: &TinyModel, x: usize, stat: Statistic, k: usize) -> Result<f64> {
    Ok(exact_estimator_moments(m, x, stat, k)?.0)
}

/// A tiny model whose likelihood rows are `softmax(θ_z)` and proposal rows
/// `softmax(φ_x)`; the prior is fixed. Parameter vectors are `θ` (row-major
/// `|Z|×|X|`) followed by `φ` (row-major `|X|×|Z|`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTinyModel {
    pub prior: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub n_z: usize,
    pub n_x: usize,
}

fn softmax_rows(logits: &[f64], width: usize) -> Vec<Vec<f64>> {
    logits.chunks(width).map(crate::objectives::softmax).collect()
}

impl ParamTinyModel {
    pub fn random(nz: usize, nx: usize, rng: &mut RngStream) -> Self {
        ParamTinyModel {
            prior: floored(rng.dirichlet_ones(nz)),
            theta: (0..nz * nx).map(|_| rng.standard_normal()).collect(),
            phi: (0..nx * nz).map(|_| rng.standard_normal()).collect(),
            n_z: nz,
            n_x: nx,
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len() + self.phi.len()
    }

    pub fn params(&self) -> Vec<f64> {
        [self.theta.as_slice(), self.phi.as_slice()].concat()
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        let (t, p) = params.split_at(self.theta.len());
        ParamTinyModel {
            theta: t.to_vec(),
            phi: p.to_vec(),
            ..self.clone()
        }
    }

    /// Table form. Fails only if the tables are not normalised to 1e-12.
    pub fn tiny(&self) -> Result<TinyModel> {
        TinyModel::new(
            self.prior.clone(),
            softmax_rows(&self.theta, self.n_x),
            softmax_rows(&self.phi, self.n_z),
        )
    }

    /// `θ`, `φ` as tape leaves and the per-row log-softmax tables.
    fn bind(&self, tape: &mut Tape) -> Result<(NodeRef, NodeRef, NodeRef, NodeRef)> {
        let theta = tape.param(Tensor::new(vec![self.n_z, self.n_x], self.theta.clone())?);
        let phi = tape.param(Tensor::new(vec![self.n_x, self.n_z], self.phi.clone())?);
        let log_lik = tape.softmax_log(theta, 1)?;
        let log_q = tape.softmax_log(phi, 1)?;
        Ok((theta, phi, log_lik, log_q))
    }

    /// Log-weight batch `[1, K]` for `zs` on a tape.
    fn batch(
        &self,
        tape: &mut Tape,
        log_lik: NodeRef,
        log_q: NodeRef,
        x: usize,
        zs: &[usize],
    ) -> Result<LogWeightBatch> {
        let k = zs.len();
        let lik_rows = tape.embedding_lookup(log_lik, zs.to_vec())?;
        let ll = tape.pick(lik_rows, vec![x; k])?;
        let q_rows = tape.embedding_lookup(log_q, vec![x; k])?;
        let lq = tape.pick(q_rows, zs.to_vec())?;
        let lp = Tensor::new(vec![1, k], zs.iter().map(|&z| self.prior[z].ln()).collect())?;
        Ok(LogWeightBatch {
            rows: 1,
            k,
            log_lik: tape.reshape(ll, vec![1, k])?,
            log_prior: tape.constant(lp),
            log_prop: tape.reshape(lq, vec![1, k])?,
            log_prop_stl: None,
            log_lik_detached_theta: None,
            latents: Latents::Categorical(zs.to_vec()),
        })
    }
}

/// Two independent computations of `∇ E[Ô]` over the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactGradient {
    /// Central differences of the exact expectation, `h = 1e-6`.
    pub finite_difference: Vec<f64>,
    /// `Σ_tuples ∇[Π q(zᵢ|x) · Ô(z_{1:K})]` by reverse mode.
    pub enumerated: Vec<f64>,
}

fn flat_gradient(tape: &Tape, root: NodeRef, theta: NodeRef, phi: NodeRef) -> Result<Vec<f64>> {
    let g = tape.backward(root)?;
    Ok([g.wrt(theta).data(), g.wrt(phi).data()].concat())
}

/// Exact gradient of the expected composite objective (single shared batch,
/// importance-weighted form).
pub fn exact_estimator_gradient(pm: &ParamTinyModel, x: usize, spec: ObjectiveSpec, k: usize) -> Result<ExactGradient> {
    let h = 1e-6;
    let base = pm.params();
    let expectation = |p: &[f64]| -> Result<f64> {
        exact_estimator_expectation(&pm.with_params(p).tiny()?, x, Statistic::Objective(spec), k)
    };
    let mut finite_difference = Vec::with_capacity(base.len());
    for j in 0..base.len() {
        let mut up = base.clone();
        let mut down = base.clone();
        up[j] += h;
        down[j] -= h;
        finite_difference.push((expectation(&up)? - expectation(&down)?) / (2.0 * h));
    }

    let cfg = ObjectiveConfig::new(BaseEstimator::Iwae, k, spec);
    let mut enumerated = vec![0.0; base.len()];
    let m = pm.tiny()?;
    for_each_tuple(&m, x, k, |zs, _| {
        let mut tape = Tape::new();
        let (theta, phi, log_lik, log_q) = pm.bind(&mut tape)?;
        let batch = pm.batch(&mut tape, log_lik, log_q, x, zs)?;
        let log_weight = tape.sum(batch.log_prop, Reduce::All)?;
        let weight = tape.exp(log_weight);
        let batches = ObjectiveBatches {
            lik: batch,
            mi: None,
            analytic_kl: None,
        };
        let value = build_objective(&mut tape, &cfg, &batches)?.surrogate;
        let root = tape.mul(weight, value)?;
        for (acc, g) in enumerated.iter_mut().zip(flat_gradient(&tape, root, theta, phi)?) {
            *acc += g;
        }
        Ok(())
    })?;
    Ok(ExactGradient {
        finite_difference,
        enumerated,
    })
}

/// `E[∇ surrogate]` for a score-function estimator, summed exactly over all
/// tuples: `Σ_tuples Π q(zᵢ|x) · ∇ surrogate(z_{1:K})`.
pub fn expected_surrogate_gradient(pm: &ParamTinyModel, x: usize, cfg: &ObjectiveConfig) -> Result<Vec<f64>> {
    if cfg.separate_mi_batch() {
        return Err(Error::InvalidConfig(
            "the oracle enumerates a single shared batch (k_lik = k_mi)".into(),
        ));
    }
    let m = pm.tiny()?;
    let mut total = vec![0.0; pm.n_params()];
    for_each_tuple(&m, x, cfg.k_lik, |zs, weight| {
        let mut tape = Tape::new();
        let (theta, phi, log_lik, log_q) = pm.bind(&mut tape)?;
        let batch = pm.batch(&mut tape, log_lik, log_q, x, zs)?;
        let batches = ObjectiveBatches {
            lik: batch,
            mi: None,
            analytic_kl: None,
        };
        let s = build_surrogate(&mut tape, cfg, &batches)?;
        for (acc, g) in total.iter_mut().zip(flat_gradient(&tape, s, theta, phi)?) {
            *acc += weight * g;
        }
        Ok(())
    })?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::Purpose;

    fn rng(i: u64) -> RngStream {
        RngStream::for_purpose(23, Purpose::Oracle, i)
    }

    #[test]
    fn marginal_examples() {
        let one_hot = TinyModel::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.5, 0.5]; 2],
        )
        .unwrap();
        assert_eq!(exact_marginal(&one_hot, 0), 0.0);
        let m = TinyModel::new(
            vec![0.5, 0.5],
            vec![vec![0.2, 0.8], vec![0.6, 0.4]],
            vec![vec![0.5, 0.5]; 2],
        )
        .unwrap();
        assert!((exact_marginal(&m, 0) - 0.4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn posterior_kl_examples() {
        let flat = TinyModel::new(vec![0.3, 0.7], vec![vec![0.1, 0.9]; 2], vec![vec![0.5, 0.5]; 2]).unwrap();
        assert!(exact_posterior_kl(&flat, 1).abs() < 1e-15);
        let det = TinyModel::deterministic_decoder(vec![0.25; 4], &[0, 1, 2, 3], 4, vec![vec![0.25; 4]; 4]).unwrap();
        assert!((exact_posterior_kl(&det, 2) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn random_models_are_valid_and_replayable() {
        let a = TinyModel::random(5, 7, &mut rng(0));
        let b = TinyModel::random(5, 7, &mut rng(0));
        assert_eq!(a, b);
        assert!(a.is_strictly_positive());
        assert!(TinyModel::new(vec![0.5, 0.6], vec![vec![1.0]; 2], vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn kl_equals_u_limit_identity() {
        for i in 0..20 {
            let m = TinyModel::random(4, 3, &mut rng(i));
            for x in 0..3 {
                let kl = exact_posterior_kl(&m, x);
                let alt = exact_posterior_expected_log_lik(&m, x) - exact_marginal(&m, x);
                assert!(kl >= 0.0);
                assert!((kl - alt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn renyi_limits_and_identity() {
        let m = TinyModel::random(5, 4, &mut rng(3));
        let kl = exact_posterior_kl(&m, 1);
        let d: Vec<f64> = [1.1, 1.01, 1.001]
            .iter()
            .map(|&a| exact_renyi(&m, 1, a).unwrap())
            .collect();
        assert!(d[0] >= d[1] && d[1] >= d[2] && d[2] >= kl);
        let mild = TinyModel::new(
            vec![0.5, 0.5],
            vec![vec![0.6, 0.4], vec![0.3, 0.7]],
            vec![vec![0.5, 0.5]; 2],
        )
        .unwrap();
        let gap = exact_renyi(&mild, 0, 1.01).unwrap() - exact_posterior_kl(&mild, 0);
        assert!(gap > 0.0 && gap < 1e-3, "{gap}");
        for a in [0.5, 1.5, 2.0, 4.0] {
            let by_def = renyi_by_definition(&m, 1, a);
            assert!((exact_renyi(&m, 1, a).unwrap() - by_def).abs() < 1e-12);
        }
        assert!(exact_renyi(&m, 1, 1.0).is_err());
        let flat = TinyModel::new(vec![0.3, 0.7], vec![vec![0.1, 0.9]; 2], vec![vec![0.5, 0.5]; 2]).unwrap();
        assert!(exact_renyi(&flat, 0, 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn estimator_expectations() {
        let m = TinyModel::random(4, 3, &mut rng(4));
        let x = 2;
        let elbo = exact_marginal(&m, x) - exact_proposal_posterior_kl(&m, x);
        let e1 = exact_estimator_expectation(&m, x, Statistic::SHat, 1).unwrap();
        assert!((e1 - elbo).abs() < 1e-12);
        let kl1 = exact_estimator_expectation(&m, x, Statistic::KlEstimate, 1).unwrap();
        assert!((kl1 - exact_representational_kl(&m, x)).abs() < 1e-12);
        let e2 = exact_estimator_expectation(&m, x, Statistic::SHat, 2).unwrap();
        assert!(e2 >= e1 && e2 <= exact_marginal(&m, x));
    }

    #[test]
    fn enumeration_limit() {
        let m = TinyModel::random(16, 2, &mut rng(5));
        assert!(matches!(
            exact_estimator_expectation(&m, 0, Statistic::SHat, 5),
            Err(Error::EnumerationTooLarge { .. })
        ));
        assert!(exact_estimator_expectation(&m, 0, Statistic::SHat, 4).is_ok());
    }

    #[test]
    fn collapsed_model_has_zero_proposal_gradient() {
        // Likelihood independent of z and q = prior = posterior: E[Ŝ] attains
        // its maximum ln p(x), so it is stationary in the proposal.
        let prior = vec![0.2, 0.5, 0.3];
        let pm = ParamTinyModel {
            phi: prior.iter().map(|p: &f64| p.ln()).collect::<Vec<_>>().repeat(2),
            prior,
            theta: [0.4, -1.0].repeat(3),
            n_z: 3,
            n_x: 2,
        };
        let g = exact_estimator_gradient(&pm, 0, ObjectiveSpec::none(), 2).unwrap();
        for (fd, en) in g.finite_difference[6..].iter().zip(&g.enumerated[6..]) {
            assert!(fd.abs() < 1e-8 && en.abs() < 1e-12, "fd {fd} enumerated {en}");
        }
    }

    #[test]
    fn gradient_computations_agree() {
        let pm = ParamTinyModel::random(3, 2, &mut rng(6));
        for spec in [
            ObjectiveSpec::none(),
            ObjectiveSpec::kl(0.5),
            ObjectiveSpec::renyi(0.5, 1.5),
            ObjectiveSpec::power(2.0),
        ] {
            let g = exact_estimator_gradient(&pm, 1, spec, 2).unwrap();
            for (fd, en) in g.finite_difference.iter().zip(&g.enumerated) {
                assert!((fd - en).abs() < 1e-7, "{spec:?}: fd {fd} enumerated {en}");
            }
        }
    }
}
