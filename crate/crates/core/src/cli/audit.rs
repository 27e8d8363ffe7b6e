//! Exact-enumeration property checks on random tiny models.

use crate::objectives::{
    kl_estimate, objective_renyi, s_hat_iwae, BaseEstimator, BoundForm, ObjectiveConfig, ObjectiveSpec,
};
use crate::oracle::{self, ParamTinyModel, Statistic, TinyModel};
use crate::stochastics::{Purpose, RngStream};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub property: &'static str,
    pub check: String,
    pub seed: u64,
    pub passed: bool,
    /// Worst observed violation or error, for the table.
    pub detail: String,
}

fn models(seed: u64, family: u64, n: usize, nz: usize, nx: usize) -> Vec<TinyModel> {
    let mut rng = RngStream::for_purpose(seed, Purpose::Oracle, family);
    (0..n).map(|_| TinyModel::random(nz, nx, &mut rng)).collect()
}

fn row(property: &'static str, check: impl Into<String>, seed: u64, worst: f64, tol: f64) -> AuditRow {
    AuditRow {
        property,
        check: check.into(),
        seed,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

fn failed(property: &'static str, check: impl Into<String>, seed: u64, e: crate::Error) -> AuditRow {
    AuditRow {
        property,
        check: check.into(),
        seed,
        passed: false,
        detail: e.to_string(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Single-sample KL: `Û − Ŝ = ln q(z|x)/p(z)` for every draw.
fn single_sample_kl(seed: u64) -> AuditRow {
    let mut worst = 0.0f64;
    let mut rng = RngStream::for_purpose(seed, Purpose::Oracle, 1_000);
    for m in models(seed, 1, 100, 5, 4) {
        for x in 0..m.n_x() {
            let z = m.sample(x, 1, &mut rng);
            let w = m.log_weights(x, &z);
            let expect = (m.proposal(x, z[0]) / m.prior()[z[0]]).ln();
            worst = worst.max(rel(kl_estimate(&w, s_hat_iwae(&w)), expect));
        }
    }
    row(
        "single-sample KL estimate",
        "Û¹−Ŝ¹ = ln q(z₁|x)/p(z₁), 100 models",
        seed,
        worst,
        1e-12,
    )
}

/// Single-sample Rényi estimate equals the same log-ratio.
fn single_sample_renyi(seed: u64) -> AuditRow {
    let mut worst = 0.0f64;
    let mut rng = RngStream::for_purpose(seed, Purpose::Oracle, 1_001);
    for m in models(seed, 2, 100, 5, 4) {
        for x in 0..m.n_x() {
            let alpha = [0.5, 1.5, 2.0, 4.0][rng.below(4)];
            let z = m.sample(x, 1, &mut rng);
            let w = m.log_weights(x, &z);
            let expect = (m.proposal(x, z[0]) / m.prior()[z[0]]).ln();
            match objective_renyi(&w, &w, 0.5, alpha, BoundForm::LogMeanExp) {
                Ok(out) => worst = worst.max(rel(out.diagnostics.renyi_est.unwrap_or(f64::NAN), expect)),
                Err(e) => return failed("single-sample Rényi estimate", "per-draw identity", seed, e),
            }
        }
    }
    row(
        "single-sample Rényi estimate",
        "(Ŝ¹_α−αŜ¹)/(α−1) = ln q(z₁|x)/p(z₁), 100 models",
        seed,
        worst,
        1e-12,
    )
}

/// Enumerated single-sample objectives equal the β-VAE objective.
fn beta_vae(seed: u64) -> AuditRow {
    let check = "E[Ô¹] = E_q ln p(x|z) − β·KL(q‖p(z)) for kl, renyi, power; 20 models";
    let mut worst = 0.0f64;
    for m in models(seed, 3, 20, 4, 3) {
        for x in 0..m.n_x() {
            for beta in [0.25, 0.5, 1.0, 2.0] {
                let elog: f64 = (0..m.n_z()).map(|z| m.proposal(x, z) * m.lik(z, x).ln()).sum();
                let target = elog - beta * oracle::exact_representational_kl(&m, x);
                for spec in [
                    ObjectiveSpec::kl(1.0 - beta),
                    ObjectiveSpec::renyi(1.0 - beta, 2.0),
                    ObjectiveSpec::power(1.0 / beta),
                ] {
                    match oracle::exact_estimator_expectation(&m, x, Statistic::Objective(spec), 1) {
                        Ok(v) => worst = worst.max((v - target).abs()),
                        Err(e) => return failed("β-VAE equivalence", check, seed, e),
                    }
                }
            }
        }
    }
    row("β-VAE equivalence", check, seed, worst, 1e-10)
}

/// `E[Ŝ^K] ≤ ln p(x)` and nondecreasing in K, by enumeration.
fn iwae_bound(seed: u64) -> AuditRow {
    let check = "E[Ŝᴷ] ≤ ln p(x), nondecreasing for K = 1, 2, 3; 10 models";
    let mut worst = 0.0f64;
    for m in models(seed, 4, 10, 4, 3) {
        for x in 0..m.n_x() {
            let lp = oracle::exact_marginal(&m, x);
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=3 {
                match oracle::exact_estimator_expectation(&m, x, Statistic::SHat, k) {
                    Ok(e) => {
                        worst = worst.max(e - lp).max(prev - e);
                        prev = e;
                    }
                    Err(e) => return failed("multi-sample bound", check, seed, e),
                }
            }
        }
    }
    row("multi-sample bound", check, seed, worst, 1e-12)
}

/// `Û^K − Ŝ^K` approaches the true KL as K grows.
fn kl_consistency(seed: u64) -> AuditRow {
    let k = 100_000;
    let mut worst = 0.0f64;
    let mut rng = RngStream::for_purpose(seed, Purpose::Oracle, 1_005);
    for m in models(seed, 5, 3, 4, 3) {
        let x = 0;
        let z = m.sample(x, k, &mut rng);
        let w = m.log_weights(x, &z);
        worst = worst.max((kl_estimate(&w, s_hat_iwae(&w)) - oracle::exact_posterior_kl(&m, x)).abs());
    }
    row(
        "consistency of the KL estimate",
        format!("|Ûᴷ−Ŝᴷ − KL(p(z|x)‖p(z))| at K = {k}; 3 models"),
        seed,
        worst,
        0.02,
    )
}

/// `p(x)^α ≤ p^α(x) ≤ p(x)`, equality on deterministic decoders, and the
/// Rényi divergence identity.
fn power_bounds(seed: u64) -> AuditRow {
    let check = "p(x)^α ≤ p^α(x) ≤ p(x), α ∈ {1.5, 2, 4}; equality when deterministic; D_α identity";
    let mut worst = 0.0f64;
    let tiny = 1e-12;
    for m in models(seed, 6, 50, 4, 3) {
        for x in 0..m.n_x() {
            let lp = oracle::exact_marginal(&m, x);
            for alpha in [1.5, 2.0, 4.0] {
                let lpa = oracle::exact_p_alpha(&m, x, alpha);
                worst = worst.max(alpha * lp - lpa - tiny).max(lpa - lp - tiny);
                match oracle::exact_renyi(&m, x, alpha) {
                    Ok(d) => worst = worst.max((d - oracle::renyi_by_definition(&m, x, alpha)).abs() - tiny),
                    Err(e) => return failed("power bound", check, seed, e),
                }
            }
        }
    }
    let uniform = vec![vec![0.25; 4]; 3];
    let det = match TinyModel::deterministic_decoder(vec![0.1, 0.2, 0.3, 0.4], &[0, 1, 2, 2], 3, uniform) {
        Ok(m) => m,
        Err(e) => return failed("power bound", check, seed, e),
    };
    for x in 0..3 {
        for alpha in [1.5, 2.0, 4.0] {
            worst = worst.max((oracle::exact_p_alpha(&det, x, alpha) - oracle::exact_marginal(&det, x)).abs() - tiny);
        }
    }
    row("power bound", check, seed, worst.max(0.0), 1e-12)
}

/// Enumerated expected REINFORCE/VIMCO surrogate gradients equal the
/// gradient of the expected objective.
fn score_function_gradients(seed: u64) -> AuditRow {
    let check = "E[∇ surrogate] = ∇E[Ô], REINFORCE and VIMCO, K = 2, |Z| = 3; 3 models";
    let specs = [
        ObjectiveSpec::none(),
        ObjectiveSpec::kl(0.5),
        ObjectiveSpec::renyi(0.5, 2.0),
        ObjectiveSpec::power(2.0),
    ];
    let mut rng = RngStream::for_purpose(seed, Purpose::Oracle, 7);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let pm = ParamTinyModel::random(3, 2, &mut rng);
        for spec in specs {
            let exact = match oracle::exact_estimator_gradient(&pm, 0, spec, 2) {
                Ok(g) => g.enumerated,
                Err(e) => return failed("unbiased score-function gradients", check, seed, e),
            };
            for base in [BaseEstimator::Reinforce, BaseEstimator::Vimco] {
                match oracle::expected_surrogate_gradient(&pm, 0, &ObjectiveConfig::new(base, 2, spec)) {
                    Ok(g) => {
                        for (a, b) in g.iter().zip(&exact) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                    Err(e) => return failed("unbiased score-function gradients", check, seed, e),
                }
            }
        }
    }
    row("unbiased score-function gradients", check, seed, worst, 1e-6)
}

/// Runs every check with models drawn from `seed`.
pub fn run_audit(seed: u64) -> Result<Vec<AuditRow>> {
    Ok(vec![
        single_sample_kl(seed),
        single_sample_renyi(seed),
        beta_vae(seed),
        iwae_bound(seed),
        kl_consistency(seed),
        power_bounds(seed),
        score_function_gradients(seed),
    ])
}

pub fn format_table(rows: &[AuditRow]) -> String {
    let width = rows.iter().map(|r| r.property.chars().count()).max().unwrap_or(0);
    let mut out = String::new();
    for r in rows {
        let pad = width - r.property.chars().count();
        out.push_str(&format!(
            "{} {}{}  seed={}  {}  [{}]\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.property,
            " ".repeat(pad),
            r.seed,
            r.check,
            r.detail
        ));
    }
    out
}
