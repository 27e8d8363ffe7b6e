use crate::diffcore::{NodeRef, Reduce, Tape, Tensor};
use crate::models::{BoundModel, LatentInput, Proposal};
use crate::stochastics::{repeat_index, DiagGaussian, RngStream};
use crate::Result;

use super::values::LogWeights;

/// The sampled latents behind a batch.
#[derive(Clone, Debug)]
pub enum Latents {
    /// `[B·K, d]` reparameterised sample and the standard-normal noise used.
    Continuous { z: NodeRef, noise: Tensor },
    /// `B·K·n` category indices, laid out `[example][sample][latent]`.
    Categorical(Vec<usize>),
}

/// `K` log-weight triples for each of `B` examples, as `[B, K]` tape nodes.
/// Sample `i` of example `b` is row `b·K + i` of the underlying latents.
#[derive(Clone, Debug)]
pub struct LogWeightBatch {
    pub rows: usize,
    pub k: usize,
    pub log_lik: NodeRef,
    pub log_prior: NodeRef,
    pub log_prop: NodeRef,
    /// `ln q(z|x)` with the proposal parameters cut, path through `z` kept.
    pub log_prop_stl: Option<NodeRef>,
    /// `ln p(x|z)` with θ cut, path through `z` kept.
    pub log_lik_detached_theta: Option<NodeRef>,
    pub latents: Latents,
}

impl LogWeightBatch {
    /// Per-example values of the triples.
    pub fn log_weights(&self, tape: &Tape) -> Vec<LogWeights> {
        let (ll, lp, lq) = (
            tape.value(self.log_lik).data(),
            tape.value(self.log_prior).data(),
            tape.value(self.log_prop).data(),
        );
        (0..self.rows)
            .map(|b| {
                let r = b * self.k..(b + 1) * self.k;
                LogWeights {
                    log_lik: ll[r.clone()].to_vec(),
                    log_prior: lp[r.clone()].to_vec(),
                    log_prop: lq[r].to_vec(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DrawOptions {
    /// Also record `ln q` with the proposal parameters blocked.
    pub stl: bool,
    /// Also record `ln p(x|z)` with θ blocked.
    pub detached_theta: bool,
}

/// Draws `k` latents per example from `proposal` (one proposal row per
/// symbol in `xs`) and records the log-weight triples. Continuous latents are
/// reparameterised; categorical draws carry no gradient path.
pub fn draw_log_weights(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    proposal: &Proposal,
    xs: &[usize],
    k: usize,
    rng: &mut RngStream,
    opts: DrawOptions,
) -> Result<LogWeightBatch> {
    let rows = xs.len();
    let xs_rep: Vec<usize> = repeat_index(rows, k).into_iter().map(|b| xs[b]).collect();
    let shape = vec![rows, k];
    let (log_lik, log_prior, log_prop, log_prop_stl, log_lik_dt, latents) = match proposal {
        Proposal::Gaussian(q) => {
            let q = q.repeat_rows(tape, k)?;
            let d = q.dim(tape);
            let noise = rng.normal_tensor(&[rows * k, d]);
            let z = q.reparam_with_noise(tape, noise.clone())?;
            let log_prop = q.log_density(tape, z)?;
            let prior = DiagGaussian::standard(tape, rows * k, d);
            let log_prior = prior.log_density(tape, z)?;
            let log_lik = model.decode_log_likelihood(tape, LatentInput::Continuous(z), &xs_rep)?;
            let stl = if opts.stl {
                let qd = q.detached(tape);
                Some(qd.log_density(tape, z)?)
            } else {
                None
            };
            let dt = if opts.detached_theta {
                let frozen = model.detached_theta(tape);
                Some(frozen.decode_log_likelihood(tape, LatentInput::Continuous(z), &xs_rep)?)
            } else {
                None
            };
            (log_lik, log_prior, log_prop, stl, dt, Latents::Continuous { z, noise })
        }
        Proposal::Categorical(q) => {
            let z = q.sample(tape, k, rng)?;
            let log_prop = q.log_mass(tape, &z, k)?;
            let prior_mass = -(q.n_latents as f64) * (q.n_categories as f64).ln();
            let log_prior = tape.constant(Tensor::full(&[rows * k], prior_mass));
            let log_lik = model.decode_log_likelihood(tape, LatentInput::Categorical(&z), &xs_rep)?;
            // No reparameterisation path: the blocked variants coincide with
            // fully detached values and are never needed.
            (log_lik, log_prior, log_prop, None, None, Latents::Categorical(z))
        }
    };
    let mut to_grid = |n: NodeRef| tape.reshape(n, shape.clone());
    Ok(LogWeightBatch {
        rows,
        k,
        log_lik: to_grid(log_lik)?,
        log_prior: to_grid(log_prior)?,
        log_prop: to_grid(log_prop)?,
        log_prop_stl: log_prop_stl.map(&mut to_grid).transpose()?,
        log_lik_detached_theta: log_lik_dt.map(&mut to_grid).transpose()?,
        latents,
    })
}

/// `Ŝ` aggregation on the tape.
#[derive(Clone, Copy, Debug)]
pub enum GraphForm {
    LogMeanExp,
    Mean,
    /// Closed-form `KL(q‖p(z))` per example, `[B]`.
    Analytic(NodeRef),
}

/// `α·ln p(x|z) + ln p(z) − ln q(z|x)` as `[B, K]`.
pub(crate) fn ell_node(
    tape: &mut Tape,
    log_lik: NodeRef,
    log_prior: NodeRef,
    log_prop: NodeRef,
    alpha: f64,
) -> Result<NodeRef> {
    let scaled = if alpha == 1.0 {
        log_lik
    } else {
        tape.scale(log_lik, alpha)
    };
    let a = tape.add(scaled, log_prior)?;
    tape.sub(a, log_prop)
}

pub(crate) fn aggregate(
    tape: &mut Tape,
    ell: NodeRef,
    log_lik: NodeRef,
    alpha: f64,
    k: usize,
    form: GraphForm,
) -> Result<NodeRef> {
    match form {
        GraphForm::LogMeanExp => {
            let lse = tape.logsumexp(ell, Reduce::Axis(1))?;
            let shift = tape.constant(Tensor::scalar(-(k as f64).ln()));
            tape.add(lse, shift)
        }
        GraphForm::Mean => tape.mean(ell, Reduce::Axis(1)),
        GraphForm::Analytic(kl) => {
            let m = tape.mean(log_lik, Reduce::Axis(1))?;
            let m = if alpha == 1.0 { m } else { tape.scale(m, alpha) };
            tape.sub(m, kl)
        }
    }
}

/// `Ŝ_α` per example (`α = 1` gives `Ŝ`), `[B]`.
pub fn graph_s_hat(tape: &mut Tape, batch: &LogWeightBatch, alpha: f64, form: GraphForm) -> Result<NodeRef> {
    let ell = ell_node(tape, batch.log_lik, batch.log_prior, batch.log_prop, alpha)?;
    aggregate(tape, ell, batch.log_lik, alpha, batch.k, form)
}

/// `Û` per example, `[B]`: `Σᵢ softmax(ℓ)ᵢ·ln p(x|zᵢ)`.
pub fn graph_u_hat(tape: &mut Tape, batch: &LogWeightBatch) -> Result<NodeRef> {
    let ell = ell_node(tape, batch.log_lik, batch.log_prior, batch.log_prop, 1.0)?;
    let log_w = tape.softmax_log(ell, 1)?;
    let w = tape.exp(log_w);
    let terms = tape.mul(w, batch.log_lik)?;
    let u = tape.sum(terms, Reduce::Axis(1))?;
    Ok(if cfg!(feature = "mutation-u-hat") {
        tape.negate(u)
    } else {
        u
    })
}
