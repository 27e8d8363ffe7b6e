//! Objective values and gradient surrogates.
//!
//! The surrogate is a scalar node whose gradient is the chosen estimator of
//! `∇E[Ô]`; its own value is meaningless whenever score terms or
//! stop-gradient reweighting are involved. Reported values always come from
//! the value-level estimators on the same samples.

use crate::diffcore::{NodeRef, Reduce, Tape, Tensor};
use crate::models::{BoundModel, Proposal};
use crate::stochastics::RngStream;
use crate::{Error, Result};

use super::batch::{aggregate, draw_log_weights, ell_node, graph_u_hat, DrawOptions, GraphForm, LogWeightBatch};
use super::values::{objective_value, softmax, vimco_signals, BoundForm, Diagnostics, LogWeights};
use super::{BaseEstimator, FormKind, ObjectiveConfig, ObjectiveKind};

/// The batches one objective evaluation reads.
#[derive(Clone, Debug)]
pub struct ObjectiveBatches {
    pub lik: LogWeightBatch,
    /// Independent `K_mi` batch; `None` when the likelihood batch is reused.
    pub mi: Option<LogWeightBatch>,
    /// Closed-form `KL(q‖p(z))` per example (analytic ELBO only).
    pub analytic_kl: Option<NodeRef>,
}

#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    /// Mean objective estimate over the examples.
    pub value: f64,
    pub per_example: Vec<f64>,
    /// Scalar node: mean over examples of the per-example surrogate.
    pub surrogate: NodeRef,
    /// Example means of the per-example diagnostics.
    pub diagnostics: Diagnostics,
}

/// Encodes `xs` and draws every batch `cfg` needs. Configuration errors are
/// raised before any sampling.
pub fn draw_objective_batches(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    xs: &[usize],
    cfg: &ObjectiveConfig,
    rng: &mut RngStream,
) -> Result<ObjectiveBatches> {
    cfg.validate(model.model().spec().kind)?;
    let proposal = model.encode(tape, xs)?;
    let opts = DrawOptions {
        stl: matches!(cfg.base, BaseEstimator::Stl | BaseEstimator::Dreg),
        detached_theta: cfg.base == BaseEstimator::Dreg,
    };
    let lik = draw_log_weights(tape, model, &proposal, xs, cfg.k_lik, rng, opts)?;
    let mi = if cfg.separate_mi_batch() {
        Some(draw_log_weights(tape, model, &proposal, xs, cfg.k_mi, rng, opts)?)
    } else {
        None
    };
    let analytic_kl = match (cfg.base, &proposal) {
        (BaseEstimator::ElboAnalytic, Proposal::Gaussian(q)) => Some(q.kl_to_standard(tape)?),
        _ => None,
    };
    Ok(ObjectiveBatches { lik, mi, analytic_kl })
}

pub fn build_surrogate(tape: &mut Tape, cfg: &ObjectiveConfig, batches: &ObjectiveBatches) -> Result<NodeRef> {
    Ok(build_objective(tape, cfg, batches)?.surrogate)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Which {
    Lik,
    Mi,
}

struct Ctx<'a> {
    cfg: &'a ObjectiveConfig,
    batches: &'a ObjectiveBatches,
    form: GraphForm,
    lik_w: Vec<LogWeights>,
    mi_w: Option<Vec<LogWeights>>,
    forms: Vec<BoundForm>,
}

impl Ctx<'_> {
    fn batch(&self, which: Which) -> &LogWeightBatch {
        match which {
            Which::Lik => &self.batches.lik,
            Which::Mi => self.batches.mi.as_ref().unwrap_or(&self.batches.lik),
        }
    }

    fn weights(&self, which: Which) -> &[LogWeights] {
        match (which, &self.mi_w) {
            (Which::Mi, Some(m)) => m,
            _ => &self.lik_w,
        }
    }

    /// Batch read by the `Ŝ_α` term.
    fn alpha_batch(&self) -> Which {
        match self.cfg.spec.objective {
            ObjectiveKind::Renyi => Which::Mi,
            _ => Which::Lik,
        }
    }

    fn mi_is_separate(&self) -> bool {
        self.batches.mi.is_some()
    }
}

pub fn build_objective(tape: &mut Tape, cfg: &ObjectiveConfig, batches: &ObjectiveBatches) -> Result<EstimatorOutput> {
    cfg.spec.validate()?;
    if batches.mi.is_some() != cfg.separate_mi_batch() {
        return Err(Error::InvalidConfig(
            "batches do not match the configuration's K_lik / K_mi layout".into(),
        ));
    }
    let rows = batches.lik.rows;
    let kl_values = batches.analytic_kl.map(|n| tape.value(n).data().to_vec());
    let (form, forms) = match cfg.form_kind() {
        FormKind::LogMeanExp => (GraphForm::LogMeanExp, vec![BoundForm::LogMeanExp; rows]),
        FormKind::Mean => (GraphForm::Mean, vec![BoundForm::Mean; rows]),
        FormKind::Analytic => {
            let (node, kl) = batches
                .analytic_kl
                .zip(kl_values)
                .ok_or_else(|| Error::InvalidConfig("analytic ELBO needs a closed-form KL".into()))?;
            (
                GraphForm::Analytic(node),
                kl.into_iter().map(|kl| BoundForm::Analytic { kl }).collect(),
            )
        }
    };
    let ctx = Ctx {
        cfg,
        batches,
        form,
        lik_w: batches.lik.log_weights(tape),
        mi_w: batches.mi.as_ref().map(|m| m.log_weights(tape)),
        forms,
    };

    let mut per_example = Vec::with_capacity(rows);
    let mut diags = Vec::with_capacity(rows);
    for b in 0..rows {
        let mi = ctx.mi_w.as_ref().map(|m| &m[b]);
        let out = objective_value(&cfg.spec, ctx.forms[b], &ctx.lik_w[b], mi)?;
        per_example.push(out.value);
        diags.push(out.diagnostics);
    }

    let node = match cfg.base {
        BaseEstimator::ElboAnalytic | BaseEstimator::ElboSampled | BaseEstimator::Iwae => plain(tape, &ctx, false)?,
        BaseEstimator::Stl => plain(tape, &ctx, true)?,
        BaseEstimator::Dreg => dreg(tape, &ctx)?,
        BaseEstimator::Reinforce | BaseEstimator::Vimco => score_function(tape, &ctx, &per_example)?,
    };
    let surrogate = tape.mean(node, Reduce::All)?;
    Ok(EstimatorOutput {
        value: per_example.iter().sum::<f64>() / rows as f64,
        per_example,
        surrogate,
        diagnostics: mean_diagnostics(&diags),
    })
}

fn mean_diagnostics(d: &[Diagnostics]) -> Diagnostics {
    let n = d.len() as f64;
    let avg = |f: &dyn Fn(&Diagnostics) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = d.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    Diagnostics {
        s_hat: d.iter().map(|x| x.s_hat).sum::<f64>() / n,
        u_hat: avg(&|x| x.u_hat),
        kl_est: avg(&|x| x.kl_est),
        s_alpha_hat: avg(&|x| x.s_alpha_hat),
        renyi_est: avg(&|x| x.renyi_est),
        implied_lambda: avg(&|x| x.implied_lambda),
    }
}

/// `c·x + acc`, skipping zero coefficients.
fn accumulate(tape: &mut Tape, acc: Option<NodeRef>, x: NodeRef, c: f64) -> Result<Option<NodeRef>> {
    if c == 0.0 {
        return Ok(acc);
    }
    let scaled = if c == 1.0 { x } else { tape.scale(x, c) };
    Ok(Some(match acc {
        Some(a) => tape.add(a, scaled)?,
        None => scaled,
    }))
}

/// The objective expression itself, `[B]`. With `stl`, `ln q` enters the
/// `Ŝ` terms with the proposal parameters blocked.
fn plain(tape: &mut Tape, ctx: &Ctx<'_>, stl: bool) -> Result<NodeRef> {
    let c = ctx.cfg.spec.coefficients();
    let alpha = ctx.cfg.spec.alpha;
    let mut acc = None;
    let s_term = |tape: &mut Tape, which: Which, alpha: f64| -> Result<NodeRef> {
        let b = ctx.batch(which);
        let prop = if stl {
            b.log_prop_stl
                .ok_or_else(|| Error::InvalidConfig("stl needs a blocked log-proposal".into()))?
        } else {
            b.log_prop
        };
        let ell = ell_node(tape, b.log_lik, b.log_prior, prop, alpha)?;
        aggregate(tape, ell, b.log_lik, alpha, b.k, ctx.form)
    };
    if c.s != 0.0 {
        let s = s_term(tape, Which::Lik, 1.0)?;
        acc = accumulate(tape, acc, s, c.s)?;
    }
    if c.s_alpha != 0.0 {
        let sa = s_term(tape, ctx.alpha_batch(), alpha)?;
        acc = accumulate(tape, acc, sa, c.s_alpha)?;
    }
    if c.u != 0.0 {
        let u = graph_u_hat(tape, ctx.batch(Which::Mi))?;
        acc = accumulate(tape, acc, u, c.u)?;
    }
    acc.ok_or_else(|| Error::InvalidConfig("objective has no nonzero term".into()))
}

/// Per-batch DReG coefficient grids, `[B·K]` each.
struct DregCoefficients {
    full: Vec<f64>,
    path_lik: Vec<f64>,
    path_rest: Vec<f64>,
}

impl DregCoefficients {
    fn zeros(n: usize) -> Self {
        DregCoefficients {
            full: vec![0.0; n],
            path_lik: vec![0.0; n],
            path_rest: vec![0.0; n],
        }
    }

    /// Adds `coef·Ŝ_α` on this batch: with `w = softmax(ℓ^(α))`, θ flows
    /// through `coef·α·w·ln p(x|z)` and the reparameterised path through
    /// `coef·w²·(α·ln p(x|z) + ln p(z) − ln q(z|x))` with the proposal's
    /// direct dependence blocked.
    fn add(&mut self, weights: &[LogWeights], k: usize, coef: f64, alpha: f64) {
        for (b, w) in weights.iter().enumerate() {
            let wt = softmax(&w.ell_alpha(alpha));
            for i in 0..k {
                let at = b * k + i;
                let (wi, wi2) = (wt[i], wt[i] * wt[i]);
                self.full[at] += coef * alpha * wi;
                self.path_lik[at] += coef * alpha * (wi2 - wi);
                self.path_rest[at] += coef * wi2;
            }
        }
    }
}

fn dreg(tape: &mut Tape, ctx: &Ctx<'_>) -> Result<NodeRef> {
    let c = ctx.cfg.spec.coefficients();
    let alpha = ctx.cfg.spec.alpha;
    let mut grids = vec![(
        Which::Lik,
        DregCoefficients::zeros(ctx.batches.lik.rows * ctx.batches.lik.k),
    )];
    if let Some(mi) = &ctx.batches.mi {
        grids.push((Which::Mi, DregCoefficients::zeros(mi.rows * mi.k)));
    }
    let slot = |which: Which| {
        if which == Which::Mi && ctx.mi_is_separate() {
            1
        } else {
            0
        }
    };
    if c.s != 0.0 {
        grids[0].1.add(ctx.weights(Which::Lik), ctx.batches.lik.k, c.s, 1.0);
    }
    if c.s_alpha != 0.0 {
        let which = ctx.alpha_batch();
        let k = ctx.batch(which).k;
        grids[slot(which)].1.add(ctx.weights(which), k, c.s_alpha, alpha);
    }

    let mut acc = None;
    for (which, g) in grids {
        let b = ctx.batch(which);
        let (Some(stl), Some(lik_dt)) = (b.log_prop_stl, b.log_lik_detached_theta) else {
            return Err(Error::InvalidConfig(
                "dreg needs blocked log-proposal and log-likelihood".into(),
            ));
        };
        let shape = [b.rows, b.k];
        let full = tape.constant(Tensor::new(shape.to_vec(), g.full)?);
        let path_lik = tape.constant(Tensor::new(shape.to_vec(), g.path_lik)?);
        let path_rest = tape.constant(Tensor::new(shape.to_vec(), g.path_rest)?);
        let rest = tape.sub(b.log_prior, stl)?;
        let t1 = tape.mul(full, b.log_lik)?;
        let t2 = tape.mul(path_lik, lik_dt)?;
        let t3 = tape.mul(path_rest, rest)?;
        let t = tape.add(t1, t2)?;
        let t = tape.add(t, t3)?;
        let per = tape.sum(t, Reduce::Axis(1))?;
        acc = accumulate(tape, acc, per, 1.0)?;
    }
    if c.u != 0.0 {
        let u = graph_u_hat(tape, ctx.batch(Which::Mi))?;
        acc = accumulate(tape, acc, u, c.u)?;
    }
    acc.ok_or_else(|| Error::InvalidConfig("objective has no nonzero term".into()))
}

/// `Ô + Σᵢ sg(signalᵢ)·ln q(zᵢ|x)` with signal `Ô` (REINFORCE) or `Ô − bᵢ`
/// (VIMCO).
fn score_function(tape: &mut Tape, ctx: &Ctx<'_>, values: &[f64]) -> Result<NodeRef> {
    let mut acc = Some(plain(tape, ctx, false)?);
    let lik = &ctx.batches.lik;
    let mut lik_sig = Vec::with_capacity(lik.rows * lik.k);
    let mut mi_sig = Vec::new();
    for b in 0..lik.rows {
        let mi = ctx.mi_w.as_ref().map(|m| &m[b]);
        match ctx.cfg.base {
            BaseEstimator::Vimco => {
                let (l, m) = vimco_signals(&ctx.cfg.spec, ctx.forms[b], &ctx.lik_w[b], mi)?;
                lik_sig.extend(l);
                mi_sig.extend(m);
            }
            _ => {
                lik_sig.extend(std::iter::repeat_n(values[b], lik.k));
                if let Some(m) = mi {
                    mi_sig.extend(std::iter::repeat_n(values[b], m.k()));
                }
            }
        }
    }
    let mut add_score = |tape: &mut Tape, batch: &LogWeightBatch, signal: Vec<f64>| -> Result<()> {
        let s = tape.constant(Tensor::new(vec![batch.rows, batch.k], signal)?);
        let weighted = tape.mul(s, batch.log_prop)?;
        let per = tape.sum(weighted, Reduce::Axis(1))?;
        acc = accumulate(tape, acc, per, 1.0)?;
        Ok(())
    };
    add_score(tape, lik, lik_sig)?;
    if let Some(mi) = &ctx.batches.mi {
        add_score(tape, mi, mi_sig)?;
    }
    Ok(acc.expect("plain term present"))
}
