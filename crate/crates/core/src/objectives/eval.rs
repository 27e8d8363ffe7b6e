use crate::diffcore::Tape;
use crate::models::ModelParams;
use crate::stochastics::RngStream;
use crate::Result;

use super::batch::{draw_log_weights, DrawOptions};
use super::values::{s_hat_iwae, u_hat};

/// Decoder rows per evaluation chunk; bounds peak memory at large `K`.
pub const EVAL_CHUNK_ROWS: usize = 2048;

/// Importance-weighted NLL and cross mutual-information estimates on one set
/// of shared samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalEstimate {
    /// Mean of `−Ŝ_IWAE`.
    pub nll: f64,
    /// Mean of `Û − Ŝ_IWAE`.
    pub mi: f64,
}

pub fn evaluate(params: &ModelParams, xs: &[usize], k: usize, rng: &mut RngStream) -> Result<EvalEstimate> {
    if xs.is_empty() {
        return Ok(EvalEstimate { nll: 0.0, mi: 0.0 });
    }
    let k = k.max(1);
    let per_chunk = (EVAL_CHUNK_ROWS / k).max(1);
    let (mut nll, mut mi) = (0.0, 0.0);
    for chunk in xs.chunks(per_chunk) {
        let mut tape = Tape::new();
        let model = params.bind_constant(&mut tape);
        let proposal = model.encode(&mut tape, chunk)?;
        let batch = draw_log_weights(&mut tape, &model, &proposal, chunk, k, rng, DrawOptions::default())?;
        for w in batch.log_weights(&tape) {
            let s = s_hat_iwae(&w);
            nll -= s;
            mi += u_hat(&w) - s;
        }
    }
    let n = xs.len() as f64;
    Ok(EvalEstimate {
        nll: nll / n,
        mi: mi / n,
    })
}

pub fn nll_estimate(params: &ModelParams, xs: &[usize], k: usize, rng: &mut RngStream) -> Result<f64> {
    Ok(evaluate(params, xs, k, rng)?.nll)
}

pub fn mi_estimate(params: &ModelParams, xs: &[usize], k: usize, rng: &mut RngStream) -> Result<f64> {
    Ok(evaluate(params, xs, k, rng)?.mi)
}
