//! Adam training loop, the synthetic dataset and periodic evaluation.

use std::time::Instant;

use crate::diffcore::{NodeRef, Reduce, Tape, Tensor};
use crate::models::{init_model, is_bias, LatentSpec, ModelParams};
use crate::objectives::{build_objective, draw_objective_batches, evaluate, ObjectiveConfig};
use crate::stochastics::{Purpose, RngStream};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.0;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Held-out symbols drawn for evaluation when the vocabulary is larger than
/// this; smaller vocabularies are evaluated on every symbol once.
pub const EVAL_SET_SIZE: usize = 1024;
/// Seed of the held-out evaluation set. Fixed so that runs with different
/// seeds, and `eval` on a saved checkpoint, score the same symbols.
pub const EVAL_SET_SEED: u64 = 0x5eed_e7a1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. Gradients are checked before anything is touched, so a
/// non-finite gradient leaves both `params` and `state` unchanged.
pub fn adam_step(state: &mut AdamState, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{}`: {:?} vs {:?}", p.name, g.shape(), p.value.shape()),
            ));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { param: p.name.clone() });
        }
    }
    state.t += 1;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// `coefficient · Σ w²` over every non-bias tensor.
pub fn l2_penalty(params: &ModelParams, coefficient: f64) -> f64 {
    if coefficient == 0.0 {
        return 0.0;
    }
    let sq: f64 = params
        .params()
        .iter()
        .filter(|p| !is_bias(&p.name))
        .flat_map(|p| p.value.data().iter())
        .map(|w| w * w)
        .sum();
    coefficient * sq
}

/// [`l2_penalty`] on the tape, over nodes bound in parameter order.
pub fn l2_penalty_node(tape: &mut Tape, params: &ModelParams, nodes: &[NodeRef], coefficient: f64) -> Result<NodeRef> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    if coefficient == 0.0 {
        return Ok(total);
    }
    for (p, &n) in params.params().iter().zip(nodes) {
        if is_bias(&p.name) {
            continue;
        }
        let sq = tape.square(n);
        let s = tape.sum(sq, Reduce::All)?;
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, coefficient))
}

pub fn make_synthetic_batch(vocab_size: usize, batch_size: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if vocab_size == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig(format!(
            "synthetic batch needs vocab_size ≥ 1 and batch_size ≥ 1, got {vocab_size} and {batch_size}"
        )));
    }
    Ok((0..batch_size).map(|_| rng.below(vocab_size)).collect())
}

/// The data distribution `p_D(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    /// i.i.d. uniform symbols.
    SyntheticUniform { vocab_size: usize },
    /// Empirical distribution of a fixed symbol list.
    File { vocab_size: usize, symbols: Vec<usize> },
}

impl Dataset {
    pub fn synthetic(vocab_size: usize) -> Self {
        Dataset::SyntheticUniform { vocab_size }
    }

    pub fn from_symbols(vocab_size: usize, symbols: Vec<usize>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidConfig("dataset has no symbols".into()));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| s >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: bad,
                size: vocab_size,
            });
        }
        Ok(Dataset::File { vocab_size, symbols })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Dataset::SyntheticUniform { vocab_size } | Dataset::File { vocab_size, .. } => *vocab_size,
        }
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        match self {
            Dataset::SyntheticUniform { vocab_size } => make_synthetic_batch(*vocab_size, batch_size, rng),
            Dataset::File { symbols, .. } => {
                let idx = make_synthetic_batch(symbols.len(), batch_size, rng)?;
                Ok(idx.into_iter().map(|i| symbols[i]).collect())
            }
        }
    }

    /// Fixed evaluation symbols. Small uniform vocabularies are covered
    /// exactly, so the average over them is the expectation under `p_D`.
    pub fn eval_set(&self) -> Vec<usize> {
        match self {
            Dataset::SyntheticUniform { vocab_size } if *vocab_size <= EVAL_SET_SIZE => (0..*vocab_size).collect(),
            Dataset::File { symbols, .. } if symbols.len() <= EVAL_SET_SIZE => symbols.clone(),
            _ => {
                let mut rng = RngStream::for_purpose(EVAL_SET_SEED, Purpose::EvalSet, 0);
                self.sample_batch(EVAL_SET_SIZE, &mut rng)
                    .expect("dataset is non-empty")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub latent: LatentSpec,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub emb_size: usize,
    pub objective: ObjectiveConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub l2: f64,
    pub eval_every: usize,
    pub eval_k: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.objective.validate(self.latent.kind)?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad(format!("l2 must be ≥ 0, got {}", self.l2));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("emb_size", self.emb_size),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_k", self.eval_k),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        Ok(())
    }
}

/// One evaluation row. `avg_kl` is the mean cross mutual-information
/// estimate `Û − Ŝ` over the evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub nll: f64,
    pub avg_kl: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug)]
pub enum TrainStatus {
    Completed,
    /// Training stopped at `step`; the returned parameters are the last
    /// finite ones, from before that step.
    Aborted {
        step: usize,
        error: Error,
    },
}

#[derive(Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub history: Vec<MetricRecord>,
    /// Elapsed seconds at each history row. Not deterministic; kept apart
    /// from `history` so histories compare bit-for-bit.
    pub wall_time_s: Vec<f64>,
    /// Objective value per step, for loss-curve sanity checks.
    pub objective_trace: Vec<f64>,
    pub params: ModelParams,
    pub status: TrainStatus,
}

impl TrainRun {
    pub fn is_completed(&self) -> bool {
        matches!(self.status, TrainStatus::Completed)
    }
}

/// Evaluates `params` on `xs` and returns (nll, avg_kl).
pub fn evaluate_metrics(params: &ModelParams, xs: &[usize], k: usize, seed: u64, index: u64) -> Result<(f64, f64)> {
    let mut rng = RngStream::for_purpose(seed, Purpose::Eval, index);
    let est = evaluate(params, xs, k, &mut rng)?;
    Ok((est.nll, est.mi))
}

struct StepOutput {
    value: f64,
    grads: Vec<Tensor>,
}

fn train_step(params: &ModelParams, cfg: &TrainConfig, xs: &[usize], rng: &mut RngStream) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let batches = draw_objective_batches(&mut tape, &bound, xs, &cfg.objective, rng)?;
    let out = build_objective(&mut tape, &cfg.objective, &batches)?;
    let penalty = l2_penalty_node(&mut tape, params, bound.nodes(), cfg.l2)?;
    // Maximise the objective by minimising its negation.
    let neg = tape.negate(out.surrogate);
    let loss = tape.add(neg, penalty)?;
    let grads = tape.backward(loss)?;
    Ok(StepOutput {
        value: out.value,
        grads: bound.nodes().iter().map(|&n| grads.wrt(n).clone()).collect(),
    })
}

/// Runs training on `data`. Configuration errors are returned as `Err`;
/// failures during training end the run early with [`TrainStatus::Aborted`].
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    cfg.validate()?;
    if data.vocab_size() != cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "dataset vocabulary {} does not match model vocabulary {}",
            data.vocab_size(),
            cfg.vocab_size
        )));
    }
    let start = Instant::now();
    let mut params = init_model(
        cfg.latent,
        cfg.vocab_size,
        cfg.hidden_size,
        cfg.emb_size,
        &mut RngStream::for_purpose(cfg.seed, Purpose::Init, 0),
    )?;
    let mut adam = AdamState::new(&params, cfg.lr);
    let eval_xs = if cfg.steps > 0 { data.eval_set() } else { Vec::new() };
    let spec = cfg.objective.spec;
    let mut run = TrainRun {
        config: cfg.clone(),
        history: Vec::new(),
        wall_time_s: Vec::new(),
        objective_trace: Vec::with_capacity(cfg.steps),
        params: params.clone(),
        status: TrainStatus::Completed,
    };
    for step in 1..=cfg.steps {
        let outcome = (|| -> Result<()> {
            let xs = data.sample_batch(
                cfg.batch_size,
                &mut RngStream::for_purpose(cfg.seed, Purpose::Minibatch, step as u64),
            )?;
            let mut latent_rng = RngStream::for_purpose(cfg.seed, Purpose::Latent, step as u64);
            let out = train_step(&params, cfg, &xs, &mut latent_rng)?;
            if !out.value.is_finite() {
                return Err(Error::Diverged { step, loss: -out.value });
            }
            adam_step(&mut adam, &mut params, &out.grads)?;
            if !params.is_finite() {
                return Err(Error::Diverged { step, loss: -out.value });
            }
            run.objective_trace.push(out.value);
            Ok(())
        })();
        if let Err(error) = outcome {
            run.status = TrainStatus::Aborted { step, error };
            return Ok(run);
        }
        run.params = params.clone();
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (nll, avg_kl) = evaluate_metrics(&params, &eval_xs, cfg.eval_k, cfg.seed, step as u64)?;
            run.history.push(MetricRecord {
                step,
                nll,
                avg_kl,
                lambda: spec.lambda,
                alpha: spec.alpha,
                seed: cfg.seed,
            });
            run.wall_time_s.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LatentKind;
    use crate::objectives::{BaseEstimator, ObjectiveSpec};

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            latent: LatentSpec::continuous(2),
            vocab_size: 6,
            hidden_size: 8,
            emb_size: 4,
            objective: ObjectiveConfig::new(BaseEstimator::Iwae, 3, ObjectiveSpec::kl(0.3)),
            lr: 1e-2,
            batch_size: 8,
            steps,
            seed: 4,
            l2: 1e-3,
            eval_every: 5,
            eval_k: 10,
        }
    }

    fn scalar_params(w: f64) -> ModelParams {
        // Smallest model; only the first tensor is used as "w".
        let mut p = ModelParams::zeroed(LatentSpec::continuous(1), 1, 1, 1).unwrap();
        p.params_mut()[0].value.data_mut()[0] = w;
        p
    }

    fn grads_like(p: &ModelParams, first: f64) -> Vec<Tensor> {
        let mut g: Vec<Tensor> = p.params().iter().map(|q| Tensor::zeros(q.value.shape())).collect();
        g[0].data_mut()[0] = first;
        g
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p, 0.01);
        let g = grads_like(&p, 1.0);
        adam_step(&mut s, &mut p, &g).unwrap();
        let w = p.params()[0].value.data()[0];
        assert!((w + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = init_model(LatentSpec::continuous(2), 5, 4, 3, &mut RngStream::new(1, 1)).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.1);
        let g: Vec<Tensor> = p.params().iter().map(|q| Tensor::zeros(q.value.shape())).collect();
        adam_step(&mut s, &mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p, 0.02);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let w = p.params()[0].value.data()[0];
            let g = grads_like(&p, 2.0 * w);
            adam_step(&mut s, &mut p, &g).unwrap();
            let now = p.params()[0].value.data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
        assert!(prev < 0.1);
        assert!(s.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = scalar_params(1.0);
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.1);
        let name = p.params()[0].name.clone();
        let g = grads_like(&p, f64::NAN);
        let err = adam_step(&mut s, &mut p, &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if *param == name));
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn l2_examples() {
        let p = scalar_params(2.0);
        assert_eq!(l2_penalty(&p, 0.0), 0.0);
        assert_eq!(l2_penalty(&p, 0.5), 2.0);
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let p = init_model(LatentSpec::categorical(2, 3), 4, 3, 2, &mut RngStream::new(2, 2)).unwrap();
        let c = 0.3;
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let root = l2_penalty_node(&mut tape, &p, b.nodes(), c).unwrap();
        assert!((tape.value(root).item() - l2_penalty(&p, c)).abs() < 1e-12);
        let g = tape.backward(root).unwrap();
        let h = 1e-6;
        for (i, param) in p.params().iter().enumerate() {
            let grad = g.wrt(b.nodes()[i]);
            for j in 0..param.value.numel() {
                let mut plus = p.clone();
                plus.params_mut()[i].value.data_mut()[j] += h;
                let mut minus = p.clone();
                minus.params_mut()[i].value.data_mut()[j] -= h;
                let fd = (l2_penalty(&plus, c) - l2_penalty(&minus, c)) / (2.0 * h);
                assert!((fd - grad.data()[j]).abs() < 1e-7, "{}", param.name);
                let expect = if is_bias(&param.name) {
                    0.0
                } else {
                    2.0 * c * param.value.data()[j]
                };
                assert!((grad.data()[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_batches() {
        let mut rng = RngStream::new(3, 0);
        assert_eq!(make_synthetic_batch(1, 5, &mut rng).unwrap(), vec![0; 5]);
        assert!(make_synthetic_batch(3, 0, &mut rng).is_err());
        let a = make_synthetic_batch(50, 20, &mut RngStream::new(9, 1)).unwrap();
        let b = make_synthetic_batch(50, 20, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_set_covers_small_vocabularies() {
        assert_eq!(Dataset::synthetic(5).eval_set(), vec![0, 1, 2, 3, 4]);
        let big = Dataset::synthetic(10_000).eval_set();
        assert_eq!(big.len(), EVAL_SET_SIZE);
        assert_eq!(big, Dataset::synthetic(10_000).eval_set());
    }

    #[test]
    fn zero_step_run_returns_initial_model() {
        let cfg = tiny_config(0);
        let run = train(&cfg, &Dataset::synthetic(6)).unwrap();
        assert!(run.history.is_empty() && run.is_completed());
        let init = init_model(
            cfg.latent,
            6,
            8,
            4,
            &mut RngStream::for_purpose(cfg.seed, Purpose::Init, 0),
        )
        .unwrap();
        assert_eq!(run.params, init);
    }

    #[test]
    fn runs_are_deterministic_and_record_on_schedule() {
        let cfg = tiny_config(12);
        let a = train(&cfg, &Dataset::synthetic(6)).unwrap();
        let b = train(&cfg, &Dataset::synthetic(6)).unwrap();
        assert!(a.is_completed());
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let steps: Vec<usize> = a.history.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![5, 10, 12]);
        assert_eq!(a.history[0].lambda, 0.3);
    }

    #[test]
    fn eval_cadence_does_not_perturb_training() {
        let mut cfg = tiny_config(10);
        let a = train(&cfg, &Dataset::synthetic(6)).unwrap();
        cfg.eval_every = 3;
        let b = train(&cfg, &Dataset::synthetic(6)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.last(), b.history.last());
    }

    #[test]
    fn divergence_aborts_with_last_finite_params() {
        let mut cfg = tiny_config(50);
        cfg.lr = 1e300;
        let run = train(&cfg, &Dataset::synthetic(6)).unwrap();
        let TrainStatus::Aborted { step, .. } = run.status else {
            panic!("expected abort")
        };
        assert!(step >= 1);
        assert!(run.params.is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config(1);
        cfg.objective.base = BaseEstimator::Reinforce;
        assert!(train(&cfg, &Dataset::synthetic(6)).is_err());
        let mut cfg = tiny_config(1);
        cfg.latent = LatentSpec::default_for(LatentKind::Categorical);
        assert!(train(&cfg, &Dataset::synthetic(6)).is_err());
        assert!(train(&tiny_config(1), &Dataset::synthetic(7)).is_err());
    }
}
