use micmco::models::LatentSpec;
use micmco::objectives::{BaseEstimator, ObjectiveConfig, ObjectiveSpec};
use micmco::stochastics::RngStream;
use micmco::trainer::{make_synthetic_batch, train, Dataset, TrainConfig};

/// Upper 0.1% point of χ² with 99 degrees of freedom.
const CHI2_99_999: f64 = 148.230;

#[test]
fn synthetic_batches_are_uniform() {
    let n = 1_000_000;
    let v = 100;
    let xs = make_synthetic_batch(v, n, &mut RngStream::new(2024, 5)).unwrap();
    let mut counts = vec![0usize; v];
    for x in xs {
        counts[x] += 1;
    }
    let e = n as f64 / v as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    assert!(chi2 < CHI2_99_999, "chi2 = {chi2}");
}

fn moving_average(trace: &[f64], end: usize, width: usize) -> f64 {
    trace[end - width..end].iter().sum::<f64>() / width as f64
}

/// Desk-scale version of the loss-decrease sanity check: small models,
/// moving average of the objective over 50 steps at step 500 vs step 50.
#[test]
fn training_objective_improves() {
    let cases = [
        (
            LatentSpec::continuous(4),
            BaseEstimator::ElboAnalytic,
            1,
            ObjectiveSpec::none(),
        ),
        (
            LatentSpec::continuous(4),
            BaseEstimator::Dreg,
            4,
            ObjectiveSpec::kl(0.5),
        ),
        (
            LatentSpec::continuous(4),
            BaseEstimator::Stl,
            1,
            ObjectiveSpec::power(2.0),
        ),
        (
            LatentSpec::categorical(2, 4),
            BaseEstimator::Vimco,
            4,
            ObjectiveSpec::renyi(0.5, 2.0),
        ),
        (
            LatentSpec::categorical(2, 4),
            BaseEstimator::Reinforce,
            1,
            ObjectiveSpec::none(),
        ),
    ];
    for (latent, base, k, spec) in cases {
        let cfg = TrainConfig {
            latent,
            vocab_size: 20,
            hidden_size: 16,
            emb_size: 8,
            objective: ObjectiveConfig::new(base, k, spec),
            lr: 3e-3,
            batch_size: 32,
            steps: 500,
            seed: 1,
            l2: 0.0,
            eval_every: 500,
            eval_k: 10,
        };
        let run = train(&cfg, &Dataset::synthetic(20)).unwrap();
        assert!(run.is_completed(), "{base}");
        let early = moving_average(&run.objective_trace, 50, 50);
        let late = moving_average(&run.objective_trace, 500, 50);
        assert!(late > early, "{base}: {early} → {late}");
        // The optimum of the uniform task is ln 20.
        assert!(run.history[0].nll > 20f64.ln() - 0.05, "{base}");
    }
}

#[test]
fn file_datasets_train_on_their_symbols() {
    let data = Dataset::from_symbols(6, vec![0, 0, 0, 1]).unwrap();
    assert!(Dataset::from_symbols(6, vec![6]).is_err());
    let xs = data.sample_batch(1000, &mut RngStream::new(1, 1)).unwrap();
    let zeros = xs.iter().filter(|&&x| x == 0).count();
    assert!((zeros as f64 / 1000.0 - 0.75).abs() < 0.05);
    assert!(xs.iter().all(|&x| x < 2));
    assert_eq!(data.eval_set(), vec![0, 0, 0, 1]);
}
