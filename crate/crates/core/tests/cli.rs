use std::path::Path;
use std::process::Command;

use micmco::cli::{self, pareto::dominates, ParetoPoint};
use micmco::diffcore::Tape;
use micmco::models::{init_model, write_checkpoint, LatentInput, LatentSpec, ModelParams};
use micmco::stochastics::RngStream;
use proptest::prelude::*;

fn micmco(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_micmco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{body}\nout_dir = {}\n", dir.join("out").display())).unwrap();
    path
}

const SMALL: &str = "vocab_size = 12\nhidden_size = 8\nemb_size = 6\nn_latents = 3\nbatch_size = 16\neval_k = 10\neval_every = 4\nlr = 0.01";

#[test]
fn zero_step_train_writes_header_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "steps = 0");
    let out = micmco(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv, "step,nll,avg_kl,lambda,alpha,base,k_lik,k_mi,seed,wall_time_s\n");
    let params = micmco::models::read_checkpoint(&dir.path().join("out/checkpoint.bin")).unwrap();
    assert_eq!(params.spec(), LatentSpec::continuous(40));
    assert_eq!(params.vocab_size(), 10_000);
}

#[test]
fn bad_configs_exit_nonzero_with_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    for (body, needle) in [
        ("objective = renyi\nlambda = 0.5\nalpha = 1.0", "line 3, key `alpha`"),
        ("steps = 0\nbatchsize = 3", "line 2, key `batchsize`"),
    ] {
        let cfg = write_config(dir.path(), body);
        let out = micmco(&["train", "--config", cfg.to_str().unwrap()]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn repeated_training_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\nsteps = 9\nobjective = kl\nlambda = 0.5\nbase = iwae\nk_lik = 3");
    for dir in [a.path(), b.path()] {
        let cfg = write_config(dir, &body);
        let out = micmco(&["train", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
        assert!(out.status.success());
    }
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(
            std::fs::read(a.path().join("out").join(f)).unwrap(),
            std::fs::read(b.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = std::fs::read_to_string(a.path().join("out/metrics.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, vec!["4", "8", "9"]);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",3,")));
}

#[test]
fn eval_of_a_collapsed_checkpoint_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.bin");
    write_checkpoint(
        &path,
        &ModelParams::zeroed(LatentSpec::continuous(40), 10_000, 16, 16).unwrap(),
    )
    .unwrap();
    let out = micmco(&["eval", "--checkpoint", path.to_str().unwrap(), "--eval-k", "20"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|f| f.parse().unwrap())
        .collect();
    assert!((fields[0] - 10_000f64.ln()).abs() < 1e-6);
    assert!(fields[1].abs() < 1e-9);
}

#[test]
fn eval_checks_the_latent_spec() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    write_checkpoint(
        &path,
        &ModelParams::zeroed(LatentSpec::categorical(2, 3), 12, 4, 4).unwrap(),
    )
    .unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(cli::cmd_eval(&path, Some(&cfg), None, None).is_err());
    let cfg = write_config(
        dir.path(),
        "latent_kind = categorical\nn_latents = 2\nn_categories = 3\nvocab_size = 12",
    );
    assert!(cli::cmd_eval(&path, Some(&cfg), Some(5), None).is_ok());
}

fn enumerated_nll(m: &ModelParams) -> f64 {
    let spec = m.spec();
    let configs = spec.n_categories.pow(spec.n_latents as u32);
    let z: Vec<usize> = (0..configs)
        .flat_map(|code| (0..spec.n_latents).map(move |l| code / spec.n_categories.pow(l as u32) % spec.n_categories))
        .collect();
    let v = m.vocab_size();
    let mut nll = 0.0;
    for x in 0..v {
        let mut t = Tape::new();
        let b = m.bind_constant(&mut t);
        let ll = b
            .decode_log_likelihood(&mut t, LatentInput::Categorical(&z), &vec![x; configs])
            .unwrap();
        let px = t.value(ll).data().iter().map(|l| l.exp()).sum::<f64>() / configs as f64;
        nll -= px.ln();
    }
    nll / v as f64
}

#[test]
fn eval_of_a_tiny_checkpoint_matches_enumeration() {
    let m = init_model(LatentSpec::categorical(2, 3), 5, 8, 6, &mut RngStream::new(17, 0)).unwrap();
    let exact = enumerated_nll(&m);
    let runs: Vec<f64> = (0..30).map(|s| cli::eval_params(&m, 100, s).unwrap().nll).collect();
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let sd = (runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt();
    let se = sd / (runs.len() as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 3.0 * se + 1e-3,
        "mean {mean} exact {exact} se {se}"
    );
}

#[test]
fn sweep_of_one_point_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\nsteps = 5\nseed = 9");
    let cfg = write_config(dir.path(), &body);
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "lr = 0.01\n").unwrap();
    let out = micmco(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train_dir = tempfile::tempdir().unwrap();
    let cfg2 = write_config(train_dir.path(), &body);
    assert!(micmco(&["train", "--config", cfg2.to_str().unwrap()]).status.success());
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(
            std::fs::read(dir.path().join("out/run_000").join(f)).unwrap(),
            std::fs::read(train_dir.path().join("out").join(f)).unwrap()
        );
    }
    let sweep = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert!(sweep.starts_with("run_id,status,step,nll,avg_kl,"));
    assert!(sweep.lines().nth(1).unwrap().starts_with("run_000,ok,5,"));
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}\nsteps = 2\nobjective = renyi\nlambda = 0.5"),
    );
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "alpha = 1.0, 2.0\n").unwrap();
    let rows = cli::cmd_sweep(&cfg, &grid, 2, false).unwrap();
    assert!(rows[0].outcome.is_err());
    assert!(rows[1].outcome.as_ref().is_ok_and(|r| r.abort.is_none()));
    let sweep = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert!(sweep.lines().nth(1).unwrap().starts_with("run_000,failed,"));
    std::fs::write(&grid, "alpha =\n").unwrap();
    assert!(cli::cmd_sweep(&cfg, &grid, 1, false).is_err());
}

#[test]
fn parallel_sweeps_are_deterministic() {
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &format!("{SMALL}\nsteps = 3\nobjective = kl"));
        let grid = dir.path().join("grid.txt");
        std::fs::write(&grid, "lambda = 0 0.5 0.9\n").unwrap();
        let out = micmco(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--grid",
            grid.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
        assert!(out.status.success());
        outputs.push(std::fs::read(dir.path().join("out/sweep.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn pareto_command_filters_and_sorts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    let output = dir.path().join("out.csv");
    std::fs::write(
        &input,
        "run_id,nll,avg_kl\na,9.3,0.5\nb,9.25,0.6\nc,9.4,0.4\nd,9.21,0.2\n",
    )
    .unwrap();
    let out = micmco(&[
        "pareto",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&output).unwrap(),
        "avg_kl,nll,run_id\n0.2,9.21,d\n0.6,9.25,b\n"
    );
    std::fs::write(&input, "run_id,avg_kl\na,0.5\n").unwrap();
    assert!(!micmco(&[
        "pareto",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap()
    ])
    .status
    .success());
}

#[test]
fn audit_passes_and_is_reproducible() {
    let out = micmco(&["audit", "--seed", "11"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS") && l.contains("seed=11")));
    assert_eq!(micmco(&["audit", "--seed", "11"]).stdout, text.into_bytes());
}

fn brute_force(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut kept: Vec<ParetoPoint> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let beaten = points.iter().any(|q| dominates(q, p));
        let duplicate = points[..i].iter().any(|q| q.avg_kl == p.avg_kl && q.nll == p.nll);
        if !beaten && !duplicate {
            kept.push(p.clone());
        }
    }
    kept.sort_by(|a, b| a.avg_kl.partial_cmp(&b.avg_kl).unwrap());
    kept
}

fn cloud() -> impl Strategy<Value = Vec<ParetoPoint>> {
    // Coarse grid values so that ties actually occur.
    prop::collection::vec((0u8..40, 0u8..40), 1..200).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (k, n))| ParetoPoint {
                avg_kl: k as f64 * 0.25,
                nll: 9.2 + n as f64 * 0.01,
                run_id: i.to_string(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn frontier_equals_brute_force(points in cloud()) {
        let f = cli::pareto_frontier(&points);
        prop_assert_eq!(&f, &brute_force(&points));
        prop_assert_eq!(cli::pareto_frontier(&f), f.clone());
        for a in &f {
            for b in &f {
                prop_assert!(!dominates(a, b));
            }
        }
    }
}
