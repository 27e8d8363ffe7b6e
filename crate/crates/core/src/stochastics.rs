//! Seeded random streams and the latent distributions used by the models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::diffcore::{NodeRef, Reduce, Tape, Tensor};
use crate::Result;

/// Bounds applied to encoder log-variances.
pub const LOG_VARIANCE_MIN: f64 = -20.0;
pub const LOG_VARIANCE_MAX: f64 = 20.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// What a stream is used for. Combined with an index into a stream id so
/// that, for example, evaluation draws never perturb training draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Minibatch = 2,
    Latent = 3,
    Eval = 4,
    EvalSet = 5,
    Oracle = 6,
    Test = 7,
}

pub fn stream_id(purpose: Purpose, index: u64) -> u64 {
    ((purpose as u64) << 56) | (index & ((1 << 56) - 1))
}

/// Counter-based random stream (ChaCha20 keyed by `seed`, with `stream_id`
/// selecting an independent keystream). Same `(seed, stream_id)` gives the
/// same sequence on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose, index: u64) -> Self {
        RngStream::new(seed, stream_id(purpose, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn exponential(&mut self) -> f64 {
        Exp1.sample(&mut self.rng)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.standard_normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// A draw from the flat Dirichlet distribution over `n` outcomes.
    pub fn dirichlet_ones(&mut self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| self.exponential()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    /// Inverse-CDF draw from a normalised log-probability vector. Ties in the
    /// cumulative sum resolve toward the lower index.
    pub fn categorical_from_log_probs(&mut self, log_probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (j, &lp) in log_probs.iter().enumerate() {
            let p = lp.exp();
            if p > 0.0 {
                last_positive = j;
            }
            cumulative += p;
            if u < cumulative {
                return j;
            }
        }
        last_positive
    }
}

/// Diagonal Gaussian over rows of `[rows, d]` mean and log-variance nodes.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: NodeRef,
    pub log_variance: NodeRef,
}

impl DiagGaussian {
    pub fn new(mean: NodeRef, log_variance: NodeRef) -> Self {
        DiagGaussian { mean, log_variance }
    }

    /// `rows` copies of N(0, I) in `d` dimensions, as constants.
    pub fn standard(tape: &mut Tape, rows: usize, d: usize) -> Self {
        let mean = tape.constant(Tensor::zeros(&[rows, d]));
        let log_variance = tape.constant(Tensor::zeros(&[rows, d]));
        DiagGaussian { mean, log_variance }
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.mean).shape()[0]
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mean).shape()[1]
    }

    /// Repeats every row `k` times consecutively: row `b` becomes rows
    /// `b*k .. (b+1)*k`.
    pub fn repeat_rows(&self, tape: &mut Tape, k: usize) -> Result<Self> {
        let index = repeat_index(self.rows(tape), k);
        Ok(DiagGaussian {
            mean: tape.embedding_lookup(self.mean, index.clone())?,
            log_variance: tape.embedding_lookup(self.log_variance, index)?,
        })
    }

    /// Same values with the parameter nodes cut from differentiation.
    pub fn detached(&self, tape: &mut Tape) -> Self {
        DiagGaussian {
            mean: tape.stop_gradient(self.mean),
            log_variance: tape.stop_gradient(self.log_variance),
        }
    }

    /// `z = mean + exp(log_variance / 2) ⊙ noise` with fresh standard normal
    /// noise. Returns the differentiable sample and the noise used.
    pub fn sample_reparam(&self, tape: &mut Tape, rng: &mut RngStream) -> Result<(NodeRef, Tensor)> {
        let shape = tape.value(self.mean).shape().to_vec();
        let noise = rng.normal_tensor(&shape);
        let z = self.reparam_with_noise(tape, noise.clone())?;
        Ok((z, noise))
    }

    pub fn reparam_with_noise(&self, tape: &mut Tape, noise: Tensor) -> Result<NodeRef> {
        let half = tape.scale(self.log_variance, 0.5);
        let std = tape.exp(half);
        let eps = tape.constant(noise);
        let spread = tape.mul(std, eps)?;
        tape.add(self.mean, spread)
    }

    /// Row-wise `Σⱼ −½ln(2π) − ½log_varⱼ − (zⱼ−μⱼ)²/(2·exp(log_varⱼ))`.
    pub fn log_density(&self, tape: &mut Tape, z: NodeRef) -> Result<NodeRef> {
        let d = self.dim(tape) as f64;
        let diff = tape.sub(z, self.mean)?;
        let sq = tape.square(diff);
        let neg_lv = tape.negate(self.log_variance);
        let precision = tape.exp(neg_lv);
        let scaled = tape.mul(sq, precision)?;
        let inner = tape.add(self.log_variance, scaled)?;
        let total = tape.sum(inner, Reduce::Axis(1))?;
        let half = tape.scale(total, -0.5);
        let offset = tape.constant(Tensor::scalar(-d * HALF_LN_2PI));
        tape.add(half, offset)
    }

    /// Row-wise closed-form `KL(N(μ, σ²) ‖ N(0, I))`.
    pub fn kl_to_standard(&self, tape: &mut Tape) -> Result<NodeRef> {
        let mu_sq = tape.square(self.mean);
        let var = tape.exp(self.log_variance);
        let a = tape.add(mu_sq, var)?;
        let b = tape.sub(a, self.log_variance)?;
        let per_dim = tape.sum(b, Reduce::Axis(1))?;
        let d = self.dim(tape) as f64;
        let shifted = tape.scale(per_dim, 0.5);
        let offset = tape.constant(Tensor::scalar(-0.5 * d));
        tape.add(shifted, offset)
    }
}

/// Independent categorical latents: `[rows, n_latents * n_categories]` logits.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalSet {
    pub logits: NodeRef,
    pub n_latents: usize,
    pub n_categories: usize,
}

impl CategoricalSet {
    pub fn new(logits: NodeRef, n_latents: usize, n_categories: usize) -> Self {
        CategoricalSet {
            logits,
            n_latents,
            n_categories,
        }
    }

    /// Uniform distributions (zero logits) as constants.
    pub fn uniform(tape: &mut Tape, rows: usize, n_latents: usize, n_categories: usize) -> Self {
        let logits = tape.constant(Tensor::zeros(&[rows, n_latents * n_categories]));
        CategoricalSet::new(logits, n_latents, n_categories)
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.logits).shape()[0]
    }

    /// Normalised log-probabilities, `[rows * n_latents, n_categories]`.
    pub fn log_probs(&self, tape: &mut Tape) -> Result<NodeRef> {
        let rows = self.rows(tape);
        let flat = tape.reshape(self.logits, vec![rows * self.n_latents, self.n_categories])?;
        tape.softmax_log(flat, 1)
    }

    /// `k` joint draws per row, laid out `[row][sample][latent]`. Sampling
    /// carries no gradient path.
    pub fn sample(&self, tape: &mut Tape, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        let lp = self.log_probs(tape)?;
        let lp = tape.value(lp).data();
        let (rows, n, c) = (self.rows(tape), self.n_latents, self.n_categories);
        let mut z = Vec::with_capacity(rows * k * n);
        for b in 0..rows {
            for _ in 0..k {
                for l in 0..n {
                    let at = (b * n + l) * c;
                    z.push(rng.categorical_from_log_probs(&lp[at..at + c]));
                }
            }
        }
        Ok(z)
    }

    /// Joint log-mass of `k` draws per row, returned as `[rows * k]`.
    pub fn log_mass(&self, tape: &mut Tape, z: &[usize], k: usize) -> Result<NodeRef> {
        let rows = self.rows(tape);
        let (n, c) = (self.n_latents, self.n_categories);
        let lp = self.log_probs(tape)?;
        let lp = tape.reshape(lp, vec![rows, n * c])?;
        let repeated = tape.embedding_lookup(lp, repeat_index(rows, k))?;
        let per_latent = tape.reshape(repeated, vec![rows * k * n, c])?;
        let picked = tape.pick(per_latent, z.to_vec())?;
        let grouped = tape.reshape(picked, vec![rows * k, n])?;
        tape.sum(grouped, Reduce::Axis(1))
    }
}

/// `[0,0,..,1,1,..]`: each of `rows` indices repeated `k` times.
pub fn repeat_index(rows: usize, k: usize) -> Vec<usize> {
    (0..rows).flat_map(|b| std::iter::repeat_n(b, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(tape: &mut Tape, mean: &[f64], log_var: &[f64]) -> DiagGaussian {
        let d = mean.len();
        let m = tape.param(Tensor::new(vec![1, d], mean.to_vec()).unwrap());
        let lv = tape.param(Tensor::new(vec![1, d], log_var.to_vec()).unwrap());
        DiagGaussian::new(m, lv)
    }

    #[test]
    fn standard_normal_log_density_values() {
        let mut t = Tape::new();
        let g = gaussian(&mut t, &[0.0], &[0.0]);
        let z0 = t.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let z1 = t.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let l0 = g.log_density(&mut t, z0).unwrap();
        let l1 = g.log_density(&mut t, z1).unwrap();
        assert!((t.value(l0).item() + 0.918_938_533_204_672_8).abs() < 1e-15);
        assert!((t.value(l1).item() + 1.418_938_533_204_673).abs() < 1e-15);
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        // Midpoint rule on [μ − 12σ, μ + 12σ].
        let (mu, lv) = (0.7, -0.4f64);
        let sigma = (0.5 * lv).exp();
        let n = 20_000;
        let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let h = (hi - lo) / n as f64;
        let mut t = Tape::new();
        let g = gaussian(&mut t, &[mu], &[lv]);
        let g = g.repeat_rows(&mut t, n).unwrap();
        let grid: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        let z = t.constant(Tensor::new(vec![n, 1], grid).unwrap());
        let ld = g.log_density(&mut t, z).unwrap();
        let mass: f64 = t.value(ld).data().iter().map(|l| l.exp() * h).sum();
        assert!((mass - 1.0).abs() < 1e-4, "mass {mass}");
    }

    #[test]
    fn kl_to_standard_values() {
        let mut t = Tape::new();
        let g = gaussian(&mut t, &[0.0], &[0.0]);
        let kl = g.kl_to_standard(&mut t).unwrap();
        assert_eq!(t.value(kl).item(), 0.0);
        let g = gaussian(&mut t, &[1.0], &[0.0]);
        let kl = g.kl_to_standard(&mut t).unwrap();
        assert!((t.value(kl).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mean = [0.3, -1.2];
        let log_var = [0.5, -0.8];
        let n = 1_000_000;
        let mut t = Tape::new();
        let q = gaussian(&mut t, &mean, &log_var);
        let exact = {
            let kl = q.kl_to_standard(&mut t).unwrap();
            t.value(kl).item()
        };
        let qr = q.repeat_rows(&mut t, n).unwrap();
        let mut rng = RngStream::for_purpose(11, Purpose::Test, 0);
        let (z, _) = qr.sample_reparam(&mut t, &mut rng).unwrap();
        let lq = qr.log_density(&mut t, z).unwrap();
        let p = DiagGaussian::standard(&mut t, n, 2);
        let lp = p.log_density(&mut t, z).unwrap();
        let diffs: Vec<f64> = t
            .value(lq)
            .data()
            .iter()
            .zip(t.value(lp).data())
            .map(|(a, b)| a - b)
            .collect();
        let mean_diff = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean_diff - exact).abs() < 3.0 * se,
            "mc {mean_diff} exact {exact} se {se}"
        );
    }

    #[test]
    fn reparam_with_zero_noise_is_the_mean() {
        let mut t = Tape::new();
        let g = gaussian(&mut t, &[1.5, -2.0], &[0.3, LOG_VARIANCE_MIN]);
        let z = g.reparam_with_noise(&mut t, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(t.value(z).data(), &[1.5, -2.0]);
        // Variance floor: a unit draw moves the sample by exp(-10) only.
        let z = g.reparam_with_noise(&mut t, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!((t.value(z).data()[1] + 2.0).abs() < 1e-4);
    }

    #[test]
    fn reparam_moments() {
        let n = 1_000_000;
        let mut t = Tape::new();
        let g = gaussian(&mut t, &[1.0], &[4f64.ln()]);
        let g = g.repeat_rows(&mut t, n).unwrap();
        let mut rng = RngStream::for_purpose(3, Purpose::Test, 1);
        let (z, _) = g.sample_reparam(&mut t, &mut rng).unwrap();
        let d = t.value(z).data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!((var - 4.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn reparam_derivatives_match_finite_differences() {
        let noise = Tensor::new(vec![1, 3], vec![0.4, -1.3, 2.1]).unwrap();
        let mean = [0.2, -0.5, 1.0];
        let log_var = [0.1, -0.7, 0.9];
        for coord in 0..3 {
            let mut t = Tape::new();
            let g = gaussian(&mut t, &mean, &log_var);
            let z = g.reparam_with_noise(&mut t, noise.clone()).unwrap();
            let zc = t.pick(z, vec![coord]).unwrap();
            let zc = t.sum(zc, Reduce::All).unwrap();
            let grads = t.backward(zc).unwrap();
            let z_val = t.value(z).data()[coord];
            // ∂z/∂mean = 1, ∂z/∂log_var = ½ (z − mean)
            assert_eq!(grads.wrt(g.mean).data()[coord], 1.0);
            let expected = 0.5 * (z_val - mean[coord]);
            assert!((grads.wrt(g.log_variance).data()[coord] - expected).abs() < 1e-12);

            let h = 1e-5;
            let eval = |lv: f64| mean[coord] + (0.5 * lv).exp() * noise.data()[coord];
            let fd = (eval(log_var[coord] + h) - eval(log_var[coord] - h)) / (2.0 * h);
            assert!((fd - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn categorical_log_mass_values() {
        let mut t = Tape::new();
        let u = CategoricalSet::uniform(&mut t, 1, 8, 10);
        let lm = u.log_mass(&mut t, &[3; 8], 1).unwrap();
        assert!((t.value(lm).item() - 8.0 * 0.1f64.ln()).abs() < 1e-12);

        let logits = t.constant(Tensor::new(vec![1, 2], vec![0.2f64.ln(), 0.8f64.ln()]).unwrap());
        let c = CategoricalSet::new(logits, 1, 2);
        let lm = c.log_mass(&mut t, &[1], 1).unwrap();
        assert!((t.value(lm).item() - 0.8f64.ln()).abs() < 1e-15);
        assert!(c.log_mass(&mut t, &[2], 1).is_err());
    }

    #[test]
    fn categorical_masses_sum_to_one_over_product_space() {
        let (n, c) = (3, 4);
        let mut rng = RngStream::for_purpose(5, Purpose::Test, 2);
        let mut t = Tape::new();
        let logits = t.constant(rng.normal_tensor(&[1, n * c]));
        let set = CategoricalSet::new(logits, n, c);
        let total_configs = c.pow(n as u32);
        let mut z = Vec::with_capacity(total_configs * n);
        for code in 0..total_configs {
            let mut rest = code;
            for _ in 0..n {
                z.push(rest % c);
                rest /= c;
            }
        }
        let lm = set.log_mass(&mut t, &z, total_configs).unwrap();
        let total: f64 = t.value(lm).data().iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let mut t = Tape::new();
        let mut rng = RngStream::for_purpose(1, Purpose::Test, 3);
        let mut logits = vec![0.0; 10];
        logits[6] = 100.0;
        let l = t.constant(Tensor::new(vec![1, 10], logits).unwrap());
        let peaked = CategoricalSet::new(l, 1, 10);
        let z = peaked.sample(&mut t, 10_000, &mut rng).unwrap();
        let hits = z.iter().filter(|&&v| v == 6).count();
        assert!(hits as f64 / 1e4 >= 0.999);

        let flat = CategoricalSet::uniform(&mut t, 1, 1, 10);
        let n = 1_000_000;
        let z = flat.sample(&mut t, n, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        z.iter().for_each(|&v| counts[v] += 1);
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < 0.01);
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let mut c = RngStream::new(42, 8);
        let xa: Vec<f64> = (0..16).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..16).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);

        let mut t = Tape::new();
        let set = CategoricalSet::uniform(&mut t, 2, 3, 5);
        let s1 = set.sample(&mut t, 4, &mut RngStream::new(9, 1)).unwrap();
        let s2 = set.sample(&mut t, 4, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(s1, s2);
    }
}
