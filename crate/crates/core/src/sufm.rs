//! Shallow feature uncertainty modelling.
//!
//! Per-instance channel statistics of a feature map are treated as uncertain:
//! their spread across the batch defines a Gaussian around each statistic,
//! from which perturbed statistics are drawn (optionally combined with
//! Poisson noise) and used to re-style the features.
//!
//! Random stream contract: [`sample_perturbed_stats`] draws two `u64` seeds
//! from the caller's stream, first for the mean branch and then for the
//! standard-deviation branch, and seeds one `ChaCha8Rng` per branch. Each
//! branch visits `(b, c)` in row-major order, drawing one standard normal and
//! then, when the noise mode includes Poisson noise and the rate is
//! positive, one Poisson count.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(B, C, H, W)` activations.
pub type FeatureMap<T> = Tensor<T>;

/// Per-instance, per-channel mean and standard deviation, each `(B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStatistics<T> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

/// Batch-level spread of the statistics, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyEstimate<T> {
    pub sigma_mu: Vec<T>,
    pub sigma_sigma: Vec<T>,
}

/// Replacement statistics, each `(B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedStatistics<T> {
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Gaussian,
    Poisson,
    United,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::Gaussian, NoiseMode::Poisson, NoiseMode::United];

    fn gaussian(self) -> bool {
        matches!(self, NoiseMode::Gaussian | NoiseMode::United)
    }

    fn poisson(self) -> bool {
        matches!(self, NoiseMode::Poisson | NoiseMode::United)
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Gaussian => "gaussian",
            NoiseMode::Poisson => "poisson",
            NoiseMode::United => "united",
        }
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseMode::Gaussian),
            "poisson" => Ok(NoiseMode::Poisson),
            "united" => Ok(NoiseMode::United),
            other => Err(Error::Config(format!("unknown noise mode `{other}` (gaussian, poisson, united)"))),
        }
    }
}

/// How the Gaussian term is formed from a standard normal draw `e`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `stat + e * sigma`, i.e. the term is `e * sigma`.
    Reparameterized,
    /// Draw `s ~ N(stat, sigma^2)` and use `s * sigma` as the term.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SufmConfig {
    pub noise_mode: NoiseMode,
    pub sampling_mode: SamplingMode,
    pub apply_probability: f64,
    pub gamma_floor: f64,
    pub epsilon_std: f64,
    pub poisson_scale: f64,
    pub rng_seed: u64,
}

impl Default for SufmConfig {
    fn default() -> Self {
        Self {
            noise_mode: NoiseMode::United,
            sampling_mode: SamplingMode::Reparameterized,
            apply_probability: 0.5,
            gamma_floor: 1e-4,
            epsilon_std: 1e-6,
            poisson_scale: 0.1,
            rng_seed: 0,
        }
    }
}

impl SufmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!("apply_probability {} is outside [0, 1]", self.apply_probability)));
        }
        if !(self.gamma_floor > 0.0) {
            return Err(Error::Config(format!("gamma_floor must be positive, got {}", self.gamma_floor)));
        }
        if !(self.epsilon_std > 0.0) {
            return Err(Error::Config(format!("epsilon_std must be positive, got {}", self.epsilon_std)));
        }
        if !(self.poisson_scale >= 0.0) {
            return Err(Error::Config(format!("poisson_scale must be non-negative, got {}", self.poisson_scale)));
        }
        Ok(())
    }
}

pub fn instance_channel_stats<T: Scalar>(f: &FeatureMap<T>, epsilon_std: T) -> Result<FeatureStatistics<T>> {
    f.expect_rank(4)?;
    if !f.all_finite() {
        return Err(Error::InvalidInput("feature map contains non-finite values".into()));
    }
    let (b, c, h, w) = f.dims4();
    let n = T::of((h * w) as f64);
    let eps2 = epsilon_std * epsilon_std;
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    for plane in f.data().chunks(h * w) {
        let m = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        mean.push(m);
        std.push((var + eps2).sqrt());
    }
    Ok(FeatureStatistics { mean: Tensor::from_vec(&[b, c], mean)?, std: Tensor::from_vec(&[b, c], std)? })
}

/// Population standard deviation over the batch axis of a `(B, C)` tensor.
/// Identical rows give exactly zero.
fn batch_spread<T: Scalar>(stat: &Tensor<T>) -> Vec<T> {
    let (b, c) = (stat.shape()[0], stat.shape()[1]);
    let bt = T::of(b as f64);
    (0..c)
        .map(|ci| {
            let col = (0..b).map(|bi| stat.data()[bi * c + ci]);
            let first = stat.data()[ci];
            if col.clone().all(|v| v == first) {
                return T::zero();
            }
            let avg = col.clone().sum::<T>() / bt;
            (col.map(|v| (v - avg) * (v - avg)).sum::<T>() / bt).sqrt()
        })
        .collect()
}

pub fn uncertainty_estimates<T: Scalar>(stats: &FeatureStatistics<T>) -> Result<UncertaintyEstimate<T>> {
    stats.mean.expect_rank(2)?;
    stats.std.expect_shape(stats.mean.shape())?;
    if stats.mean.shape()[0] == 0 {
        return Err(Error::InvalidInput("uncertainty needs at least one batch item".into()));
    }
    Ok(UncertaintyEstimate { sigma_mu: batch_spread(&stats.mean), sigma_sigma: batch_spread(&stats.std) })
}

fn perturb_branch<T: Scalar, R: Rng + ?Sized>(
    stat: &Tensor<T>,
    sigma: &[T],
    cfg: &SufmConfig,
    rng: &mut R,
) -> Vec<T> {
    let c = sigma.len();
    let scale = T::of(cfg.poisson_scale);
    stat.data()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let spread = sigma[i % c];
            let e: f64 = rng.sample(StandardNormal);
            let sampled = s + T::of(e) * spread;
            let gaussian_term = match cfg.sampling_mode {
                SamplingMode::Reparameterized => T::of(e) * spread,
                SamplingMode::Literal => sampled * spread,
            };
            let mut out = s;
            if cfg.noise_mode.gaussian() {
                out += gaussian_term;
            }
            if cfg.noise_mode.poisson() {
                let rate = sampled.abs().f64();
                if rate > 0.0 {
                    let k = Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0);
                    out += sampled.signum() * scale * T::of(k);
                }
            }
            out
        })
        .collect()
}

pub fn sample_perturbed_stats<T: Scalar, R: Rng + ?Sized>(
    stats: &FeatureStatistics<T>,
    unc: &UncertaintyEstimate<T>,
    cfg: &SufmConfig,
    rng: &mut R,
) -> Result<PerturbedStatistics<T>> {
    cfg.validate()?;
    stats.std.expect_shape(stats.mean.shape())?;
    let c = stats.mean.shape()[1];
    if unc.sigma_mu.len() != c || unc.sigma_sigma.len() != c {
        return Err(Error::ShapeMismatch { expected: vec![c], found: vec![unc.sigma_mu.len(), unc.sigma_sigma.len()] });
    }
    let mut mu_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut sigma_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let beta = perturb_branch(&stats.mean, &unc.sigma_mu, cfg, &mut mu_rng);
    let floor = T::of(cfg.gamma_floor);
    let gamma = perturb_branch(&stats.std, &unc.sigma_sigma, cfg, &mut sigma_rng)
        .into_iter()
        .map(|g| if g < floor { floor } else { g })
        .collect();
    let shape = stats.mean.shape();
    Ok(PerturbedStatistics { beta: Tensor::from_vec(shape, beta)?, gamma: Tensor::from_vec(shape, gamma)? })
}

/// `gamma * (f - mean) / std + beta` per `(b, c)` plane.
pub fn perturb_features<T: Scalar>(
    f: &FeatureMap<T>,
    stats: &FeatureStatistics<T>,
    pert: &PerturbedStatistics<T>,
) -> Result<FeatureMap<T>> {
    f.expect_rank(4)?;
    let (b, c, h, w) = f.dims4();
    for t in [&stats.mean, &stats.std, &pert.beta, &pert.gamma] {
        t.expect_shape(&[b, c])?;
    }
    let mut out = f.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (stats.mean.data()[i], stats.std.data()[i]);
        let (beta, gamma) = (pert.beta.data()[i], pert.gamma.data()[i]);
        plane.iter_mut().for_each(|v| *v = gamma * (*v - m) / s + beta);
    }
    Ok(out)
}

/// Statistics and their replacements for one application, or `None` when the
/// module is inactive (inference, or the Bernoulli gate is closed).
pub fn plan<T: Scalar, R: Rng + ?Sized>(
    f: &FeatureMap<T>,
    cfg: &SufmConfig,
    rng: &mut R,
    training: bool,
) -> Result<Option<(FeatureStatistics<T>, PerturbedStatistics<T>)>> {
    cfg.validate()?;
    if !training || !rng.random_bool(cfg.apply_probability) {
        return Ok(None);
    }
    let stats = instance_channel_stats(f, T::of(cfg.epsilon_std))?;
    let unc = uncertainty_estimates(&stats)?;
    let pert = sample_perturbed_stats(&stats, &unc, cfg, rng)?;
    Ok(Some((stats, pert)))
}

pub fn sufm_forward<T: Scalar, R: Rng + ?Sized>(
    f: &FeatureMap<T>,
    cfg: &SufmConfig,
    rng: &mut R,
    training: bool,
) -> Result<FeatureMap<T>> {
    match plan(f, cfg, rng, training)? {
        None => Ok(f.clone()),
        Some((stats, pert)) => perturb_features(f, &stats, &pert),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ParamStore};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..3.0))
    }

    /// Independent loop oracle: per (b, c) two-pass mean / variance.
    fn loop_stats(f: &Tensor<f64>, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let (b, c, h, w) = f.dims4();
        let at = |bi: usize, ci: usize, y: usize, x: usize| f.data()[((bi * c + ci) * h + y) * w + x];
        let (mut means, mut stds) = (vec![], vec![]);
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += at(bi, ci, y, x);
                    }
                }
                let m = s / (h * w) as f64;
                let mut v = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        v += (at(bi, ci, y, x) - m).powi(2);
                    }
                }
                means.push(m);
                stds.push((v / (h * w) as f64 + eps * eps).sqrt());
            }
        }
        (means, stds)
    }

    #[test]
    fn constant_map_has_epsilon_std() {
        let f = Tensor::full(&[2, 3, 4, 4], 3.0f64);
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        assert!(s.mean.data().iter().all(|&m| m == 3.0));
        assert!(s.std.data().iter().all(|&v| (v - 1e-6).abs() < 1e-18));
    }

    #[test]
    fn symmetric_values_have_zero_mean() {
        let f = Tensor::from_fn(&[2, 2, 2, 4], |i| if i % 2 == 0 { 1.0f64 } else { -1.0 });
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        assert!(s.mean.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn stats_match_loop_oracle_seed7() {
        let f = random_map(&[2, 3, 2, 2], 7);
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        let (m, sd) = loop_stats(&f, 1e-6);
        for i in 0..6 {
            assert!((s.mean.data()[i] - m[i]).abs() < 1e-6);
            assert!((s.std.data()[i] - sd[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut f = Tensor::full(&[1, 1, 2, 2], 0.0f64);
        f.data_mut()[3] = f64::NAN;
        assert!(matches!(instance_channel_stats(&f, 1e-6), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn single_instance_has_no_uncertainty() {
        let s = instance_channel_stats(&random_map(&[1, 4, 3, 3], 1), 1e-6).unwrap();
        let u = uncertainty_estimates(&s).unwrap();
        assert!(u.sigma_mu.iter().chain(&u.sigma_sigma).all(|&v| v == 0.0));
    }

    #[test]
    fn two_instance_spread() {
        let mean = Tensor::from_vec(&[2, 1], vec![0.0f64, 2.0]).unwrap();
        let std = Tensor::from_vec(&[2, 1], vec![1.0f64, 1.0]).unwrap();
        let u = uncertainty_estimates(&FeatureStatistics { mean, std }).unwrap();
        assert_eq!(u.sigma_mu, vec![1.0]);
        assert_eq!(u.sigma_sigma, vec![0.0]);
    }

    #[test]
    fn identical_instances_have_no_uncertainty() {
        let one = random_map(&[1, 3, 4, 4], 3);
        let f = Tensor::concat_batch(&[one.clone(), one.clone(), one]).unwrap();
        let u = uncertainty_estimates(&instance_channel_stats(&f, 1e-6).unwrap()).unwrap();
        assert!(u.sigma_mu.iter().chain(&u.sigma_sigma).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_uncertainty_gaussian_collapses() {
        let s = instance_channel_stats(&random_map(&[3, 4, 5, 5], 2), 1e-6).unwrap();
        let unc = UncertaintyEstimate { sigma_mu: vec![0.0; 4], sigma_sigma: vec![0.0; 4] };
        for sampling_mode in [SamplingMode::Reparameterized, SamplingMode::Literal] {
            let cfg = SufmConfig { noise_mode: NoiseMode::Gaussian, sampling_mode, ..Default::default() };
            let p = sample_perturbed_stats(&s, &unc, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(p.beta, s.mean);
            assert_eq!(p.gamma, s.std);
        }
    }

    #[test]
    fn poisson_with_zero_rate_adds_nothing() {
        let zeros = Tensor::zeros(&[2, 3]);
        let s = FeatureStatistics { mean: zeros.clone(), std: Tensor::full(&[2, 3], 0.5f64) };
        let unc = UncertaintyEstimate { sigma_mu: vec![0.0; 3], sigma_sigma: vec![0.0; 3] };
        let cfg = SufmConfig { noise_mode: NoiseMode::Poisson, ..Default::default() };
        for seed in 0..20 {
            let p = sample_perturbed_stats(&s, &unc, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(p.beta, zeros);
        }
    }

    /// Replays the documented draw sequence step by step.
    fn replay(stats: &FeatureStatistics<f64>, unc: &UncertaintyEstimate<f64>, cfg: &SufmConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let seeds: [u64; 2] = [master.random(), master.random()];
        let c = unc.sigma_mu.len();
        let mut out = [vec![], vec![]];
        for (branch, (stat, spread)) in [(&stats.mean, &unc.sigma_mu), (&stats.std, &unc.sigma_sigma)].into_iter().enumerate() {
            let mut r = ChaCha8Rng::seed_from_u64(seeds[branch]);
            for (i, &s) in stat.data().iter().enumerate() {
                let e: f64 = r.sample(StandardNormal);
                let sampled = s + e * spread[i % c];
                let mut v = s + e * spread[i % c];
                if sampled != 0.0 {
                    let k: f64 = Poisson::new(sampled.abs()).unwrap().sample(&mut r);
                    v += sampled.signum() * cfg.poisson_scale * k;
                }
                if branch == 1 {
                    v = v.max(cfg.gamma_floor);
                }
                out[branch].push(v);
            }
        }
        let [b, g] = out;
        (b, g)
    }

    #[test]
    fn united_reparameterized_matches_replay() {
        let f = random_map(&[4, 3, 4, 4], 11);
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        let u = uncertainty_estimates(&s).unwrap();
        let cfg = SufmConfig::default();
        let p = sample_perturbed_stats(&s, &u, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (beta, gamma) = replay(&s, &u, &cfg, 5);
        assert_eq!(p.beta.data(), &beta[..]);
        assert_eq!(p.gamma.data(), &gamma[..]);
    }

    #[test]
    fn identity_restyle_returns_input() {
        let f = random_map(&[2, 3, 4, 4], 4);
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        let p = PerturbedStatistics { beta: s.mean.clone(), gamma: s.std.clone() };
        assert!(perturb_features(&f, &s, &p).unwrap().max_abs_diff(&f) < 1e-5);
    }

    #[test]
    fn standardising_restyle() {
        let f = random_map(&[2, 2, 6, 6], 8);
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        let p = PerturbedStatistics { beta: Tensor::zeros(&[2, 2]), gamma: Tensor::full(&[2, 2], 1.0) };
        let out = perturb_features(&f, &s, &p).unwrap();
        let o = instance_channel_stats(&out, 0.0).unwrap();
        assert!(o.mean.data().iter().all(|m| m.abs() < 1e-9));
        assert!(o.std.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn single_pixel_restyle_arithmetic() {
        let f = Tensor::full(&[1, 1, 1, 1], 5.0f64);
        let s = FeatureStatistics { mean: Tensor::full(&[1, 1], 5.0), std: Tensor::full(&[1, 1], 1e-6) };
        let p = PerturbedStatistics { beta: Tensor::full(&[1, 1], 2.0), gamma: Tensor::full(&[1, 1], 1.0) };
        assert_eq!(perturb_features(&f, &s, &p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn inference_and_closed_gate_are_identity() {
        let f = random_map(&[3, 2, 4, 4], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sufm_forward(&f, &SufmConfig::default(), &mut rng, false).unwrap(), f);
        let never = SufmConfig { apply_probability: 0.0, ..Default::default() };
        for seed in 0..10 {
            assert_eq!(sufm_forward(&f, &never, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap(), f);
        }
    }

    #[test]
    fn forward_equals_manual_composition() {
        let f = random_map(&[3, 4, 5, 5], 12);
        let cfg = SufmConfig { apply_probability: 1.0, ..Default::default() };
        let got = sufm_forward(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(21), true).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        assert!(rng.random_bool(1.0));
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        let u = uncertainty_estimates(&s).unwrap();
        let p = sample_perturbed_stats(&s, &u, &cfg, &mut rng).unwrap();
        assert_eq!(got, perturb_features(&f, &s, &p).unwrap());
        assert_ne!(got, f);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SufmConfig { apply_probability: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(matches!("laplace".parse::<NoiseMode>(), Err(Error::Config(_))));
        assert_eq!("United".parse::<NoiseMode>().unwrap(), NoiseMode::United);
    }

    #[test]
    fn restyle_jacobian_matches_central_differences() {
        let f = random_map(&[2, 2, 3, 3], 13);
        let s = instance_channel_stats(&f, 1e-6).unwrap();
        let cfg = SufmConfig::default();
        let u = uncertainty_estimates(&s).unwrap();
        let p = sample_perturbed_stats(&s, &u, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let probe = random_map(&[2, 2, 3, 3], 14);

        let objective = |x: &Tensor<f64>| -> f64 {
            let st = instance_channel_stats(x, 1e-6).unwrap();
            let out = perturb_features(x, &st, &p).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };

        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(f.clone());
        let value = perturb_features(&f, &s, &p).unwrap();
        let y = g.restyle(x, value, s.mean.data(), s.std.data(), p.gamma.data().to_vec());
        let root = g.weighted_sum(y, probe.clone());
        let grads = g.backward(root);
        let analytic = grads.wrt(x).unwrap();

        let h = 1e-6;
        for i in 0..f.numel() {
            let mut up = f.clone();
            up.data_mut()[i] += h;
            let mut dn = f.clone();
            dn.data_mut()[i] -= h;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "element {i}: fd {fd}, analytic {a}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_preserves_shape_and_is_deterministic(
            b in 1usize..4, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>(),
            mode in prop::sample::select(NoiseMode::ALL.to_vec()),
        ) {
            let f = random_map(&[b, c, h, w], seed);
            let cfg = SufmConfig { noise_mode: mode, apply_probability: 1.0, ..Default::default() };
            let a = sufm_forward(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
            let again = sufm_forward(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
            prop_assert_eq!(a.shape(), f.shape());
            prop_assert_eq!(a, again);
        }

        #[test]
        fn gamma_respects_floor(seed in any::<u64>(), mode in prop::sample::select(NoiseMode::ALL.to_vec())) {
            let f = random_map(&[4, 3, 3, 3], seed).map(|v| v * 0.01);
            let s = instance_channel_stats(&f, 1e-6).unwrap();
            let u = uncertainty_estimates(&s).unwrap();
            let cfg = SufmConfig { noise_mode: mode, gamma_floor: 1e-3, ..Default::default() };
            let p = sample_perturbed_stats(&s, &u, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(p.gamma.data().iter().all(|&g| g >= 1e-3));
        }
    }
}
