//! Closed-form algebra of diagonal Gaussians.
//!
//! Diagonal Gaussians are the currency of every encoder, prior and fusion
//! rule in this crate: posteriors are fused by multiplying densities
//! (precisions add), mixtures are sampled by picking one expert, and all
//! divergences have closed forms. Everything here is a pure function of its
//! inputs and safe to call from any thread.

use crate::error::{Error, Result};

/// Log-variances are clamped to this range before exponentiation inside
/// fusion and KL computations, so precisions stay finite during early
/// training.
pub const LOG_VAR_CLAMP: f64 = 20.0;

/// A diagonal Gaussian over the latent space, parameterized by mean and
/// log-variance per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a Gaussian, validating that mean and log-variance agree in
    /// length, are non-empty and contain only finite entries.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::validation("DiagGaussian must have L >= 1"));
        }
        if mean.len() != log_var.len() {
            return Err(Error::dim(format!(
                "mean has length {} but log_var has length {}",
                mean.len(),
                log_var.len()
            )));
        }
        if !mean.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(Error::validation("DiagGaussian entries must be finite"));
        }
        Ok(Self { mean, log_var })
    }

    /// The standard normal N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    /// Convenience constructor from per-dimension (mean, variance) pairs.
    pub fn from_mean_var(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::validation("variances must be positive and finite"));
        }
        let log_var = var.iter().map(|v| v.ln()).collect();
        Self::new(mean, log_var)
    }

    /// Isotropic Gaussian with the same mean and variance in every dimension.
    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Result<Self> {
        Self::from_mean_var(vec![mean; dim], vec![var; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// Per-dimension variance, exp(log_var).
    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }

    /// Log-density at a point.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("log_pdf point has wrong dimension"));
        }
        const LN_2PI: f64 = 1.837_877_066_409_345_6;
        let mut acc = 0.0;
        for d in 0..self.dim() {
            let lv = self.log_var[d];
            let diff = x[d] - self.mean[d];
            acc += -0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
        }
        Ok(acc)
    }
}

/// An ordered, non-empty list of experts with equal latent dimensionality.
#[derive(Debug, Clone)]
pub struct ExpertList(Vec<DiagGaussian>);

impl ExpertList {
    pub fn new(experts: Vec<DiagGaussian>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::validation("ExpertList must be non-empty"))?;
        let dim = first.dim();
        if experts.iter().any(|e| e.dim() != dim) {
            return Err(Error::dim("experts must share one latent dimensionality"));
        }
        Ok(Self(experts))
    }

    pub fn experts(&self) -> &[DiagGaussian] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0[0].dim()
    }
}

/// Where a latent sample came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleSource {
    Prior,
    Reparam,
    MixtureComponent(usize),
}

/// One draw from a latent-space distribution.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub value: Vec<f64>,
    pub source: SampleSource,
}

#[inline]
pub(crate) fn clamp_log_var(lv: f64) -> f64 {
    lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
}

/// Product-of-experts fusion: multiplies the expert densities and
/// renormalizes. Per dimension, precisions add and the mean is the
/// precision-weighted average. The normalization constant of the product is
/// implicit: a product of Gaussians renormalizes to a Gaussian, so it never
/// needs to be materialized.
pub fn poe_fuse(experts: &ExpertList) -> Result<DiagGaussian> {
    let dim = experts.dim();
    let mut mean = vec![0.0; dim];
    let mut log_var = vec![0.0; dim];
    for d in 0..dim {
        let mut precision = 0.0;
        let mut weighted_mean = 0.0;
        for e in experts.experts() {
            let p = (-clamp_log_var(e.log_var()[d])).exp();
            precision += p;
            weighted_mean += p * e.mean()[d];
        }
        mean[d] = weighted_mean / precision;
        log_var[d] = -precision.ln();
    }
    DiagGaussian::new(mean, log_var)
}

/// Picks a mixture component by inverting the weight CDF at `u` in [0, 1).
///
/// Callers stratify across a batch by spreading `u` values evenly (see
/// [`stratified_selectors`]); with uniform weights and a batch divisible by
/// the number of experts, every expert is chosen equally often.
pub fn moe_select(weights: &[f64], u: f64) -> Result<usize> {
    validate_weights(weights)?;
    if !(0.0..1.0).contains(&u) {
        return Err(Error::validation("selector u must lie in [0, 1)"));
    }
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::validation("weights must be non-empty"));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::validation("weights must be non-negative and finite"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "weights must sum to 1 (got {sum})"
        )));
    }
    Ok(())
}

/// Evenly spread selection coordinates for stratified mixture sampling over
/// a batch of `count` draws, in a seeded random order.
pub fn stratified_selectors(count: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut us: Vec<f64> = (0..count).map(|i| (i as f64 + 0.5) / count as f64).collect();
    us.shuffle(rng);
    us
}

/// Mixture-of-experts sampling: select one expert via `u`, then draw from it
/// with the injected standard-normal `noise`.
pub fn moe_sample(
    experts: &ExpertList,
    weights: &[f64],
    u: f64,
    noise: &[f64],
) -> Result<LatentSample> {
    if weights.len() != experts.len() {
        return Err(Error::dim("one weight per expert required"));
    }
    let chosen = moe_select(weights, u)?;
    let mut sample = reparam_sample(&experts.experts()[chosen], noise)?;
    sample.source = SampleSource::MixtureComponent(chosen);
    Ok(sample)
}

/// Exact KL divergence between diagonal Gaussians,
/// KL(q || p) = 1/2 Σ_d [ σq²/σp² + (μq−μp)²/σp² − 1 + ln σp² − ln σq² ].
///
/// Non-negative, and exactly zero when q and p coincide.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::dim("kl_diag requires equal dimensions"));
    }
    let mut acc = 0.0;
    for d in 0..q.dim() {
        let lq = clamp_log_var(q.log_var()[d]);
        let lp = clamp_log_var(p.log_var()[d]);
        let diff = q.mean()[d] - p.mean()[d];
        acc += 0.5 * ((lq - lp).exp() + diff * diff * (-lp).exp() - 1.0 + lp - lq);
    }
    Ok(acc)
}

/// Reparameterized sampling: mean + exp(log_var / 2) ⊙ noise. Deterministic
/// in (g, noise); the caller draws `noise` from N(0, I).
pub fn reparam_sample(g: &DiagGaussian, noise: &[f64]) -> Result<LatentSample> {
    if noise.len() != g.dim() {
        return Err(Error::dim("noise length must equal latent dimension"));
    }
    let value = (0..g.dim())
        .map(|d| g.mean()[d] + (0.5 * g.log_var()[d]).exp() * noise[d])
        .collect();
    Ok(LatentSample {
        value,
        source: SampleSource::Reparam,
    })
}

/// Numerically stable σ(x) log computed as x·t − softplus(x) pieces.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) does not overflow for any x
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Bernoulli log-likelihood of soft targets in [0, 1] under logits,
/// Σ_d [ t·log σ(l) + (1−t)·log(1−σ(l)) ], computed in the overflow-free
/// form Σ_d [ t·l − softplus(l) ].
pub fn bernoulli_loglik(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::dim("logits and target must have equal length"));
    }
    if target.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::validation("targets must lie in [0, 1]"));
    }
    Ok(logits
        .iter()
        .zip(target.iter())
        .map(|(&l, &t)| t * l - softplus(l))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn diag_gaussian_validates() {
        assert!(DiagGaussian::new(vec![], vec![]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn poe_single_expert_is_identity() {
        let g = DiagGaussian::standard(3);
        let fused = poe_fuse(&ExpertList::new(vec![g.clone()]).unwrap()).unwrap();
        assert_eq!(fused.mean(), g.mean());
        for d in 0..3 {
            assert!(close(fused.log_var()[d], 0.0, 1e-15));
        }
    }

    #[test]
    fn poe_equal_precision_experts() {
        // [N(0,1), N(0,1)] -> N(0, 0.5); [N(0,1), N(2,1)] -> N(1, 0.5)
        let a = DiagGaussian::isotropic(2, 0.0, 1.0).unwrap();
        let b = DiagGaussian::isotropic(2, 2.0, 1.0).unwrap();
        let same = poe_fuse(&ExpertList::new(vec![a.clone(), a.clone()]).unwrap()).unwrap();
        for d in 0..2 {
            assert!(close(same.mean()[d], 0.0, 1e-15));
            assert!(close(same.var()[d], 0.5, 1e-15));
        }
        let shifted = poe_fuse(&ExpertList::new(vec![a, b]).unwrap()).unwrap();
        for d in 0..2 {
            assert!(close(shifted.mean()[d], 1.0, 1e-15));
            assert!(close(shifted.var()[d], 0.5, 1e-15));
        }
    }

    /// Brute-force oracle: the fused density must match the normalized
    /// pointwise product of the expert densities on a 1-D grid.
    fn grid_product_check(a: &DiagGaussian, b: &DiagGaussian, tol: f64) {
        let fused = poe_fuse(&ExpertList::new(vec![a.clone(), b.clone()]).unwrap()).unwrap();
        let n = 8001;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / (n - 1) as f64;
        let product: Vec<f64> = (0..n)
            .map(|i| {
                let x = lo + i as f64 * h;
                (a.log_pdf(&[x]).unwrap() + b.log_pdf(&[x]).unwrap()).exp()
            })
            .collect();
        // trapezoid rule for the normalizer
        let z: f64 = h
            * (0.5 * product[0]
                + 0.5 * product[n - 1]
                + product[1..n - 1].iter().sum::<f64>());
        let mut max_err: f64 = 0.0;
        for i in 0..n {
            let x = lo + i as f64 * h;
            let fused_pdf = fused.log_pdf(&[x]).unwrap().exp();
            max_err = max_err.max((fused_pdf - product[i] / z).abs());
        }
        assert!(max_err < tol, "max pointwise density error {max_err}");
    }

    #[test]
    fn poe_matches_grid_product_oracle() {
        let a = DiagGaussian::from_mean_var(vec![0.3], vec![0.25]).unwrap();
        let b = DiagGaussian::from_mean_var(vec![-0.7], vec![4.0]).unwrap();
        grid_product_check(&a, &b, 1e-6);
    }

    #[test]
    fn moe_single_expert_equals_reparam() {
        let g = DiagGaussian::isotropic(4, 1.5, 2.0).unwrap();
        let noise = [0.3, -0.7, 0.0, 2.0];
        let experts = ExpertList::new(vec![g.clone()]).unwrap();
        let via_moe = moe_sample(&experts, &[1.0], 0.5, &noise).unwrap();
        let direct = reparam_sample(&g, &noise).unwrap();
        assert_eq!(via_moe.value, direct.value);
        assert_eq!(via_moe.source, SampleSource::MixtureComponent(0));
    }

    #[test]
    fn moe_weight_validation() {
        let g = DiagGaussian::standard(1);
        let experts = ExpertList::new(vec![g.clone(), g]).unwrap();
        let err = moe_sample(&experts, &[0.6, 0.5], 0.1, &[0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn moe_identical_experts_match_component_moments() {
        // mixture of identical components is the common component
        let g = DiagGaussian::from_mean_var(vec![0.7], vec![1.3]).unwrap();
        let experts = ExpertList::new(vec![g.clone(), g.clone()]).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let us = stratified_selectors(n, &mut rng);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for u in us {
            let noise = [sample_standard_normal(&mut rng)];
            let s = moe_sample(&experts, &[0.5, 0.5], u, &noise).unwrap();
            sum += s.value[0];
            sum_sq += s.value[0] * s.value[0];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // moment test within 3 standard errors
        let se_mean = (1.3f64 / n as f64).sqrt();
        let se_var = 1.3 * (2.0 / n as f64).sqrt();
        assert!(close(mean, 0.7, 3.0 * se_mean), "mean {mean}");
        assert!(close(var, 1.3, 3.0 * se_var), "var {var}");
    }

    #[test]
    fn moe_bimodal_mixture_moments() {
        // experts N(-2,1), N(2,1) uniform: mean 0, variance 5
        let a = DiagGaussian::from_mean_var(vec![-2.0], vec![1.0]).unwrap();
        let b = DiagGaussian::from_mean_var(vec![2.0], vec![1.0]).unwrap();
        let experts = ExpertList::new(vec![a, b]).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let us = stratified_selectors(n, &mut rng);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut counts = [0usize; 2];
        for u in us {
            let noise = [sample_standard_normal(&mut rng)];
            let s = moe_sample(&experts, &[0.5, 0.5], u, &noise).unwrap();
            if let SampleSource::MixtureComponent(c) = s.source {
                counts[c] += 1;
            }
            sum += s.value[0];
            sum_sq += s.value[0] * s.value[0];
        }
        assert_eq!(counts[0], counts[1], "stratified selection must be exact");
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se_mean = (5.0f64 / n as f64).sqrt();
        // Var of the variance estimator for this mixture: (E[x^4]-var^2)/n,
        // E[x^4] for the mixture = 3 + 6*4 + 16 = 43, so se ~ sqrt((43-25)/n).
        let se_var = ((43.0 - 25.0) / n as f64).sqrt();
        assert!(close(mean, 0.0, 3.0 * se_mean), "mean {mean}");
        assert!(close(var, 5.0, 3.0 * se_var), "var {var}");
    }

    fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller on two uniforms
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn kl_trivial_values() {
        let std1 = DiagGaussian::standard(1);
        assert_eq!(kl_diag(&std1, &std1).unwrap(), 0.0);
        let q = DiagGaussian::from_mean_var(vec![1.0], vec![1.0]).unwrap();
        assert!(close(kl_diag(&q, &std1).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        let q = DiagGaussian::from_mean_var(vec![0.5], vec![2.0]).unwrap();
        let p = DiagGaussian::from_mean_var(vec![-0.5], vec![0.5]).unwrap();
        let closed = kl_diag(&q, &p).unwrap();
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noise = [sample_standard_normal(&mut rng)];
            let z = reparam_sample(&q, &noise).unwrap().value;
            let v = q.log_pdf(&z).unwrap() - p.log_pdf(&z).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sum_sq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            close(closed, mc, 3.0 * se),
            "closed {closed} vs mc {mc} (se {se})"
        );
    }

    #[test]
    fn reparam_trivial_values() {
        let std2 = DiagGaussian::standard(2);
        assert_eq!(reparam_sample(&std2, &[0.0, 0.0]).unwrap().value, vec![0.0, 0.0]);
        let g = DiagGaussian::from_mean_var(vec![3.0], vec![4.0]).unwrap();
        let s = reparam_sample(&g, &[1.0]).unwrap();
        assert!(close(s.value[0], 5.0, 1e-12));
    }

    #[test]
    fn reparam_moments() {
        let g = DiagGaussian::from_mean_var(vec![1.2], vec![0.49]).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let s = reparam_sample(&g, &[sample_standard_normal(&mut rng)]).unwrap();
            sum += s.value[0];
            sum_sq += s.value[0] * s.value[0];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se_mean = (0.49f64 / n as f64).sqrt();
        let se_var = 0.49 * (2.0 / n as f64).sqrt();
        assert!(close(mean, 1.2, 3.0 * se_mean));
        assert!(close(var, 0.49, 3.0 * se_var));
    }

    #[test]
    fn bernoulli_trivial_values() {
        let d = 7;
        let ll = bernoulli_loglik(&vec![0.0; d], &vec![0.5; d]).unwrap();
        assert!(close(ll, -(d as f64) * std::f64::consts::LN_2, 1e-12));
        let saturated = bernoulli_loglik(&[50.0], &[1.0]).unwrap();
        assert!(saturated > -1e-20 && saturated <= 0.0);
        assert!(bernoulli_loglik(&[0.0], &[1.5]).is_err());
        // no overflow even far outside the training regime
        assert!(bernoulli_loglik(&[100.0], &[0.0]).unwrap().is_finite());
        assert!(bernoulli_loglik(&[-100.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn poe_standard_normal_shrinks_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a = DiagGaussian::from_mean_var(
                vec![rng.gen_range(-2.0..2.0)],
                vec![rng.gen_range(0.2..4.0)],
            )
            .unwrap();
            let b = DiagGaussian::from_mean_var(
                vec![rng.gen_range(-2.0..2.0)],
                vec![rng.gen_range(0.2..4.0)],
            )
            .unwrap();
            let without = poe_fuse(&ExpertList::new(vec![a.clone(), b.clone()]).unwrap()).unwrap();
            let with = poe_fuse(
                &ExpertList::new(vec![a, b, DiagGaussian::standard(1)]).unwrap(),
            )
            .unwrap();
            assert!(with.var()[0] <= without.var()[0]);
        }
    }
}
