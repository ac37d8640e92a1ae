//! Instance-statistics style mixing applied at encoder stage boundaries.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::{FeatureMap, StageHook};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixStyleConfig {
    pub alpha: f64,
    pub apply_prob: f64,
    pub eps: f64,
    /// 1-based stage boundaries whose outputs are mixed.
    pub stage_indices: BTreeSet<usize>,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            apply_prob: 0.5,
            eps: 1e-6,
            stage_indices: [2, 3].into_iter().collect(),
        }
    }
}

impl MixStyleConfig {
    pub fn validate(&self, num_stages: Option<usize>) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Config("mixstyle alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config("mixstyle apply_prob must lie in [0, 1]".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("mixstyle eps must be positive".into()));
        }
        if let Some(n) = num_stages {
            if let Some(bad) = self.stage_indices.iter().find(|&&s| s == 0 || s > n) {
                return Err(Error::Config(format!("mixstyle stage {bad} is not a boundary of a {n}-stage encoder")));
            }
        }
        Ok(())
    }
}

/// Per-sample, per-channel spatial mean and `sqrt(var + eps)`, both `B × C`
/// row-major; the variance is the population estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn instance_stats(fm: &FeatureMap, eps: f64) -> InstanceStats {
    let x = &fm.values;
    let hw = x.plane_len() as f64;
    let mut mu = Vec::with_capacity(x.n * x.c);
    let mut sigma = Vec::with_capacity(x.n * x.c);
    for plane in x.data.chunks(x.plane_len()) {
        let m = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
        mu.push(m);
        sigma.push((var + eps).sqrt());
    }
    InstanceStats { mu, sigma }
}

/// Mixing weights and partner assignment for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    /// One weight per sample.
    pub lambdas: Vec<f64>,
    pub partner: Vec<usize>,
}

impl MixPlan {
    pub fn uniform(lambda: f64, partner: Vec<usize>) -> Self {
        Self {
            lambdas: vec![lambda; partner.len()],
            partner,
        }
    }

    pub fn draw(batch: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let beta = Beta::new(alpha, alpha).expect("alpha validated positive");
        let lambdas = (0..batch).map(|_| beta.sample(rng)).collect();
        let mut partner: Vec<usize> = (0..batch).collect();
        partner.shuffle(rng);
        Self { lambdas, partner }
    }
}

/// Re-styles every plane with the mixed statistics:
/// `σ_mix·(x − μ)/σ + μ_mix`, `μ_mix = λμ + (1−λ)μ[π]`, likewise σ.
///
/// Returns the output and the per-plane slope `σ_mix/σ`.
pub fn mix_statistics(fm: &FeatureMap, plan: &MixPlan, eps: f64) -> (FeatureMap, Vec<f64>) {
    let x = &fm.values;
    assert_eq!(plan.partner.len(), x.n, "mix plan does not match batch size");
    let stats = instance_stats(fm, eps);
    let mut out = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut slopes = Vec::with_capacity(x.n * x.c);
    for n in 0..x.n {
        let lam = plan.lambdas[n];
        let p = plan.partner[n];
        for c in 0..x.c {
            let i = n * x.c + c;
            let j = p * x.c + c;
            let mu_mix = lam * stats.mu[i] + (1.0 - lam) * stats.mu[j];
            let sig_mix = lam * stats.sigma[i] + (1.0 - lam) * stats.sigma[j];
            let slope = sig_mix / stats.sigma[i];
            slopes.push(slope);
            let (mu, src) = (stats.mu[i], x.plane(n, c));
            for (o, v) in out.plane_mut(n, c).iter_mut().zip(src) {
                *o = (v - mu) * slope + mu_mix;
            }
        }
    }
    (
        FeatureMap {
            values: out,
            stage_index: fm.stage_index,
        },
        slopes,
    )
}

/// With probability `1 − apply_prob` returns `fm` unchanged, otherwise mixes
/// its instance statistics with a random batch partner.
pub fn mixstyle_apply(fm: &FeatureMap, cfg: &MixStyleConfig, rng: &mut impl Rng) -> FeatureMap {
    if rng.random::<f64>() >= cfg.apply_prob {
        return fm.clone();
    }
    let plan = MixPlan::draw(fm.values.n, cfg.alpha, rng);
    mix_statistics(fm, &plan, cfg.eps).0
}

/// Train-time stage hook running style mixing at the configured boundaries.
///
/// Statistics are treated as constants for backpropagation, so the gradient
/// of each plane is scaled by `σ_mix/σ`.
pub struct MixStyleHook {
    cfg: MixStyleConfig,
    rng: ChaCha8Rng,
    forced: Option<MixPlan>,
    invocations: usize,
}

impl MixStyleHook {
    pub fn new(cfg: MixStyleConfig, seed: u64) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            forced: None,
            invocations: 0,
        }
    }

    /// Always mixes with the given plan (testing aid).
    pub fn forced(cfg: MixStyleConfig, plan: MixPlan) -> Self {
        Self {
            forced: Some(plan),
            ..Self::new(cfg, 0)
        }
    }

    pub fn config(&self) -> &MixStyleConfig {
        &self.cfg
    }
}

impl StageHook for MixStyleHook {
    fn apply(&mut self, fm: &mut FeatureMap) -> Option<Vec<f64>> {
        if !self.cfg.stage_indices.contains(&fm.stage_index) {
            return None;
        }
        let plan = match &self.forced {
            Some(plan) => plan.clone(),
            None => {
                if self.rng.random::<f64>() >= self.cfg.apply_prob {
                    return None;
                }
                MixPlan::draw(fm.values.n, self.cfg.alpha, &mut self.rng)
            }
        };
        self.invocations += 1;
        let (mixed, slopes) = mix_statistics(fm, &plan, self.cfg.eps);
        *fm = mixed;
        Some(slopes)
    }

    fn invocations(&self) -> usize {
        self.invocations
    }
}
