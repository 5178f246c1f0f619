//! Locally private sketched training with Gaussian perturbation.
//!
//! Each round every client draws a minibatch, clips per-sample gradients to
//! norm `C`, takes one step, adds `N(0, sigma^2 I)` noise, and uploads its
//! aggregation-sketch block. The noise level and the schedule `(K, gamma)`
//! follow the closed forms below with `log = ln`:
//!
//! - `sigma^2 = c C^2 K log(1/delta) / (m^2 eps^2)`
//! - `K = max{ m eps sqrt(L Delta_0) / (C sqrt(c d log(1/delta))), m^2 eps^2 / (c d log(1/delta)) }`
//! - `gamma = min{ 1/L, sqrt(Delta_0 c d log(1/delta)) / (C m eps sqrt(L)) }`
//! - stationarity bound `2 C sqrt(L c d log(1/delta)) / (m eps)`

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::QuadraticProblem;
use crate::rng::{stream, SimRng};
use crate::sketch::{apply_perm_sketch, sample_perm_sketches, PermSketch};
use crate::stats::{mean_and_se, percentile};
use crate::theory::BoundCertificate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    /// Samples per client.
    pub m: usize,
    pub batch: usize,
    /// Per-sample gradient norm bound.
    pub clip: f64,
    pub c: f64,
    /// Constant in the validity gate `eps < c' q^2 K`.
    pub c_prime: f64,
    /// Smoothness constant.
    pub smoothness: f64,
}

impl PrivacyBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.m == 0 || self.batch == 0 || self.batch > self.m {
            return Err(Error::invalid(format!(
                "need 1 <= b <= m, got b={}, m={}",
                self.batch, self.m
            )));
        }
        for (name, v) in [
            ("C", self.clip),
            ("c", self.c),
            ("c'", self.c_prime),
            ("L", self.smoothness),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Sampling rate `q = b / m`.
    pub fn q(&self) -> f64 {
        self.batch as f64 / self.m as f64
    }

    fn log_inv_delta(&self) -> f64 {
        (1.0 / self.delta).ln()
    }

    /// Whether `eps < c' q^2 K`, the range where the privacy guarantee is stated.
    pub fn validity_gate(&self, k: usize) -> bool {
        self.epsilon < self.c_prime * self.q() * self.q() * k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseSpec {
    pub sigma_sq: f64,
    pub dim: usize,
}

pub fn calibrate_sigma(budget: &PrivacyBudget, k: usize, dim: usize) -> Result<NoiseSpec> {
    budget.validate()?;
    if k == 0 || dim == 0 {
        return Err(Error::invalid("K and d must be at least 1"));
    }
    let m = budget.m as f64;
    let sigma_sq = budget.c * budget.clip * budget.clip * k as f64 * budget.log_inv_delta()
        / (m * m * budget.epsilon * budget.epsilon);
    Ok(NoiseSpec { sigma_sq, dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LdpSchedule {
    pub k: usize,
    pub gamma: f64,
    /// Predicted bound on `(1/K) sum_k ||grad f(w^k)||^2`.
    pub bound: f64,
    /// The two candidates inside the max defining `K`, before rounding.
    pub k_branches: (f64, f64),
}

pub fn ldp_schedule(budget: &PrivacyBudget, delta0: f64, d: usize) -> Result<LdpSchedule> {
    budget.validate()?;
    if !(delta0 >= 0.0) || !delta0.is_finite() {
        return Err(Error::invalid(format!("initial gap must be nonnegative, got {delta0}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let PrivacyBudget {
        epsilon: eps,
        clip,
        c,
        smoothness: l,
        ..
    } = *budget;
    let m = budget.m as f64;
    let cdl = c * d as f64 * budget.log_inv_delta();
    let first = m * eps * (l * delta0).sqrt() / (clip * cdl.sqrt());
    let second = m * m * eps * eps / cdl;
    let k = first.max(second).ceil().max(1.0);
    if k > usize::MAX as f64 {
        return Err(Error::invalid("schedule length overflows"));
    }
    let gamma = (1.0 / l).min((delta0 * cdl).sqrt() / (clip * m * eps * l.sqrt()));
    if !(gamma > 0.0) {
        return Err(Error::invalid("degenerate schedule: zero step size (is Delta_0 zero?)"));
    }
    let bound = 2.0 * clip * (l * cdl).sqrt() / (m * eps);
    Ok(LdpSchedule {
        k: k as usize,
        gamma,
        bound,
        k_branches: (first, second),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LdpCommCost {
    /// `d K`: every round the clients jointly upload `n (d/n)` scalars.
    pub cost: u128,
    /// `m eps sqrt(d L Delta_0) / (C sqrt(log(1/delta))) + m^2 eps^2 / log(1/delta)`.
    pub asymptotic: f64,
}

pub fn ldp_comm_cost(budget: &PrivacyBudget, delta0: f64, d: usize) -> Result<LdpCommCost> {
    let sched = ldp_schedule(budget, delta0, d)?;
    let m = budget.m as f64;
    let ln = budget.log_inv_delta();
    let eps = budget.epsilon;
    let asymptotic =
        m * eps * (d as f64 * budget.smoothness * delta0).sqrt() / (budget.clip * ln.sqrt()) + m * m * eps * eps / ln;
    Ok(LdpCommCost {
        cost: d as u128 * sched.k as u128,
        asymptotic,
    })
}

/// `dim` i.i.d. `N(0, sigma_sq)` draws.
pub fn gaussian_noise(dim: usize, sigma_sq: f64, rng: &mut SimRng) -> Result<DVector<f64>> {
    if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
        return Err(Error::invalid(format!(
            "noise variance must be finite and nonnegative, got {sigma_sq}"
        )));
    }
    if sigma_sq == 0.0 {
        return Ok(DVector::zeros(dim));
    }
    let dist = Normal::new(0.0, sigma_sq.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(DVector::from_fn(dim, |_, _| dist.sample(rng)))
}

/// `g` if `||g|| <= C`, else `g C / ||g||`.
pub fn clip_gradient(g: &DVector<f64>, clip: f64) -> DVector<f64> {
    let norm = g.norm();
    if norm <= clip {
        g.clone()
    } else {
        g * (clip / norm)
    }
}

/// Per-sample quadratics `f_ij(w) = 0.5 ||w||^2 - w^T b_ij`, so every client
/// and the global objective are 1-smooth with identity Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct LdpProblem {
    dim: usize,
    /// `targets[i][j] = b_ij`.
    targets: Vec<Vec<DVector<f64>>>,
}

impl LdpProblem {
    pub fn new(targets: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        let dim = targets.first().and_then(|c| c.first()).map(|b| b.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("need at least one client with one sample"));
        }
        let m = targets[0].len();
        for client in &targets {
            if client.len() != m {
                return Err(Error::invalid("every client must hold the same number of samples"));
            }
            if let Some(b) = client.iter().find(|b| b.len() != dim) {
                return Err(Error::shape("sample target", dim, b.len()));
            }
        }
        Ok(Self { dim, targets })
    }

    /// Targets `b_ij ~ N(center, spread^2 I)`, the same distribution on every client.
    pub fn random(
        n: usize,
        m: usize,
        dim: usize,
        center: &DVector<f64>,
        spread: f64,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if center.len() != dim {
            return Err(Error::shape("target center", dim, center.len()));
        }
        let normal = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
        let targets = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| center + DVector::from_fn(dim, |_, _| normal.sample(rng)))
                    .collect()
            })
            .collect();
        Self::new(targets)
    }

    pub fn n_clients(&self) -> usize {
        self.targets.len()
    }

    pub fn samples_per_client(&self) -> usize {
        self.targets[0].len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_grad(&self, i: usize, j: usize, w: &DVector<f64>) -> DVector<f64> {
        w - &self.targets[i][j]
    }

    fn mean_target(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        let mut count = 0.0;
        for b in self.targets.iter().flatten() {
            acc += b;
            count += 1.0;
        }
        acc / count
    }

    pub fn global_grad(&self, w: &DVector<f64>) -> DVector<f64> {
        w - self.mean_target()
    }

    pub fn global_value(&self, w: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for b in self.targets.iter().flatten() {
            acc += 0.5 * w.norm_squared() - w.dot(b);
        }
        acc / (self.n_clients() * self.samples_per_client()) as f64
    }

    pub fn f_inf(&self) -> f64 {
        -0.5 * self.mean_target().norm_squared()
    }

    /// Client-level quadratic view: `L_i = I`, `b_i = mean_j b_ij`.
    pub fn to_quadratic(&self) -> Result<QuadraticProblem> {
        let d = self.dim;
        let hessians = vec![nalgebra::DMatrix::identity(d, d); self.n_clients()];
        let linear = self
            .targets
            .iter()
            .map(|c| c.iter().fold(DVector::zeros(d), |acc, b| acc + b) / c.len() as f64)
            .collect();
        QuadraticProblem::new(hessians, linear)
    }

    /// 99th percentile of per-sample gradient norms at `w`.
    pub fn calibrate_clip(&self, w: &DVector<f64>) -> f64 {
        let norms: Vec<f64> = self.targets.iter().flatten().map(|b| (w - b).norm()).collect();
        percentile(&norms, 0.99)
    }

    /// Mean of clipped per-sample gradients over `batch`.
    pub fn minibatch_grad(&self, i: usize, batch: &[usize], w: &DVector<f64>, clip: f64) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for &j in batch {
            acc += clip_gradient(&self.sample_grad(i, j, w), clip);
        }
        acc / batch.len() as f64
    }
}

/// Where the Gaussian perturbation enters the client update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NoisePlacement {
    /// `u + zeta` with `u = w - gamma g`.
    Model,
    /// `w - gamma (g + zeta)`.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdpRunConfig {
    pub rounds: usize,
    pub gamma: f64,
    pub sigma_sq: f64,
    pub batch: usize,
    pub clip: f64,
    pub placement: NoisePlacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpRun {
    /// `||grad f(w^k)||^2` for `k = 0 .. K-1`.
    pub grad_norms: Vec<f64>,
    pub final_w: DVector<f64>,
    /// Uploaded scalars: `n (d/n)` per round.
    pub comm_cost: u128,
}

impl LdpRun {
    pub fn mean_grad_norm(&self) -> f64 {
        self.grad_norms.iter().sum::<f64>() / self.grad_norms.len() as f64
    }
}

/// Stream of client `client` in round `round` under master seed `seed`.
pub fn ldp_client_stream(seed: u64, round: usize, client: usize) -> SimRng {
    stream(seed, &[round as u64, client as u64 + 1])
}

/// Stream drawing round `round`'s shared permutation.
pub fn ldp_sketch_stream(seed: u64, round: usize) -> SimRng {
    stream(seed, &[round as u64, 0])
}

/// One round with explicit sketches; each client's minibatch and noise come
/// from its own stream.
pub fn ldp_round(
    p: &LdpProblem,
    w: &DVector<f64>,
    cfg: &LdpRunConfig,
    sketches: &[PermSketch],
    client_rng: impl Fn(usize) -> SimRng,
) -> Result<DVector<f64>> {
    let n = p.n_clients();
    let mut acc = DVector::zeros(p.dim());
    for (i, sketch) in sketches.iter().enumerate().take(n) {
        let mut rng = client_rng(i);
        let batch = index::sample(&mut rng, p.samples_per_client(), cfg.batch).into_vec();
        let g = p.minibatch_grad(i, &batch, w, cfg.clip);
        let zeta = gaussian_noise(p.dim(), cfg.sigma_sq, &mut rng)?;
        let u = match cfg.placement {
            NoisePlacement::Model => w - g * cfg.gamma + zeta,
            NoisePlacement::Gradient => w - (g + zeta) * cfg.gamma,
        };
        acc += DVector::from_vec(apply_perm_sketch(sketch, u.as_slice())?);
    }
    Ok(acc / n as f64)
}

pub fn run_ldp(p: &LdpProblem, cfg: &LdpRunConfig, w0: &DVector<f64>, seed: u64) -> Result<LdpRun> {
    if cfg.rounds == 0 {
        return Err(Error::invalid("need at least one round"));
    }
    if cfg.batch == 0 || cfg.batch > p.samples_per_client() {
        return Err(Error::invalid(format!(
            "batch {} outside 1..={}",
            cfg.batch,
            p.samples_per_client()
        )));
    }
    if !(cfg.sigma_sq >= 0.0) || !(cfg.gamma >= 0.0) || !(cfg.clip > 0.0) {
        return Err(Error::invalid("need sigma^2 >= 0, gamma >= 0 and C > 0"));
    }
    if w0.len() != p.dim() {
        return Err(Error::shape("initial point", p.dim(), w0.len()));
    }
    let mut w = w0.clone();
    let mut grad_norms = Vec::with_capacity(cfg.rounds);
    for k in 0..cfg.rounds {
        grad_norms.push(p.global_grad(&w).norm_squared());
        let sketches = sample_perm_sketches(p.dim(), p.n_clients(), &mut ldp_sketch_stream(seed, k))?;
        w = ldp_round(p, &w, cfg, &sketches, |i| ldp_client_stream(seed, k, i))?;
        let norm = w.norm();
        if !norm.is_finite() || norm > 1e150 {
            return Err(Error::Diverged {
                round: Some(k),
                step: 0,
                detail: format!("iterate norm {norm:e}"),
            });
        }
    }
    Ok(LdpRun {
        grad_norms,
        final_w: w,
        comm_cost: (p.n_clients() * (p.dim() / p.n_clients())) as u128 * cfg.rounds as u128,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LdpCertificate {
    pub schedule: LdpSchedule,
    pub noise: NoiseSpec,
    pub comm: LdpCommCost,
    pub validity_gate: bool,
    pub bound: BoundCertificate,
}

/// Runs the scheduled algorithm over `seeds` seeds and compares the averaged
/// squared gradient norm with the predicted bound.
pub fn certify_ldp(
    p: &LdpProblem,
    budget: &PrivacyBudget,
    w0: &DVector<f64>,
    seeds: usize,
    master: u64,
    placement: NoisePlacement,
) -> Result<LdpCertificate> {
    budget.validate()?;
    if budget.m != p.samples_per_client() {
        return Err(Error::invalid(format!(
            "budget assumes m = {} samples but clients hold {}",
            budget.m,
            p.samples_per_client()
        )));
    }
    if budget.smoothness < 1.0 {
        return Err(Error::invalid(
            "the identity-Hessian testbed is 1-smooth; L below 1 is unsound",
        ));
    }
    if seeds < 2 {
        return Err(Error::invalid("need at least two seeds"));
    }
    let delta0 = p.global_value(w0) - p.f_inf();
    let schedule = ldp_schedule(budget, delta0, p.dim())?;
    let noise = calibrate_sigma(budget, schedule.k, p.dim())?;
    let comm = ldp_comm_cost(budget, delta0, p.dim())?;
    let cfg = LdpRunConfig {
        rounds: schedule.k,
        gamma: schedule.gamma,
        sigma_sq: noise.sigma_sq,
        batch: budget.batch,
        clip: budget.clip,
        placement,
    };
    let means: Vec<f64> = (0..seeds)
        .into_par_iter()
        .map(|s| run_ldp(p, &cfg, w0, crate::rng::derive_seed(master, &[s as u64])).map(|r| r.mean_grad_norm()))
        .collect::<Result<_>>()?;
    let (lhs, se) = mean_and_se(&means);
    let constants = BTreeMap::from([
        ("delta0".to_string(), delta0),
        ("K".to_string(), schedule.k as f64),
        ("gamma".to_string(), schedule.gamma),
        ("sigma_sq".to_string(), noise.sigma_sq),
        ("clip".to_string(), budget.clip),
        ("epsilon".to_string(), budget.epsilon),
        ("delta".to_string(), budget.delta),
        ("m".to_string(), budget.m as f64),
        ("d".to_string(), p.dim() as f64),
        ("seeds".to_string(), seeds as f64),
    ]);
    Ok(LdpCertificate {
        schedule,
        noise,
        comm,
        validity_gate: budget.validity_gate(schedule.k),
        bound: BoundCertificate::new("ldp", lhs, se, schedule.bound, constants),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budget() -> PrivacyBudget {
        PrivacyBudget {
            epsilon: 1.0,
            delta: 0.01,
            m: 100,
            batch: 10,
            clip: 1.0,
            c: 1.0,
            c_prime: 1.0,
            smoothness: 1.0,
        }
    }

    #[test]
    fn sigma_example() {
        let s = calibrate_sigma(&budget(), 100, 4).unwrap();
        assert!((s.sigma_sq - 100.0 * 100f64.ln() / 1e4).abs() < 1e-15);
        let mut b = budget();
        b.m = 200;
        b.batch = 10;
        let s2 = calibrate_sigma(&b, 100, 4).unwrap();
        assert!((s2.sigma_sq * 4.0 - s.sigma_sq).abs() < 1e-15);
        assert!(calibrate_sigma(&budget(), 0, 4).is_err());
        b.delta = 1.0;
        assert!(calibrate_sigma(&b, 1, 4).is_err());
    }

    #[test]
    fn schedule_example() {
        let s = ldp_schedule(&budget(), 1.0, 16).unwrap();
        assert_eq!(s.k, 136);
        assert!((s.k_branches.0 - 100.0 / (16.0 * 100f64.ln()).sqrt()).abs() < 1e-9);
        assert!(s.gamma <= 1.0);
    }

    #[test]
    fn clipping_examples() {
        let g = DVector::from_row_slice(&[0.3, 0.4]);
        assert_eq!(clip_gradient(&g, 1.0), g);
        let c = clip_gradient(&DVector::from_row_slice(&[3.0, 4.0]), 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
    }
}
