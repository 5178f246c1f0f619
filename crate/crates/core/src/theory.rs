//! Analyzable sketch dynamics on quadratics and numerical bound certificates.
//!
//! - [`run_ist`]: `u_i = P_i w - gamma P_i grad f_i(P_i w)`, `v_i = S_i u_i`,
//!   `w+ = mean_i v_i`, with global pruning and aggregation sketches each
//!   switchable.
//! - [`certify_convergence`]: seed-averaged `min_k E||grad f(w^k)||^2` against
//!   `2 (1 + L_bar L_max gamma^2)^K Delta_0 / (gamma K)`.
//! - [`pruning_certificate`] and [`run_pruned_ist_and_certify`]: the
//!   interpolation-regime analysis of global pruning.
//! - [`comm_comparison`]: iteration and communication counts against
//!   distributed gradient descent.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::QuadraticProblem;
use crate::rng::{stream, SimRng};
use crate::sketch::{apply_perm_sketch, sample_perm_sketches, sample_pruning_mask, PermSketch, PruningMask};
use crate::stats::mean_and_se;

/// Norm beyond which a trajectory is declared divergent.
const BLOWUP: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IstConfig {
    pub gamma: f64,
    pub iterations: usize,
    /// Global pruning keep ratio; `None` disables pruning.
    pub keep_ratio: Option<f64>,
    pub sketches: bool,
}

impl IstConfig {
    fn validate(&self, p: &QuadraticProblem) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!(
                "step size must be finite and nonnegative, got {}",
                self.gamma
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("need at least one iteration"));
        }
        if let Some(r) = self.keep_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("keep ratio must lie in (0, 1], got {r}")));
            }
        }
        if self.sketches && !p.dim().is_multiple_of(p.n_clients()) {
            return Err(Error::invalid(format!(
                "dimension {} is not divisible by client count {}; zero-pad the parameter vector",
                p.dim(),
                p.n_clients()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub w: DVector<f64>,
    pub grad_norm_sq: f64,
    pub value: f64,
}

/// Iterates `w^0 .. w^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Scalars sent to the server over all rounds: each client's sketch
    /// block when sketches are on, its full vector otherwise.
    pub upload_scalars: u64,
}

impl Trajectory {
    /// `||grad f(w^k)||^2` for `k = 0 .. K-1`.
    pub fn grad_norms(&self) -> Vec<f64> {
        self.points[..self.points.len() - 1]
            .iter()
            .map(|p| p.grad_norm_sq)
            .collect()
    }

    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory holds w^0")
    }
}

fn point(p: &QuadraticProblem, w: DVector<f64>) -> Result<TrajectoryPoint> {
    let grad_norm_sq = p.global_grad(&w)?.norm_squared();
    let value = p.global_value(&w)?;
    Ok(TrajectoryPoint { w, grad_norm_sq, value })
}

fn masked(mask: Option<&PruningMask>, v: &DVector<f64>) -> Result<DVector<f64>> {
    match mask {
        None => Ok(v.clone()),
        Some(m) => {
            let mut out = v.clone();
            m.apply_in_place(out.as_mut_slice())?;
            Ok(out)
        }
    }
}

/// One iteration with explicit per-client masks and sketches.
pub fn ist_step(
    p: &QuadraticProblem,
    w: &DVector<f64>,
    gamma: f64,
    masks: Option<&[PruningMask]>,
    sketches: Option<&[PermSketch]>,
) -> Result<DVector<f64>> {
    let n = p.n_clients();
    if masks.is_some_and(|m| m.len() != n) || sketches.is_some_and(|s| s.len() != n) {
        return Err(Error::invalid("need one mask and one sketch per client"));
    }
    let mut acc = DVector::zeros(p.dim());
    for i in 0..n {
        let mask = masks.map(|m| &m[i]);
        let pw = masked(mask, w)?;
        let g = masked(mask, &p.local_grad(i, &pw)?)?;
        let u = pw - g * gamma;
        let v = match sketches {
            None => u,
            Some(s) => DVector::from_vec(apply_perm_sketch(&s[i], u.as_slice())?),
        };
        acc += v;
    }
    Ok(acc / n as f64)
}

fn check_finite(w: &DVector<f64>, step: usize) -> Result<()> {
    let norm = w.norm();
    if !norm.is_finite() || norm > BLOWUP {
        return Err(Error::Diverged {
            round: None,
            step,
            detail: format!("iterate norm {norm:e}"),
        });
    }
    Ok(())
}

pub fn run_ist(p: &QuadraticProblem, cfg: &IstConfig, w0: &DVector<f64>, rng: &mut SimRng) -> Result<Trajectory> {
    cfg.validate(p)?;
    let mut points = Vec::with_capacity(cfg.iterations + 1);
    points.push(point(p, w0.clone())?);
    let mut w = w0.clone();
    let mut upload_scalars = 0u64;
    for k in 0..cfg.iterations {
        let masks = match cfg.keep_ratio {
            None => None,
            Some(r) => Some(
                (0..p.n_clients())
                    .map(|_| sample_pruning_mask(p.dim(), r, rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let sketches = if cfg.sketches {
            Some(sample_perm_sketches(p.dim(), p.n_clients(), rng)?)
        } else {
            None
        };
        upload_scalars += match &sketches {
            Some(s) => s.iter().map(|sk| sk.owned().len() as u64).sum::<u64>(),
            None => (p.n_clients() * p.dim()) as u64,
        };
        w = ist_step(p, &w, cfg.gamma, masks.as_deref(), sketches.as_deref())?;
        check_finite(&w, k + 1)?;
        points.push(point(p, w.clone())?);
    }
    Ok(Trajectory { points, upload_scalars })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgdRun {
    pub trajectory: Trajectory,
    pub upload_scalars: u64,
    pub download_scalars: u64,
}

/// Full-gradient descent on the mean objective; every client exchanges the
/// whole model in both directions each round.
pub fn run_dgd(p: &QuadraticProblem, gamma: f64, iterations: usize, w0: &DVector<f64>) -> Result<DgdRun> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "step size must be finite and nonnegative, got {gamma}"
        )));
    }
    let mut points = Vec::with_capacity(iterations + 1);
    points.push(point(p, w0.clone())?);
    let mut w = w0.clone();
    for k in 0..iterations {
        let mut acc = DVector::zeros(p.dim());
        for i in 0..p.n_clients() {
            acc += &w - p.local_grad(i, &w)? * gamma;
        }
        w = acc / p.n_clients() as f64;
        check_finite(&w, k + 1)?;
        points.push(point(p, w.clone())?);
    }
    let per_round = (p.n_clients() * p.dim()) as u64;
    Ok(DgdRun {
        trajectory: Trajectory {
            points,
            upload_scalars: per_round * iterations as u64,
        },
        upload_scalars: per_round * iterations as u64,
        download_scalars: per_round * iterations as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceBound {
    pub rhs: f64,
    /// `6 Delta_0 / (gamma K)`, valid for `gamma <= 1/sqrt(L_bar L_max K)`.
    pub simplified: f64,
    pub max_gamma: f64,
}

/// Largest step size the convergence bound admits.
pub fn convergence_max_gamma(l_bar: f64, l_max: f64, k: usize) -> f64 {
    (1.0 / l_max).min(1.0 / (l_bar * l_max * k as f64).sqrt())
}

pub fn convergence_bound(delta0: f64, l_bar: f64, l_max: f64, gamma: f64, k: usize) -> Result<ConvergenceBound> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if !(l_bar > 0.0 && l_max >= l_bar) {
        return Err(Error::invalid(format!("need 0 < L_bar <= L_max, got {l_bar}, {l_max}")));
    }
    if !(delta0 >= 0.0) {
        return Err(Error::invalid(format!("initial gap must be nonnegative, got {delta0}")));
    }
    let max_gamma = convergence_max_gamma(l_bar, l_max, k);
    if !(gamma > 0.0) || gamma > max_gamma * (1.0 + 1e-12) {
        return Err(Error::invalid(format!("step size {gamma} outside (0, {max_gamma}]")));
    }
    let kf = k as f64;
    let growth = (1.0 + l_bar * l_max * gamma * gamma).powf(kf);
    Ok(ConvergenceBound {
        rhs: 2.0 * growth * delta0 / (gamma * kf),
        simplified: 6.0 * delta0 / (gamma * kf),
        max_gamma,
    })
}

/// Measured statistic against an analytic bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCertificate {
    pub name: String,
    /// Monte-Carlo point estimate of the bounded quantity.
    pub lhs: f64,
    /// Standard error of `lhs`.
    pub se: f64,
    pub rhs: f64,
    /// `lhs <= rhs + 1e-9`.
    pub satisfied: bool,
    pub constants: BTreeMap<String, f64>,
}

impl BoundCertificate {
    pub fn new(name: impl Into<String>, lhs: f64, se: f64, rhs: f64, constants: BTreeMap<String, f64>) -> Self {
        Self {
            name: name.into(),
            lhs,
            se,
            rhs,
            satisfied: lhs <= rhs + 1e-9,
            constants,
        }
    }

    /// The estimate exceeds the bound by more than `k` standard errors.
    pub fn violated_beyond(&self, k: f64) -> bool {
        self.lhs - k * self.se > self.rhs + 1e-9
    }

    /// The estimate plus `k` standard errors stays below the bound.
    pub fn holds_with_margin(&self, k: f64) -> bool {
        self.lhs + k * self.se <= self.rhs + 1e-9
    }
}

/// Runs `seeds` independent trajectories and returns them in seed order.
fn seed_parallel<T, F>(master: u64, seeds: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut SimRng) -> Result<T> + Sync,
{
    (0..seeds)
        .into_par_iter()
        .map(|s| f(&mut stream(master, &[s as u64])))
        .collect()
}

/// Seed-averaged `min_k E||grad f(w^k)||^2` of the sketched dynamics at step
/// `gamma` against the convergence bound; `Delta_0` uses the global infimum.
pub fn certify_convergence(
    p: &QuadraticProblem,
    gamma: f64,
    iterations: usize,
    w0: &DVector<f64>,
    seeds: usize,
    master: u64,
) -> Result<BoundCertificate> {
    if seeds < 2 {
        return Err(Error::invalid("need at least two seeds"));
    }
    let s = p.smoothness();
    let delta0 = p.global_value(w0)? - p.f_inf()?;
    let bound = convergence_bound(delta0, s.l_bar, s.l_max, gamma, iterations)?;
    let cfg = IstConfig {
        gamma,
        iterations,
        keep_ratio: None,
        sketches: true,
    };
    let runs = seed_parallel(master, seeds, |rng| Ok(run_ist(p, &cfg, w0, rng)?.grad_norms()))?;
    let (mut best, mut best_se) = (f64::INFINITY, 0.0);
    for k in 0..iterations {
        let col: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        let (m, se) = mean_and_se(&col);
        if m < best {
            best = m;
            best_se = se;
        }
    }
    let constants = BTreeMap::from([
        ("delta0".to_string(), delta0),
        ("l_bar".to_string(), s.l_bar),
        ("l_max".to_string(), s.l_max),
        ("gamma".to_string(), gamma),
        ("K".to_string(), iterations as f64),
        ("seeds".to_string(), seeds as f64),
    ]);
    Ok(BoundCertificate::new(
        "convergence",
        best,
        best_se,
        bound.rhs,
        constants,
    ))
}

/// Iteration and communication counts for reaching `E||grad f||^2 <= eps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommReport {
    pub k_fedp3: u128,
    pub per_round_fedp3: u128,
    pub c_fedp3: u128,
    pub k_dgd: u128,
    pub per_round_dgd: u128,
    pub c_dgd: u128,
}

impl CommReport {
    /// `C_DGD / C_FedP3`.
    pub fn ratio(&self) -> f64 {
        self.c_dgd as f64 / self.c_fedp3 as f64
    }
}

/// Sketched method: `K = ceil(36 Delta_0^2 / (L_bar L_max eps^2))` rounds of
/// `n * (d/n) = d` uploaded scalars. Distributed gradient descent with
/// `gamma = 1/L_bar`: `K = ceil(2 L_bar Delta_0 / eps)` rounds of `n d`.
pub fn comm_comparison(delta0: f64, l_bar: f64, l_max: f64, n: usize, d: usize, eps: f64) -> Result<CommReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("accuracy target must be positive, got {eps}")));
    }
    if n == 0 || d == 0 || !d.is_multiple_of(n) {
        return Err(Error::invalid(format!("need d divisible by n, got d={d}, n={n}")));
    }
    if !(delta0 > 0.0 && l_bar > 0.0 && l_max >= l_bar) {
        return Err(Error::invalid("need Delta_0 > 0 and 0 < L_bar <= L_max"));
    }
    let k_fedp3 = (36.0 * delta0 * delta0 / (l_bar * l_max * eps * eps)).ceil().max(1.0) as u128;
    let k_dgd = (2.0 * l_bar * delta0 / eps).ceil().max(1.0) as u128;
    let per_round_fedp3 = (n * (d / n)) as u128;
    let per_round_dgd = (n * d) as u128;
    Ok(CommReport {
        k_fedp3,
        per_round_fedp3,
        c_fedp3: k_fedp3 * per_round_fedp3,
        k_dgd,
        per_round_dgd,
        c_dgd: k_dgd * per_round_dgd,
    })
}

/// Weights `p_k = a^(K-(k+1)) / S_K`, `S_K = sum_{k<K} a^k`, for `k = 0 .. K-1`.
pub fn recursion_weights(a: f64, k: usize) -> Result<Vec<f64>> {
    if !(a >= 1.0) || !a.is_finite() || k == 0 {
        return Err(Error::invalid(format!("need a >= 1 and K >= 1, got a={a}, K={k}")));
    }
    let powers: Vec<f64> = (0..k).map(|j| a.powi((k - 1 - j) as i32)).collect();
    let s: f64 = powers.iter().sum();
    Ok(powers.into_iter().map(|x| x / s).collect())
}

/// `a^K / S_K`, the factor multiplying `X_0` in the weighted bound.
pub fn recursion_growth(a: f64, k: usize) -> f64 {
    let s: f64 = (0..k).map(|j| a.powi(j as i32)).sum();
    a.powi(k as i32) / s
}

/// `a^K / S_K <= exp((a - 1) K) / K`.
pub fn exp_control_holds(a: f64, k: usize) -> bool {
    recursion_growth(a, k) <= ((a - 1.0) * k as f64).exp() / k as f64 * (1.0 + 1e-12)
}

/// How expectations over mask outcomes are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertMode {
    Exhaustive,
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
    /// Exhaustive when the outcome space has at most `2^16` atoms.
    Auto {
        samples: usize,
        seed: u64,
    },
}

/// Distribution of the per-client diagonal pruning masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskDistribution {
    pub keep_ratio: f64,
    /// All clients share one mask draw.
    pub shared: bool,
}

impl MaskDistribution {
    fn bits(&self, n: usize, d: usize) -> usize {
        if self.shared {
            d
        } else {
            n * d
        }
    }

    fn sample(&self, n: usize, d: usize, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
        let draw =
            |rng: &mut SimRng| -> Result<Vec<f64>> { Ok(sample_pruning_mask(d, self.keep_ratio, rng)?.indicator()) };
        if self.shared {
            let m = draw(rng)?;
            Ok(vec![m; n])
        } else {
            (0..n).map(|_| draw(rng)).collect()
        }
    }
}

const MAX_EXHAUSTIVE_BITS: usize = 16;
const GROWTH_SAMPLES: usize = 10_000;
const RANK_CUTOFF: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PruningAnalysis {
    /// `0.5 E[P L_bar B + P B L_bar]`, symmetrized.
    pub w: DMatrix<f64>,
    /// `E[B L_bar B]`.
    pub e_blb: DMatrix<f64>,
    pub w_psd: bool,
    /// Smallest `theta` with `E[B L_bar B] <= theta W`; `None` when no finite one exists.
    pub theta: Option<f64>,
    /// `lambda_min(theta W - E[B L_bar B])`.
    pub theta_slack: Option<f64>,
    /// Twice the largest observed `f(P w) / f(w) - 1` (floored at 0): a value
    /// for `gamma^2 h`.
    pub growth_excess: f64,
    pub atoms: u64,
    pub exhaustive: bool,
    pub dist: MaskDistribution,
}

impl PruningAnalysis {
    pub fn certified(&self) -> bool {
        self.w_psd && self.theta.is_some()
    }
}

fn client_sandwich(l: &DMatrix<f64>, mask: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(l.nrows(), l.ncols(), |r, c| mask[r] * l[(r, c)] * mask[c])
}

/// `(P_bar, B)` for one outcome of the client masks.
fn outcome_matrices(p: &QuadraticProblem, masks: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = p.n_clients() as f64;
    let d = p.dim();
    let mut pbar = DVector::zeros(d);
    let mut b = DMatrix::zeros(d, d);
    for (l, m) in p.hessians().iter().zip(masks) {
        pbar += DVector::from_column_slice(m);
        b += client_sandwich(l, m);
    }
    (pbar / n, b / n)
}

/// Exact (or sampled) analysis of global pruning on an interpolation instance.
pub fn pruning_certificate(p: &QuadraticProblem, dist: MaskDistribution, mode: CertMode) -> Result<PruningAnalysis> {
    if !p.is_homogeneous() {
        return Err(Error::Precondition("pruning analysis needs every b_i = 0".into()));
    }
    if !(dist.keep_ratio > 0.0 && dist.keep_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "keep ratio must lie in (0, 1], got {}",
            dist.keep_ratio
        )));
    }
    let (n, d) = (p.n_clients(), p.dim());
    let lbar = p.mean_hessian();
    let bits = dist.bits(n, d);
    let exhaustive = match mode {
        CertMode::Exhaustive => {
            if bits > MAX_EXHAUSTIVE_BITS {
                return Err(Error::invalid(format!(
                    "2^{bits} mask outcomes exceed the exhaustive limit of 2^{MAX_EXHAUSTIVE_BITS}"
                )));
            }
            true
        }
        CertMode::MonteCarlo { .. } => false,
        CertMode::Auto { .. } => bits <= MAX_EXHAUSTIVE_BITS,
    };
    let mut w = DMatrix::zeros(d, d);
    let mut e = DMatrix::zeros(d, d);
    let mut accumulate = |masks: &[Vec<f64>], prob: f64| {
        let (pbar, b) = outcome_matrices(p, masks);
        let pm = DMatrix::from_diagonal(&pbar);
        w += (&pm * &lbar * &b + &pm * &b * &lbar) * (0.5 * prob);
        e += &b * &lbar * &b * prob;
    };
    let atoms;
    if exhaustive {
        let q = dist.keep_ratio;
        atoms = 1u64 << bits;
        for atom in 0..atoms {
            let on = atom.count_ones() as i32;
            let prob = q.powi(on) * (1.0 - q).powi(bits as i32 - on);
            if prob == 0.0 {
                continue;
            }
            let bit = |j: usize| if atom >> j & 1 == 1 { 1.0 } else { 0.0 };
            let masks: Vec<Vec<f64>> = if dist.shared {
                vec![(0..d).map(bit).collect(); n]
            } else {
                (0..n).map(|i| (0..d).map(|j| bit(i * d + j)).collect()).collect()
            };
            accumulate(&masks, prob);
        }
    } else {
        let (samples, seed) = match mode {
            CertMode::MonteCarlo { samples, seed } | CertMode::Auto { samples, seed } => (samples, seed),
            CertMode::Exhaustive => unreachable!(),
        };
        if samples == 0 {
            return Err(Error::invalid("Monte Carlo needs at least one sample"));
        }
        atoms = samples as u64;
        let mut rng = stream(seed, &[0]);
        for _ in 0..samples {
            let masks = dist.sample(n, d, &mut rng)?;
            accumulate(&masks, 1.0 / samples as f64);
        }
    }
    let w = (&w + w.transpose()) * 0.5;
    let e = (&e + e.transpose()) * 0.5;
    let w_eig = SymmetricEigen::new(w.clone());
    let scale = w_eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let w_psd = w_eig.eigenvalues.min() >= -1e-10 * scale;
    let theta = generalized_theta(&w_eig, &e, scale);
    let theta_slack = theta.map(|t| SymmetricEigen::new(&w * t - &e).eigenvalues.min());
    let seed = match mode {
        CertMode::MonteCarlo { seed, .. } | CertMode::Auto { seed, .. } => seed,
        CertMode::Exhaustive => 0,
    };
    let growth_excess = value_growth_excess(p, &lbar, dist, seed)?;
    Ok(PruningAnalysis {
        w,
        e_blb: e,
        w_psd,
        theta,
        theta_slack,
        growth_excess,
        atoms,
        exhaustive,
        dist,
    })
}

/// Largest eigenvalue of the pencil `(E, W)` on the range of `W`, provided
/// `E` vanishes on `W`'s null space.
fn generalized_theta(w_eig: &SymmetricEigen<f64, nalgebra::Dyn>, e: &DMatrix<f64>, scale: f64) -> Option<f64> {
    let d = e.nrows();
    let keep: Vec<usize> = (0..d).filter(|&j| w_eig.eigenvalues[j] > RANK_CUTOFF * scale).collect();
    let null: Vec<usize> = (0..d)
        .filter(|&j| w_eig.eigenvalues[j] <= RANK_CUTOFF * scale)
        .collect();
    let u = &w_eig.eigenvectors;
    let e_scale = e.amax().max(f64::MIN_POSITIVE);
    if !null.is_empty() {
        let u0 = u.select_columns(&null);
        let block = u0.transpose() * e * &u0;
        if block.amax() > 1e-8 * e_scale {
            return None;
        }
    }
    if keep.is_empty() {
        return Some(0.0);
    }
    let ur = u.select_columns(&keep);
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&j| 1.0 / w_eig.eigenvalues[j].sqrt()),
    ));
    let m = &inv_sqrt * ur.transpose() * e * &ur * &inv_sqrt;
    let m = (&m + m.transpose()) * 0.5;
    Some(SymmetricEigen::new(m).eigenvalues.max().max(0.0))
}

fn value_growth_excess(p: &QuadraticProblem, lbar: &DMatrix<f64>, dist: MaskDistribution, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[1]);
    let (n, d) = (p.n_clients(), p.dim());
    let f = |v: &DVector<f64>| 0.5 * v.dot(&(lbar * v));
    let mut worst = 0.0f64;
    for _ in 0..GROWTH_SAMPLES {
        let masks = dist.sample(n, d, &mut rng)?;
        let (pbar, _) = outcome_matrices(p, &masks);
        let w = DVector::from_fn(d, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let base = f(&w);
        if base <= 0.0 {
            continue;
        }
        worst = worst.max(f(&pbar.component_mul(&w)) / base - 1.0);
    }
    Ok(2.0 * worst.max(0.0))
}

/// Certificate of the pruned dynamics together with the step-size choice.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedCertificate {
    pub bound: BoundCertificate,
    pub gamma: f64,
    pub h: f64,
    /// Fraction of seeds whose own weighted statistic is below the bound.
    pub fraction_within: f64,
}

/// Runs `w+ = P w - gamma B w` over `seeds` mask sequences and compares the
/// weighted statistic `sum_k p_k w_k^T W w_k` (the gradient norm in the
/// `L^-1 W L^-1` geometry) with `4 Delta_0 / (gamma K)`.
///
/// The default step is `1/theta`, which the bound admits exactly when the
/// value-growth factor satisfies `gamma^2 h <= ln 2 / K`.
pub fn run_pruned_ist_and_certify(
    p: &QuadraticProblem,
    analysis: &PruningAnalysis,
    iterations: usize,
    w0: &DVector<f64>,
    seeds: usize,
    master: u64,
    gamma_override: Option<f64>,
) -> Result<PrunedCertificate> {
    if !analysis.certified() {
        return Err(Error::Precondition(
            "pruning analysis did not certify W >= 0 with a finite theta".into(),
        ));
    }
    if iterations == 0 || seeds < 2 {
        return Err(Error::invalid("need K >= 1 and at least two seeds"));
    }
    let lbar = p.mean_hessian();
    if SymmetricEigen::new(lbar.clone()).eigenvalues.min() <= 1e-12 * lbar.amax() {
        return Err(Error::Precondition("mean Hessian is singular".into()));
    }
    let theta = analysis.theta.expect("certified");
    if theta <= 0.0 {
        return Err(Error::Precondition("theta is zero; W carries no curvature".into()));
    }
    let gamma = match gamma_override {
        None => 1.0 / theta,
        Some(g) if g > 0.0 && g <= (1.0 / theta) * (1.0 + 1e-12) => g,
        Some(g) => {
            return Err(Error::Precondition(format!(
                "step size {g} exceeds 1/theta = {}",
                1.0 / theta
            )));
        }
    };
    let kf = iterations as f64;
    let excess = analysis.growth_excess.max(1e-12);
    if excess > std::f64::consts::LN_2 / kf {
        return Err(Error::Precondition(format!(
            "value growth {excess:e} exceeds ln2/K = {:e}; no admissible step size",
            std::f64::consts::LN_2 / kf
        )));
    }
    let h = excess / (gamma * gamma);
    let a = 1.0 + gamma * gamma * h;
    let weights = recursion_weights(a, iterations)?;
    let delta0 = p.global_value(w0)?;
    let rhs = 4.0 * delta0 / (gamma * kf);
    let no_sketch = IstConfig {
        gamma,
        iterations,
        keep_ratio: Some(analysis.dist.keep_ratio),
        sketches: false,
    };
    no_sketch.validate(p)?;
    let stats = seed_parallel(master, seeds, |rng| {
        let mut w = w0.clone();
        let mut stat = 0.0;
        for (k, pk) in weights.iter().enumerate() {
            stat += pk * w.dot(&(&analysis.w * &w));
            let masks: Vec<PruningMask> = if analysis.dist.shared {
                let m = sample_pruning_mask(p.dim(), analysis.dist.keep_ratio, rng)?;
                vec![m; p.n_clients()]
            } else {
                (0..p.n_clients())
                    .map(|_| sample_pruning_mask(p.dim(), analysis.dist.keep_ratio, rng))
                    .collect::<Result<_>>()?
            };
            w = ist_step(p, &w, gamma, Some(&masks), None)?;
            check_finite(&w, k + 1)?;
        }
        Ok(stat)
    })?;
    let (lhs, se) = mean_and_se(&stats);
    let within = stats.iter().filter(|&&s| s <= rhs + 1e-9).count() as f64 / seeds as f64;
    let constants = BTreeMap::from([
        ("delta0".to_string(), delta0),
        ("gamma".to_string(), gamma),
        ("theta".to_string(), theta),
        ("h".to_string(), h),
        ("K".to_string(), kf),
        ("seeds".to_string(), seeds as f64),
        ("keep_ratio".to_string(), analysis.dist.keep_ratio),
    ]);
    Ok(PrunedCertificate {
        bound: BoundCertificate::new("global_pruning", lhs, se, rhs, constants),
        gamma,
        h,
        fraction_within: within,
    })
}
