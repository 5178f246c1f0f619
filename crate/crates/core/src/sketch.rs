//! Compression operators acting on flattened parameter vectors.
//!
//! - [`PruningMask`]: a biased 0/1 diagonal selection. Kept coordinates pass
//!   through unchanged and dropped ones become zero; nothing is rescaled.
//! - [`PermSketch`]: one block of a shared random permutation, scaled by the
//!   number of clients `n`. The `n` sketches cut from one permutation own
//!   disjoint coordinate sets covering `[0, d)`, so their average is the
//!   identity and each one is unbiased over the permutation draw.
//! - [`RandTSpec`]: the unbiased Rand-t sparsifier (keep `t` of `d`
//!   coordinates uniformly, scale by `d / t`), used as a comparator.
//!
//! Sketches are stored as index sets plus a scale, never as dense matrices.

use std::sync::Arc;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Diagonal 0/1 selection over `dim` coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruningMask {
    dim: usize,
    /// Sorted, unique, all `< dim`.
    kept: Vec<usize>,
}

impl PruningMask {
    pub fn new(dim: usize, mut kept: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("mask dimension must be positive"));
        }
        kept.sort_unstable();
        let before = kept.len();
        kept.dedup();
        if kept.len() != before {
            return Err(Error::invalid("mask indices must be unique"));
        }
        if let Some(&last) = kept.last() {
            if last >= dim {
                return Err(Error::invalid(format!("mask index {last} out of range for dim {dim}")));
            }
        }
        Ok(Self { dim, kept })
    }

    /// Mask keeping every coordinate.
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            kept: (0..dim).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.dim
    }

    pub fn contains(&self, j: usize) -> bool {
        self.kept.binary_search(&j).is_ok()
    }

    /// 0/1 indicator vector of the kept set.
    pub fn indicator(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &j in &self.kept {
            out[j] = 1.0;
        }
        out
    }

    /// Zeroes the dropped coordinates of `v` in place.
    pub fn apply_in_place(&self, v: &mut [f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("apply_mask", self.dim, v.len()));
        }
        let mut next = self.kept.iter().copied().peekable();
        for (j, x) in v.iter_mut().enumerate() {
            if next.peek() == Some(&j) {
                next.next();
            } else {
                *x = 0.0;
            }
        }
        Ok(())
    }

    /// Coordinates kept by both masks.
    pub fn intersect(&self, other: &PruningMask) -> Result<PruningMask> {
        if self.dim != other.dim {
            return Err(Error::shape("mask intersection", self.dim, other.dim));
        }
        let kept = self.kept.iter().copied().filter(|&j| other.contains(j)).collect();
        Ok(PruningMask { dim: self.dim, kept })
    }
}

/// Keeps each coordinate independently with probability `keep_ratio`.
///
/// The returned mask may be empty for small `dim`.
pub fn sample_pruning_mask(dim: usize, keep_ratio: f64, rng: &mut SimRng) -> Result<PruningMask> {
    if dim == 0 {
        return Err(Error::invalid("mask dimension must be positive"));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "keep ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    if keep_ratio == 1.0 {
        return Ok(PruningMask::full(dim));
    }
    let kept = (0..dim).filter(|_| rng.random_bool(keep_ratio)).collect();
    Ok(PruningMask { dim, kept })
}

pub fn apply_mask(mask: &PruningMask, v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    mask.apply_in_place(&mut out)?;
    Ok(out)
}

/// Block `client` of a shared permutation of `[0, dim)`, scaled by `n_clients`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermSketch {
    perm: Arc<[usize]>,
    n_clients: usize,
    client: usize,
}

impl PermSketch {
    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn client_index(&self) -> usize {
        self.client
    }

    pub fn block_size(&self) -> usize {
        self.perm.len() / self.n_clients
    }

    pub fn scale(&self) -> f64 {
        self.n_clients as f64
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Coordinates owned by this client: permutation positions `s*i .. s*(i+1)`.
    pub fn owned(&self) -> &[usize] {
        let s = self.block_size();
        &self.perm[s * self.client..s * (self.client + 1)]
    }
}

/// Cuts `n` sketches out of a given permutation of `[0, d)`.
pub fn perm_sketches_from(perm: Vec<usize>, n: usize) -> Result<Vec<PermSketch>> {
    let d = perm.len();
    check_divisible(d, n)?;
    let mut seen = vec![false; d];
    for &p in &perm {
        if p >= d || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("permutation must be a bijection on [0, d)"));
        }
    }
    let perm: Arc<[usize]> = perm.into();
    Ok((0..n)
        .map(|client| PermSketch {
            perm: Arc::clone(&perm),
            n_clients: n,
            client,
        })
        .collect())
}

fn check_divisible(d: usize, n: usize) -> Result<()> {
    if d == 0 || n == 0 {
        return Err(Error::invalid("dimension and client count must be positive"));
    }
    if !d.is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "dimension {d} is not divisible by client count {n}; zero-pad the parameter vector to a multiple of {n}"
        )));
    }
    Ok(())
}

/// Draws one uniform permutation and returns the `n` sketches sharing it.
pub fn sample_perm_sketches(d: usize, n: usize, rng: &mut SimRng) -> Result<Vec<PermSketch>> {
    check_divisible(d, n)?;
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    perm_sketches_from(perm, n)
}

/// `n * v_j` on owned coordinates, zero elsewhere.
pub fn apply_perm_sketch(sketch: &PermSketch, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != sketch.dim() {
        return Err(Error::shape("apply_perm_sketch", sketch.dim(), v.len()));
    }
    let mut out = vec![0.0; v.len()];
    let scale = sketch.scale();
    for &j in sketch.owned() {
        out[j] = scale * v[j];
    }
    Ok(out)
}

/// Unbiased random sparsifier keeping `t` of `dim` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandTSpec {
    dim: usize,
    t: usize,
}

impl RandTSpec {
    pub fn new(dim: usize, t: usize) -> Result<Self> {
        if t == 0 || t > dim {
            return Err(Error::invalid(format!("Rand-t needs 1 <= t <= d, got t={t}, d={dim}")));
        }
        Ok(Self { dim, t })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kept(&self) -> usize {
        self.t
    }

    /// Per-coordinate inclusion probability `t / d`.
    pub fn probability(&self) -> f64 {
        self.t as f64 / self.dim as f64
    }

    pub fn scale(&self) -> f64 {
        self.dim as f64 / self.t as f64
    }

    /// Variance factor: `E||R(v) - v||^2 = omega ||v||^2`.
    pub fn omega(&self) -> f64 {
        self.scale() - 1.0
    }
}

pub fn rand_t_compress(spec: &RandTSpec, v: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
    if v.len() != spec.dim {
        return Err(Error::shape("rand_t_compress", spec.dim, v.len()));
    }
    let mut out = vec![0.0; spec.dim];
    let scale = spec.scale();
    for j in index::sample(rng, spec.dim, spec.t) {
        out[j] = scale * v[j];
    }
    Ok(out)
}
