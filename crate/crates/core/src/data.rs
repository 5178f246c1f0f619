//! Synthetic classification data and non-iid client partitioners.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per sample.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape("dataset labels", features.nrows(), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenation of datasets sharing feature width and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let f = first.n_features();
        let n: usize = parts.iter().map(|d| d.len()).sum();
        let mut features = DMatrix::zeros(n, f);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for d in parts {
            if d.n_features() != f || d.classes != first.classes {
                return Err(Error::invalid("datasets disagree on feature width or class count"));
            }
            features.rows_mut(row, d.len()).copy_from(&d.features);
            labels.extend_from_slice(&d.labels);
            row += d.len();
        }
        Dataset::new(features, labels, first.classes)
    }
}

/// Balanced class-conditional Gaussians with unit noise.
///
/// Class means sit on scaled coordinate axes (random directions once classes
/// outnumber features) so that any two means are `separation` apart.
pub fn gen_synthetic(n: usize, features: usize, classes: usize, separation: f64, rng: &mut SimRng) -> Result<Dataset> {
    if n == 0 || features == 0 || classes == 0 {
        return Err(Error::invalid("sample, feature and class counts must be positive"));
    }
    if !(separation >= 0.0) {
        return Err(Error::invalid("separation must be nonnegative"));
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= features {
                let mut m = vec![0.0; features];
                m[c] = radius;
                m
            } else {
                let v: Vec<f64> = (0..features).map(|_| StandardNormal.sample(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut x = DMatrix::zeros(n, features);
    for (r, &y) in labels.iter().enumerate() {
        for c in 0..features {
            let noise: f64 = StandardNormal.sample(rng);
            x[(r, c)] = means[y][c] + noise;
        }
    }
    Dataset::new(x, labels, classes)
}

/// Disjoint per-client index lists covering a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks that the lists are disjoint and cover `[0, n_samples)`.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut seen = vec![false; n_samples];
        for idx in self.clients.iter().flatten() {
            match seen.get_mut(*idx) {
                None => return Err(Error::invalid(format!("index {idx} outside dataset of {n_samples}"))),
                Some(s) if *s => return Err(Error::invalid(format!("index {idx} assigned twice"))),
                Some(s) => *s = true,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {missing} not assigned")));
        }
        Ok(())
    }

    /// `client_id,sample_index` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,sample_index\n");
        for (c, idx) in self.clients.iter().enumerate() {
            for i in idx {
                let _ = writeln!(out, "{c},{i}");
            }
        }
        out
    }

    pub fn label_histogram(&self, ds: &Dataset, client: usize) -> Vec<usize> {
        let mut h = vec![0; ds.classes];
        for &i in &self.clients[client] {
            h[ds.labels[i]] += 1;
        }
        h
    }
}

fn indices_by_class(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        pools[y].push(i);
    }
    pools
}

/// Each client holds exactly `k` classes; a class's samples are shared evenly
/// among the clients holding it.
///
/// Classes are dealt round-robin from a shuffled class order, so supports
/// overlap whenever `n * k > C`. Every class must be held by someone, which
/// needs `n * k >= C`.
pub fn split_classwise(ds: &Dataset, n: usize, k: usize, rng: &mut SimRng) -> Result<Partition> {
    let c = ds.classes;
    if n == 0 || k == 0 || k > c {
        return Err(Error::invalid(format!(
            "need n >= 1 and 1 <= k <= {c}, got n={n}, k={k}"
        )));
    }
    if n * k < c {
        return Err(Error::invalid(format!(
            "{n} clients with {k} classes each cannot cover {c} classes"
        )));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(rng);
    let mut holders = vec![Vec::new(); c];
    for client in 0..n {
        for j in 0..k {
            holders[order[(client * k + j) % c]].push(client);
        }
    }
    let mut clients = vec![Vec::new(); n];
    for (class, mut pool) in indices_by_class(ds).into_iter().enumerate() {
        let h = &holders[class];
        if pool.len() < h.len() {
            return Err(Error::invalid(format!(
                "class {class} has {} samples for {} holding clients",
                pool.len(),
                h.len()
            )));
        }
        pool.shuffle(rng);
        let base = pool.len() / h.len();
        let extra = pool.len() % h.len();
        let mut start = 0;
        for (slot, &client) in h.iter().enumerate() {
            let take = base + usize::from(slot < extra);
            clients[client].extend_from_slice(&pool[start..start + take]);
            start += take;
        }
    }
    let part = Partition { clients };
    part.validate(ds.len())?;
    Ok(part)
}

/// Dirichlet label skew: each client draws class preferences from
/// `Dirichlet(alpha 1_C)` and fills an equal quota without replacement.
///
/// Clients are served in random order. A client's quota is split across
/// classes in proportion to its preferences (largest-remainder rounding);
/// whatever a class cannot supply is re-split over the classes that still
/// have samples, by renormalized preference, falling back to uniform when the
/// client prefers none of them.
pub fn split_dirichlet(ds: &Dataset, n: usize, alpha: f64, rng: &mut SimRng) -> Result<Partition> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples across {n} clients",
            ds.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let prefs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let g: Vec<f64> = (0..ds.classes).map(|_| gamma.sample(rng)).collect();
            let s: f64 = g.iter().sum();
            if s > 0.0 && s.is_finite() {
                g.into_iter().map(|x| x / s).collect()
            } else {
                vec![1.0 / ds.classes as f64; ds.classes]
            }
        })
        .collect();
    let mut pools = indices_by_class(ds);
    for p in &mut pools {
        p.shuffle(rng);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = ds.len() / n;
    let extra = ds.len() % n;
    let mut clients = vec![Vec::new(); n];
    for (slot, &client) in order.iter().enumerate() {
        let mut need = base + usize::from(slot < extra);
        while need > 0 {
            let open: Vec<usize> = (0..ds.classes).filter(|&c| !pools[c].is_empty()).collect();
            let mut weights: Vec<f64> = open.iter().map(|&c| prefs[client][c]).collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                weights = vec![1.0; open.len()];
            }
            let take = apportion(need, &weights);
            for (&c, want) in open.iter().zip(take) {
                let got = want.min(pools[c].len());
                let cut = pools[c].len() - got;
                clients[client].extend(pools[c].drain(cut..));
                need -= got;
            }
        }
    }
    let part = Partition { clients };
    part.validate(ds.len())?;
    Ok(part)
}

/// Splits `total` into integers proportional to `weights` (largest remainder,
/// ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = total.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(short) {
        counts[i] += 1;
    }
    counts
}

/// One client's local train and test data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub train: Dataset,
    pub test: Dataset,
}

/// Shuffles each client's indices and keeps the first `round(train_frac * len)`
/// for training.
pub fn train_test_split(ds: &Dataset, part: &Partition, train_frac: f64, rng: &mut SimRng) -> Result<Vec<ClientShard>> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::invalid(format!(
            "train fraction must lie in [0, 1], got {train_frac}"
        )));
    }
    part.clients
        .iter()
        .map(|idx| {
            let mut idx = idx.clone();
            idx.shuffle(rng);
            let cut = (train_frac * idx.len() as f64).round() as usize;
            Ok(ClientShard {
                train: ds.subset(&idx[..cut]),
                test: ds.subset(&idx[cut..]),
            })
        })
        .collect()
}
