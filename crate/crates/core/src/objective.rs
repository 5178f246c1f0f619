//! Testbed objectives: distributed quadratics and a small fully-connected network.
//!
//! Quadratic clients are `f_i(w) = 0.5 w^T L_i w - w^T b_i`; the global objective
//! is their mean. The network is a bias-free ReLU MLP with a softmax
//! cross-entropy head and hand-written backpropagation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::SimRng;

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// `n` quadratic clients sharing dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    hessians: Vec<DMatrix<f64>>,
    linear: Vec<DVector<f64>>,
}

/// Per-client smoothness (largest Hessian eigenvalue) with the mean and max.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessConstants {
    pub per_client: Vec<f64>,
    pub l_bar: f64,
    pub l_max: f64,
}

impl QuadraticProblem {
    pub fn new(hessians: Vec<DMatrix<f64>>, linear: Vec<DVector<f64>>) -> Result<Self> {
        if hessians.is_empty() {
            return Err(Error::invalid("need at least one client"));
        }
        if hessians.len() != linear.len() {
            return Err(Error::shape("quadratic clients", hessians.len(), linear.len()));
        }
        let d = hessians[0].nrows();
        if d == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        for (i, (l, b)) in hessians.iter().zip(&linear).enumerate() {
            if l.nrows() != d || l.ncols() != d {
                return Err(Error::shape(
                    "client Hessian",
                    format!("{d}x{d}"),
                    format!("{}x{}", l.nrows(), l.ncols()),
                ));
            }
            if b.len() != d {
                return Err(Error::shape("client linear term", d, b.len()));
            }
            check_symmetric(l).map_err(|e| Error::invalid(format!("client {i}: {e}")))?;
            let lmin = SymmetricEigen::new(l.clone()).eigenvalues.min();
            if lmin < -PSD_TOL {
                return Err(Error::invalid(format!(
                    "client {i}: Hessian is not PSD (min eigenvalue {lmin})"
                )));
            }
        }
        Ok(Self { hessians, linear })
    }

    /// Interpolation instance: every `b_i = 0`.
    pub fn homogeneous(hessians: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = hessians.first().map_or(0, |l| l.nrows());
        let linear = vec![DVector::zeros(d); hessians.len()];
        Self::new(hessians, linear)
    }

    /// `L_i = A_i^T A_i / d + mu I` with standard-normal `A_i`; `b_i` standard
    /// normal when `with_linear`, zero otherwise.
    pub fn random(n: usize, d: usize, mu: f64, with_linear: bool, rng: &mut SimRng) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("client count and dimension must be positive"));
        }
        if !(mu >= 0.0) {
            return Err(Error::invalid("mu must be nonnegative"));
        }
        let mut hessians = Vec::with_capacity(n);
        let mut linear = Vec::with_capacity(n);
        for _ in 0..n {
            let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
            let mut l = a.transpose() * &a / d as f64 + DMatrix::identity(d, d) * mu;
            l = (&l + l.transpose()) * 0.5;
            hessians.push(l);
            linear.push(if with_linear {
                DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
            } else {
                DVector::zeros(d)
            });
        }
        Self::new(hessians, linear)
    }

    pub fn n_clients(&self) -> usize {
        self.hessians.len()
    }

    pub fn dim(&self) -> usize {
        self.hessians[0].nrows()
    }

    pub fn hessian(&self, i: usize) -> Result<&DMatrix<f64>> {
        self.hessians.get(i).ok_or_else(|| self.bad_client(i))
    }

    pub fn linear(&self, i: usize) -> Result<&DVector<f64>> {
        self.linear.get(i).ok_or_else(|| self.bad_client(i))
    }

    pub fn hessians(&self) -> &[DMatrix<f64>] {
        &self.hessians
    }

    pub fn is_homogeneous(&self) -> bool {
        self.linear.iter().all(|b| b.iter().all(|&x| x == 0.0))
    }

    fn bad_client(&self, i: usize) -> Error {
        Error::invalid(format!(
            "client index {i} out of range for {} clients",
            self.n_clients()
        ))
    }

    fn check_point(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::shape("quadratic point", self.dim(), w.len()));
        }
        Ok(())
    }

    /// `(1/n) sum_i L_i`.
    pub fn mean_hessian(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dim(), self.dim());
        for l in &self.hessians {
            acc += l;
        }
        acc / self.n_clients() as f64
    }

    /// `(1/n) sum_i b_i`.
    pub fn mean_linear(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for b in &self.linear {
            acc += b;
        }
        acc / self.n_clients() as f64
    }

    pub fn local_grad(&self, i: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(w)?;
        Ok(self.hessian(i)? * w - self.linear(i)?)
    }

    pub fn local_value(&self, i: usize, w: &DVector<f64>) -> Result<f64> {
        self.check_point(w)?;
        let l = self.hessian(i)?;
        Ok(0.5 * w.dot(&(l * w)) - w.dot(self.linear(i)?))
    }

    pub fn global_value(&self, w: &DVector<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..self.n_clients() {
            acc += self.local_value(i, w)?;
        }
        Ok(acc / self.n_clients() as f64)
    }

    pub fn global_grad(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(w)?;
        Ok(self.mean_hessian() * w - self.mean_linear())
    }

    /// Infimum of the global mean objective.
    pub fn f_inf(&self) -> Result<f64> {
        if self.is_homogeneous() {
            return Ok(0.0);
        }
        quadratic_infimum(&self.mean_hessian(), &self.mean_linear())
    }

    /// Infimum of client `i`'s own objective.
    pub fn local_f_inf(&self, i: usize) -> Result<f64> {
        quadratic_infimum(self.hessian(i)?, self.linear(i)?)
    }

    pub fn smoothness(&self) -> SmoothnessConstants {
        let per_client: Vec<f64> = self.hessians.iter().map(largest_eigenvalue).collect();
        let l_bar = per_client.iter().sum::<f64>() / per_client.len() as f64;
        let l_max = per_client.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        SmoothnessConstants {
            per_client,
            l_bar,
            l_max,
        }
    }

    /// Plain-text form: a `quadratic <n> <d>` header, then for every client
    /// `d` rows of `L_i` followed by one row holding `b_i`.
    pub fn to_text(&self) -> String {
        let mut out = format!("quadratic {} {}\n", self.n_clients(), self.dim());
        for (i, (l, b)) in self.hessians.iter().zip(&self.linear).enumerate() {
            let _ = writeln!(out, "# client {i}");
            for r in 0..self.dim() {
                out.push_str(&join_row(l.row(r).iter()));
                out.push('\n');
            }
            out.push_str(&join_row(b.iter()));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::invalid("empty quadratic file"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("quadratic") {
            return Err(Error::invalid("quadratic file must start with `quadratic <n> <d>`"));
        }
        let mut dim_field = |name: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad or missing {name} in header")))
        };
        let n = dim_field("client count")?;
        let d = dim_field("dimension")?;
        let mut row = |what: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::invalid(format!("unexpected end of file reading {what}")))?;
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad number `{t}` in {what}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != d {
                return Err(Error::shape("quadratic file row", d, vals.len()));
            }
            Ok(vals)
        };
        let mut hessians = Vec::with_capacity(n);
        let mut linear = Vec::with_capacity(n);
        for _ in 0..n {
            let mut flat = Vec::with_capacity(d * d);
            for _ in 0..d {
                flat.extend(row("Hessian row")?);
            }
            hessians.push(DMatrix::from_row_slice(d, d, &flat));
            linear.push(DVector::from_vec(row("linear term")?));
        }
        if lines.next().is_some() {
            return Err(Error::invalid("trailing data after the last client"));
        }
        Self::new(hessians, linear)
    }
}

fn join_row<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("matrix is not square"));
    }
    let scale = m.amax().max(1.0);
    for r in 0..m.nrows() {
        for c in r + 1..m.ncols() {
            if (m[(r, c)] - m[(c, r)]).abs() > SYM_TOL * scale {
                return Err(Error::invalid(format!("matrix is not symmetric at ({r}, {c})")));
            }
        }
    }
    Ok(())
}

pub(crate) fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

/// Spectral norm of a symmetric matrix; rejects asymmetric input.
pub fn smoothness_of(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    Ok(largest_eigenvalue(m))
}

/// `inf_w 0.5 w^T L w - w^T b` for symmetric PSD `L`.
fn quadratic_infimum(l: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(l.clone());
    let top = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let cutoff = 1e-10 * top;
    let coeffs = eig.eigenvectors.transpose() * b;
    let mut value = 0.0;
    for (lambda, beta) in eig.eigenvalues.iter().zip(coeffs.iter()) {
        if *lambda > cutoff {
            value -= 0.5 * beta * beta / lambda;
        } else if beta.abs() > 1e-9 * b.norm().max(1.0) {
            return Err(Error::UnboundedBelow(format!(
                "linear term has a component {beta:e} along a direction of curvature {lambda:e}"
            )));
        }
    }
    Ok(value)
}

/// Minimizer of the global objective via least squares on `L_bar w = b_bar`.
pub fn global_minimizer(p: &QuadraticProblem) -> Result<DVector<f64>> {
    let l = p.mean_hessian();
    let b = p.mean_linear();
    p.f_inf()?;
    let svd = l.svd(true, true);
    svd.solve(&b, 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    /// `inputs x outputs`; activations are row vectors multiplied on the right.
    pub weights: DMatrix<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

/// Ordered bias-free layers; the last one is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    layers: Vec<Layer>,
}

impl LayeredModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].weights.ncols() != pair[1].weights.nrows() {
                return Err(Error::shape(
                    "layer composition",
                    format!("{} inputs for {}", pair[0].weights.ncols(), pair[1].name),
                    pair[1].weights.nrows(),
                ));
            }
        }
        let mut names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("layer names must be unique"));
        }
        Ok(Self { layers })
    }

    /// ReLU MLP `input -> hidden... -> classes` with He-scaled Gaussian weights.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, rng: &mut SimRng) -> Result<Self> {
        if input == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if k == last { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                Layer {
                    name: format!("fc{}", k + 1),
                    weights: DMatrix::from_fn(fan_in, fan_out, |_, _| {
                        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                    }),
                    activation: if k == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Same architecture with every weight set to zero.
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                activation: l.activation,
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.output_index()].weights.ncols()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Output-layer scores, one row per sample.
    pub fn logits(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::shape("model input", self.input_dim(), features.ncols()));
        }
        let mut h = features.clone();
        for layer in &self.layers {
            h = &h * &layer.weights;
            if layer.activation == Activation::Relu {
                h.apply(|x| *x = x.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn accuracy(&self, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let logits = self.logits(features)?;
        let hits = logits
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| row.transpose().argmax().0 == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn loss(&self, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        check_batch(self, features, labels)?;
        let logits = self.logits(features)?;
        Ok(softmax_cross_entropy(&logits, labels).0)
    }
}

/// Loss and per-layer gradients, shaped like the model's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    pub grads: Vec<DMatrix<f64>>,
}

fn check_batch(model: &LayeredModel, features: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if features.nrows() != labels.len() {
        return Err(Error::shape("batch labels", features.nrows(), labels.len()));
    }
    if features.ncols() != model.input_dim() {
        return Err(Error::shape("model input", model.input_dim(), features.ncols()));
    }
    let classes = model.n_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = labels.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let mut row = grad.row_mut(r);
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let z = row.sum();
        loss += z.ln() - (logits[(r, y)] - max);
        row /= z;
        row[y] -= 1.0;
        row /= n;
    }
    (loss / n, grad)
}

/// Mean softmax cross-entropy over the batch with exact gradients.
pub fn mlp_loss_and_grad(model: &LayeredModel, features: &DMatrix<f64>, labels: &[usize]) -> Result<GradientReport> {
    check_batch(model, features, labels)?;
    // Inputs to each layer; the final entry is the logits.
    let mut acts = Vec::with_capacity(model.n_layers() + 1);
    acts.push(features.clone());
    for layer in model.layers() {
        let mut h = acts.last().expect("nonempty") * &layer.weights;
        if layer.activation == Activation::Relu {
            h.apply(|x| *x = x.max(0.0));
        }
        acts.push(h);
    }
    let logits = acts.pop().expect("logits");
    let (loss, mut delta) = softmax_cross_entropy(&logits, labels);
    let mut grads = vec![DMatrix::zeros(0, 0); model.n_layers()];
    for (k, layer) in model.layers().iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            let out = if k + 1 < acts.len() { &acts[k + 1] } else { &logits };
            delta.zip_apply(out, |g, h| {
                if h <= 0.0 {
                    *g = 0.0
                }
            });
        }
        grads[k] = acts[k].transpose() * &delta;
        if k > 0 {
            delta = &delta * layer.weights.transpose();
        }
    }
    Ok(GradientReport { loss, grads })
}

/// Max relative error between `grads` and central differences of the loss over
/// `coords` randomly chosen weights (all weights if there are fewer).
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn fd_check_against(
    model: &LayeredModel,
    features: &DMatrix<f64>,
    labels: &[usize],
    grads: &[DMatrix<f64>],
    step: f64,
    coords: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if grads.len() != model.n_layers() {
        return Err(Error::shape("gradient layers", model.n_layers(), grads.len()));
    }
    for (g, l) in grads.iter().zip(model.layers()) {
        if g.shape() != l.weights.shape() {
            return Err(Error::shape(
                "gradient layer",
                format!("{:?}", l.weights.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    let offsets: Vec<usize> = model
        .layers()
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.param_count();
            Some(start)
        })
        .collect();
    let total = model.param_count();
    let picks: Vec<usize> = if coords >= total {
        (0..total).collect()
    } else {
        index::sample(rng, total, coords).into_vec()
    };
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for flat in picks {
        let k = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[k];
        let orig = probe.layers[k].weights[j];
        probe.layers[k].weights[j] = orig + step;
        let up = probe.loss(features, labels)?;
        probe.layers[k].weights[j] = orig - step;
        let down = probe.loss(features, labels)?;
        probe.layers[k].weights[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[k][j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// [`fd_check_against`] applied to the model's own analytic gradient.
pub fn fd_gradient_check(
    model: &LayeredModel,
    features: &DMatrix<f64>,
    labels: &[usize],
    step: f64,
    coords: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let report = mlp_loss_and_grad(model, features, labels)?;
    fd_check_against(model, features, labels, &report.grads, step, coords, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    fn single(l: DMatrix<f64>, b: &[f64]) -> QuadraticProblem {
        QuadraticProblem::new(vec![l], vec![DVector::from_row_slice(b)]).unwrap()
    }

    #[test]
    fn local_grad_examples() {
        let p = single(DMatrix::identity(2, 2), &[0.0, 0.0]);
        let w = DVector::from_row_slice(&[2.0, -1.0]);
        assert_eq!(p.local_grad(0, &w).unwrap(), w);
        let p = single(diag(&[2.0, 4.0]), &[1.0, 1.0]);
        let g = p.local_grad(0, &DVector::from_row_slice(&[1.0, 1.0])).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 3.0]);
        assert!(p.local_grad(1, &g).is_err());
        let star = DVector::from_row_slice(&[0.5, 0.25]);
        assert!(p.local_grad(0, &star).unwrap().norm() < 1e-10);
    }

    #[test]
    fn value_examples() {
        let p = single(DMatrix::identity(2, 2), &[0.0, 0.0]);
        assert_eq!(p.local_value(0, &DVector::from_row_slice(&[3.0, 4.0])).unwrap(), 12.5);
        let p = single(diag(&[2.0, 4.0]), &[1.0, 1.0]);
        let w = DVector::from_row_slice(&[1.0, 1.0]);
        assert_eq!(p.local_value(0, &w).unwrap(), 1.0);
        let twin = QuadraticProblem::new(
            vec![diag(&[2.0, 4.0]); 2],
            vec![DVector::from_row_slice(&[1.0, 1.0]); 2],
        )
        .unwrap();
        assert_eq!(twin.global_value(&w).unwrap(), 1.0);
        assert!(matches!(
            twin.global_value(&DVector::zeros(3)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn infimum_examples() {
        let p = QuadraticProblem::homogeneous(vec![diag(&[1.0, 0.0])]).unwrap();
        assert_eq!(p.f_inf().unwrap(), 0.0);
        let p = single(DMatrix::identity(2, 2), &[2.0, 0.0]);
        assert!((p.f_inf().unwrap() + 2.0).abs() < 1e-12);
        // singular with b in range: finite
        let p = single(diag(&[2.0, 0.0]), &[2.0, 0.0]);
        assert!((p.f_inf().unwrap() + 1.0).abs() < 1e-12);
        let p = single(diag(&[2.0, 0.0]), &[0.0, 1.0]);
        assert!(matches!(p.f_inf(), Err(Error::UnboundedBelow(_))));
    }

    #[test]
    fn smoothness_examples() {
        let p = QuadraticProblem::homogeneous(vec![diag(&[1.0, 3.0])]).unwrap();
        assert!((p.smoothness().l_max - 3.0).abs() < 1e-12);
        let p = QuadraticProblem::homogeneous(vec![diag(&[2.0, 1.0]), diag(&[4.0, 0.0])]).unwrap();
        let s = p.smoothness();
        assert!((s.l_bar - 3.0).abs() < 1e-12 && (s.l_max - 4.0).abs() < 1e-12);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(smoothness_of(&asym).is_err());
        assert!(QuadraticProblem::homogeneous(vec![asym]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let p = QuadraticProblem::random(3, 4, 0.1, true, &mut seeded(4)).unwrap();
        let back = QuadraticProblem::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
        assert!(QuadraticProblem::from_text("quadratic 1 2\n1 0\n0 1\n").is_err());
    }

    #[test]
    fn zero_weights_give_log_classes() {
        let model = LayeredModel::mlp(4, &[5], 3, &mut seeded(1)).unwrap().zeros_like();
        let x = DMatrix::from_fn(6, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        let labels = [0, 1, 2, 0, 1, 2];
        let rep = mlp_loss_and_grad(&model, &x, &labels).unwrap();
        assert!((rep.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_linear_gradient_by_hand() {
        // One sample x = (1, 2), label 0, W = 0: softmax (0.5, 0.5), dL/dz = (-0.5, 0.5).
        let layer = Layer {
            name: "out".into(),
            weights: DMatrix::zeros(2, 2),
            activation: Activation::Identity,
        };
        let model = LayeredModel::new(vec![layer]).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let g = &mlp_loss_and_grad(&model, &x, &[0]).unwrap().grads[0];
        let expected = DMatrix::from_row_slice(2, 2, &[-0.5, 0.5, -1.0, 1.0]);
        assert!((g - expected).amax() < 1e-15);
    }

    #[test]
    fn batch_errors() {
        let model = LayeredModel::mlp(3, &[4], 2, &mut seeded(1)).unwrap();
        let x = DMatrix::zeros(2, 3);
        assert!(mlp_loss_and_grad(&model, &x, &[]).is_err());
        assert!(mlp_loss_and_grad(&model, &x, &[0]).is_err());
        assert!(mlp_loss_and_grad(&model, &DMatrix::zeros(2, 4), &[0, 1]).is_err());
        assert!(mlp_loss_and_grad(&model, &x, &[0, 2]).is_err());
    }

    #[test]
    fn model_validation() {
        let a = Layer {
            name: "a".into(),
            weights: DMatrix::zeros(2, 3),
            activation: Activation::Relu,
        };
        let b = Layer {
            name: "b".into(),
            weights: DMatrix::zeros(4, 2),
            activation: Activation::Identity,
        };
        assert!(LayeredModel::new(vec![a.clone(), b]).is_err());
        assert!(LayeredModel::new(vec![a.clone(), a]).is_err());
        let m = LayeredModel::mlp(16, &[32, 32], 10, &mut seeded(0)).unwrap();
        assert_eq!(m.param_count(), 512 + 1024 + 320);
        assert_eq!(m.layer_index("fc3"), Some(2));
    }
}
