//! Practical federated training with per-client layer subsets and pruning.
//!
//! A round samples participants, dispatches to each one its trainable layers
//! in full and every other layer behind a fresh global pruning mask, runs
//! local SGD with an optional step-wise local pruning strategy, collects only
//! the trainable layers and aggregates them layer by layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::objective::{mlp_loss_and_grad, LayeredModel};
use crate::rng::{fork, stream, SimRng};
use crate::sketch::{sample_pruning_mask, PruningMask};

/// How many non-output layers each client trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Full,
    LowerB,
    Opu2,
    Opu3,
    /// Count drawn uniformly from `[lo, hi]` per client.
    OpuRange(usize, usize),
}

impl Scheme {
    fn count_range(self, available: usize) -> (usize, usize) {
        match self {
            Scheme::Full => (available, available),
            Scheme::LowerB => (1, 1),
            Scheme::Opu2 => (2, 2),
            Scheme::Opu3 => (3, 3),
            Scheme::OpuRange(lo, hi) => (lo, hi),
        }
    }
}

/// Client-side pruning applied at every local step to layers it does not train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalStrategy {
    Fixed,
    /// Fresh Bernoulli(q) mask with `q ~ U[q_lo, 1]` per step.
    Uniform {
        q_lo: f64,
    },
    /// Keeps the leading `ceil(q rows) x ceil(q cols)` block, `q ~ U[q_lo, 1]` per step.
    OrderedDropout {
        q_lo: f64,
    },
}

impl LocalStrategy {
    fn validate(self) -> Result<()> {
        match self {
            LocalStrategy::Fixed => Ok(()),
            LocalStrategy::Uniform { q_lo } | LocalStrategy::OrderedDropout { q_lo } => {
                if q_lo > 0.0 && q_lo <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "local pruning lower bound must lie in (0, 1], got {q_lo}"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lr: 0.05,
            batch_size: 48,
        }
    }
}

/// Learning rates searched when tuning: `1e-5` upward by factors of five,
/// closed off by the upper end 0.1.
pub fn lr_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = std::iter::successors(Some(1e-5), |x| Some(x * 5.0))
        .take_while(|&x| x < 0.1)
        .collect();
    grid.push(0.1);
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPlan {
    pub client_id: usize,
    /// Sorted layer indices; always contains the output layer.
    pub layers: Vec<usize>,
    pub keep_ratio: f64,
    pub strategy: LocalStrategy,
    pub local: LocalConfig,
}

impl ClientPlan {
    pub fn trains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

/// One plan per client: the output layer plus a uniformly chosen set of
/// distinct other layers whose size the scheme decides.
pub fn make_plans(
    model: &LayeredModel,
    n: usize,
    scheme: Scheme,
    keep_ratio: f64,
    strategy: LocalStrategy,
    local: LocalConfig,
    rng: &mut SimRng,
) -> Result<Vec<ClientPlan>> {
    if n == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "keep ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    strategy.validate()?;
    if local.steps == 0 || local.batch_size == 0 || !(local.lr > 0.0) {
        return Err(Error::invalid(
            "local steps, batch size and learning rate must be positive",
        ));
    }
    let available = model.n_layers() - 1;
    let (lo, hi) = scheme.count_range(available);
    if lo > hi || hi > available || (lo == 0 && !matches!(scheme, Scheme::Full)) {
        return Err(Error::invalid(format!(
            "scheme {scheme:?} needs {lo}..={hi} trainable layers but the model has {available} besides the output"
        )));
    }
    let out = model.output_index();
    Ok((0..n)
        .map(|client_id| {
            let count = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let mut layers = index::sample(rng, available, count).into_vec();
            layers.push(out);
            layers.sort_unstable();
            ClientPlan {
                client_id,
                layers,
                keep_ratio,
                strategy,
                local,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchedLayer {
    pub weights: DMatrix<f64>,
    /// Global pruning mask over the column-major flattened weights;
    /// `None` for layers the client trains.
    pub mask: Option<PruningMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPayload {
    pub client_id: usize,
    pub layers: Vec<DispatchedLayer>,
}

impl DispatchPayload {
    /// Scalars sent: full trainable layers plus kept coordinates elsewhere.
    pub fn download_scalars(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.mask.as_ref().map_or(l.weights.len(), PruningMask::kept_count) as u64)
            .sum()
    }

    pub fn masked_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.mask.is_some())
            .map(|(k, _)| k)
    }
}

fn check_plan(model: &LayeredModel, plan: &ClientPlan) -> Result<()> {
    if plan.layers.is_empty() {
        return Err(Error::invalid(format!(
            "client {} has an empty layer set",
            plan.client_id
        )));
    }
    if let Some(&bad) = plan.layers.iter().find(|&&l| l >= model.n_layers()) {
        return Err(Error::invalid(format!(
            "client {} plans unknown layer {bad}",
            plan.client_id
        )));
    }
    Ok(())
}

/// Copies trainable layers verbatim and masks every other layer with a
/// freshly drawn Bernoulli(`keep_ratio`) mask.
pub fn dispatch(server: &LayeredModel, plan: &ClientPlan, rng: &mut SimRng) -> Result<DispatchPayload> {
    check_plan(server, plan)?;
    let layers = server
        .layers()
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            if plan.trains(k) {
                return Ok(DispatchedLayer {
                    weights: layer.weights.clone(),
                    mask: None,
                });
            }
            let mask = sample_pruning_mask(layer.param_count(), plan.keep_ratio, rng)?;
            let mut weights = layer.weights.clone();
            mask.apply_in_place(weights.as_mut_slice())?;
            Ok(DispatchedLayer {
                weights,
                mask: Some(mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DispatchPayload {
        client_id: plan.client_id,
        layers,
    })
}

/// Trained weights of exactly the client's planned layers.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPayload {
    pub client_id: usize,
    pub layers: BTreeMap<usize, DMatrix<f64>>,
}

impl UploadPayload {
    pub fn upload_scalars(&self) -> u64 {
        self.layers.values().map(|w| w.len() as u64).sum()
    }
}

fn ordered_block_mask(rows: usize, cols: usize, q: f64) -> Vec<bool> {
    let keep_r = ((q * rows as f64).ceil() as usize).min(rows);
    let keep_c = ((q * cols as f64).ceil() as usize).min(cols);
    let mut keep = vec![false; rows * cols];
    for c in 0..keep_c {
        for r in 0..keep_r {
            keep[r + c * rows] = true;
        }
    }
    keep
}

/// Step-wise local keep ratio, shared by all masked layers of the step.
fn step_ratio(strategy: LocalStrategy, rng: &mut SimRng) -> f64 {
    match strategy {
        LocalStrategy::Fixed => 1.0,
        LocalStrategy::Uniform { q_lo } | LocalStrategy::OrderedDropout { q_lo } => {
            q_lo + (1.0 - q_lo) * rng.random::<f64>()
        }
    }
}

/// The active 0/1 pattern of a masked layer at one local step.
fn step_mask(
    global: &PruningMask,
    rows: usize,
    cols: usize,
    strategy: LocalStrategy,
    q: f64,
    rng: &mut SimRng,
) -> Result<Vec<bool>> {
    let mut keep = vec![false; global.dim()];
    for &j in global.kept() {
        keep[j] = true;
    }
    match strategy {
        LocalStrategy::Fixed => {}
        LocalStrategy::Uniform { .. } => {
            let local = sample_pruning_mask(global.dim(), q.clamp(f64::MIN_POSITIVE, 1.0), rng)?;
            let mut local_keep = vec![false; global.dim()];
            for &j in local.kept() {
                local_keep[j] = true;
            }
            keep.iter_mut().zip(local_keep).for_each(|(k, l)| *k &= l);
        }
        LocalStrategy::OrderedDropout { .. } => {
            let block = ordered_block_mask(rows, cols, q);
            keep.iter_mut().zip(block).for_each(|(k, b)| *k &= b);
        }
    }
    Ok(keep)
}

/// Runs the plan's local SGD steps and returns the trained planned layers.
///
/// Layers outside the plan stay masked by the dispatch mask for the whole
/// run; the local strategy further thins them step by step. Their surviving
/// coordinates are trained too but never leave the client. Minibatches and
/// local masks come from two independent streams forked off `rng` in that
/// order, so the batch sequence does not depend on the strategy.
pub fn local_update(
    payload: &DispatchPayload,
    plan: &ClientPlan,
    shard: &Dataset,
    template: &LayeredModel,
    rng: &mut SimRng,
) -> Result<UploadPayload> {
    if shard.is_empty() {
        return Err(Error::invalid(format!(
            "client {} has no training data",
            plan.client_id
        )));
    }
    if payload.layers.len() != template.n_layers() {
        return Err(Error::shape(
            "dispatch payload",
            template.n_layers(),
            payload.layers.len(),
        ));
    }
    for (k, l) in payload.layers.iter().enumerate() {
        if l.mask.is_some() == plan.trains(k) {
            return Err(Error::invalid(format!("payload layer {k} disagrees with the plan")));
        }
    }
    let mut batch_rng = fork(rng);
    let mut prune_rng = fork(rng);
    let mut model = template.clone();
    for (layer, sent) in model.layers_mut().iter_mut().zip(&payload.layers) {
        layer.weights.copy_from(&sent.weights);
    }
    let m = shard.len();
    let b = plan.local.batch_size.min(m);
    for step in 0..plan.local.steps {
        let idx = index::sample(&mut batch_rng, m, b).into_vec();
        let batch = shard.subset(&idx);
        // Active patterns for masked layers this step.
        let q = step_ratio(plan.strategy, &mut prune_rng);
        let mut patterns: Vec<Option<Vec<bool>>> = Vec::with_capacity(model.n_layers());
        for (k, sent) in payload.layers.iter().enumerate() {
            patterns.push(match &sent.mask {
                None => None,
                Some(mask) => {
                    let w = &model.layers()[k].weights;
                    Some(step_mask(mask, w.nrows(), w.ncols(), plan.strategy, q, &mut prune_rng)?)
                }
            });
        }
        let mut effective = model.clone();
        for (layer, pat) in effective.layers_mut().iter_mut().zip(&patterns) {
            if let Some(p) = pat {
                layer.weights.iter_mut().zip(p).for_each(|(w, &on)| {
                    if !on {
                        *w = 0.0
                    }
                });
            }
        }
        let report = mlp_loss_and_grad(&effective, &batch.features, &batch.labels)?;
        if !report.loss.is_finite() {
            return Err(Error::Diverged {
                round: None,
                step,
                detail: format!("client {} local loss is {}", plan.client_id, report.loss),
            });
        }
        for ((layer, mut grad), pat) in model.layers_mut().iter_mut().zip(report.grads).zip(&patterns) {
            if let Some(p) = pat {
                grad.iter_mut().zip(p).for_each(|(g, &on)| {
                    if !on {
                        *g = 0.0
                    }
                });
            }
            let lr = plan.local.lr;
            layer.weights.zip_apply(&grad, |w, g| *w -= lr * g);
        }
    }
    let layers = plan
        .layers
        .iter()
        .map(|&k| (k, model.layers()[k].weights.clone()))
        .collect();
    Ok(UploadPayload {
        client_id: plan.client_id,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationMode {
    Simple,
    /// Client weight proportional to how many layers it trains.
    Weighted,
    /// `softmax(tau * cos(delta_i, mean delta))` over the clients that uploaded a layer.
    Attention {
        tau: f64,
    },
}

fn cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Layer-wise aggregation of `uploads` into a new server model.
///
/// Each upload must only contain layers from its client's plan. Layers nobody
/// uploaded keep their previous weights. Returns the new model and the number
/// of uploaded scalars.
pub fn aggregate(
    uploads: &[UploadPayload],
    plans: &[ClientPlan],
    prev: &LayeredModel,
    mode: AggregationMode,
) -> Result<(LayeredModel, u64)> {
    let plan_of = |id: usize| {
        plans
            .iter()
            .find(|p| p.client_id == id)
            .ok_or_else(|| Error::invalid(format!("no plan for client {id}")))
    };
    let mut scalars = 0;
    for up in uploads {
        let plan = plan_of(up.client_id)?;
        if let Some(extra) = up.layers.keys().find(|&&k| !plan.trains(k)) {
            return Err(Error::invalid(format!(
                "client {} uploaded layer {extra} outside its plan",
                up.client_id
            )));
        }
        for (&k, w) in &up.layers {
            let expect = prev.layers().get(k).map(|l| l.weights.shape());
            if expect != Some(w.shape()) {
                return Err(Error::shape(
                    "uploaded layer",
                    format!("{expect:?}"),
                    format!("{:?}", w.shape()),
                ));
            }
        }
        scalars += up.upload_scalars();
    }
    let mut next = prev.clone();
    for (k, layer) in next.layers_mut().iter_mut().enumerate() {
        let contributors: Vec<(&UploadPayload, &DMatrix<f64>)> = uploads
            .iter()
            .filter_map(|u| u.layers.get(&k).map(|w| (u, w)))
            .collect();
        if contributors.is_empty() {
            continue;
        }
        let alphas: Vec<f64> = match mode {
            AggregationMode::Simple => vec![1.0 / contributors.len() as f64; contributors.len()],
            AggregationMode::Weighted => {
                let sizes: Vec<f64> = contributors
                    .iter()
                    .map(|(u, _)| plan_of(u.client_id).map(|p| p.layers.len() as f64))
                    .collect::<Result<_>>()?;
                let total: f64 = sizes.iter().sum();
                sizes.iter().map(|s| s / total).collect()
            }
            AggregationMode::Attention { tau } => {
                let deltas: Vec<DMatrix<f64>> = contributors.iter().map(|(_, w)| *w - &layer.weights).collect();
                let mut mean = DMatrix::zeros(layer.weights.nrows(), layer.weights.ncols());
                for d in &deltas {
                    mean += d;
                }
                mean /= deltas.len() as f64;
                let scores: Vec<f64> = deltas.iter().map(|d| tau * cosine(d, &mean)).collect();
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            }
        };
        if contributors.len() == 1 {
            layer.weights.copy_from(contributors[0].1);
            continue;
        }
        let mut acc = DMatrix::zeros(layer.weights.nrows(), layer.weights.ncols());
        for ((_, w), a) in contributors.iter().zip(&alphas) {
            acc.zip_apply(*w, |x, y| *x += a * y);
        }
        layer.weights = acc;
    }
    Ok((next, scalars))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    /// Fraction of clients sampled each round; at least one participates.
    pub participation: f64,
    pub scheme: Scheme,
    pub keep_ratio: f64,
    pub strategy: LocalStrategy,
    pub local: LocalConfig,
    pub aggregation: AggregationMode,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            participation: 1.0,
            scheme: Scheme::Full,
            keep_ratio: 1.0,
            strategy: LocalStrategy::Fixed,
            local: LocalConfig::default(),
            aggregation: AggregationMode::Simple,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Server model loss on the pooled training data.
    pub loss: f64,
    /// Server model accuracy on the pooled test data.
    pub accuracy: f64,
    pub up_scalars_cum: u64,
    pub down_scalars_cum: u64,
}

pub const METRICS_HEADER: &str = "round,loss,accuracy,up_scalars_cum,down_scalars_cum";

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{},{}",
            m.round, m.loss, m.accuracy, m.up_scalars_cum, m.down_scalars_cum
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct FedRun {
    pub model: LayeredModel,
    pub plans: Vec<ClientPlan>,
    pub metrics: Vec<RoundMetrics>,
}

/// Stream tags outside the round index range.
const PLAN_STREAM: u64 = u64::MAX;
const PARTICIPATION_STREAM: u64 = u64::MAX - 1;

/// RNG stream of client `client` in round `round`; dispatch draws from it
/// first and the local update forks it afterwards.
pub fn client_stream(seed: u64, round: usize, client: usize) -> SimRng {
    stream(seed, &[round as u64, client as u64])
}

/// Participants of a round, sorted.
pub fn sample_participants(seed: u64, round: usize, n: usize, participation: f64) -> Vec<usize> {
    let count = ((participation * n as f64).ceil() as usize).clamp(1, n);
    if count == n {
        return (0..n).collect();
    }
    let mut rng = stream(seed, &[PARTICIPATION_STREAM, round as u64]);
    let mut picks = index::sample(&mut rng, n, count).into_vec();
    picks.sort_unstable();
    picks
}

/// Plans drawn by [`run_fedp3`] for a given configuration.
pub fn plans_for(model: &LayeredModel, n: usize, cfg: &FedConfig) -> Result<Vec<ClientPlan>> {
    let mut rng = stream(cfg.seed, &[PLAN_STREAM]);
    make_plans(model, n, cfg.scheme, cfg.keep_ratio, cfg.strategy, cfg.local, &mut rng)
}

fn evaluate(model: &LayeredModel, train: &Dataset, test: &Dataset) -> Result<(f64, f64)> {
    let loss = model.loss(&train.features, &train.labels)?;
    let accuracy = if test.is_empty() {
        f64::NAN
    } else {
        model.accuracy(&test.features, &test.labels)?
    };
    Ok((loss, accuracy))
}

/// Full training loop. Plans are drawn once up front; per-client work in a
/// round runs on the current rayon pool and is reduced in client order.
pub fn run_fedp3(init: &LayeredModel, clients: &[ClientShard], cfg: &FedConfig) -> Result<FedRun> {
    if clients.is_empty() {
        return Err(Error::invalid("need at least one client"));
    }
    if !(cfg.participation > 0.0 && cfg.participation <= 1.0) {
        return Err(Error::invalid(format!(
            "participation must lie in (0, 1], got {}",
            cfg.participation
        )));
    }
    if let AggregationMode::Attention { tau } = cfg.aggregation {
        if !tau.is_finite() {
            return Err(Error::invalid("attention temperature must be finite"));
        }
    }
    let plans = plans_for(init, clients.len(), cfg)?;
    let pooled_train = Dataset::concat(&clients.iter().map(|c| &c.train).collect::<Vec<_>>())?;
    let pooled_test = Dataset::concat(&clients.iter().map(|c| &c.test).collect::<Vec<_>>())?;
    let mut model = init.clone();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let (mut up, mut down) = (0u64, 0u64);
    for round in 0..cfg.rounds {
        let participants = sample_participants(cfg.seed, round, clients.len(), cfg.participation);
        let results: Vec<Result<(UploadPayload, u64)>> = participants
            .par_iter()
            .map(|&c| {
                let plan = &plans[c];
                let mut rng = client_stream(cfg.seed, round, c);
                let payload = dispatch(&model, plan, &mut rng)?;
                let upload = local_update(&payload, plan, &clients[c].train, &model, &mut rng)?;
                Ok((upload, payload.download_scalars()))
            })
            .collect();
        let mut uploads = Vec::with_capacity(results.len());
        for r in results {
            let (u, d) = r.map_err(|e| e.in_round(round))?;
            down += d;
            uploads.push(u);
        }
        let (next, scalars) = aggregate(&uploads, &plans, &model, cfg.aggregation)?;
        model = next;
        up += scalars;
        let (loss, accuracy) = evaluate(&model, &pooled_train, &pooled_test)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                round: Some(round),
                step: cfg.local.steps,
                detail: format!("global training loss is {loss}"),
            });
        }
        metrics.push(RoundMetrics {
            round,
            loss,
            accuracy,
            up_scalars_cum: up,
            down_scalars_cum: down,
        });
    }
    Ok(FedRun { model, plans, metrics })
}

/// Upload count implied by the plans alone: every participant uploads all of
/// its planned layers each round.
pub fn predicted_upload(model: &LayeredModel, plans: &[ClientPlan], cfg: &FedConfig) -> u64 {
    (0..cfg.rounds)
        .map(|round| {
            sample_participants(cfg.seed, round, plans.len(), cfg.participation)
                .into_iter()
                .map(|c| {
                    plans[c]
                        .layers
                        .iter()
                        .map(|&k| model.layers()[k].param_count() as u64)
                        .sum::<u64>()
                })
                .sum::<u64>()
        })
        .sum()
}
