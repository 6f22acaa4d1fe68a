//! Parameter estimation through the fixed point: implicit gradients, the joint
//! MAP objective, Adam with an L2 prior, and the training loops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalMap;
use crate::deep::{infer_deep_all, DeepInferOptions, DeepPedSpec};
use crate::error::{PedError, Result};
use crate::expfam::ExpFamily;
use crate::fpsolve::SolverConfig;
use crate::numkernel::linalg::{min_singular_value, solve_general};
use crate::numkernel::matrix::Matrix;
use crate::numkernel::rng::RngStream;
use crate::shallow::{infer_all, InferOptions, PedLayer};

/// `I - J` with a smaller singular value than this is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Gradient with respect to one layer's `W` and `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// One [`ParamGrad`] per layer, data side first.
pub type GradientBundle = Vec<ParamGrad>;

impl ParamGrad {
    pub fn zeros_like(layer: &PedLayer) -> Self {
        Self {
            w: Matrix::zeros(layer.d(), layer.l()),
            b: vec![0.0; layer.d()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        self.w.as_mut_slice().iter_mut().zip(other.w.as_slice()).for_each(|(a, b)| *a += b);
        self.b.iter_mut().zip(&other.b).for_each(|(a, b)| *a += b);
    }

    /// Adds `wd * theta`, the gradient of `wd / 2 |theta|^2`.
    pub fn add_weight_decay(&mut self, layer: &PedLayer, wd: f64) {
        self.w.as_mut_slice().iter_mut().zip(layer.w.as_slice()).for_each(|(g, t)| *g += wd * t);
        self.b.iter_mut().zip(&layer.b).for_each(|(g, t)| *g += wd * t);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.w.as_slice().iter().chain(&self.b).copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `W` entries followed by `B`, the order used by the optimizer.
pub fn flatten_params(layer: &PedLayer) -> Vec<f64> {
    layer.w.as_slice().iter().chain(&layer.b).copied().collect()
}

pub fn set_params(layer: &mut PedLayer, flat: &[f64]) {
    let n = layer.w.as_slice().len();
    layer.w.as_mut_slice().copy_from_slice(&flat[..n]);
    layer.b.copy_from_slice(&flat[n..]);
}

fn outer(a: &[f64], b: &[f64], scale: f64) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| scale * a[i] * b[j])
}

/// Log base-measure term that turns the gaussian likelihood into a squared reprojection error.
fn base_term(family: ExpFamily, y: &[f64]) -> f64 {
    match family {
        ExpFamily::Gaussian => 0.5 * y.iter().map(|v| v * v).sum::<f64>(),
        _ => 0.0,
    }
}

fn solve_transposed(mut system: Matrix, v: &[f64]) -> Result<Vec<f64>> {
    let smin = min_singular_value(&system);
    if smin < SINGULAR_TOL {
        return Err(PedError::IllPosed { min_singular: smin });
    }
    system = system.transpose();
    solve_general(&system, v)
}

// ---------------------------------------------------------------- shallow

/// Partials of the per-sample negative log joint in `(W, B)` at fixed `z`.
pub fn explicit_partials(layer: &PedLayer, z: &[f64], y: &[f64]) -> ParamGrad {
    let (q, _) = layer.drive(z, y);
    ParamGrad {
        w: outer(&q, z, -1.0),
        b: q.iter().map(|v| -v).collect(),
    }
}

/// `v^T dz*/dtheta` through one solve with `(I - J)^T`.
pub fn implicit_grad(layer: &PedLayer, v: &[f64], z_star: &[f64], y: &[f64]) -> Result<ParamGrad> {
    let j = layer.jacobian(z_star, y)?;
    let mut system = j.scale(-1.0);
    system.add_diagonal(1.0);
    let w = solve_transposed(system, v)?;
    let (q, _) = layer.drive(z_star, y);
    let slope = layer.curvature(z_star, y)?;
    let ww = layer.w.matvec(&w);
    let s = 1.0 / layer.lambda;
    let u: Vec<f64> = ww.iter().zip(&slope).map(|(a, b)| a * b).collect();
    let mut gw = outer(&q, &w, s);
    let gu = outer(&u, z_star, s);
    gw.as_mut_slice().iter_mut().zip(gu.as_slice()).for_each(|(a, b)| *a += b);
    Ok(ParamGrad {
        w: gw,
        b: u.iter().map(|v| s * v).collect(),
    })
}

/// Per-sample joint objective at a solved latent.
pub fn sample_objective(layer: &PedLayer, z: &[f64], y: &[f64]) -> f64 {
    layer.neg_log_posterior(z, y) + base_term(layer.family(), y)
}

/// Value and total parameter derivative of [`sample_objective`] along the solution path.
pub fn sample_objective_grad(layer: &PedLayer, z_star: &[f64], y: &[f64]) -> Result<(f64, ParamGrad)> {
    let mut g = explicit_partials(layer, z_star, y);
    let v = layer.grad_neg_log_posterior(z_star, y);
    g.add_assign(&implicit_grad(layer, &v, z_star, y)?);
    Ok((sample_objective(layer, z_star, y), g))
}

/// Joint MAP objective over all columns plus the `wd / 2 |theta|^2` prior.
pub fn outer_objective(layer: &PedLayer, z: &Matrix, y: &Matrix, weight_decay: f64) -> f64 {
    let data: f64 = (0..y.cols()).map(|s| sample_objective(layer, &z.column(s), &y.column(s))).sum();
    data + 0.5 * weight_decay * flatten_params(layer).iter().map(|v| v * v).sum::<f64>()
}

pub fn outer_gradient(layer: &PedLayer, z: &Matrix, y: &Matrix, weight_decay: f64) -> Result<ParamGrad> {
    let mut total = ParamGrad::zeros_like(layer);
    for s in 0..y.cols() {
        total.add_assign(&sample_objective_grad(layer, &z.column(s), &y.column(s))?.1);
    }
    total.add_weight_decay(layer, weight_decay);
    Ok(total)
}

// ---------------------------------------------------------------- deep

pub fn deep_explicit_partials(spec: &DeepPedSpec, zeta: &[f64], y: &[f64]) -> GradientBundle {
    (1..=spec.depth())
        .map(|l| {
            let z = &zeta[spec.slice(l)];
            let q = deep_drive(spec, zeta, y, l);
            ParamGrad {
                w: outer(&q, z, -1.0),
                b: q.iter().map(|v| -v).collect(),
            }
        })
        .collect()
}

fn below<'a>(spec: &DeepPedSpec, zeta: &'a [f64], y: &'a [f64], l: usize) -> &'a [f64] {
    if l == 1 {
        y
    } else {
        &zeta[spec.slice(l - 1)]
    }
}

/// `rho * (sqrt(lambda^(l-1)) Z^(l-1) - R)` and its derivative in `eta`.
fn deep_drive_with_slope(spec: &DeepPedSpec, zeta: &[f64], y: &[f64], l: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let layer = &spec.layers[l - 1];
    let map = layer.map();
    let eta = layer.pre_activation(&zeta[spec.slice(l)]);
    let s = spec.precision(l - 1).sqrt();
    let lo = below(spec, zeta, y, l);
    let mut q = Vec::with_capacity(eta.len());
    let mut slope = Vec::with_capacity(eta.len());
    let mut rho = Vec::with_capacity(eta.len());
    for (i, &e) in eta.iter().enumerate() {
        let (r, p, p1) = (map.r(e), map.rho(e), map.rho1(e));
        q.push(p * (s * lo[i] - r));
        slope.push(p1 * (s * lo[i] - r) - p * p);
        rho.push(p);
    }
    (q, slope, rho)
}

fn deep_drive(spec: &DeepPedSpec, zeta: &[f64], y: &[f64], l: usize) -> Vec<f64> {
    deep_drive_with_slope(spec, zeta, y, l).0
}

/// `v^T dzeta*/dtheta` for every layer through one solve with `(I - J)^T`.
pub fn deep_implicit_grad(spec: &DeepPedSpec, v: &[f64], zeta: &[f64], y: &[f64]) -> Result<GradientBundle> {
    let j = spec.jacobian_blocks(zeta, y)?.to_dense();
    let mut system = j.scale(-1.0);
    system.add_diagonal(1.0);
    let w = solve_transposed(system, v)?;
    let mut out = Vec::with_capacity(spec.depth());
    for l in 1..=spec.depth() {
        let layer = &spec.layers[l - 1];
        let lambda = spec.precision(l);
        let z = &zeta[spec.slice(l)];
        let u = &w[spec.slice(l)];
        let (q, slope, rho) = deep_drive_with_slope(spec, zeta, y, l);
        // the layer's own block: W^T q(eta) / lambda
        let wu = layer.w.matvec(u);
        let t: Vec<f64> = wu.iter().zip(&slope).map(|(a, b)| a * b).collect();
        let mut gw = outer(&q, u, 1.0 / lambda);
        let extra = outer(&t, z, 1.0 / lambda);
        gw.as_mut_slice().iter_mut().zip(extra.as_slice()).for_each(|(a, b)| *a += b);
        let mut gb: Vec<f64> = t.iter().map(|v| v / lambda).collect();
        // the block below reads R(eta^(l)) / sqrt(lambda^(l-1))
        if l >= 2 {
            let p = &w[spec.slice(l - 1)];
            let c = 1.0 / spec.precision(l - 1).sqrt();
            let pr: Vec<f64> = p.iter().zip(&rho).map(|(a, b)| a * b).collect();
            let extra = outer(&pr, z, c);
            gw.as_mut_slice().iter_mut().zip(extra.as_slice()).for_each(|(a, b)| *a += b);
            gb.iter_mut().zip(&pr).for_each(|(g, v)| *g += c * v);
        }
        out.push(ParamGrad { w: gw, b: gb });
    }
    Ok(out)
}

pub fn deep_sample_objective(spec: &DeepPedSpec, zeta: &[f64], y: &[f64]) -> f64 {
    spec.neg_log_posterior(zeta, y) + 0.5 * spec.data_precision * y.iter().map(|v| v * v).sum::<f64>()
}

pub fn deep_sample_objective_grad(spec: &DeepPedSpec, zeta: &[f64], y: &[f64]) -> Result<(f64, GradientBundle)> {
    let mut g = deep_explicit_partials(spec, zeta, y);
    let v = spec.grad_neg_log_posterior(zeta, y);
    for (a, b) in g.iter_mut().zip(deep_implicit_grad(spec, &v, zeta, y)?) {
        a.add_assign(&b);
    }
    Ok((deep_sample_objective(spec, zeta, y), g))
}

pub fn deep_outer_objective(spec: &DeepPedSpec, states: &Matrix, y: &Matrix, weight_decay: &[f64]) -> f64 {
    let data: f64 = (0..y.cols())
        .map(|s| deep_sample_objective(spec, &states.column(s), &y.column(s)))
        .sum();
    let prior: f64 = spec
        .layers
        .iter()
        .zip(weight_decay)
        .map(|(l, wd)| 0.5 * wd * flatten_params(l).iter().map(|v| v * v).sum::<f64>())
        .sum();
    data + prior
}

pub fn deep_outer_gradient(spec: &DeepPedSpec, states: &Matrix, y: &Matrix, weight_decay: &[f64]) -> Result<GradientBundle> {
    let mut total: GradientBundle = spec.layers.iter().map(ParamGrad::zeros_like).collect();
    for s in 0..y.cols() {
        let (_, g) = deep_sample_objective_grad(spec, &states.column(s), &y.column(s))?;
        total.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b));
    }
    for ((g, layer), wd) in total.iter_mut().zip(&spec.layers).zip(weight_decay) {
        g.add_weight_decay(layer, *wd);
    }
    Ok(total)
}

// ---------------------------------------------------------------- optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update; any L2 term must already be in `grads`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

// ---------------------------------------------------------------- loops

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeFrom {
    /// layer 1 is the one reading the data
    DataSide,
    LatentSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// per-layer override of the `10 L d^(l-1)` rule
    pub weight_decay: Option<Vec<f64>>,
    /// layer `k` stays frozen for its first `freeze_period * k` epochs (deep only)
    pub freeze_period: usize,
    pub freeze_from: FreezeFrom,
    pub max_nonconverged_fraction: f64,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: None,
            freeze_period: 5,
            freeze_from: FreezeFrom::DataSide,
            max_nonconverged_fraction: 0.1,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn deep_default() -> Self {
        Self {
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PedError::Validation("batch_size must be positive".into()));
        }
        let rates = [self.learning_rate, self.epsilon];
        if rates.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PedError::Validation("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PedError::Validation("moment decay rates must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.max_nonconverged_fraction) {
            return Err(PedError::Validation("max_nonconverged_fraction must lie in [0, 1]".into()));
        }
        if let Some(wd) = &self.weight_decay {
            if wd.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(PedError::Validation("weight decay must be non-negative".into()));
            }
        }
        self.solver.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Weight decay per layer; `output_dims[l-1]` is `d^(l-1)`.
    pub fn weight_decays(&self, output_dims: &[usize]) -> Result<Vec<f64>> {
        match &self.weight_decay {
            Some(wd) if wd.len() == output_dims.len() => Ok(wd.clone()),
            Some(wd) => Err(PedError::Validation(format!(
                "weight_decay has {} entries for {} layers",
                wd.len(),
                output_dims.len()
            ))),
            None => {
                let depth = output_dims.len() as f64;
                Ok(output_dims.iter().map(|&d| 10.0 * depth * d as f64).collect())
            }
        }
    }

    /// First epoch (0-based) in which layer `l` (1-based from the data) is trained.
    pub fn first_active_epoch(&self, l: usize, depth: usize) -> usize {
        let k = match self.freeze_from {
            FreezeFrom::DataSide => l,
            FreezeFrom::LatentSide => depth + 1 - l,
        };
        self.freeze_period * k
    }
}

/// Prior precision by map: 0.1 for the identity, 1 otherwise.
pub fn default_lambda(map: &CanonicalMap) -> f64 {
    if map.is_linear() {
        0.1
    } else {
        1.0
    }
}

/// `W` iid `N(0, (0.1 / sqrt(l))^2)` with `l` the latent width, `B = 0`.
pub fn init_layer(d: usize, l: usize, lambda: f64, family: ExpFamily, map: CanonicalMap, rng: &mut RngStream) -> Result<PedLayer> {
    let std = 0.1 / (l as f64).sqrt();
    let w = Matrix::from_fn(d, l, |_, _| std * rng.standard_normal());
    PedLayer::new(w, vec![0.0; d], lambda, family, map)
}

/// Widths `d^(0), ..., d^(L)` with one map and precision per layer.
pub fn init_deep(dims: &[usize], data_precision: f64, lambdas: &[f64], maps: &[CanonicalMap], rng: &mut RngStream) -> Result<DeepPedSpec> {
    if dims.len() < 2 || lambdas.len() != dims.len() - 1 || maps.len() != dims.len() - 1 {
        return Err(PedError::Validation("deep init needs L+1 widths and L precisions and maps".into()));
    }
    let parts = (1..dims.len())
        .map(|l| {
            let std = 0.1 / (dims[l] as f64).sqrt();
            let w = Matrix::from_fn(dims[l - 1], dims[l], |_, _| std * rng.standard_normal());
            (w, vec![0.0; dims[l - 1]], lambdas[l - 1], maps[l - 1].clone())
        })
        .collect();
    DeepPedSpec::from_parts(data_precision, parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub objective: f64,
    pub solver_iters_mean: f64,
    pub nonconverged_count: usize,
    pub boundary_dropped: usize,
    /// layers frozen during this step; deep runs only
    pub frozen_layers: Option<Vec<usize>>,
}

/// Where an interrupted run picks up: next epoch, optimizer moments (one per
/// layer) and the warm-start latent cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub next_epoch: usize,
    pub optimizer: Vec<AdamState>,
    pub latents: Matrix,
}

#[derive(Debug, Clone)]
pub struct ShallowTrainOutput {
    pub layer: PedLayer,
    pub history: Vec<LossRecord>,
    pub optimizer: AdamState,
    /// l x N latents from the last pass, zeros for unseen columns
    pub latents: Matrix,
}

#[derive(Debug, Clone)]
pub struct DeepTrainOutput {
    pub spec: DeepPedSpec,
    pub history: Vec<LossRecord>,
    pub optimizer: Vec<AdamState>,
    pub states: Matrix,
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).split(epoch as u64).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn check_abort(cfg: &TrainConfig, epoch: usize, batch_index: usize, nonconverged: usize, batch: usize) -> Result<()> {
    if nonconverged as f64 > cfg.max_nonconverged_fraction * batch as f64 {
        return Err(PedError::SolverAbort {
            epoch,
            batch_index,
            nonconverged,
            batch,
        });
    }
    Ok(())
}

/// Minibatch Adam on the joint MAP objective of a single layer.
pub fn train_shallow(y: &Matrix, initial: &PedLayer, cfg: &TrainConfig) -> Result<ShallowTrainOutput> {
    train_shallow_with(y, initial, cfg, |_, _| {})
}

/// As [`train_shallow`], calling `on_epoch(epoch, layer)` after every epoch.
pub fn train_shallow_with(
    y: &Matrix,
    initial: &PedLayer,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, &PedLayer),
) -> Result<ShallowTrainOutput> {
    resume_shallow(y, initial, None, cfg, on_epoch)
}

/// Continues a run up to `cfg.epochs` total epochs; batch order depends only on
/// the seed and the epoch, so a resumed run matches an uninterrupted one.
pub fn resume_shallow(
    y: &Matrix,
    initial: &PedLayer,
    resume: Option<ResumeState>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &PedLayer),
) -> Result<ShallowTrainOutput> {
    cfg.validate()?;
    if y.rows() != initial.d() {
        return Err(PedError::Validation("data and layer dimensions differ".into()));
    }
    let wd = cfg.weight_decays(&[initial.d()])?[0];
    let adam = cfg.adam();
    let mut layer = initial.clone();
    let mut params = flatten_params(&layer);
    let (start, mut state, mut cache) = match resume {
        Some(r) => {
            if r.optimizer.len() != 1 || r.optimizer[0].m.len() != params.len() || r.latents.shape() != (layer.l(), y.cols()) {
                return Err(PedError::Validation("resume state does not match the layer and data".into()));
            }
            (r.next_epoch, r.optimizer.into_iter().next().unwrap(), r.latents)
        }
        None => (0, AdamState::new(params.len()), Matrix::zeros(layer.l(), y.cols())),
    };
    let mut history = Vec::new();
    if y.cols() == 0 {
        return Ok(ShallowTrainOutput { layer, history, optimizer: state, latents: cache });
    }
    for epoch in start..cfg.epochs {
        for (bi, idx) in batches(y.cols(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let yb = y.select_columns(&idx);
            let warm = cache.select_columns(&idx);
            let out = infer_all(&yb, &layer, &cfg.solver, &InferOptions {
                warm_start: Some(&warm),
                ..InferOptions::default()
            })?;
            let bad = out.nonconverged().len();
            check_abort(cfg, epoch, bi, bad, idx.len())?;
            for (k, &s) in idx.iter().enumerate() {
                if out.results[k].converged {
                    cache.set_column(s, &out.results[k].z_star);
                }
            }
            let per_sample: Vec<Option<Result<(f64, ParamGrad)>>> = (0..idx.len())
                .into_par_iter()
                .map(|k| {
                    if !out.results[k].converged || out.boundary[k] {
                        return None;
                    }
                    Some(sample_objective_grad(&layer, &out.results[k].z_star, &yb.column(k)))
                })
                .collect();
            let mut objective = 0.0;
            let mut grad = ParamGrad::zeros_like(&layer);
            let mut dropped = 0;
            for (k, r) in per_sample.into_iter().enumerate() {
                match r {
                    Some(r) => {
                        let (f, g) = r?;
                        objective += f;
                        grad.add_assign(&g);
                    }
                    None => dropped += out.boundary[k] as usize,
                }
            }
            objective += 0.5 * wd * params.iter().map(|v| v * v).sum::<f64>();
            grad.add_weight_decay(&layer, wd);
            history.push(LossRecord {
                epoch,
                batch: bi,
                objective,
                solver_iters_mean: out.mean_iterations(),
                nonconverged_count: bad,
                boundary_dropped: dropped,
                frozen_layers: None,
            });
            adam_step(&mut params, &grad.flat(), &mut state, &adam);
            set_params(&mut layer, &params);
        }
        on_epoch(epoch, &layer);
    }
    Ok(ShallowTrainOutput { layer, history, optimizer: state, latents: cache })
}

/// Minibatch Adam over a deep stack with the per-layer freeze schedule.
pub fn train_deep(y: &Matrix, initial: &DeepPedSpec, cfg: &TrainConfig) -> Result<DeepTrainOutput> {
    train_deep_with(y, initial, cfg, |_, _| {})
}

pub fn train_deep_with(
    y: &Matrix,
    initial: &DeepPedSpec,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, &DeepPedSpec),
) -> Result<DeepTrainOutput> {
    resume_deep(y, initial, None, cfg, on_epoch)
}

/// Deep counterpart of [`resume_shallow`].
pub fn resume_deep(
    y: &Matrix,
    initial: &DeepPedSpec,
    resume: Option<ResumeState>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &DeepPedSpec),
) -> Result<DeepTrainOutput> {
    cfg.validate()?;
    if y.rows() != initial.observed_dim() {
        return Err(PedError::Validation("data and spec dimensions differ".into()));
    }
    let depth = initial.depth();
    let out_dims: Vec<usize> = initial.layers.iter().map(|l| l.d()).collect();
    let wds = cfg.weight_decays(&out_dims)?;
    let adam = cfg.adam();
    let mut spec = initial.clone();
    let mut params: Vec<Vec<f64>> = spec.layers.iter().map(flatten_params).collect();
    let (start, mut states, mut cache) = match resume {
        Some(r) => {
            let fits = r.optimizer.len() == depth
                && r.optimizer.iter().zip(&params).all(|(s, p)| s.m.len() == p.len())
                && r.latents.shape() == (spec.state_dim(), y.cols());
            if !fits {
                return Err(PedError::Validation("resume state does not match the spec and data".into()));
            }
            (r.next_epoch, r.optimizer, r.latents)
        }
        None => (
            0,
            params.iter().map(|p| AdamState::new(p.len())).collect(),
            Matrix::zeros(spec.state_dim(), y.cols()),
        ),
    };
    let mut history = Vec::new();
    if y.cols() == 0 {
        return Ok(DeepTrainOutput { spec, history, optimizer: states, states: cache });
    }
    for epoch in start..cfg.epochs {
        let frozen: Vec<usize> = (1..=depth).filter(|&l| epoch < cfg.first_active_epoch(l, depth)).collect();
        for (bi, idx) in batches(y.cols(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let yb = y.select_columns(&idx);
            let warm = cache.select_columns(&idx);
            let out = infer_deep_all(&yb, &spec, &cfg.solver, &DeepInferOptions {
                warm_start: Some(&warm),
                ..DeepInferOptions::default()
            })?;
            let bad = out.nonconverged().len();
            check_abort(cfg, epoch, bi, bad, idx.len())?;
            for (k, &s) in idx.iter().enumerate() {
                if out.results[k].converged {
                    cache.set_column(s, &out.results[k].z_star);
                }
            }
            let per_sample: Vec<Option<Result<(f64, GradientBundle)>>> = (0..idx.len())
                .into_par_iter()
                .map(|k| {
                    if !out.results[k].converged || out.boundary[k] {
                        return None;
                    }
                    Some(deep_sample_objective_grad(&spec, &out.results[k].z_star, &yb.column(k)))
                })
                .collect();
            let mut objective = 0.0;
            let mut grad: GradientBundle = spec.layers.iter().map(ParamGrad::zeros_like).collect();
            let mut dropped = 0;
            for (k, r) in per_sample.into_iter().enumerate() {
                match r {
                    Some(r) => {
                        let (f, g) = r?;
                        objective += f;
                        grad.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b));
                    }
                    None => dropped += out.boundary[k] as usize,
                }
            }
            for l in 0..depth {
                objective += 0.5 * wds[l] * params[l].iter().map(|v| v * v).sum::<f64>();
                grad[l].add_weight_decay(&spec.layers[l], wds[l]);
            }
            history.push(LossRecord {
                epoch,
                batch: bi,
                objective,
                solver_iters_mean: out.mean_iterations(),
                nonconverged_count: bad,
                boundary_dropped: dropped,
                frozen_layers: Some(frozen.clone()),
            });
            for l in 1..=depth {
                if frozen.contains(&l) {
                    continue;
                }
                adam_step(&mut params[l - 1], &grad[l - 1].flat(), &mut states[l - 1], &adam);
                set_params(&mut spec.layers[l - 1], &params[l - 1]);
            }
        }
        on_epoch(epoch, &spec);
    }
    Ok(DeepTrainOutput { spec, history, optimizer: states, states: cache })
}

/// Mean objective per epoch, in epoch order.
pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let epochs = history.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let vals: Vec<f64> = history.iter().filter(|r| r.epoch == e).map(|r| r.objective).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect()
}
