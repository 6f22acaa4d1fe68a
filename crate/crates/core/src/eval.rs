//! Downstream evaluation: PCA baseline, a small regression head, backbone
//! fine-tuning through the fixed point, and latent alignment metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deep::{infer_deep_all, DeepInferOptions, DeepPedSpec};
use crate::error::{PedError, Result};
use crate::fpsolve::SolverConfig;
use crate::numkernel::linalg::{min_singular_value, qr_mgs, solve_general, symmetric_eigen};
use crate::numkernel::matrix::Matrix;
use crate::numkernel::rng::RngStream;
use crate::shallow::{infer_all, InferOptions, PedLayer};
use crate::train::{
    adam_step, deep_implicit_grad, flatten_params, implicit_grad, set_params, AdamConfig, AdamState, ParamGrad,
};

// ---------------------------------------------------------------- PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// population standard deviation, 1 for constant features
    pub scale: Vec<f64>,
    /// d x l orthonormal directions, leading first
    pub components: Matrix,
    /// variances of the standardized data along each component
    pub explained_variance: Vec<f64>,
}

/// Standardizes each feature and keeps the top `l` principal directions.
pub fn pca_fit(y: &Matrix, l: usize) -> Result<PcaProjector> {
    let (d, n) = y.shape();
    if n < l || l == 0 || l > d {
        return Err(PedError::Validation(format!("PCA needs 1 <= l <= min(d, N); got l={l}, d={d}, N={n}")));
    }
    let mean: Vec<f64> = (0..d).map(|i| y.row(i).iter().sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|i| {
            let var = y.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let x = Matrix::from_fn(d, n, |i, s| (y[(i, s)] - mean[i]) / scale[i]);
    let cov = x.matmul(&x.transpose()).scale(1.0 / n as f64);
    let (vals, vecs) = symmetric_eigen(&cov)?;
    let mut components = Matrix::zeros(d, l);
    let mut explained = Vec::with_capacity(l);
    for k in 0..l {
        let src = d - 1 - k;
        let mut col = vecs.column(src);
        // sign convention: the largest-magnitude entry is positive
        let pivot = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        components.set_column(k, &col);
        explained.push(vals[src]);
    }
    Ok(PcaProjector {
        mean,
        scale,
        components,
        explained_variance: explained,
    })
}

impl PcaProjector {
    pub fn project(&self, y: &Matrix) -> Matrix {
        let x = Matrix::from_fn(y.rows(), y.cols(), |i, s| (y[(i, s)] - self.mean[i]) / self.scale[i]);
        self.components.transpose().matmul(&x)
    }

    pub fn reconstruct(&self, scores: &Matrix) -> Matrix {
        let x = self.components.matmul(scores);
        Matrix::from_fn(x.rows(), x.cols(), |i, s| self.mean[i] + self.scale[i] * x[(i, s)])
    }
}

// ---------------------------------------------------------------- head

pub const HEAD_HIDDEN: usize = 100;

/// `Linear(hidden) -> ReLU -> Linear(1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadNet {
    /// hidden x l
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    /// derivative of the output in the input
    pub dx: Vec<f64>,
}

impl HeadNet {
    /// Uniform `+-1/sqrt(fan_in)` for every weight and bias.
    pub fn init(l: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let b1 = 1.0 / (l as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::from_fn(hidden, l, |_, _| rng.uniform_range(-b1, b1));
        let bias1 = (0..hidden).map(|_| rng.uniform_range(-b1, b1)).collect();
        let w2 = (0..hidden).map(|_| rng.uniform_range(-b2, b2)).collect();
        let bias2 = rng.uniform_range(-b2, b2);
        Self {
            w1,
            b1: bias1,
            w2,
            b2: bias2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.w1.matvec(x);
        h.iter_mut().zip(&self.b1).for_each(|(a, b)| *a += b);
        h
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let h = self.hidden_pre(x);
        self.b2 + h.iter().zip(&self.w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>()
    }

    /// Output and its gradients; the ReLU derivative at 0 is taken as 0.
    pub fn backward(&self, x: &[f64]) -> (f64, HeadGrad) {
        let h = self.hidden_pre(x);
        let act: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        let out = self.b2 + act.iter().zip(&self.w2).map(|(a, w)| a * w).sum::<f64>();
        let gh: Vec<f64> = h.iter().zip(&self.w2).map(|(v, w)| if *v > 0.0 { *w } else { 0.0 }).collect();
        let w1 = Matrix::from_fn(self.w1.rows(), self.w1.cols(), |i, j| gh[i] * x[j]);
        let dx = self.w1.tr_matvec(&gh);
        (
            out,
            HeadGrad {
                w1,
                b1: gh,
                w2: act,
                b2: 1.0,
                dx,
            },
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend(&self.b1);
        out.extend(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let n1 = self.w1.as_slice().len();
        let h = self.b1.len();
        self.w1.as_mut_slice().copy_from_slice(&p[..n1]);
        self.b1.copy_from_slice(&p[n1..n1 + h]);
        self.w2.copy_from_slice(&p[n1 + h..n1 + 2 * h]);
        self.b2 = p[n1 + 2 * h];
    }
}

impl HeadGrad {
    /// Flattened in [`HeadNet::flatten`] order, scaled by `c`.
    pub fn flat_scaled(&self, c: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self.w1.as_slice().iter().map(|v| c * v).collect();
        out.extend(self.b1.iter().map(|v| c * v));
        out.extend(self.w2.iter().map(|v| c * v));
        out.push(c * self.b2);
        out
    }
}

// ---------------------------------------------------------------- downstream

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub train_fraction: f64,
    pub max_nonconverged_fraction: f64,
    pub solver: SolverConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 500,
            learning_rate: 1e-3,
            hidden: HEAD_HIDDEN,
            train_fraction: 0.8,
            max_nonconverged_fraction: 0.1,
            solver: SolverConfig::default(),
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(PedError::Validation("batch_size and hidden must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(PedError::Validation("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PedError::Validation("learning rate must be positive".into()));
        }
        self.solver.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backbone<'a> {
    FrozenPca,
    /// l x N precomputed features, used as-is
    External { name: String, features: &'a Matrix },
    Ped { layer: &'a PedLayer, finetune: bool },
    DeepPed { spec: &'a DeepPedSpec, finetune: bool },
}

impl Backbone<'_> {
    pub fn name(&self) -> String {
        match self {
            Backbone::FrozenPca => "frozen-pca".into(),
            Backbone::External { name, .. } => name.clone(),
            Backbone::Ped { finetune: true, .. } => "ped-finetune".into(),
            Backbone::Ped { finetune: false, .. } => "ped-frozen".into(),
            Backbone::DeepPed { finetune: true, .. } => "deep-ped-finetune".into(),
            Backbone::DeepPed { finetune: false, .. } => "deep-ped-frozen".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub backbone: String,
    pub seeds: Vec<SeedResult>,
    pub wins: usize,
}

/// `z_1 + z_2` per column.
pub fn sum_target(z_true: &Matrix) -> Vec<f64> {
    (0..z_true.cols()).map(|s| z_true[(0, s)] + z_true[(1, s)]).collect()
}

/// Disjoint train/test index sets from a seeded shuffle.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut idx);
    let cut = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

fn mse(head: &HeadNet, feats: &Matrix, target: &[f64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter()
        .map(|&s| (head.forward(&feats.column(s)) - target[s]).powi(2))
        .sum::<f64>()
        / idx.len() as f64
}

fn shuffled_batches(idx: &[usize], batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    rng.shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Trains a head on fixed features with the summed squared error.
pub fn fit_head(feats: &Matrix, target: &[f64], train: &[usize], cfg: &DownstreamConfig, rng: &mut RngStream) -> HeadNet {
    let mut head = HeadNet::init(feats.rows(), cfg.hidden, rng);
    let mut params = head.flatten();
    let mut state = AdamState::new(params.len());
    let adam = cfg.adam();
    for _ in 0..cfg.epochs {
        for batch in shuffled_batches(train, cfg.batch_size, rng) {
            let mut grad = vec![0.0; params.len()];
            for &s in &batch {
                let (out, g) = head.backward(&feats.column(s));
                let c = 2.0 * (out - target[s]);
                grad.iter_mut().zip(g.flat_scaled(c)).for_each(|(a, b)| *a += b);
            }
            adam_step(&mut params, &grad, &mut state, &adam);
            head.set_flat(&params);
        }
    }
    head
}

fn frozen_result(feats: &Matrix, target: &[f64], seed: u64, cfg: &DownstreamConfig) -> SeedResult {
    let (train, test) = split_indices(target.len(), cfg.train_fraction, seed);
    let mut rng = RngStream::new(seed).split(1);
    let head = fit_head(feats, target, &train, cfg, &mut rng);
    SeedResult {
        seed,
        train_mse: mse(&head, feats, target, &train),
        test_mse: mse(&head, feats, target, &test),
    }
}

fn check_abort(cfg: &DownstreamConfig, epoch: usize, batch_index: usize, bad: usize, batch: usize) -> Result<()> {
    if bad as f64 > cfg.max_nonconverged_fraction * batch as f64 {
        return Err(PedError::SolverAbort {
            epoch,
            batch_index,
            nonconverged: bad,
            batch,
        });
    }
    Ok(())
}

/// Head and layer trained jointly; head gradients reach `W, B` through the fixed point.
pub fn finetune_shallow(
    layer: &PedLayer,
    y: &Matrix,
    target: &[f64],
    seed: u64,
    cfg: &DownstreamConfig,
) -> Result<(SeedResult, PedLayer, HeadNet)> {
    let (train, test) = split_indices(target.len(), cfg.train_fraction, seed);
    let mut rng = RngStream::new(seed).split(1);
    let mut layer = layer.clone();
    let mut head = HeadNet::init(layer.l(), cfg.hidden, &mut rng);
    let (mut hp, mut lp) = (head.flatten(), flatten_params(&layer));
    let (mut hs, mut ls) = (AdamState::new(hp.len()), AdamState::new(lp.len()));
    let adam = cfg.adam();
    let mut cache = Matrix::zeros(layer.l(), y.cols());
    for epoch in 0..cfg.epochs {
        for (bi, batch) in shuffled_batches(&train, cfg.batch_size, &mut rng).into_iter().enumerate() {
            let yb = y.select_columns(&batch);
            let warm = cache.select_columns(&batch);
            let out = infer_all(&yb, &layer, &cfg.solver, &InferOptions {
                warm_start: Some(&warm),
                ..InferOptions::default()
            })?;
            check_abort(cfg, epoch, bi, out.nonconverged().len(), batch.len())?;
            let per: Vec<Option<Result<(Vec<f64>, Option<ParamGrad>)>>> = (0..batch.len())
                .into_par_iter()
                .map(|k| {
                    let r = &out.results[k];
                    if !r.converged {
                        return None;
                    }
                    let (pred, g) = head.backward(&r.z_star);
                    let c = 2.0 * (pred - target[batch[k]]);
                    let hg = g.flat_scaled(c);
                    if out.boundary[k] {
                        return Some(Ok((hg, None)));
                    }
                    let v: Vec<f64> = g.dx.iter().map(|d| c * d).collect();
                    Some(implicit_grad(&layer, &v, &r.z_star, &yb.column(k)).map(|lg| (hg, Some(lg))))
                })
                .collect();
            let mut hgrad = vec![0.0; hp.len()];
            let mut lgrad = ParamGrad::zeros_like(&layer);
            for (k, item) in per.into_iter().enumerate() {
                if out.results[k].converged {
                    cache.set_column(batch[k], &out.results[k].z_star);
                }
                if let Some(item) = item {
                    let (hg, lg) = item?;
                    hgrad.iter_mut().zip(hg).for_each(|(a, b)| *a += b);
                    if let Some(lg) = lg {
                        lgrad.add_assign(&lg);
                    }
                }
            }
            adam_step(&mut hp, &hgrad, &mut hs, &adam);
            head.set_flat(&hp);
            adam_step(&mut lp, &lgrad.flat(), &mut ls, &adam);
            set_params(&mut layer, &lp);
        }
    }
    let feats = infer_all(y, &layer, &cfg.solver, &InferOptions {
        warm_start: Some(&cache),
        ..InferOptions::default()
    })?
    .z;
    let result = SeedResult {
        seed,
        train_mse: mse(&head, &feats, target, &train),
        test_mse: mse(&head, &feats, target, &test),
    };
    Ok((result, layer, head))
}

/// Deep variant of [`finetune_shallow`]; only the bottleneck feeds the head.
pub fn finetune_deep(
    spec: &DeepPedSpec,
    y: &Matrix,
    target: &[f64],
    seed: u64,
    cfg: &DownstreamConfig,
) -> Result<(SeedResult, DeepPedSpec, HeadNet)> {
    let (train, test) = split_indices(target.len(), cfg.train_fraction, seed);
    let mut rng = RngStream::new(seed).split(1);
    let mut spec = spec.clone();
    let top = spec.slice(spec.depth());
    let mut head = HeadNet::init(top.len(), cfg.hidden, &mut rng);
    let mut hp = head.flatten();
    let mut hs = AdamState::new(hp.len());
    let mut lps: Vec<Vec<f64>> = spec.layers.iter().map(flatten_params).collect();
    let mut lss: Vec<AdamState> = lps.iter().map(|p| AdamState::new(p.len())).collect();
    let adam = cfg.adam();
    let dim = spec.state_dim();
    let mut cache = Matrix::zeros(dim, y.cols());
    for epoch in 0..cfg.epochs {
        for (bi, batch) in shuffled_batches(&train, cfg.batch_size, &mut rng).into_iter().enumerate() {
            let yb = y.select_columns(&batch);
            let warm = cache.select_columns(&batch);
            let out = infer_deep_all(&yb, &spec, &cfg.solver, &DeepInferOptions {
                warm_start: Some(&warm),
                ..DeepInferOptions::default()
            })?;
            check_abort(cfg, epoch, bi, out.nonconverged().len(), batch.len())?;
            type Item = (Vec<f64>, Option<Vec<ParamGrad>>);
            let per: Vec<Option<Result<Item>>> = (0..batch.len())
                .into_par_iter()
                .map(|k| {
                    let r = &out.results[k];
                    if !r.converged {
                        return None;
                    }
                    let (pred, g) = head.backward(&r.z_star[top.clone()]);
                    let c = 2.0 * (pred - target[batch[k]]);
                    let hg = g.flat_scaled(c);
                    if out.boundary[k] {
                        return Some(Ok((hg, None)));
                    }
                    let mut v = vec![0.0; dim];
                    v[top.clone()].iter_mut().zip(&g.dx).for_each(|(a, d)| *a = c * d);
                    Some(deep_implicit_grad(&spec, &v, &r.z_star, &yb.column(k)).map(|lg| (hg, Some(lg))))
                })
                .collect();
            let mut hgrad = vec![0.0; hp.len()];
            let mut lgrad: Vec<ParamGrad> = spec.layers.iter().map(ParamGrad::zeros_like).collect();
            for (k, item) in per.into_iter().enumerate() {
                if out.results[k].converged {
                    cache.set_column(batch[k], &out.results[k].z_star);
                }
                if let Some(item) = item {
                    let (hg, lg) = item?;
                    hgrad.iter_mut().zip(hg).for_each(|(a, b)| *a += b);
                    if let Some(lg) = lg {
                        lgrad.iter_mut().zip(&lg).for_each(|(a, b)| a.add_assign(b));
                    }
                }
            }
            adam_step(&mut hp, &hgrad, &mut hs, &adam);
            head.set_flat(&hp);
            for l in 0..spec.depth() {
                adam_step(&mut lps[l], &lgrad[l].flat(), &mut lss[l], &adam);
                set_params(&mut spec.layers[l], &lps[l]);
            }
        }
    }
    let feats = infer_deep_all(y, &spec, &cfg.solver, &DeepInferOptions {
        warm_start: Some(&cache),
        ..DeepInferOptions::default()
    })?
    .bottleneck;
    let result = SeedResult {
        seed,
        train_mse: mse(&head, &feats, target, &train),
        test_mse: mse(&head, &feats, target, &test),
    };
    Ok((result, spec, head))
}

/// One backbone on one dataset across seeds.
pub fn downstream_run(
    backbone: &Backbone,
    y: &Matrix,
    z_true: &Matrix,
    seeds: &[u64],
    cfg: &DownstreamConfig,
) -> Result<DownstreamReport> {
    cfg.validate()?;
    if z_true.rows() < 2 || z_true.cols() != y.cols() {
        return Err(PedError::Validation("ground-truth latents must be 2 x N".into()));
    }
    let target = sum_target(z_true);
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = match backbone {
            Backbone::FrozenPca => {
                let (train, _) = split_indices(target.len(), cfg.train_fraction, seed);
                let pca = pca_fit(&y.select_columns(&train), 2)?;
                frozen_result(&pca.project(y), &target, seed, cfg)
            }
            Backbone::External { features, .. } => {
                if features.cols() != y.cols() {
                    return Err(PedError::Validation("external features must have one column per sample".into()));
                }
                frozen_result(features, &target, seed, cfg)
            }
            Backbone::Ped { layer, finetune: false } => {
                let z = infer_all(y, layer, &cfg.solver, &InferOptions::default())?.z;
                frozen_result(&z, &target, seed, cfg)
            }
            Backbone::Ped { layer, finetune: true } => finetune_shallow(layer, y, &target, seed, cfg)?.0,
            Backbone::DeepPed { spec, finetune: false } => {
                let z = infer_deep_all(y, spec, &cfg.solver, &DeepInferOptions::default())?.bottleneck;
                frozen_result(&z, &target, seed, cfg)
            }
            Backbone::DeepPed { spec, finetune: true } => finetune_deep(spec, y, &target, seed, cfg)?.0,
        };
        results.push(r);
    }
    Ok(DownstreamReport {
        backbone: backbone.name(),
        seeds: results,
        wins: 0,
    })
}

/// Per seed position, the strictly lowest test MSE wins; ties go to the earlier report.
pub fn tally_wins(reports: &mut [DownstreamReport]) {
    reports.iter_mut().for_each(|r| r.wins = 0);
    let rounds = reports.iter().map(|r| r.seeds.len()).min().unwrap_or(0);
    for k in 0..rounds {
        let mut best = 0;
        for (i, r) in reports.iter().enumerate().skip(1) {
            if r.seeds[k].test_mse < reports[best].seeds[k].test_mse {
                best = i;
            }
        }
        if !reports.is_empty() {
            reports[best].wins += 1;
        }
    }
}

// ---------------------------------------------------------------- alignment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// k x (l + 1): linear part then offset, mapping learned to true latents
    pub map: Matrix,
    pub r2: Vec<f64>,
    pub rank_deficient: bool,
}

/// Least-squares affine fit from learned to true latents with per-coordinate R^2.
pub fn align_latents(learned: &Matrix, truth: &Matrix) -> Result<Alignment> {
    let (l, m) = learned.shape();
    if m < 3 || truth.cols() != m {
        return Err(PedError::Validation("alignment needs at least 3 matching columns".into()));
    }
    let k = truth.rows();
    let design = Matrix::from_fn(m, l + 1, |s, j| if j < l { learned[(j, s)] } else { 1.0 });
    let top = design.as_slice().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let smin = min_singular_value(&design);
    if !(top > 0.0) || smin <= 1e-10 * top * (m as f64).sqrt() {
        return Ok(Alignment {
            map: Matrix::zeros(k, l + 1),
            r2: vec![0.0; k],
            rank_deficient: true,
        });
    }
    let gram = design.gram();
    let mut map = Matrix::zeros(k, l + 1);
    let mut r2 = Vec::with_capacity(k);
    for c in 0..k {
        let t = truth.row(c);
        let coef = solve_general(&gram, &design.tr_matvec(t))?;
        let fit = design.matvec(&coef);
        let mean = t.iter().sum::<f64>() / m as f64;
        let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = t.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum();
        r2.push(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 });
        for j in 0..=l {
            map[(c, j)] = coef[j];
        }
    }
    Ok(Alignment {
        map,
        r2,
        rank_deficient: false,
    })
}

/// Latents expressed as `R Z` where `W = Q R`, removing the rotation ambiguity of `W`.
pub fn qr_view(w: &Matrix, z: &Matrix) -> Matrix {
    let (_, r) = qr_mgs(w);
    r.matmul(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::CanonicalMap;
    use crate::expfam::ExpFamily;

    #[test]
    fn pca_recovers_subspace() {
        let mut rng = RngStream::new(1);
        // orthonormal columns with equal row norms so standardization is isotropic
        let basis = Matrix::from_fn(6, 2, |i, k| if k == 0 || i % 2 == 0 { 1.0 } else { -1.0 } / 6f64.sqrt());
        let scores = Matrix::from_fn(2, 400, |i, _| (3.0 - i as f64) * rng.standard_normal());
        let noise = 1e-4;
        let y = basis.matmul(&scores).add(&Matrix::from_fn(6, 400, |_, _| noise * rng.standard_normal()));
        let p = pca_fit(&y, 2).unwrap();
        let ctc = p.components.gram();
        assert!(ctc.max_abs_diff(&Matrix::identity(2)) <= 1e-10);
        let rec = p.reconstruct(&p.project(&y));
        let rms = (rec.sub(&y).frobenius_sq() / (6.0 * 400.0)).sqrt();
        assert!(rms <= noise * 2.0, "{rms}");
        let s = p.project(&y);
        let cov = s.matmul(&s.transpose()).scale(1.0 / 400.0);
        assert!(cov[(0, 1)].abs() <= 1e-8 * cov[(0, 0)]);
        assert!(cov[(0, 0)] >= cov[(1, 1)]);
        assert!(pca_fit(&Matrix::zeros(6, 1), 2).is_err());
    }

    #[test]
    fn pca_order_invariant() {
        let mut rng = RngStream::new(2);
        let y = Matrix::from_fn(5, 50, |i, _| (i as f64 + 1.0) * rng.standard_normal());
        let mut idx: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut idx);
        let a = pca_fit(&y, 2).unwrap();
        let b = pca_fit(&y.select_columns(&idx), 2).unwrap();
        assert!(a.components.max_abs_diff(&b.components) <= 1e-10);
    }

    #[test]
    fn head_examples() {
        let head = HeadNet {
            w1: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            b1: vec![0.0],
            w2: vec![2.0],
            b2: 1.0,
        };
        assert_eq!(head.forward(&[3.0]), 7.0);
        let zero = HeadNet {
            w1: Matrix::zeros(4, 2),
            b1: vec![0.0; 4],
            w2: vec![0.0; 4],
            b2: 0.25,
        };
        assert_eq!(zero.forward(&[1.0, -3.0]), 0.25);
    }

    #[test]
    fn head_gradients() {
        let mut rng = RngStream::new(3);
        for _ in 0..10 {
            let head = HeadNet::init(3, 7, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let (_, g) = head.backward(&x);
            let flat = head.flatten();
            let analytic = g.flat_scaled(1.0);
            for k in 0..flat.len() {
                let h = 1e-6;
                let mut p = flat.clone();
                p[k] += h;
                let mut hp = head.clone();
                hp.set_flat(&p);
                p[k] -= 2.0 * h;
                let mut hm = head.clone();
                hm.set_flat(&p);
                let fd = (hp.forward(&x) - hm.forward(&x)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() / (1.0 + analytic[k].abs()) <= 1e-5);
            }
            for j in 0..3 {
                let mut xp = x.clone();
                xp[j] += 1e-6;
                let mut xm = x.clone();
                xm[j] -= 1e-6;
                let fd = (head.forward(&xp) - head.forward(&xm)) / 2e-6;
                assert!((fd - g.dx[j]).abs() <= 1e-5 * (1.0 + g.dx[j].abs()));
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let (a, b) = split_indices(101, 0.8, 4);
        assert_eq!(a.len() + b.len(), 101);
        assert_eq!(a.len(), 81);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(split_indices(101, 0.8, 4), (a, b));
    }

    #[test]
    fn oracle_and_constant_backbones() {
        let grid = crate::datagen::make_shape_latents(crate::datagen::DEFAULT_RESOLUTION).unwrap().subsample(10_000, 5);
        let z = grid.z;
        let y = Matrix::zeros(3, z.cols());
        let cfg = DownstreamConfig::default();
        let oracle = downstream_run(&Backbone::External { name: "oracle".into(), features: &z }, &y, &z, &[0], &cfg).unwrap();
        assert!(oracle.seeds[0].test_mse <= 1e-3, "{:?}", oracle.seeds);
        let zero = Matrix::zeros(2, z.cols());
        let cfg_short = DownstreamConfig { epochs: 100, ..cfg };
        let c = downstream_run(&Backbone::External { name: "zero".into(), features: &zero }, &y, &z, &[0], &cfg_short).unwrap();
        let (_, test) = split_indices(z.cols(), 0.8, 0);
        let t = sum_target(&z);
        let mean = test.iter().map(|&s| t[s]).sum::<f64>() / test.len() as f64;
        let var = test.iter().map(|&s| (t[s] - mean).powi(2)).sum::<f64>() / test.len() as f64;
        assert!((c.seeds[0].test_mse - var).abs() <= 0.05 * var, "{} {var}", c.seeds[0].test_mse);
    }

    #[test]
    fn frozen_ped_leaves_backbone_unchanged() {
        let mut rng = RngStream::new(6);
        let w = Matrix::from_fn(5, 2, |_, _| rng.standard_normal());
        let layer = PedLayer::new(w, vec![0.0; 5], 0.1, ExpFamily::Gaussian, CanonicalMap::Identity).unwrap();
        let before = layer.clone();
        let z = Matrix::from_fn(2, 200, |_, _| rng.standard_normal());
        let y = layer.w.matmul(&z);
        let cfg = DownstreamConfig { epochs: 3, batch_size: 50, ..DownstreamConfig::default() };
        let r = downstream_run(&Backbone::Ped { layer: &layer, finetune: false }, &y, &z, &[1, 2], &cfg).unwrap();
        assert_eq!(r.seeds.len(), 2);
        assert_eq!(layer, before);
        let (res, tuned, _) = finetune_shallow(&layer, &y, &sum_target(&z), 1, &cfg).unwrap();
        assert!(res.test_mse.is_finite());
        assert_ne!(tuned, layer);
    }

    #[test]
    fn finetune_gradient_matches_finite_differences() {
        // head loss through z*(theta): compare the implicit layer gradient with re-solving
        let mut rng = RngStream::new(7);
        let w = Matrix::from_fn(4, 2, |_, _| 0.5 * rng.standard_normal());
        let layer = PedLayer::new(w, vec![0.1; 4], 1.0, ExpFamily::Bernoulli, CanonicalMap::trelu(0.5).unwrap()).unwrap();
        let head = HeadNet::init(2, 5, &mut rng);
        let y = [1.0, 0.0, 1.0, 1.0];
        let cfg = SolverConfig { tol: 1e-13, max_iter: 2000, ..SolverConfig::default() };
        let solve = |l: &PedLayer| {
            let ym = Matrix::from_vec(4, 1, y.to_vec()).unwrap();
            infer_all(&ym, l, &cfg, &InferOptions::default()).unwrap().z.column(0)
        };
        let loss = |l: &PedLayer| (head.forward(&solve(l)) - 0.3).powi(2);
        let z = solve(&layer);
        let (pred, g) = head.backward(&z);
        let v: Vec<f64> = g.dx.iter().map(|d| 2.0 * (pred - 0.3) * d).collect();
        let analytic = implicit_grad(&layer, &v, &z, &y).unwrap().flat();
        let base = flatten_params(&layer);
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += 1e-6;
            let mut lp = layer.clone();
            set_params(&mut lp, &p);
            p[k] -= 2e-6;
            let mut lm = layer.clone();
            set_params(&mut lm, &p);
            let fd = (loss(&lp) - loss(&lm)) / 2e-6;
            assert!((fd - analytic[k]).abs() <= 1e-5 * (1.0 + analytic[k].abs()));
        }
    }

    #[test]
    fn wins_tally() {
        let rep = |name: &str, v: &[f64]| DownstreamReport {
            backbone: name.into(),
            seeds: v.iter().enumerate().map(|(i, m)| SeedResult { seed: i as u64, train_mse: 0.0, test_mse: *m }).collect(),
            wins: 0,
        };
        let mut rs = vec![rep("a", &[1.0, 2.0, 0.5]), rep("b", &[0.5, 2.0, 0.7])];
        tally_wins(&mut rs);
        assert_eq!((rs[0].wins, rs[1].wins), (2, 1));
    }

    #[test]
    fn alignment_examples() {
        let mut rng = RngStream::new(8);
        let truth = Matrix::from_fn(2, 500, |_, _| rng.standard_normal());
        let (c, s) = (0.6_f64, 0.8_f64);
        let rot = Matrix::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        let a = align_latents(&rot.matmul(&truth), &truth).unwrap();
        assert!(a.r2.iter().all(|r| (r - 1.0).abs() <= 1e-10));
        let aff = Matrix::from_fn(2, 500, |i, j| if i == 0 { 2.0 * truth[(0, j)] + 1.0 } else { -truth[(1, j)] });
        let a = align_latents(&aff, &truth).unwrap();
        assert!(a.r2.iter().all(|r| (r - 1.0).abs() <= 1e-10));
        assert!((a.map[(0, 0)] - 0.5).abs() < 1e-10 && (a.map[(0, 2)] + 0.5).abs() < 1e-10);
        let big = Matrix::from_fn(2, 10_000, |_, _| rng.standard_normal());
        let noise = Matrix::from_fn(2, 10_000, |_, _| rng.standard_normal());
        let a = align_latents(&noise, &big).unwrap();
        assert!(a.r2.iter().all(|r| *r <= 0.01));
        let flat = Matrix::zeros(2, 500);
        assert!(align_latents(&flat, &truth).unwrap().rank_deficient);
    }

    #[test]
    fn qr_view_preserves_geometry() {
        let mut rng = RngStream::new(9);
        let w = Matrix::from_fn(6, 2, |_, _| rng.standard_normal());
        let z = Matrix::from_fn(2, 20, |_, _| rng.standard_normal());
        let rz = qr_view(&w, &z);
        let wz = w.matmul(&z);
        let a = rz.transpose().matmul(&rz);
        let b = wz.transpose().matmul(&wz);
        assert!(a.max_abs_diff(&b) <= 1e-10 * b.max_abs());
    }
}
