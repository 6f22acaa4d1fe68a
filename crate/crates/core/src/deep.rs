//! Stacked equilibrium layers solved jointly over an augmented state.
//!
//! Layer `l` explains `Z^(l-1)` (with `Z^(0) = y`) through
//! `Z^(l-1) | Z^(l) ~ N(R(W Z^(l) + B) / sqrt(lambda^(l-1)), I / lambda^(l-1))`
//! and the top latent has prior `N(0, I / lambda^(L))`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalMap, KINK_TOL};
use crate::error::{PedError, Result};
use crate::expfam::ExpFamily;
use crate::fpsolve::{anderson, FixedPointResult, SolverConfig};
use crate::numkernel::linalg::{solve_general, spectral_norm, POWER_MAX_ITER, POWER_TOL};
use crate::numkernel::matrix::Matrix;
use crate::shallow::PedLayer;

#[derive(Debug, Clone, PartialEq)]
pub struct DeepPedSpec {
    /// precision of the observed layer
    pub data_precision: f64,
    /// layer `l` (0-based index `l - 1`) maps `d^(l)` latents to `d^(l-1)` outputs
    pub layers: Vec<PedLayer>,
}

/// Per-layer quantities at a given state.
struct LayerEval {
    eta: Vec<f64>,
    r: Vec<f64>,
    rho: Vec<f64>,
    rho1: Vec<f64>,
}

impl DeepPedSpec {
    pub fn new(data_precision: f64, layers: Vec<PedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(PedError::Validation("a deep spec needs at least one layer".into()));
        }
        if !(data_precision > 0.0 && data_precision.is_finite()) {
            return Err(PedError::Validation("data precision must be positive".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if !layer.family().is_gaussian() {
                return Err(PedError::Validation(format!("layer {} must be gaussian", i + 1)));
            }
            if let Some(next) = layers.get(i + 1) {
                if layer.l() != next.d() {
                    return Err(PedError::Validation(format!(
                        "layer {} has {} latents but layer {} expects {}",
                        i + 1,
                        layer.l(),
                        i + 2,
                        next.d()
                    )));
                }
            }
        }
        Ok(Self { data_precision, layers })
    }

    /// Builds gaussian layers from raw parts `(W, B, lambda, map)`.
    pub fn from_parts(data_precision: f64, parts: Vec<(Matrix, Vec<f64>, f64, CanonicalMap)>) -> Result<Self> {
        let layers = parts
            .into_iter()
            .map(|(w, b, lambda, map)| PedLayer::new(w, b, lambda, ExpFamily::Gaussian, map))
            .collect::<Result<Vec<_>>>()?;
        Self::new(data_precision, layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `d^(0), ..., d^(L)`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].d())
            .chain(self.layers.iter().map(|l| l.l()))
            .collect()
    }

    pub fn observed_dim(&self) -> usize {
        self.layers[0].d()
    }

    pub fn state_dim(&self) -> usize {
        self.layers.iter().map(|l| l.l()).sum()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.layers[self.depth() - 1].l()
    }

    /// Precision of `Z^(l)` for `l = 0..=L`.
    pub fn precision(&self, l: usize) -> f64 {
        if l == 0 {
            self.data_precision
        } else {
            self.layers[l - 1].lambda
        }
    }

    /// Coordinate range of `Z^(l)`, `l >= 1`, inside the augmented state.
    pub fn slice(&self, l: usize) -> Range<usize> {
        assert!(l >= 1 && l <= self.depth());
        let start: usize = self.layers[..l - 1].iter().map(|x| x.l()).sum();
        start..start + self.layers[l - 1].l()
    }

    pub fn state(&self, zeta: Vec<f64>) -> Result<AugmentedState> {
        if zeta.len() != self.state_dim() {
            return Err(PedError::Validation("augmented state length mismatch".into()));
        }
        let slices = (1..=self.depth()).map(|l| self.slice(l)).collect();
        Ok(AugmentedState { zeta, slices })
    }

    fn check(&self, zeta: &[f64], y: &[f64]) {
        assert_eq!(zeta.len(), self.state_dim(), "augmented state length mismatch");
        assert_eq!(y.len(), self.observed_dim(), "observation dimension mismatch");
    }

    /// `Z^(l)` for `l = 0..=L`.
    fn block<'a>(&self, zeta: &'a [f64], y: &'a [f64], l: usize) -> &'a [f64] {
        if l == 0 {
            y
        } else {
            &zeta[self.slice(l)]
        }
    }

    fn eval_layer(&self, zeta: &[f64], l: usize) -> LayerEval {
        let layer = &self.layers[l - 1];
        let eta = layer.pre_activation(&zeta[self.slice(l)]);
        let map = layer.map();
        LayerEval {
            r: eta.iter().map(|&e| map.r(e)).collect(),
            rho: eta.iter().map(|&e| map.rho(e)).collect(),
            rho1: eta.iter().map(|&e| map.rho1(e)).collect(),
            eta,
        }
    }

    fn eval_all(&self, zeta: &[f64]) -> Vec<LayerEval> {
        (1..=self.depth()).map(|l| self.eval_layer(zeta, l)).collect()
    }

    /// Data-side drive of layer `l`: `rho * sqrt(lambda^(l-1)) Z^(l-1) - R rho`.
    fn drive(&self, ev: &LayerEval, below: &[f64], l: usize) -> Vec<f64> {
        let s = self.precision(l - 1).sqrt();
        (0..ev.eta.len())
            .map(|i| ev.rho[i] * (s * below[i] - ev.r[i]))
            .collect()
    }

    /// Derivative of [`Self::drive`] in `eta`, with `sigma' = rho^2 + R rho'`.
    fn drive_slope(&self, ev: &LayerEval, below: &[f64], l: usize) -> Vec<f64> {
        let s = self.precision(l - 1).sqrt();
        (0..ev.eta.len())
            .map(|i| ev.rho1[i] * (s * below[i] - ev.r[i]) - ev.rho[i] * ev.rho[i])
            .collect()
    }

    /// Fixed-point map `G(zeta)` over the augmented state.
    pub fn deep_map(&self, zeta: &[f64], y: &[f64]) -> Vec<f64> {
        self.check(zeta, y);
        let evs = self.eval_all(zeta);
        let mut out = vec![0.0; zeta.len()];
        for l in 1..=self.depth() {
            let lambda = self.precision(l);
            let layer = &self.layers[l - 1];
            let q = self.drive(&evs[l - 1], self.block(zeta, y, l - 1), l);
            let mut g = layer.w.tr_matvec(&q);
            g.iter_mut().for_each(|v| *v /= lambda);
            if l < self.depth() {
                let s = lambda.sqrt();
                g.iter_mut().zip(&evs[l].r).for_each(|(v, r)| *v += r / s);
            }
            out[self.slice(l)].copy_from_slice(&g);
        }
        out
    }

    /// Negative log joint of the latents, dropping the constant `lambda^(0) |y|^2 / 2`.
    pub fn neg_log_posterior(&self, zeta: &[f64], y: &[f64]) -> f64 {
        self.check(zeta, y);
        let mut total = 0.0;
        for l in 1..=self.depth() {
            let z = self.block(zeta, y, l);
            let below = self.block(zeta, y, l - 1);
            let ev = self.eval_layer(zeta, l);
            let s = self.precision(l - 1).sqrt();
            total += 0.5 * self.precision(l) * z.iter().map(|v| v * v).sum::<f64>();
            total += ev
                .r
                .iter()
                .zip(below)
                .map(|(r, b)| 0.5 * r * r - s * b * r)
                .sum::<f64>();
        }
        total
    }

    /// Gradient of [`Self::neg_log_posterior`], assembled term by term.
    pub fn grad_neg_log_posterior(&self, zeta: &[f64], y: &[f64]) -> Vec<f64> {
        self.check(zeta, y);
        let evs = self.eval_all(zeta);
        let mut grad = vec![0.0; zeta.len()];
        for l in 1..=self.depth() {
            let range = self.slice(l);
            let z = &zeta[range.clone()];
            let ev = &evs[l - 1];
            let below = self.block(zeta, y, l - 1);
            let s = self.precision(l - 1).sqrt();
            // d/dZ^(l) of sum_i (R_i^2 / 2 - s below_i R_i)
            let inner: Vec<f64> = (0..ev.eta.len()).map(|i| (ev.r[i] - s * below[i]) * ev.rho[i]).collect();
            let through = self.layers[l - 1].w.tr_matvec(&inner);
            for (k, idx) in range.clone().enumerate() {
                grad[idx] += self.precision(l) * z[k] + through[k];
            }
            // the same term also depends on Z^(l-1) directly
            if l >= 2 {
                for (k, idx) in self.slice(l - 1).enumerate() {
                    grad[idx] -= s * ev.r[k];
                }
            }
        }
        grad
    }

    pub fn boundary_coordinates(&self, zeta: &[f64]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 1..=self.depth() {
            if !self.layers[l - 1].map().has_kink() {
                continue;
            }
            let eta = self.layers[l - 1].pre_activation(&zeta[self.slice(l)]);
            out.extend(eta.iter().enumerate().filter(|(_, e)| e.abs() <= KINK_TOL).map(|(i, _)| (l, i)));
        }
        out
    }

    fn check_kinks(&self, zeta: &[f64]) -> Result<()> {
        let evs = self.eval_all(zeta);
        for l in 1..=self.depth() {
            if let Some(i) = evs[l - 1].eta.iter().position(|&e| self.layers[l - 1].map().on_kink(e)) {
                return Err(PedError::Kink {
                    coordinate: i,
                    value: evs[l - 1].eta[i],
                });
            }
        }
        Ok(())
    }

    /// Blocks of the Jacobian of [`Self::deep_map`].
    pub fn jacobian_blocks(&self, zeta: &[f64], y: &[f64]) -> Result<BlockTridiagonal> {
        self.check(zeta, y);
        self.check_kinks(zeta)?;
        let evs = self.eval_all(zeta);
        let depth = self.depth();
        let mut diag = Vec::with_capacity(depth);
        let mut upper = Vec::with_capacity(depth - 1);
        let mut lower = Vec::with_capacity(depth - 1);
        for l in 1..=depth {
            let lambda = self.precision(l);
            let w = &self.layers[l - 1].w;
            let slope = self.drive_slope(&evs[l - 1], self.block(zeta, y, l - 1), l);
            diag.push(w.weighted_gram(&slope).scale(1.0 / lambda));
            if l < depth {
                let next = &self.layers[l].w;
                let rho = &evs[l].rho;
                upper.push(Matrix::from_fn(next.rows(), next.cols(), |i, j| rho[i] * next[(i, j)] / lambda.sqrt()));
            }
            if l >= 2 {
                let s = self.precision(l - 1).sqrt();
                let rho = &evs[l - 1].rho;
                lower.push(Matrix::from_fn(w.cols(), w.rows(), |i, j| s / lambda * w[(j, i)] * rho[j]));
            }
        }
        Ok(BlockTridiagonal { diag, upper, lower })
    }

    /// Blocks of the Hessian of [`Self::neg_log_posterior`], `Lambda (I - J)`.
    pub fn hessian_blocks(&self, zeta: &[f64], y: &[f64]) -> Result<BlockTridiagonal> {
        let j = self.jacobian_blocks(zeta, y)?;
        let depth = self.depth();
        let diag = (1..=depth)
            .map(|l| {
                let lambda = self.precision(l);
                let mut h = j.diag[l - 1].scale(-lambda);
                h.add_diagonal(lambda);
                h
            })
            .collect();
        let upper = j.upper.iter().enumerate().map(|(i, m)| m.scale(-self.precision(i + 1))).collect();
        let lower = j.lower.iter().enumerate().map(|(i, m)| m.scale(-self.precision(i + 2))).collect();
        Ok(BlockTridiagonal { diag, upper, lower })
    }

    /// Subadditive bound on the Jacobian spectral norm from its three block bands.
    pub fn jacobian_norm_bound(&self, zeta: &[f64], y: &[f64]) -> Result<f64> {
        let j = self.jacobian_blocks(zeta, y)?;
        let band = |ms: &[Matrix]| -> Result<f64> {
            ms.iter()
                .map(|m| spectral_norm(m, POWER_TOL, POWER_MAX_ITER))
                .try_fold(0.0_f64, |acc, n| Ok(acc.max(n?)))
        };
        Ok(band(&j.diag)? + band(&j.upper)? + band(&j.lower)?)
    }

    pub fn to_record(&self) -> DeepSpecRecord {
        DeepSpecRecord {
            data_precision: self.data_precision,
            layers: self
                .layers
                .iter()
                .map(|l| DeepLayerRecord {
                    w: (0..l.w.rows()).map(|i| l.w.row(i).to_vec()).collect(),
                    b: l.b.clone(),
                    lambda: l.lambda,
                    canonical: l.map().clone(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: DeepSpecRecord) -> Result<Self> {
        let parts = rec
            .layers
            .into_iter()
            .map(|l| Ok((Matrix::from_rows(&l.w)?, l.b, l.lambda, l.canonical)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(rec.data_precision, parts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepLayerRecord {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    pub lambda: f64,
    pub canonical: CanonicalMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepSpecRecord {
    pub data_precision: f64,
    pub layers: Vec<DeepLayerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub zeta: Vec<f64>,
    pub slices: Vec<Range<usize>>,
}

impl AugmentedState {
    /// `Z^(l)` for `l >= 1`.
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.zeta[self.slices[l - 1].clone()]
    }

    pub fn bottleneck(&self) -> &[f64] {
        self.layer(self.slices.len())
    }
}

/// Block tridiagonal matrix; `upper[k]` is block `(k, k+1)` and `lower[k]` block `(k+1, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<Matrix>,
    pub upper: Vec<Matrix>,
    pub lower: Vec<Matrix>,
}

impl BlockTridiagonal {
    pub fn to_dense(&self) -> Matrix {
        let sizes: Vec<usize> = self.diag.iter().map(|m| m.rows()).collect();
        let offs: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let n: usize = sizes.iter().sum();
        let mut out = Matrix::zeros(n, n);
        let mut put = |m: &Matrix, r0: usize, c0: usize| {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out[(r0 + i, c0 + j)] = m[(i, j)];
                }
            }
        };
        for (k, m) in self.diag.iter().enumerate() {
            put(m, offs[k], offs[k]);
        }
        for (k, m) in self.upper.iter().enumerate() {
            put(m, offs[k], offs[k + 1]);
        }
        for (k, m) in self.lower.iter().enumerate() {
            put(m, offs[k + 1], offs[k]);
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct DeepInferOptions<'a> {
    /// D x N starting states; zeros when absent
    pub warm_start: Option<&'a Matrix>,
    pub sequential: bool,
}

#[derive(Debug, Clone)]
pub struct DeepInferOutput {
    /// D x N augmented states
    pub states: Matrix,
    /// d^(L) x N top-layer latents
    pub bottleneck: Matrix,
    pub results: Vec<FixedPointResult>,
    pub boundary: Vec<bool>,
}

impl DeepInferOutput {
    pub fn nonconverged(&self) -> Vec<usize> {
        self.results
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.converged)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().map(|r| r.iterations as f64).sum::<f64>() / self.results.len() as f64
    }
}

pub fn infer_deep_all(y: &Matrix, spec: &DeepPedSpec, cfg: &SolverConfig, opts: &DeepInferOptions) -> Result<DeepInferOutput> {
    cfg.validate()?;
    if y.rows() != spec.observed_dim() {
        return Err(PedError::Validation(format!(
            "data has {} rows but the spec expects {}",
            y.rows(),
            spec.observed_dim()
        )));
    }
    let n = y.cols();
    let dim = spec.state_dim();
    if let Some(ws) = opts.warm_start {
        if ws.shape() != (dim, n) {
            return Err(PedError::Validation("warm start shape mismatch".into()));
        }
    }
    let solve = |s: usize| {
        let ys = y.column(s);
        let z0 = opts.warm_start.map_or_else(|| vec![0.0; dim], |w| w.column(s));
        let g = |z: &[f64]| spec.deep_map(z, &ys);
        let res = anderson(&g, &z0, cfg);
        let boundary = !spec.boundary_coordinates(&res.z_star).is_empty();
        (res, boundary)
    };
    let solved: Vec<_> = if opts.sequential {
        (0..n).map(solve).collect()
    } else {
        (0..n).into_par_iter().map(solve).collect()
    };
    let top = spec.slice(spec.depth());
    let mut states = Matrix::zeros(dim, n);
    let mut bottleneck = Matrix::zeros(top.len(), n);
    let mut results = Vec::with_capacity(n);
    let mut boundary = Vec::with_capacity(n);
    for (s, (res, b)) in solved.into_iter().enumerate() {
        states.set_column(s, &res.z_star);
        bottleneck.set_column(s, &res.z_star[top.clone()]);
        results.push(res);
        boundary.push(b);
    }
    Ok(DeepInferOutput {
        states,
        bottleneck,
        results,
        boundary,
    })
}

pub fn infer_deep(y: &Matrix, spec: &DeepPedSpec, cfg: &SolverConfig, opts: &DeepInferOptions) -> Result<DeepInferOutput> {
    let out = infer_deep_all(y, spec, cfg, opts)?;
    let bad = out.nonconverged();
    if !bad.is_empty() {
        return Err(PedError::NonConvergence { columns: bad });
    }
    Ok(out)
}

/// One activity pattern of a deep ReLU stack and its affine fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepCatalogEntry {
    /// per layer, which pre-activations are active
    pub pattern: Vec<Vec<bool>>,
    pub zeta: Vec<f64>,
    pub pattern_consistent: bool,
    pub boundary_flag: bool,
}

pub const MAX_DEEP_PATTERN_BITS: usize = 16;

/// Enumerates every activity pattern of an all-ReLU stack; within a pattern the
/// map is affine, so each fixed point is a single linear solve.
pub fn enumerate_deep_relu(y: &[f64], spec: &DeepPedSpec) -> Result<Vec<DeepCatalogEntry>> {
    if spec.layers.iter().any(|l| !matches!(l.map(), CanonicalMap::Relu)) {
        return Err(PedError::Validation("deep pattern enumeration needs relu in every layer".into()));
    }
    let widths: Vec<usize> = spec.layers.iter().map(|l| l.d()).collect();
    let bits: usize = widths.iter().sum();
    if bits > MAX_DEEP_PATTERN_BITS {
        return Err(PedError::Validation(format!("deep enumeration is limited to {MAX_DEEP_PATTERN_BITS} pattern bits")));
    }
    let dim = spec.state_dim();
    let mut entries = Vec::with_capacity(1 << bits);
    for mask in 0..(1usize << bits) {
        let mut pattern = Vec::with_capacity(widths.len());
        let mut bit = 0;
        for &w in &widths {
            pattern.push((0..w).map(|i| mask >> (bit + i) & 1 == 1).collect::<Vec<bool>>());
            bit += w;
        }
        // the pattern-restricted map: R = P*eta, rho = P, rho' = 0
        let linear = |zeta: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; dim];
            for l in 1..=spec.depth() {
                let layer = &spec.layers[l - 1];
                let p = &pattern[l - 1];
                let eta = layer.pre_activation(&zeta[spec.slice(l)]);
                let below = spec.block(zeta, y, l - 1);
                let s = spec.precision(l - 1).sqrt();
                let q: Vec<f64> = (0..eta.len()).map(|i| if p[i] { s * below[i] - eta[i] } else { 0.0 }).collect();
                let lambda = spec.precision(l);
                let mut g = layer.w.tr_matvec(&q);
                g.iter_mut().for_each(|v| *v /= lambda);
                if l < spec.depth() {
                    let next = &spec.layers[l];
                    let up = next.pre_activation(&zeta[spec.slice(l + 1)]);
                    let pn = &pattern[l];
                    g.iter_mut()
                        .zip(up.iter().zip(pn))
                        .for_each(|(v, (e, &on))| *v += if on { e / lambda.sqrt() } else { 0.0 });
                }
                out[spec.slice(l)].copy_from_slice(&g);
            }
            out
        };
        let offset = linear(&vec![0.0; dim]);
        let mut system = Matrix::identity(dim);
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let col = linear(&e);
            for i in 0..dim {
                system[(i, j)] -= col[i] - offset[i];
            }
        }
        let zeta = match solve_general(&system, &offset) {
            Ok(z) => z,
            Err(PedError::IllPosed { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut consistent = true;
        let mut boundary = false;
        for l in 1..=spec.depth() {
            let eta = spec.layers[l - 1].pre_activation(&zeta[spec.slice(l)]);
            for (e, &p) in eta.iter().zip(&pattern[l - 1]) {
                boundary |= e.abs() <= KINK_TOL;
                consistent &= (*e > 0.0) == p;
            }
        }
        entries.push(DeepCatalogEntry {
            pattern,
            zeta,
            pattern_consistent: consistent && !boundary,
            boundary_flag: boundary,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpsolve::contraction_estimate;
    use crate::numkernel::rng::RngStream;
    use crate::shallow::{infer, InferOptions};

    fn rand_spec(rng: &mut RngStream, dims: &[usize], scale: f64, map: CanonicalMap, lambdas: &[f64]) -> DeepPedSpec {
        let parts = (1..dims.len())
            .map(|l| {
                let w = Matrix::from_fn(dims[l - 1], dims[l], |_, _| scale * rng.standard_normal());
                let b = (0..dims[l - 1]).map(|_| 0.2 * rng.standard_normal()).collect();
                (w, b, lambdas[l], map.clone())
            })
            .collect();
        DeepPedSpec::from_parts(lambdas[0], parts).unwrap()
    }

    fn rand_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.standard_normal()).collect()
    }

    fn fd_jacobian(g: &dyn Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> Matrix {
        let n = z.len();
        let m = g(z).len();
        let mut out = Matrix::zeros(m, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + z[j].abs());
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[j] += h;
            zm[j] -= h;
            let (gp, gm) = (g(&zp), g(&zm));
            for i in 0..m {
                out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        out
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.max_abs_diff(b) / (1.0 + b.max_abs())
    }

    #[test]
    fn validation() {
        let w1 = Matrix::zeros(3, 2);
        let w2 = Matrix::zeros(3, 1);
        let parts = vec![
            (w1, vec![0.0; 3], 1.0, CanonicalMap::Identity),
            (w2, vec![0.0; 3], 1.0, CanonicalMap::Identity),
        ];
        assert!(DeepPedSpec::from_parts(1.0, parts).is_err());
        let bern = PedLayer::new(Matrix::zeros(2, 1), vec![0.0; 2], 1.0, ExpFamily::Bernoulli, CanonicalMap::Identity).unwrap();
        assert!(DeepPedSpec::new(1.0, vec![bern]).is_err());
    }

    #[test]
    fn zero_weights() {
        let parts = vec![
            (Matrix::zeros(3, 2), vec![0.0; 3], 1.0, CanonicalMap::Relu),
            (Matrix::zeros(2, 2), vec![0.0; 2], 0.5, CanonicalMap::Relu),
        ];
        let spec = DeepPedSpec::from_parts(2.0, parts).unwrap();
        let y = [1.0, -2.0, 0.5];
        assert!(spec.deep_map(&[0.3, -0.1, 0.7, 2.0], &y).iter().all(|&v| v == 0.0));
        assert_eq!(spec.neg_log_posterior(&[0.0; 4], &y), 0.0);
        let j = spec.jacobian_blocks(&[0.3, -0.1, 0.7, 2.0], &y);
        assert!(j.is_err());
        let ym = Matrix::from_vec(3, 2, vec![1.0, 0.0, -2.0, 1.0, 0.5, 3.0]).unwrap();
        let out = infer_deep(&ym, &spec, &SolverConfig::default(), &DeepInferOptions::default()).unwrap();
        assert_eq!(out.bottleneck.max_abs(), 0.0);
        let smooth = DeepPedSpec::from_parts(
            2.0,
            vec![
                (Matrix::zeros(3, 2), vec![0.0; 3], 1.0, CanonicalMap::trelu(0.5).unwrap()),
                (Matrix::zeros(2, 2), vec![0.0; 2], 0.5, CanonicalMap::trelu(0.5).unwrap()),
            ],
        )
        .unwrap();
        let j = smooth.jacobian_blocks(&[0.3, -0.1, 0.7, 2.0], &y).unwrap();
        assert_eq!(j.to_dense().max_abs(), 0.0);
        let h = smooth.hessian_blocks(&[0.3, -0.1, 0.7, 2.0], &y).unwrap().to_dense();
        let want = Matrix::diag(&[1.0, 1.0, 0.5, 0.5]);
        assert_eq!(h, want);
    }

    #[test]
    fn single_layer_reduces_to_shallow() {
        let mut rng = RngStream::new(3);
        for map in [CanonicalMap::Identity, CanonicalMap::trelu(0.5).unwrap(), CanonicalMap::Relu] {
            let spec = rand_spec(&mut rng, &[5, 2], 0.2, map.clone(), &[2.0, 0.7]);
            let layer = &spec.layers[0];
            let shallow = PedLayer::new(layer.w.clone(), layer.b.clone(), 0.7, ExpFamily::Gaussian, map).unwrap();
            let mut worst = 0.0_f64;
            for _ in 0..20 {
                let z = rand_vec(&mut rng, 2);
                let y = rand_vec(&mut rng, 5);
                let scaled: Vec<f64> = y.iter().map(|v| v * 2f64.sqrt()).collect();
                let a = spec.deep_map(&z, &y);
                let b = shallow.layer_map(&z, &scaled);
                worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            }
            assert!(worst <= 1e-12, "{worst}");
            let y = Matrix::from_fn(5, 6, |_, _| rng.standard_normal());
            let scaled = y.scale(2f64.sqrt());
            let cfg = SolverConfig::default();
            let deep = infer_deep(&y, &spec, &cfg, &DeepInferOptions::default()).unwrap();
            let flat = infer(&scaled, &shallow, &cfg, &InferOptions::default()).unwrap();
            assert!(deep.bottleneck.max_abs_diff(&flat.z) <= 1e-8);
        }
    }

    #[test]
    fn gradient_map_identity() {
        let mut rng = RngStream::new(11);
        for depth in 1..=3 {
            let dims: Vec<usize> = [4, 3, 2, 2][..=depth].to_vec();
            let lambdas = [1.5, 0.7, 1.2, 0.4];
            for map in [CanonicalMap::trelu(0.4).unwrap(), CanonicalMap::Relu, CanonicalMap::Identity] {
                let spec = rand_spec(&mut rng, &dims, 0.6, map, &lambdas);
                for _ in 0..20 {
                    let zeta = rand_vec(&mut rng, spec.state_dim());
                    let y = rand_vec(&mut rng, dims[0]);
                    let grad = spec.grad_neg_log_posterior(&zeta, &y);
                    let g = spec.deep_map(&zeta, &y);
                    for l in 1..=depth {
                        let lam = spec.precision(l);
                        for i in spec.slice(l) {
                            assert!((grad[i] - lam * (zeta[i] - g[i])).abs() <= 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_finite_differences() {
        let mut rng = RngStream::new(5);
        let spec = rand_spec(&mut rng, &[4, 3, 2], 0.6, CanonicalMap::trelu(0.4).unwrap(), &[1.5, 0.7, 1.2]);
        for _ in 0..10 {
            let zeta = rand_vec(&mut rng, spec.state_dim());
            let y = rand_vec(&mut rng, 4);
            let f = |z: &[f64]| vec![spec.neg_log_posterior(z, &y)];
            let fd = fd_jacobian(&f, &zeta);
            let g = spec.grad_neg_log_posterior(&zeta, &y);
            for (k, gk) in g.iter().enumerate() {
                assert!((fd[(0, k)] - gk).abs() / (1.0 + gk.abs()) <= 1e-5);
            }
        }
    }

    #[test]
    fn jacobian_and_hessian_blocks() {
        let mut rng = RngStream::new(17);
        for dims in [vec![4, 3, 2], vec![5, 3, 2, 2]] {
            let lambdas = [1.5, 0.7, 1.2, 0.9];
            let spec = rand_spec(&mut rng, &dims, 0.6, CanonicalMap::trelu(0.4).unwrap(), &lambdas);
            for _ in 0..5 {
                let zeta = rand_vec(&mut rng, spec.state_dim());
                let y = rand_vec(&mut rng, dims[0]);
                let j = spec.jacobian_blocks(&zeta, &y).unwrap().to_dense();
                let fd = fd_jacobian(&|z: &[f64]| spec.deep_map(z, &y), &zeta);
                assert!(rel_err(&j, &fd) <= 1e-5);
                let h = spec.hessian_blocks(&zeta, &y).unwrap().to_dense();
                assert!(h.max_abs_diff(&h.transpose()) <= 1e-10);
                let fdh = fd_jacobian(&|z: &[f64]| spec.grad_neg_log_posterior(z, &y), &zeta);
                assert!(rel_err(&h, &fdh) <= 1e-4);
            }
        }
    }

    #[test]
    fn solve_and_contraction_certificate() {
        let mut rng = RngStream::new(23);
        let spec = rand_spec(&mut rng, &[3, 2], 0.2, CanonicalMap::trelu(0.5).unwrap(), &[1.0, 1.0]);
        let spec2 = rand_spec(&mut rng, &[3, 2, 2], 0.2, CanonicalMap::trelu(0.5).unwrap(), &[1.0, 1.0, 1.0]);
        for s in [spec, spec2] {
            let y = Matrix::from_fn(3, 4, |_, _| rng.standard_normal());
            let out = infer_deep(&y, &s, &SolverConfig::default(), &DeepInferOptions::default()).unwrap();
            for (k, r) in out.results.iter().enumerate() {
                assert!(r.residual <= 1e-8);
                let yk = y.column(k);
                let grad = s.grad_neg_log_posterior(&r.z_star, &yk);
                let lam_max = (1..=s.depth()).map(|l| s.precision(l)).fold(0.0, f64::max);
                assert!(crate::numkernel::norm_inf(&grad) <= lam_max * 1e-8);
                let bound = s.jacobian_norm_bound(&r.z_star, &yk).unwrap();
                let est = contraction_estimate(&|z: &[f64]| s.deep_map(z, &yk), &r.z_star, 12, 2);
                assert!(est <= bound + 1e-6);
            }
        }
    }

    #[test]
    fn lambda_scaling_coherence() {
        // scaling every precision by c and each latent by 1/sqrt(c), with
        // W -> sqrt(c) W and y -> y / sqrt(c), preserves the fixed point
        let mut rng = RngStream::new(29);
        let c: f64 = 3.7;
        for map in [CanonicalMap::Identity, CanonicalMap::Relu] {
            let spec = rand_spec(&mut rng, &[4, 3, 2], 0.3, map.clone(), &[1.0, 0.8, 1.3]);
            let y = rand_vec(&mut rng, 4);
            let r = anderson(&|z: &[f64]| spec.deep_map(z, &y), &vec![0.1; 5], &SolverConfig::default());
            let scaled = DeepPedSpec::from_parts(
                c * spec.data_precision,
                spec.layers
                    .iter()
                    .map(|l| (l.w.scale(c.sqrt()), l.b.clone(), c * l.lambda, map.clone()))
                    .collect(),
            )
            .unwrap();
            let ys: Vec<f64> = y.iter().map(|v| v / c.sqrt()).collect();
            let zs: Vec<f64> = r.z_star.iter().map(|v| v / c.sqrt()).collect();
            let g = scaled.deep_map(&zs, &ys);
            let res = g.iter().zip(&zs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(res <= 1e-8, "{res}");
        }
    }

    #[test]
    fn relu_enumeration_contains_solutions() {
        let mut rng = RngStream::new(31);
        for _ in 0..5 {
            let spec = rand_spec(&mut rng, &[3, 2, 2], 0.4, CanonicalMap::Relu, &[1.0, 1.0, 1.0]);
            let y = rand_vec(&mut rng, 3);
            let cat = enumerate_deep_relu(&y, &spec).unwrap();
            assert!(cat.len() <= 32);
            for e in cat.iter().filter(|e| e.pattern_consistent) {
                let g = spec.deep_map(&e.zeta, &y);
                assert!(g.iter().zip(&e.zeta).all(|(a, b)| (a - b).abs() <= 1e-10));
            }
            for _ in 0..5 {
                let z0 = rand_vec(&mut rng, spec.state_dim());
                let r = anderson(&|z: &[f64]| spec.deep_map(z, &y), &z0, &SolverConfig::default());
                if !r.converged || !spec.boundary_coordinates(&r.z_star).is_empty() {
                    continue;
                }
                let found = cat
                    .iter()
                    .filter(|e| e.pattern_consistent)
                    .any(|e| e.zeta.iter().zip(&r.z_star).all(|(a, b)| (a - b).abs() <= 1e-6));
                assert!(found);
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let mut rng = RngStream::new(2);
        let spec = rand_spec(&mut rng, &[3, 2, 1], 0.5, CanonicalMap::trelu(0.5).unwrap(), &[1.0, 0.5, 2.0]);
        let json = serde_json::to_string(&spec.to_record()).unwrap();
        assert!(json.contains("data_precision"));
        let back = DeepPedSpec::from_record(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, spec);
        let st = spec.state(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(st.layer(1), &[1.0, 2.0]);
        assert_eq!(st.bottleneck(), &[3.0]);
    }
}
