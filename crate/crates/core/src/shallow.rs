//! Single equilibrium layer: MAP latents as fixed points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{derive_bundle, ActivationBundle, CanonicalMap, KINK_TOL};
use crate::error::{PedError, Result};
use crate::expfam::ExpFamily;
use crate::fpsolve::{anderson, FixedPointResult, SolverConfig};
use crate::numkernel::linalg::{gram_spectral_norm, Cholesky, POWER_MAX_ITER, POWER_TOL};
use crate::numkernel::matrix::Matrix;

/// Probe grid for suprema without closed forms.
pub const SUP_GRID_LO: f64 = -50.0;
pub const SUP_GRID_HI: f64 = 50.0;
pub const SUP_GRID_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PedLayer {
    /// d x l loadings
    pub w: Matrix,
    pub b: Vec<f64>,
    pub lambda: f64,
    pub bundle: ActivationBundle,
}

impl PedLayer {
    pub fn new(w: Matrix, b: Vec<f64>, lambda: f64, family: ExpFamily, map: CanonicalMap) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(PedError::Validation(format!(
                "bias has length {} but W has {} rows",
                b.len(),
                w.rows()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(PedError::Validation(format!("prior precision must be positive, got {lambda}")));
        }
        if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(PedError::Validation("non-finite layer parameters".into()));
        }
        Ok(Self {
            w,
            b,
            lambda,
            bundle: derive_bundle(family, map)?,
        })
    }

    pub fn family(&self) -> ExpFamily {
        self.bundle.family
    }

    pub fn map(&self) -> &CanonicalMap {
        &self.bundle.map
    }

    /// observed dimension
    pub fn d(&self) -> usize {
        self.w.rows()
    }

    /// latent dimension
    pub fn l(&self) -> usize {
        self.w.cols()
    }

    pub fn pre_activation(&self, z: &[f64]) -> Vec<f64> {
        let mut eta = self.w.matvec(z);
        eta.iter_mut().zip(&self.b).for_each(|(e, b)| *e += b);
        eta
    }

    /// `q = T(y) * rho(eta) - sigma(eta)`, the data-side vector of the map.
    pub fn drive(&self, z: &[f64], y: &[f64]) -> (Vec<f64>, usize) {
        let eta = self.pre_activation(z);
        let fam = self.family();
        let mut clamps = 0;
        let q = eta
            .iter()
            .zip(y)
            .map(|(&e, &yi)| {
                let act = self.bundle.eval(e);
                clamps += act.clamped as usize;
                fam.t(yi) * act.rho - act.sigma
            })
            .collect();
        (q, clamps)
    }

    /// `f(z) = W^T (T(y) rho(eta) - sigma(eta)) / lambda`
    pub fn layer_map(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        self.check_dims(z, y);
        let (q, _) = self.drive(z, y);
        let mut out = self.w.tr_matvec(&q);
        out.iter_mut().for_each(|v| *v /= self.lambda);
        out
    }

    fn check_dims(&self, z: &[f64], y: &[f64]) {
        assert_eq!(z.len(), self.l(), "latent dimension mismatch");
        assert_eq!(y.len(), self.d(), "observation dimension mismatch");
    }

    /// Negative log posterior of the latents, dropping the base-measure term.
    pub fn neg_log_posterior(&self, z: &[f64], y: &[f64]) -> f64 {
        self.check_dims(z, y);
        let eta = self.pre_activation(z);
        let fam = self.family();
        let prior = 0.5 * self.lambda * z.iter().map(|v| v * v).sum::<f64>();
        let lik: f64 = eta
            .iter()
            .zip(y)
            .map(|(&e, &yi)| self.bundle.eval(e).a - self.map().r(e) * fam.t(yi))
            .sum();
        prior + lik
    }

    /// Gradient of [`Self::neg_log_posterior`], `lambda (z - f(z))`.
    pub fn grad_neg_log_posterior(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        let f = self.layer_map(z, y);
        z.iter().zip(&f).map(|(a, b)| self.lambda * (a - b)).collect()
    }

    /// Curvature weights `T(y) rho'(eta) - sigma'(eta)` per observed coordinate.
    pub fn curvature(&self, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let eta = self.pre_activation(z);
        let fam = self.family();
        eta.iter()
            .zip(y)
            .enumerate()
            .map(|(i, (&e, &yi))| {
                if self.map().on_kink(e) {
                    return Err(PedError::Kink { coordinate: i, value: e });
                }
                let act = self.bundle.eval(e);
                Ok(fam.t(yi) * act.rho1 - act.sigma1)
            })
            .collect()
    }

    /// `H = lambda I - W^T diag(T(y) rho' - sigma') W`
    pub fn hessian_latent(&self, z: &[f64], y: &[f64]) -> Result<Matrix> {
        self.check_dims(z, y);
        let c = self.curvature(z, y)?;
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let mut h = self.w.weighted_gram(&neg);
        h.add_diagonal(self.lambda);
        Ok(h)
    }

    /// Jacobian of the layer map, `W^T diag(T rho' - sigma') W / lambda`.
    pub fn jacobian(&self, z: &[f64], y: &[f64]) -> Result<Matrix> {
        let c = self.curvature(z, y)?;
        Ok(self.w.weighted_gram(&c).scale(1.0 / self.lambda))
    }

    pub fn boundary_coordinates(&self, z: &[f64]) -> Vec<usize> {
        if !self.map().has_kink() {
            return Vec::new();
        }
        self.pre_activation(z)
            .iter()
            .enumerate()
            .filter(|(_, e)| e.abs() <= KINK_TOL)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_record(&self) -> LayerRecord {
        LayerRecord {
            d: self.d(),
            l: self.l(),
            lambda: self.lambda,
            family: self.family(),
            canonical: self.map().clone(),
            w: self.w.as_slice().to_vec(),
            b: self.b.clone(),
        }
    }

    pub fn from_record(rec: LayerRecord) -> Result<Self> {
        let w = Matrix::from_vec(rec.d, rec.l, rec.w)?;
        PedLayer::new(w, rec.b, rec.lambda, rec.family, rec.canonical)
    }
}

/// Serialized form of a layer; `W` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub d: usize,
    pub l: usize,
    pub lambda: f64,
    pub family: ExpFamily,
    pub canonical: CanonicalMap,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionKind {
    /// smooth nonlinear map, global uniqueness condition
    Assumption1,
    /// ReLU map, per-pattern contraction condition
    Assumption2,
    /// linear map, any weights are admissible
    AlwaysLinear,
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub kappa: f64,
    pub gram_norm: f64,
    pub satisfied: bool,
    pub which: AssumptionKind,
    /// kappa rests on a grid probe rather than a closed form
    pub numerical: bool,
}

impl AssumptionReport {
    pub fn product(&self) -> f64 {
        self.kappa * self.gram_norm
    }

    pub fn verdict(&self) -> &'static str {
        match (self.which, self.satisfied) {
            (AssumptionKind::AlwaysLinear, _) => "always admissible",
            (AssumptionKind::Inapplicable, _) => "inapplicable",
            (_, true) => "satisfied",
            (_, false) => "violated",
        }
    }
}

fn sup_grid() -> impl Iterator<Item = f64> {
    let step = (SUP_GRID_HI - SUP_GRID_LO) / (SUP_GRID_POINTS - 1) as f64;
    (0..SUP_GRID_POINTS).map(move |i| SUP_GRID_LO + step * i as f64)
}

/// Range of `T(y)` over the data, or over the family's support without data.
fn statistic_range(family: ExpFamily, data: Option<&Matrix>) -> Result<(f64, f64)> {
    if let Some(y) = data {
        if y.as_slice().is_empty() {
            return Ok((0.0, 0.0));
        }
        let (lo, hi) = y
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                let t = family.t(v);
                (lo.min(t), hi.max(t))
            });
        return Ok((lo, hi));
    }
    match family {
        ExpFamily::Bernoulli | ExpFamily::ContinuousBernoulli => Ok((0.0, 1.0)),
        ExpFamily::Binomial { trials } => Ok((0.0, trials as f64)),
        ExpFamily::LogCosh => Ok((-1.0, 1.0)),
        ExpFamily::Gaussian | ExpFamily::Poisson => Err(PedError::Validation(format!(
            "{family} has unbounded support; pass data to bound T(y)"
        ))),
    }
}

/// Closed-form (sup, inf) of rho' for the trelu-type maps.
fn trelu_rho1_range(map: &CanonicalMap) -> Option<(f64, f64)> {
    let peak = |tau: f64| 1.0 / (tau * (2.0 * std::f64::consts::PI).sqrt());
    match map {
        CanonicalMap::TRelu { tau } => Some((peak(*tau), 0.0)),
        CanonicalMap::LeakyTRelu { tau, slope } => Some(((1.0 - slope) * peak(*tau), 0.0)),
        CanonicalMap::Negate(inner) => trelu_rho1_range(inner).map(|(s, i)| (-i, -s)),
        _ => None,
    }
}

/// Well-posedness constant for the layer; `data` bounds `T(y)` when given.
pub fn kappa(layer: &PedLayer, data: Option<&Matrix>) -> Result<AssumptionReport> {
    let gram_norm = gram_spectral_norm(&layer.w, POWER_TOL, POWER_MAX_ITER)?;
    let lambda = layer.lambda;
    let fam = layer.family();
    let map = layer.map();
    let report = |kappa: f64, which: AssumptionKind, numerical: bool| AssumptionReport {
        kappa,
        gram_norm,
        satisfied: match which {
            AssumptionKind::AlwaysLinear => true,
            AssumptionKind::Inapplicable => false,
            _ => kappa * gram_norm < 1.0,
        },
        which,
        numerical,
    };
    if map.is_linear() {
        // rho' = 0 and sigma' = A'' rho^2 >= 0
        let sup = sup_grid().map(|e| -layer.bundle.sigma1(e)).fold(f64::NEG_INFINITY, f64::max);
        return Ok(report(sup.min(0.0) / lambda, AssumptionKind::AlwaysLinear, true));
    }
    if matches!(fam, ExpFamily::Poisson) {
        return Ok(report(f64::INFINITY, AssumptionKind::Inapplicable, false));
    }
    if map.has_kink() {
        return match fam.lipschitz_a1() {
            Some(a) => Ok(report(a / lambda, AssumptionKind::Assumption2, false)),
            None => Ok(report(f64::INFINITY, AssumptionKind::Inapplicable, false)),
        };
    }
    let (t_lo, t_hi) = statistic_range(fam, data)?;
    let sup = match (fam, trelu_rho1_range(map)) {
        (ExpFamily::Gaussian, Some((rho1_sup, rho1_inf))) => {
            let data_term = [t_lo, t_hi]
                .iter()
                .map(|&t| if t >= 0.0 { t * rho1_sup } else { t * rho1_inf })
                .fold(f64::NEG_INFINITY, f64::max);
            let inf_sigma1 = sup_grid().map(|e| layer.bundle.sigma1(e)).fold(f64::INFINITY, f64::min);
            data_term - inf_sigma1
        }
        _ => sup_grid()
            .flat_map(|e| {
                let act = layer.bundle.eval(e);
                [t_lo, t_hi].map(|t| t * act.rho1 - act.sigma1)
            })
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(report(sup / lambda, AssumptionKind::Assumption1, true))
}

#[derive(Debug, Clone, Default)]
pub struct InferOptions<'a> {
    /// l x N starting latents; zeros when absent
    pub warm_start: Option<&'a Matrix>,
    pub check_well_posed: bool,
    pub sequential: bool,
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    /// l x N latents
    pub z: Matrix,
    pub results: Vec<FixedPointResult>,
    /// columns with a pre-activation coordinate on the ReLU kink
    pub boundary: Vec<bool>,
    pub clamp_count: usize,
    pub well_posed: Option<bool>,
}

impl InferOutput {
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

/// Solves every column without failing on non-convergence.
pub fn infer_all(y: &Matrix, layer: &PedLayer, cfg: &SolverConfig, opts: &InferOptions) -> Result<InferOutput> {
    cfg.validate()?;
    if y.rows() != layer.d() {
        return Err(PedError::Validation(format!(
            "data has {} rows but the layer expects {}",
            y.rows(),
            layer.d()
        )));
    }
    let n = y.cols();
    let l = layer.l();
    if let Some(ws) = opts.warm_start {
        if ws.shape() != (l, n) {
            return Err(PedError::Validation("warm start shape mismatch".into()));
        }
    }
    let solve = |s: usize| {
        let ys = y.column(s);
        let z0 = opts.warm_start.map_or_else(|| vec![0.0; l], |w| w.column(s));
        let g = |z: &[f64]| layer.layer_map(z, &ys);
        let res = anderson(&g, &z0, cfg);
        let boundary = !layer.boundary_coordinates(&res.z_star).is_empty();
        let (_, clamps) = layer.drive(&res.z_star, &ys);
        (res, boundary, clamps)
    };
    let solved: Vec<_> = if opts.sequential {
        (0..n).map(solve).collect()
    } else {
        (0..n).into_par_iter().map(solve).collect()
    };
    let mut z = Matrix::zeros(l, n);
    let mut results = Vec::with_capacity(n);
    let mut boundary = Vec::with_capacity(n);
    let mut clamp_count = 0;
    for (s, (res, b, c)) in solved.into_iter().enumerate() {
        z.set_column(s, &res.z_star);
        results.push(res);
        boundary.push(b);
        clamp_count += c;
    }
    let well_posed = if opts.check_well_posed {
        Some(kappa(layer, Some(y))?.satisfied)
    } else {
        None
    };
    Ok(InferOutput {
        z,
        results,
        boundary,
        clamp_count,
        well_posed,
    })
}

/// Solves every column, failing with the list of non-converged columns.
pub fn infer(y: &Matrix, layer: &PedLayer, cfg: &SolverConfig, opts: &InferOptions) -> Result<InferOutput> {
    let out = infer_all(y, layer, cfg, opts)?;
    let bad = out.nonconverged();
    if !bad.is_empty() {
        return Err(PedError::NonConvergence { columns: bad });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub pattern: Vec<bool>,
    pub z_star: Vec<f64>,
    pub converged: bool,
    pub pattern_consistent: bool,
    pub hessian_pd: bool,
    pub boundary_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluFixedPointCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl ReluFixedPointCatalog {
    pub fn consistent(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.iter().filter(|e| e.pattern_consistent)
    }

    /// Whether some consistent entry lies within `tol` (sup-norm) of `z`.
    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.consistent().any(|e| {
            e.z_star
                .iter()
                .zip(z)
                .all(|(a, b)| (a - b).abs() <= tol)
        })
    }
}

pub const MAX_ENUMERATION_DIM: usize = 16;

/// Solves the fixed-dropout equation for every activity pattern of a ReLU layer.
pub fn enumerate_relu_fixed_points(y: &[f64], layer: &PedLayer) -> Result<ReluFixedPointCatalog> {
    enumerate_relu_with(y, layer, &SolverConfig {
        tol: 1e-12,
        max_iter: 2000,
        ..SolverConfig::default()
    })
}

pub fn enumerate_relu_with(y: &[f64], layer: &PedLayer, cfg: &SolverConfig) -> Result<ReluFixedPointCatalog> {
    let d = layer.d();
    if !matches!(layer.map(), CanonicalMap::Relu) {
        return Err(PedError::Validation("pattern enumeration needs a relu layer".into()));
    }
    if d > MAX_ENUMERATION_DIM {
        return Err(PedError::Validation(format!("pattern enumeration is limited to d <= {MAX_ENUMERATION_DIM}")));
    }
    if y.len() != d {
        return Err(PedError::Validation("observation dimension mismatch".into()));
    }
    let fam = layer.family();
    let guaranteed = kappa(layer, None).map(|r| r.satisfied).unwrap_or(false);
    let l = layer.l();
    let mut entries = Vec::with_capacity(1 << d);
    for mask in 0..(1usize << d) {
        let pattern: Vec<bool> = (0..d).map(|i| mask >> i & 1 == 1).collect();
        // within the pattern R(eta) = eta on active coordinates and 0 elsewhere
        let g = |z: &[f64]| {
            let eta = layer.pre_activation(z);
            let q: Vec<f64> = (0..d)
                .map(|i| {
                    if pattern[i] {
                        fam.t(y[i]) - fam.a1(eta[i])
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut out = layer.w.tr_matvec(&q);
            out.iter_mut().for_each(|v| *v /= layer.lambda);
            out
        };
        let res = anderson(&g, &vec![0.0; l], cfg);
        if !res.converged && guaranteed {
            return Err(PedError::Internal(format!(
                "pattern {mask:#b} failed to converge although the contraction condition holds"
            )));
        }
        let eta = layer.pre_activation(&res.z_star);
        let boundary_flag = eta.iter().any(|e| e.abs() <= KINK_TOL);
        let pattern_consistent =
            res.converged && !boundary_flag && eta.iter().zip(&pattern).all(|(&e, &p)| (e > 0.0) == p);
        let hessian_pd = !boundary_flag
            && layer
                .hessian_latent(&res.z_star, y)
                .map(|h| Cholesky::factor(&h).is_ok())
                .unwrap_or(false);
        entries.push(CatalogEntry {
            pattern,
            z_star: res.z_star,
            converged: res.converged,
            pattern_consistent,
            hessian_pd,
            boundary_flag,
        });
    }
    Ok(ReluFixedPointCatalog { entries })
}

/// Gaussian approximation `N(z*, H(z*)^{-1})` to the latent posterior.
pub fn laplace(z_star: &[f64], y: &[f64], layer: &PedLayer) -> Result<(Vec<f64>, Matrix)> {
    let h = layer.hessian_latent(z_star, y)?;
    let chol = Cholesky::factor(&h)?;
    Ok((z_star.to_vec(), chol.inverse()))
}

/// Closed-form latents for a gaussian layer with identity map,
/// `W^T (lambda I + W W^T)^{-1} (Y - B)`.
pub fn gaussian_linear_latents(y: &Matrix, w: &Matrix, b: &[f64], lambda: f64) -> Result<Matrix> {
    let d = w.rows();
    let mut k = w.matmul(&w.transpose());
    k.add_diagonal(lambda);
    let chol = Cholesky::factor(&k)?;
    let mut z = Matrix::zeros(w.cols(), y.cols());
    for s in 0..y.cols() {
        let centered: Vec<f64> = (0..d).map(|i| y[(i, s)] - b[i]).collect();
        z.set_column(s, &w.tr_matvec(&chol.solve(&centered)));
    }
    Ok(z)
}
