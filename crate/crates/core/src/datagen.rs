//! Synthetic shape-latent datasets for shallow and deep models.

use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalMap;
use crate::error::{PedError, Result};
use crate::expfam::ExpFamily;
use crate::numkernel::matrix::Matrix;
use crate::numkernel::rng::RngStream;

pub const GRID_HALF_WIDTH: f64 = 5.0;
pub const DEFAULT_RESOLUTION: usize = 317;
/// Fraction of `[-5, 5]^2` covered by the three shapes, `(9 pi + 4 pi + 1) / 100`.
pub const SHAPE_AREA_FRACTION: f64 = (13.0 * std::f64::consts::PI + 1.0) / 100.0;
/// Entry variance of the shallow generating weights.
pub const SHALLOW_WEIGHT_VARIANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    BigDisk,
    SmallDisk,
    Diamond,
}

/// Which shape, if any, contains `(x, y)`.
pub fn shape_of(x: f64, y: f64) -> Option<Shape> {
    if (x - 2.0).powi(2) + (y - 2.0).powi(2) <= 9.0 {
        Some(Shape::BigDisk)
    } else if (x + 3.0).powi(2) + (y + 3.0).powi(2) <= 4.0 {
        Some(Shape::SmallDisk)
    } else if (x - 4.0).abs() + (y + 4.0).abs() <= std::f64::consts::SQRT_2 / 2.0 {
        Some(Shape::Diamond)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeLatents {
    /// 2 x M ground-truth points
    pub z: Matrix,
    pub resolution: usize,
}

impl ShapeLatents {
    pub fn len(&self) -> usize {
        self.z.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.cols() == 0
    }

    /// Uniform random subset of `m` points, kept in grid order.
    pub fn subsample(&self, m: usize, seed: u64) -> ShapeLatents {
        if m >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        RngStream::new(seed).shuffle(&mut idx);
        idx.truncate(m);
        idx.sort_unstable();
        ShapeLatents {
            z: self.z.select_columns(&idx),
            resolution: self.resolution,
        }
    }
}

/// Grid over `[-5, 5]^2` with `resolution` points per side, kept where a shape contains it.
pub fn make_shape_latents(resolution: usize) -> Result<ShapeLatents> {
    if resolution < 2 {
        return Err(PedError::Validation("grid resolution must be at least 2".into()));
    }
    let step = 2.0 * GRID_HALF_WIDTH / (resolution - 1) as f64;
    let coord = |i: usize| -GRID_HALF_WIDTH + step * i as f64;
    let mut cols = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            let (x, y) = (coord(i), coord(j));
            if shape_of(x, y).is_some() {
                cols.push(vec![x, y]);
            }
        }
    }
    Ok(ShapeLatents {
        z: Matrix::from_columns(2, &cols),
        resolution,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// d x M observations
    pub y: Matrix,
    pub w_true: Matrix,
    /// observations whose canonical parameter hit the family clamp
    pub clamp_count: usize,
}

fn draw(family: ExpFamily, r: f64, rng: &mut RngStream, clamps: &mut usize) -> f64 {
    let r = match family.canonical_clamp() {
        Some(c) if r > c => {
            *clamps += 1;
            c
        }
        _ => r,
    };
    family.sample(r, rng)
}

/// Observations at canonical parameter `R(W z)` for each column `z`.
fn emit(latents: &Matrix, w: &Matrix, family: ExpFamily, map: &CanonicalMap, rng: &mut RngStream) -> (Matrix, usize) {
    let mut clamps = 0;
    let mut y = Matrix::zeros(w.rows(), latents.cols());
    for s in 0..latents.cols() {
        let eta = w.matvec(&latents.column(s));
        for (i, e) in eta.iter().enumerate() {
            y[(i, s)] = draw(family, map.r(*e), rng, &mut clamps);
        }
    }
    (y, clamps)
}

/// Shallow dataset with `W_true` entries iid `N(0, weight_variance)`.
pub fn sample_dataset_with(
    latents: &ShapeLatents,
    d: usize,
    family: ExpFamily,
    map: &CanonicalMap,
    weight_variance: f64,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 {
        return Err(PedError::Validation("observed dimension must be positive".into()));
    }
    if !(weight_variance > 0.0) {
        return Err(PedError::Validation("weight variance must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let std = weight_variance.sqrt();
    let w_true = Matrix::from_fn(d, latents.z.rows(), |_, _| std * rng.standard_normal());
    let (y, clamp_count) = emit(&latents.z, &w_true, family, map, &mut rng);
    Ok(Dataset { y, w_true, clamp_count })
}

pub fn sample_dataset(latents: &ShapeLatents, d: usize, family: ExpFamily, map: &CanonicalMap, seed: u64) -> Result<Dataset> {
    sample_dataset_with(latents, d, family, map, SHALLOW_WEIGHT_VARIANCE, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepDataset {
    /// `Z^(0) = Y, Z^(1), ..., Z^(L)`
    pub layers: Vec<Matrix>,
    /// `W^(1), ..., W^(L)`; `W^(l)` is `d^(l-1) x d^(l)`
    pub weights: Vec<Matrix>,
    pub clamp_count: usize,
}

impl DeepDataset {
    pub fn y(&self) -> &Matrix {
        &self.layers[0]
    }
}

/// Ancestral sampling from the top layer down; `dims` lists `d^(0), ..., d^(L)`
/// with `d^(L) = 2`, and `maps[l-1]` is the map of layer `l`.
pub fn sample_deep_dataset(
    latents: &ShapeLatents,
    dims: &[usize],
    maps: &[CanonicalMap],
    family: ExpFamily,
    seed: u64,
) -> Result<DeepDataset> {
    let depth = dims.len().saturating_sub(1);
    if depth == 0 || maps.len() != depth {
        return Err(PedError::Validation("deep datasets need L+1 widths and L maps".into()));
    }
    if dims[depth] != latents.z.rows() {
        return Err(PedError::Validation(format!("top width must equal the latent dimension {}", latents.z.rows())));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(PedError::Validation("layer widths must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let weights: Vec<Matrix> = (1..=depth)
        .map(|l| {
            let std = 1.0 / (dims[l] as f64).sqrt();
            Matrix::from_fn(dims[l - 1], dims[l], |_, _| std * rng.standard_normal())
        })
        .collect();
    let mut layers = vec![latents.z.clone()];
    let mut clamp_count = 0;
    for l in (1..=depth).rev() {
        let (z, c) = emit(&layers[0], &weights[l - 1], family, &maps[l - 1], &mut rng);
        clamp_count += c;
        layers.insert(0, z);
    }
    Ok(DeepDataset {
        layers,
        weights,
        clamp_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSamples {
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    /// `R(w z)`
    pub canonical: Vec<f64>,
    pub y: Vec<f64>,
}

/// Scalar model: `w ~ N(0, 1)`, `z ~ N(0, 1 / lambda_prior)`, `y | w, z` at canonical parameter `R(w z)`.
pub fn marginal_samples(family: ExpFamily, map: &CanonicalMap, n: usize, lambda_prior: f64, seed: u64) -> Result<MarginalSamples> {
    if n == 0 {
        return Err(PedError::Validation("need at least one draw".into()));
    }
    if !(lambda_prior > 0.0) {
        return Err(PedError::Validation("prior precision must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let zstd = 1.0 / lambda_prior.sqrt();
    let mut out = MarginalSamples {
        w: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        canonical: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
    };
    let mut clamps = 0;
    for _ in 0..n {
        let w = rng.standard_normal();
        let z = zstd * rng.standard_normal();
        let r = map.r(w * z);
        out.y.push(draw(family, r, &mut rng, &mut clamps));
        out.w.push(w);
        out.z.push(z);
        out.canonical.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_examples() {
        assert!(make_shape_latents(2).unwrap().is_empty());
        assert!(make_shape_latents(1).is_err());
        assert_eq!(shape_of(2.0, 2.0), Some(Shape::BigDisk));
        assert_eq!(shape_of(0.0, -5.0), None);
        assert_eq!(shape_of(-3.0, -3.0), Some(Shape::SmallDisk));
        assert_eq!(shape_of(4.0, -4.0), Some(Shape::Diamond));
        assert_eq!(shape_of(4.7, -4.0), Some(Shape::Diamond));
        assert_eq!(shape_of(4.72, -4.0), None);
    }

    #[test]
    fn default_grid_count() {
        let s = make_shape_latents(DEFAULT_RESOLUTION).unwrap();
        let want = SHAPE_AREA_FRACTION * (DEFAULT_RESOLUTION * DEFAULT_RESOLUTION) as f64;
        assert!((want - 42_045.0).abs() < 1.0);
        let n = s.len() as f64;
        assert!((n - want).abs() <= 0.05 * want, "{n}");
        for k in 0..s.len() {
            let (x, y) = (s.z[(0, k)], s.z[(1, k)]);
            assert!(x.abs() <= 5.0 && y.abs() <= 5.0);
            assert!(shape_of(x, y).is_some());
        }
    }

    #[test]
    fn shapes_are_disjoint() {
        let s = make_shape_latents(151).unwrap();
        for k in 0..s.len() {
            let (x, y) = (s.z[(0, k)], s.z[(1, k)]);
            let hits = [
                (x - 2.0).powi(2) + (y - 2.0).powi(2) <= 9.0,
                (x + 3.0).powi(2) + (y + 3.0).powi(2) <= 4.0,
                (x - 4.0).abs() + (y + 4.0).abs() <= std::f64::consts::SQRT_2 / 2.0,
            ];
            assert_eq!(hits.iter().filter(|h| **h).count(), 1);
        }
    }

    #[test]
    fn gaussian_noise_is_centred() {
        let lat = ShapeLatents {
            z: Matrix::from_fn(2, 10_000, |i, j| ((i + 1) as f64 * 0.37 * j as f64).sin() * 3.0),
            resolution: 0,
        };
        let ds = sample_dataset(&lat, 3, ExpFamily::Gaussian, &CanonicalMap::Identity, 9).unwrap();
        let resid = ds.y.sub(&ds.w_true.matmul(&lat.z));
        for i in 0..3 {
            let mean = resid.row(i).iter().sum::<f64>() / 10_000.0;
            assert!(mean.abs() <= 4.0 / 100.0);
        }
    }

    #[test]
    fn supports_and_relu_means() {
        let lat = make_shape_latents(60).unwrap();
        let b = sample_dataset(&lat, 5, ExpFamily::Bernoulli, &CanonicalMap::Identity, 1).unwrap();
        assert!(b.y.as_slice().iter().all(|v| *v == 0.0 || *v == 1.0));
        let r = sample_dataset(&lat, 20, ExpFamily::Gaussian, &CanonicalMap::Relu, 2).unwrap();
        let eta = r.w_true.matmul(&lat.z);
        let off: Vec<f64> = eta
            .as_slice()
            .iter()
            .zip(r.y.as_slice())
            .filter(|(e, _)| **e <= -3.0)
            .map(|(_, y)| *y)
            .collect();
        assert!(off.len() > 100);
        let mean = off.iter().sum::<f64>() / off.len() as f64;
        assert!(mean.abs() <= 4.0 / (off.len() as f64).sqrt());
    }

    #[test]
    fn bucketed_conditional_means() {
        let lat = make_shape_latents(80).unwrap();
        for (fam, map) in [
            (ExpFamily::Bernoulli, CanonicalMap::trelu(0.5).unwrap()),
            (ExpFamily::Poisson, CanonicalMap::Identity),
        ] {
            let ds = sample_dataset(&lat, 4, fam, &map, 3).unwrap();
            let eta = ds.w_true.matmul(&lat.z);
            // bucket by canonical parameter, compare mean y to mean A'(R)
            let mut buckets = std::collections::BTreeMap::<i64, (f64, f64, f64, usize)>::new();
            for (e, y) in eta.as_slice().iter().zip(ds.y.as_slice()) {
                let r = map.r(*e);
                if r > 5.0 {
                    continue;
                }
                let mu = fam.a1(r);
                let entry = buckets.entry((r * 2.0).floor() as i64).or_default();
                entry.0 += y;
                entry.1 += mu;
                entry.2 += fam.a2(r);
                entry.3 += 1;
            }
            for (_, (sy, smu, svar, n)) in buckets {
                if n < 50 {
                    continue;
                }
                let n = n as f64;
                let se = (svar / n).sqrt() / n.sqrt();
                assert!((sy / n - smu / n).abs() <= 4.0 * se.max(1e-12), "{fam}");
            }
        }
    }

    #[test]
    fn deep_dataset_structure() {
        let lat = make_shape_latents(40).unwrap().subsample(300, 1);
        assert_eq!(lat.len(), 300);
        let maps = vec![CanonicalMap::Relu, CanonicalMap::Relu];
        let a = sample_deep_dataset(&lat, &[50, 30, 2], &maps, ExpFamily::Gaussian, 4).unwrap();
        let b = sample_deep_dataset(&lat, &[50, 30, 2], &maps, ExpFamily::Gaussian, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.y().shape(), (50, 300));
        assert_eq!(a.layers[1].shape(), (30, 300));
        assert_eq!(a.weights[0].shape(), (50, 30));
        assert!(sample_deep_dataset(&lat, &[50, 30, 3], &maps, ExpFamily::Gaussian, 4).is_err());
    }

    #[test]
    fn deep_linear_covariance() {
        // Z2 -> Z1 = W2 Z2 + e1 -> Y = W1 Z1 + e0, so cov(Y) = W1 (W2 C W2^T + I) W1^T + I
        let n = 40_000;
        let mut rng = RngStream::new(5);
        let lat = ShapeLatents {
            z: Matrix::from_fn(2, n, |_, _| rng.standard_normal()),
            resolution: 0,
        };
        let maps = vec![CanonicalMap::Identity, CanonicalMap::Identity];
        let ds = sample_deep_dataset(&lat, &[6, 4, 2], &maps, ExpFamily::Gaussian, 6).unwrap();
        let (w1, w2) = (&ds.weights[0], &ds.weights[1]);
        let cov = |m: &Matrix| {
            let mean: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum::<f64>() / n as f64).collect();
            let c = Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] - mean[i]);
            c.matmul(&c.transpose()).scale(1.0 / n as f64)
        };
        let mut inner = w2.matmul(&cov(&lat.z)).matmul(&w2.transpose());
        inner.add_diagonal(1.0);
        let mut want = w1.matmul(&inner).matmul(&w1.transpose());
        want.add_diagonal(1.0);
        let got = cov(ds.y());
        let err = got.sub(&want).frobenius_sq().sqrt() / want.frobenius_sq().sqrt();
        assert!(err <= 0.1, "{err}");
    }

    #[test]
    fn marginal_examples() {
        let relu = marginal_samples(ExpFamily::Gaussian, &CanonicalMap::Relu, 10_000, 1.0, 1).unwrap();
        let zeros = relu.canonical.iter().filter(|r| **r == 0.0).count() as f64 / 1e4;
        assert!((0.45..=0.55).contains(&zeros));
        let bern = marginal_samples(ExpFamily::Bernoulli, &CanonicalMap::Identity, 10_000, 1.0, 2).unwrap();
        let mean = bern.y.iter().sum::<f64>() / 1e4;
        assert!((0.47..=0.53).contains(&mean));
        let bin = marginal_samples(ExpFamily::Binomial { trials: 10 }, &CanonicalMap::trelu(0.5).unwrap(), 2000, 1.0, 3).unwrap();
        assert!(bin.y.iter().all(|v| v.fract() == 0.0 && (0.0..=10.0).contains(v)));
        assert!(marginal_samples(ExpFamily::Gaussian, &CanonicalMap::Relu, 0, 1.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn regeneration_is_bit_identical(seed in 0u64..1000) {
            let lat = make_shape_latents(20).unwrap();
            let a = sample_dataset(&lat, 4, ExpFamily::Poisson, &CanonicalMap::Identity, seed).unwrap();
            let b = sample_dataset(&lat, 4, ExpFamily::Poisson, &CanonicalMap::Identity, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
