//! Point clouds, frame normalisation and isotropic Gaussian mixtures.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::RigidTransform;

/// Smallest variance a fitted component may take, in normalised units.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// A non-empty set of 3D points with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    /// Free-form description of the source frame, e.g. the file it came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points, frame: None })
    }

    pub fn with_frame(mut self, frame: impl Into<String>) -> Self {
        self.frame = Some(frame.into());
        self
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    pub fn transformed(&self, transform: &RigidTransform) -> PointCloud {
        let r = transform.rotation_matrix();
        PointCloud {
            points: self.points.iter().map(|p| r * p + transform.translation).collect(),
            frame: self.frame.clone(),
        }
    }

    /// Points mapped through `norm` into the canonical frame.
    pub fn normalized_with(&self, norm: &FrameNormalization) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| norm.apply(p)).collect(), frame: self.frame.clone() }
    }
}

/// `p ↦ (p − centroid_offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameNormalization {
    pub centroid_offset: Vector3<f64>,
    pub scale: f64,
}

impl FrameNormalization {
    pub fn identity() -> Self {
        Self { centroid_offset: Vector3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.centroid_offset) / self.scale
    }

    pub fn invert(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p * self.scale + self.centroid_offset
    }
}

/// Centres the cloud on its centroid and scales it so the largest absolute
/// coordinate is 1.
pub fn normalize_point_cloud(cloud: &PointCloud) -> Result<(PointCloud, FrameNormalization)> {
    let cloud = PointCloud::new(cloud.points.clone())?.with_frame_opt(cloud.frame.clone());
    let centroid = cloud.centroid();
    let extent = cloud.points.iter().map(|p| (p - centroid).abs().max()).fold(0.0, f64::max);
    let scale = if extent > 0.0 { extent } else { 1.0 };
    let norm = FrameNormalization { centroid_offset: centroid, scale };
    Ok((cloud.normalized_with(&norm), norm))
}

impl PointCloud {
    fn with_frame_opt(mut self, frame: Option<String>) -> Self {
        self.frame = frame;
        self
    }
}

/// A weighted set of isotropic Gaussian components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    means: Vec<Vector3<f64>>,
    variances: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianMixture {
    /// Validates and builds a mixture. Weights must already sum to one.
    pub fn new(means: Vec<Vector3<f64>>, variances: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidMixture("mixture has no components".into()));
        }
        if means.len() != variances.len() || means.len() != weights.len() {
            return Err(Error::InvalidMixture(format!(
                "length mismatch: {} means, {} variances, {} weights",
                means.len(),
                variances.len(),
                weights.len()
            )));
        }
        if means.iter().any(|m| !m.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMixture("non-finite mean".into()));
        }
        if let Some(v) = variances.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidMixture(format!("variance {v} is not positive")));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidMixture(format!("weight {w} is not positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { means, variances, weights })
    }

    /// Equal-weight mixture with a shared variance.
    pub fn uniform(means: Vec<Vector3<f64>>, variance: f64) -> Result<Self> {
        let n = means.len();
        Self::new(means, vec![variance; n], vec![1.0 / n.max(1) as f64; n])
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[Vector3<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The same mixture with every mean mapped through `transform`.
    pub fn transformed(&self, transform: &RigidTransform) -> GaussianMixture {
        let r = transform.rotation_matrix();
        GaussianMixture {
            means: self.means.iter().map(|m| r * m + transform.translation).collect(),
            variances: self.variances.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn density(&self, p: &Vector3<f64>) -> f64 {
        mixture_density(self, p)
    }
}

#[inline]
fn isotropic_normal(d2: f64, variance: f64) -> f64 {
    (2.0 * PI * variance).powf(-1.5) * (-0.5 * d2 / variance).exp()
}

#[inline]
fn log_isotropic_normal(d2: f64, variance: f64) -> f64 {
    -1.5 * (2.0 * PI * variance).ln() - 0.5 * d2 / variance
}

/// `Σ φ_i N(p | μ_i, σ²_i I)`.
pub fn mixture_density(mixture: &GaussianMixture, p: &Vector3<f64>) -> f64 {
    mixture
        .means
        .iter()
        .zip(&mixture.variances)
        .zip(&mixture.weights)
        .map(|((mu, &var), &w)| w * isotropic_normal((p - mu).norm_squared(), var))
        .sum()
}

fn seeded_subsample(cloud: &PointCloud, count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let n = cloud.len();
    if count >= n {
        return cloud.points.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cloud.points[i]).collect()
}

fn mean_nearest_neighbour_distance(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / points.len() as f64
}

/// Bandwidth heuristic: twice the mean nearest-neighbour distance of the
/// subsample [`build_kde_mixture`] would draw with the same arguments.
///
/// Falls back to 0.1 when the subsample is a single (or a repeated) point.
pub fn default_kde_bandwidth(cloud: &PointCloud, target_components: usize, seed: u64) -> f64 {
    let sample = seeded_subsample(cloud, target_components.max(1), seed);
    let nn = mean_nearest_neighbour_distance(&sample);
    if nn > 0.0 {
        2.0 * nn
    } else {
        0.1
    }
}

/// Fixed-bandwidth kernel density estimate on a seeded random subsample.
pub fn build_kde_mixture(
    cloud: &PointCloud,
    target_components: usize,
    bandwidth: f64,
    seed: u64,
) -> Result<GaussianMixture> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if target_components == 0 {
        return Err(Error::InvalidArgument("target_components must be at least 1".into()));
    }
    let means = seeded_subsample(cloud, target_components, seed);
    GaussianMixture::uniform(means, bandwidth * bandwidth)
}

/// Output of [`fit_em_mixture`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Log-likelihood of the data before each M-step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

/// Isotropic-covariance EM. See [`fit_em_mixture`] for the trace.
pub fn build_em_mixture(
    cloud: &PointCloud,
    components: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<GaussianMixture> {
    fit_em_mixture(cloud, components, max_iters, tol, seed).map(|fit| fit.mixture)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// k-means++ seeding: first mean uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen mean.
fn kmeans_pp_seeds(points: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = points.len();
    let mut seeds = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - seeds[0]).norm_squared()).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let s = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - s).norm_squared());
        }
        seeds.push(s);
    }
    seeds
}

/// Fits `components` isotropic Gaussians by expectation-maximisation.
///
/// Stops after `max_iters` iterations or once the log-likelihood improves by
/// less than `tol`. Variances are clamped at [`VARIANCE_FLOOR`]; a component
/// that loses all responsibility is restarted at the worst-explained point.
pub fn fit_em_mixture(cloud: &PointCloud, components: usize, max_iters: usize, tol: f64, seed: u64) -> Result<EmFit> {
    let points = cloud.points();
    let n = points.len();
    if components == 0 || components > n {
        return Err(Error::InvalidArgument(format!("components must be in 1..={n}, got {components}")));
    }
    let k = components;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centroid = cloud.centroid();
    let spread =
        (points.iter().map(|p| (p - centroid).norm_squared()).sum::<f64>() / (3.0 * n as f64)).max(VARIANCE_FLOOR);

    let mut means = kmeans_pp_seeds(points, k, &mut rng);
    let mut variances = vec![spread; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut log_resp = vec![0.0; n * k];
    let mut point_ll = vec![0.0; n];
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters.max(1) {
        // E-step
        for (i, p) in points.iter().enumerate() {
            let row = &mut log_resp[i * k..(i + 1) * k];
            for c in 0..k {
                row[c] = weights[c].ln() + log_isotropic_normal((p - means[c]).norm_squared(), variances[c]);
            }
            let lse = log_sum_exp(row);
            point_ll[i] = lse;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ll: f64 = point_ll.iter().sum();
        if let Some(&prev) = history.last() {
            if ll - prev < tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        // M-step
        for c in 0..k {
            let mass: f64 = (0..n).map(|i| log_resp[i * k + c]).sum();
            if mass < 1e-12 {
                let worst = point_ll.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
                means[c] = points[worst];
                variances[c] = spread;
                weights[c] = 1.0 / n as f64;
                continue;
            }
            let mean = (0..n).map(|i| points[i] * log_resp[i * k + c]).sum::<Vector3<f64>>() / mass;
            let var =
                (0..n).map(|i| log_resp[i * k + c] * (points[i] - mean).norm_squared()).sum::<f64>() / (3.0 * mass);
            means[c] = mean;
            variances[c] = var.max(VARIANCE_FLOOR);
            weights[c] = mass / n as f64;
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    Ok(EmFit { mixture: GaussianMixture::new(means, variances, weights)?, log_likelihoods: history, converged })
}
