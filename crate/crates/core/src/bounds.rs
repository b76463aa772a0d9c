//! Upper and lower bounds of the objective over a [`TransformCube`].
//!
//! For a cube centred at `(r₀, t₀)` every transformed mean `R_r x_i + t`
//! lies within `ρ` of the spherical cap of radius `‖x_i‖` around `t₀`,
//! centred on `R_{r₀} x_i` with half-angle `β`. The distance from `y_j` to
//! that cap, less `ρ`, lower-bounds every pairwise residual in the cube; the
//! residual at the centre upper-bounds the minimum. Pushing both through the
//! (monotone decreasing) Gaussian kernel bounds the objective.

use std::cell::RefCell;
use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::mixture::GaussianMixture;
use crate::objective::{exp_nonpositive, PairKernel};
use crate::se3::{angle_between, RigidTransform, TransformCube};

/// Geometry of one (source mean, target mean) pair relative to a cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    /// `‖x_i‖`
    pub x_norm: f64,
    /// `R_{r₀} x_i`
    pub x0: Vector3<f64>,
    /// `y_j − t₀`
    pub y_prime: Vector3<f64>,
    /// Angle between `x0` and `y_prime`.
    pub alpha: f64,
    /// Cap half-angle.
    pub beta: f64,
    /// Translation sphere radius.
    pub rho: f64,
}

impl PairGeometry {
    pub fn new(x0: Vector3<f64>, y_prime: Vector3<f64>, beta: f64, rho: f64) -> Self {
        Self { x_norm: x0.norm(), x0, y_prime, alpha: angle_between(&x0, &y_prime), beta, rho }
    }

    pub fn from_cube(x: &Vector3<f64>, y: &Vector3<f64>, cube: &TransformCube) -> Self {
        let x0 = cube.center_transform().rotation_matrix() * x;
        let mut geom = Self::new(x0, y - cube.translation_center, cube.beta(), cube.rho());
        geom.x_norm = x.norm();
        geom
    }

    /// The point on the cap boundary in the plane of `x0` and `y_prime`,
    /// i.e. `x0` rotated by `β` towards `y_prime`.
    pub fn cap_edge_point(&self) -> Vector3<f64> {
        let axis = self.x0.cross(&self.y_prime);
        let scale = self.x_norm * self.y_prime.norm();
        let axis = if axis.norm() > 1e-12 * scale {
            axis.normalize()
        } else {
            // x0 and y' antiparallel: every great circle through x0 reaches y'
            any_perpendicular(&self.x0)
        };
        let (s, c) = self.beta.sin_cos();
        self.x0 * c + axis.cross(&self.x0) * s
    }
}

/// A deterministic unit vector perpendicular to `v` (v ≠ 0).
fn any_perpendicular(v: &Vector3<f64>) -> Vector3<f64> {
    let a = v.abs();
    let helper = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    v.cross(&helper).normalize()
}

/// Minimum distance from `y_prime` to the spherical cap of `geom`.
pub fn spherical_cap_distance(geom: &PairGeometry) -> f64 {
    let y_norm = geom.y_prime.norm();
    let radial = (geom.x_norm - y_norm).abs();
    if geom.x_norm == 0.0 || y_norm == 0.0 || geom.beta >= PI || geom.alpha <= geom.beta {
        return radial;
    }
    (geom.cap_edge_point() - geom.y_prime).norm()
}

/// `‖R_{r₀} x + t₀ − y‖`, the residual at the cube centre.
pub fn pairwise_upper(x: &Vector3<f64>, y: &Vector3<f64>, center: &RigidTransform) -> f64 {
    (center.apply(x) - y).norm()
}

/// Spherical-cap lower bound of the residual over the cube.
pub fn pairwise_lower(x: &Vector3<f64>, y: &Vector3<f64>, cube: &TransformCube) -> f64 {
    let geom = PairGeometry::from_cube(x, y, cube);
    (spherical_cap_distance(&geom) - geom.rho).max(0.0)
}

/// Rotation-independent lower bound: distance to the whole sphere of radius `‖x‖`.
pub fn pairwise_lower_sphere(x: &Vector3<f64>, y: &Vector3<f64>, cube: &TransformCube) -> f64 {
    ((x.norm() - (y - cube.translation_center).norm()).abs() - cube.rho()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeBounds {
    pub lower: f64,
    pub upper: f64,
    pub center_transform: RigidTransform,
}

/// Evaluates cube bounds for a fixed pair of mixtures.
#[derive(Debug, Clone)]
pub struct BoundEvaluator<'a> {
    kernel: PairKernel<'a>,
    source_norms: Vec<f64>,
}

impl<'a> BoundEvaluator<'a> {
    pub fn new(source: &'a GaussianMixture, target: &'a GaussianMixture) -> Self {
        Self {
            kernel: PairKernel::new(source, target),
            source_norms: source.means().iter().map(|x| x.norm()).collect(),
        }
    }

    pub fn kernel(&self) -> &PairKernel<'a> {
        &self.kernel
    }

    pub fn bounds(&self, cube: &TransformCube) -> NodeBounds {
        let center = cube.center_transform();
        let r0 = center.rotation_matrix();
        let beta = cube.beta();
        let (sin_beta, cos_beta) = beta.sin_cos();
        let rim = Rim { full_sphere: beta >= PI, sin_beta, cos_beta, rho: cube.rho() };

        SCRATCH.with(|scratch| {
            let mut scratch = scratch.borrow_mut();
            let Scratch { targets: t, up, lo } = &mut *scratch;
            let n = self.kernel.target().len();
            t.resize(n);
            up.resize(n, 0.0);
            lo.resize(n, 0.0);
            for (j, y) in self.kernel.target().means().iter().enumerate() {
                let yp = y - cube.translation_center;
                t.x[j] = yp.x;
                t.y[j] = yp.y;
                t.z[j] = yp.z;
                t.norm2[j] = yp.norm_squared();
                t.norm[j] = t.norm2[j].sqrt();
            }

            let mut upper = 0.0;
            let mut lower = 0.0;
            for (i, x) in self.kernel.source().means().iter().enumerate() {
                let x0 = r0 * x;
                let (coef, inv_two_var) = self.kernel.row(i);
                let row = Row { x0: [x0.x, x0.y, x0.z], norm: self.source_norms[i], coef, inv_two_var };
                pair_terms(&row, t, &rim, up, lo);
                upper -= lane_sum(up);
                lower -= lane_sum(lo);
            }
            NodeBounds { lower: lower.min(upper), upper, center_transform: center }
        })
    }

    /// Bounds of every cube, in order. Runs on the rayon pool when the
    /// `parallel` feature is enabled; results do not depend on thread count.
    pub fn bounds_batch(&self, cubes: &[TransformCube]) -> Vec<NodeBounds> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            cubes.par_iter().map(|c| self.bounds(c)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            cubes.iter().map(|c| self.bounds(c)).collect()
        }
    }
}

/// Sum in four interleaved lanes; the order is fixed, so results do not
/// depend on the instruction set.
fn lane_sum(v: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = v.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for k in 0..4 {
            acc[k] += c[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Default)]
struct Scratch {
    targets: Targets,
    up: Vec<f64>,
    lo: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::default();
}

#[derive(Default)]
struct Targets {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    norm2: Vec<f64>,
    norm: Vec<f64>,
}

impl Targets {
    fn resize(&mut self, n: usize) {
        for v in [&mut self.x, &mut self.y, &mut self.z, &mut self.norm2, &mut self.norm] {
            v.resize(n, 0.0);
        }
    }
}

struct Row<'k> {
    x0: [f64; 3],
    norm: f64,
    coef: &'k [f64],
    inv_two_var: &'k [f64],
}

struct Rim {
    full_sphere: bool,
    sin_beta: f64,
    cos_beta: f64,
    rho: f64,
}

/// Positive kernel values at the centre (`up`) and at the pairwise lower
/// bound distance (`lo`) for one source component against every target.
fn pair_terms(row: &Row, t: &Targets, rim: &Rim, up: &mut [f64], lo: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime
            return unsafe { pair_terms_avx2(row, t, rim, up, lo) };
        }
    }
    pair_terms_portable(row, t, rim, up, lo)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn pair_terms_avx2(row: &Row, t: &Targets, rim: &Rim, up: &mut [f64], lo: &mut [f64]) {
    pair_terms_portable(row, t, rim, up, lo)
}

#[inline(always)]
fn pair_terms_portable(row: &Row, t: &Targets, rim: &Rim, up: &mut [f64], lo: &mut [f64]) {
    let n = up.len();
    let [ax, ay, az] = row.x0;
    let xn = row.norm;
    let xn2 = xn * xn;
    let (tx, ty, tz, tn2, tn) = (&t.x[..n], &t.y[..n], &t.z[..n], &t.norm2[..n], &t.norm[..n]);
    let (coef, itv, lo) = (&row.coef[..n], &row.inv_two_var[..n], &mut lo[..n]);
    for j in 0..n {
        let dot = ax * tx[j] + ay * ty[j] + az * tz[j];
        let centre2 = (xn2 + tn2[j] - 2.0 * dot).max(0.0);
        up[j] = coef[j] * exp_nonpositive(-centre2 * itv[j]);

        // with p = |x||y'|: dot = p cos α and |x × y'| = p sin α, so the rim
        // point at angle α − β needs no trigonometry
        let cx = ay * tz[j] - az * ty[j];
        let cy = az * tx[j] - ax * tz[j];
        let cz = ax * ty[j] - ay * tx[j];
        let cross = (cx * cx + cy * cy + cz * cz).sqrt();
        let rim2 = (xn2 + tn2[j] - 2.0 * (dot * rim.cos_beta + cross * rim.sin_beta)).max(0.0);
        let inside = rim.full_sphere || dot >= xn * tn[j] * rim.cos_beta;
        let d = if inside { (xn - tn[j]).abs() } else { rim2.sqrt() };
        let e = (d - rim.rho).max(0.0);
        lo[j] = coef[j] * exp_nonpositive(-e * e * itv[j]);
    }
}

/// Lower and upper bounds of the objective over `cube`.
pub fn node_bounds(source: &GaussianMixture, target: &GaussianMixture, cube: &TransformCube) -> NodeBounds {
    BoundEvaluator::new(source, target).bounds(cube)
}

/// [`node_bounds`] for every cube, order preserved.
pub fn batch_node_bounds(
    source: &GaussianMixture,
    target: &GaussianMixture,
    cubes: &[TransformCube],
) -> Vec<NodeBounds> {
    BoundEvaluator::new(source, target).bounds_batch(cubes)
}
