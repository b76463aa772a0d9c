//! The L2 density-distance alignment objective and local refinement.
//!
//! Dropping the two terms of the L2 distance that do not depend on the
//! transform leaves the negated cross-correlation
//!
//! ```text
//! f(R, t) = −Σ_ij φ_i φ_j (2π s_ij)^(−3/2) exp(−‖R x_i + t − y_j‖² / (2 s_ij)),   s_ij = σ²_i + σ²_j
//! ```
//!
//! which is the exact integral `−∫ p_X(T⁻¹p) p_Y(p) dp`. It is always ≤ 0.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::mixture::GaussianMixture;
use crate::se3::{rotation_from_angle_axis, skew, RigidTransform};

/// Objective values are plain `f64`s; always non-positive and finite.
pub type ObjectiveValue = f64;

/// Below this angle the Rodrigues Jacobian uses its series expansion.
pub const JACOBIAN_SMALL_ANGLE: f64 = 1e-6;

/// Per-pair constants of the objective for a fixed pair of mixtures.
///
/// Building this once and reusing it avoids recomputing the `m × n`
/// normalisers on every evaluation.
#[derive(Debug, Clone)]
pub struct PairKernel<'a> {
    source: &'a GaussianMixture,
    target: &'a GaussianMixture,
    /// `φ_i φ_j / Z_ij`, row-major over (i, j).
    coef: Vec<f64>,
    /// `1 / (2 s_ij)`.
    inv_two_var: Vec<f64>,
}

impl<'a> PairKernel<'a> {
    pub fn new(source: &'a GaussianMixture, target: &'a GaussianMixture) -> Self {
        let n = target.len();
        let mut coef = Vec::with_capacity(source.len() * n);
        let mut inv_two_var = Vec::with_capacity(source.len() * n);
        for (&vx, &wx) in source.variances().iter().zip(source.weights()) {
            for (&vy, &wy) in target.variances().iter().zip(target.weights()) {
                let s = vx + vy;
                coef.push(wx * wy * (2.0 * PI * s).powf(-1.5));
                inv_two_var.push(0.5 / s);
            }
        }
        Self { source, target, coef, inv_two_var }
    }

    pub fn source(&self) -> &'a GaussianMixture {
        self.source
    }

    pub fn target(&self) -> &'a GaussianMixture {
        self.target
    }

    /// Kernelised contribution `−c_ij exp(−e² / (2 s_ij))` of one pair.
    #[inline]
    /// Per-target coefficients and `1 / (2 s)` factors for source component `i`.
    pub(crate) fn row(&self, i: usize) -> (&[f64], &[f64]) {
        let n = self.target.len();
        (&self.coef[i * n..(i + 1) * n], &self.inv_two_var[i * n..(i + 1) * n])
    }

    pub fn term(&self, i: usize, j: usize, e2: f64) -> f64 {
        let k = i * self.target.len() + j;
        -self.coef[k] * (-e2 * self.inv_two_var[k]).exp()
    }

    pub fn value(&self, transform: &RigidTransform) -> ObjectiveValue {
        let r = transform.rotation_matrix();
        let n = self.target.len();
        let mut sum = 0.0;
        for (i, x) in self.source.means().iter().enumerate() {
            let tx = r * x + transform.translation;
            for (j, y) in self.target.means().iter().enumerate() {
                let k = i * n + j;
                sum += self.coef[k] * (-(tx - y).norm_squared() * self.inv_two_var[k]).exp();
            }
        }
        -sum
    }

    /// Value and gradient with respect to `[r; t]`.
    pub fn value_and_gradient(&self, transform: &RigidTransform) -> (ObjectiveValue, Vector6<f64>) {
        let rvec = transform.rotation.0;
        let r = rotation_from_angle_axis(&rvec);
        let n = self.target.len();
        let mut sum = 0.0;
        let mut grad_t = Vector3::zeros();
        let mut torque = Vector3::zeros();
        for (i, x) in self.source.means().iter().enumerate() {
            let tx = r * x + transform.translation;
            let mut w = Vector3::zeros();
            for (j, y) in self.target.means().iter().enumerate() {
                let k = i * n + j;
                let d = tx - y;
                let kv = self.coef[k] * (-d.norm_squared() * self.inv_two_var[k]).exp();
                sum += kv;
                // ∂f/∂d = k d / s = 2 k d inv_two_var
                w += d * (2.0 * kv * self.inv_two_var[k]);
            }
            grad_t += w;
            torque += x.cross(&(r.transpose() * w));
        }
        let grad_r = right_jacobian(&rvec).transpose() * torque;
        (-sum, Vector6::new(grad_r.x, grad_r.y, grad_r.z, grad_t.x, grad_t.y, grad_t.z))
    }
}

/// `exp(x)` for `x ≤ 0`, written so that loops over it vectorise.
///
/// Relative error stays within a few ulps of `f64::exp`; arguments below
/// −700 are clamped, which only matters for terms under 1e-304.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5 * 2^52, rounds to an integer on addition
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-700.0);
    let shifted = x * std::f64::consts::LOG2_E + SHIFT;
    let n = shifted - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series to degree 13; |r| ≤ ln2 / 2 keeps the tail under 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = shifted.to_bits() as i64 - SHIFT.to_bits() as i64;
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

/// Right Jacobian of the exponential map: `exp([r + δ]×) ≈ exp([r]×) exp([J_r δ]×)`.
pub fn right_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if theta2 < JACOBIAN_SMALL_ANGLE * JACOBIAN_SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        let (s, c) = theta.sin_cos();
        ((1.0 - c) / theta2, (theta - s) / (theta2 * theta))
    };
    Matrix3::identity() - a * k + b * (k * k)
}

/// The alignment objective of `source` moved by `transform` against `target`.
pub fn l2_objective(source: &GaussianMixture, target: &GaussianMixture, transform: &RigidTransform) -> ObjectiveValue {
    PairKernel::new(source, target).value(transform)
}

/// Gradient of [`l2_objective`] with respect to `[r; t]`.
pub fn l2_objective_gradient(
    source: &GaussianMixture,
    target: &GaussianMixture,
    transform: &RigidTransform,
) -> Vector6<f64> {
    PairKernel::new(source, target).value_and_gradient(transform).1
}

/// Settings for [`local_refine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Stop once the largest gradient component is below this.
    pub grad_tol: f64,
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { max_iters: 200, grad_tol: 1e-6, memory: 10, armijo: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRefineResult {
    pub transform: RigidTransform,
    pub value: ObjectiveValue,
    pub start_value: ObjectiveValue,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at every accepted iterate, starting with the start value.
    pub values: Vec<f64>,
}

/// L-BFGS descent from `start` with an Armijo backtracking line search.
pub fn local_refine(
    source: &GaussianMixture,
    target: &GaussianMixture,
    start: &RigidTransform,
    max_iters: usize,
    grad_tol: f64,
) -> LocalRefineResult {
    let config = RefineConfig { max_iters, grad_tol, ..RefineConfig::default() };
    PairKernel::new(source, target).refine(start, &config)
}

const MAX_BACKTRACKS: usize = 50;

impl PairKernel<'_> {
    pub fn refine(&self, start: &RigidTransform, config: &RefineConfig) -> LocalRefineResult {
        let eval = |x: &Vector6<f64>| self.value_and_gradient(&from_vec6(x));
        let mut x = to_vec6(start);
        let (mut f, mut g) = eval(&x);
        let start_value = f;
        let mut values = vec![f];
        let mut history: VecDeque<(Vector6<f64>, Vector6<f64>, f64)> = VecDeque::new();
        let mut converged = false;
        let mut iterations = 0;

        while iterations < config.max_iters {
            if g.amax() < config.grad_tol {
                converged = true;
                break;
            }
            let mut d = two_loop(&g, &history);
            let mut slope = g.dot(&d);
            if history.is_empty() || slope >= 0.0 {
                history.clear();
                d = -g * (0.1 / g.amax());
                slope = g.dot(&d);
            }

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let cand = x + d * step;
                let (fc, gc) = eval(&cand);
                if fc <= f + config.armijo * step * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fnew, gn)) = accepted else {
                break;
            };
            iterations += 1;

            let s = xn - x;
            let y = gn - g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                if history.len() == config.memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            x = xn;
            f = fnew;
            g = gn;
            values.push(f);
        }
        if !converged && iterations >= config.max_iters {
            converged = g.amax() < config.grad_tol;
        }

        LocalRefineResult { transform: from_vec6(&x), value: f, start_value, iterations, converged, values }
    }
}

/// Two-loop recursion: returns `−H g` for the implicit inverse Hessian `H`.
fn two_loop(g: &Vector6<f64>, history: &VecDeque<(Vector6<f64>, Vector6<f64>, f64)>) -> Vector6<f64> {
    let mut q = *g;
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

fn to_vec6(t: &RigidTransform) -> Vector6<f64> {
    Vector6::from_column_slice(&t.to_params())
}

fn from_vec6(v: &Vector6<f64>) -> RigidTransform {
    RigidTransform::from_params(&[v[0], v[1], v[2], v[3], v[4], v[5]])
}
