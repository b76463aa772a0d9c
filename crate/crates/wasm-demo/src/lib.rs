//! Browser bindings for three small gmalign experiments. Each export takes
//! plain numbers and returns a JSON string for the page in `www/`.

use std::f64::consts::PI;
use std::time::Duration;

use gmalign::bounds::{spherical_cap_distance, PairGeometry};
use gmalign::harness::{normalize_pair, synthetic_cloud, MixtureSettings};
use gmalign::mixture::PointCloud;
use gmalign::search::{SearchConfig, SearchStatus, TraceSample};
use gmalign::{node_bounds, run_registration, AngleAxis, RigidTransform, TransformCube};
use nalgebra::Vector3;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct CapView {
    /// Rotated source mean, on the horizontal axis.
    pub x0: [f64; 2],
    pub y: [f64; 2],
    /// Closest point of the cap to `y`.
    pub nearest: [f64; 2],
    /// The two boundary points of the cap in this plane.
    pub edges: [[f64; 2]; 2],
    pub distance: f64,
    /// Residual at the cube centre, `‖x0 − y‖`.
    pub centre_distance: f64,
}

/// The cap of half-angle `beta_deg` on the circle of radius `x_norm`, and a
/// target at radius `y_norm` and angle `alpha_deg` from the cap centre.
pub fn cap_view(x_norm: f64, y_norm: f64, alpha_deg: f64, beta_deg: f64) -> Result<CapView, String> {
    if !(x_norm > 0.0 && y_norm > 0.0) || !alpha_deg.is_finite() || !beta_deg.is_finite() {
        return Err("radii must be positive and angles finite".into());
    }
    let alpha = alpha_deg.to_radians().clamp(0.0, PI);
    let beta = beta_deg.to_radians().clamp(0.0, PI);
    let x0 = Vector3::new(x_norm, 0.0, 0.0);
    let y = Vector3::new(y_norm * alpha.cos(), y_norm * alpha.sin(), 0.0);
    let geom = PairGeometry::new(x0, y, beta, 0.0);
    let distance = spherical_cap_distance(&geom);
    let nearest = if alpha <= beta || beta >= PI { y * (x_norm / y_norm) } else { geom.cap_edge_point() };
    let plane = |v: Vector3<f64>| [v.x, v.y];
    Ok(CapView {
        x0: plane(x0),
        y: plane(y),
        nearest: plane(nearest),
        edges: [[x_norm * beta.cos(), x_norm * beta.sin()], [x_norm * beta.cos(), -x_norm * beta.sin()]],
        distance,
        centre_distance: (x0 - y).norm(),
    })
}

#[derive(Debug, Serialize)]
pub struct GapRow {
    pub rotation_half_width: f64,
    pub translation_half_width: f64,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
}

struct Scene {
    source: PointCloud,
    truth: RigidTransform,
}

fn scene(points: usize, seed: u64, angle_deg: f64) -> Result<Scene, String> {
    if !(8..=5000).contains(&points) {
        return Err("points must be between 8 and 5000".into());
    }
    let source = synthetic_cloud(points, seed).map_err(|e| e.to_string())?;
    let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
    let truth = RigidTransform::new(AngleAxis::from_axis_angle(&axis, angle_deg.to_radians()), Vector3::zeros());
    Ok(Scene { source, truth })
}

fn mixture_settings(components: usize, bandwidth: f64, seed: u64) -> MixtureSettings {
    MixtureSettings { components, bandwidth: Some(bandwidth), seed, ..MixtureSettings::default() }
}

/// Bounds on nested cubes around the true alignment, halving the widths at
/// every step; the gap should shrink towards zero.
pub fn gap_sequence(
    points: usize,
    components: usize,
    bandwidth: f64,
    seed: u64,
    angle_deg: f64,
    halvings: usize,
) -> Result<Vec<GapRow>, String> {
    let sc = scene(points, seed, angle_deg)?;
    let settings = mixture_settings(components, bandwidth, seed);
    settings.validate().map_err(|e| e.to_string())?;
    let target = sc.source.transformed(&sc.truth);
    let (src, tgt, norm) = normalize_pair(&sc.source, &target).map_err(|e| e.to_string())?;
    let gx = settings.build(&src, bandwidth).map_err(|e| e.to_string())?;
    let gy = settings.build(&tgt, bandwidth).map_err(|e| e.to_string())?;
    let centre = norm.to_normalized_frame(&sc.truth);

    let (mut rw, mut tw) = (0.5, 0.25);
    let mut rows = Vec::with_capacity(halvings + 1);
    for _ in 0..=halvings.min(40) {
        let b = node_bounds(&gx, &gy, &TransformCube::around(&centre, rw, tw));
        rows.push(GapRow {
            rotation_half_width: rw,
            translation_half_width: tw,
            upper: b.upper,
            lower: b.lower,
            gap: b.upper - b.lower,
        });
        rw *= 0.5;
        tw *= 0.5;
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct DemoRun {
    pub status: SearchStatus,
    pub epsilon_optimal: bool,
    pub best_value: f64,
    pub final_lower: f64,
    pub nodes_expanded: usize,
    pub runtime_seconds: f64,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub trace: Vec<TraceSample>,
    pub source: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
    /// The source moved by the estimated transform.
    pub aligned: Vec<[f64; 3]>,
}

/// Aligns a synthetic cloud with a rotated copy of itself.
#[allow(clippy::too_many_arguments)]
pub fn registration(
    points: usize,
    components: usize,
    bandwidth: f64,
    seed: u64,
    angle_deg: f64,
    epsilon_relative: f64,
    time_budget_seconds: f64,
) -> Result<DemoRun, String> {
    if !(time_budget_seconds > 0.0 && time_budget_seconds.is_finite()) {
        return Err("time budget must be positive".into());
    }
    let sc = scene(points, seed, angle_deg)?;
    let target = sc.source.transformed(&sc.truth);
    let mixture = mixture_settings(components, bandwidth, seed);
    let search = SearchConfig {
        epsilon_relative: Some(epsilon_relative),
        time_budget: Some(Duration::from_secs_f64(time_budget_seconds)),
        max_queue: Some(2_000_000),
        ..SearchConfig::default()
    };
    let record =
        run_registration(&sc.source, &target, &mixture, &search, Some(&sc.truth)).map_err(|e| e.to_string())?;
    let errors = record.errors.ok_or("ground truth errors missing")?;
    let coords = |c: &PointCloud| c.points().iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
    Ok(DemoRun {
        status: record.status,
        epsilon_optimal: record.epsilon_optimal,
        best_value: record.best_value,
        final_lower: record.final_lower,
        nodes_expanded: record.nodes_expanded,
        runtime_seconds: record.runtime_seconds,
        rotation_error_deg: errors.rotation_error,
        translation_error: errors.translation_error_source.unwrap_or(errors.translation_error),
        trace: record.trace,
        source: coords(&sc.source),
        target: coords(&target),
        aligned: coords(&sc.source.transformed(&record.transform_source)),
    })
}

fn to_js<T: Serialize>(value: Result<T, String>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = capView)]
pub fn cap_view_js(x_norm: f64, y_norm: f64, alpha_deg: f64, beta_deg: f64) -> Result<String, JsError> {
    to_js(cap_view(x_norm, y_norm, alpha_deg, beta_deg))
}

#[wasm_bindgen(js_name = gapSequence)]
pub fn gap_sequence_js(
    points: usize,
    components: usize,
    bandwidth: f64,
    seed: u32,
    angle_deg: f64,
    halvings: usize,
) -> Result<String, JsError> {
    to_js(gap_sequence(points, components, bandwidth, u64::from(seed), angle_deg, halvings))
}

#[wasm_bindgen(js_name = register)]
#[allow(clippy::too_many_arguments)]
pub fn registration_js(
    points: usize,
    components: usize,
    bandwidth: f64,
    seed: u32,
    angle_deg: f64,
    epsilon_relative: f64,
    time_budget_seconds: f64,
) -> Result<String, JsError> {
    to_js(registration(
        points,
        components,
        bandwidth,
        u64::from(seed),
        angle_deg,
        epsilon_relative,
        time_budget_seconds,
    ))
}
