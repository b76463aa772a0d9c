//! Experiment plumbing: mixture settings, frame handling, synthetic data,
//! error metrics, result records and benchmark summaries.

use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::mixture::{
    build_em_mixture, build_kde_mixture, default_kde_bandwidth, normalize_point_cloud, FrameNormalization,
    GaussianMixture, PointCloud,
};
use crate::objective::l2_objective;
use crate::se3::{rotation_angle, AngleAxis, RigidTransform};
use crate::search::{register, SearchConfig, SearchStatus, TraceSample};

/// Bumped whenever a field of [`RunRecord`] or [`BenchmarkSummary`] changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureConstructor {
    Kde,
    Em,
}

impl FromStr for MixtureConstructor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kde" => Ok(Self::Kde),
            "em" => Ok(Self::Em),
            other => Err(Error::InvalidArgument(format!("unknown mixture constructor '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureSettings {
    pub constructor: MixtureConstructor,
    pub components: usize,
    /// KDE bandwidth in normalised units; `None` uses [`default_kde_bandwidth`]
    /// on the normalised source.
    pub bandwidth: Option<f64>,
    pub seed: u64,
    pub em_max_iters: usize,
    pub em_tol: f64,
}

impl Default for MixtureSettings {
    fn default() -> Self {
        Self {
            constructor: MixtureConstructor::Kde,
            components: 20,
            bandwidth: None,
            seed: 0,
            em_max_iters: 200,
            em_tol: 1e-8,
        }
    }
}

impl MixtureSettings {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidArgument("components must be at least 1".into()));
        }
        if let Some(bw) = self.bandwidth {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bw}")));
            }
        }
        Ok(())
    }

    /// The bandwidth to use for both clouds, fixed from the source.
    pub fn resolve_bandwidth(&self, source: &PointCloud) -> f64 {
        self.bandwidth.unwrap_or_else(|| default_kde_bandwidth(source, self.components, self.seed))
    }

    pub fn build(&self, cloud: &PointCloud, bandwidth: f64) -> Result<GaussianMixture> {
        match self.constructor {
            MixtureConstructor::Kde => build_kde_mixture(cloud, self.components, bandwidth, self.seed),
            MixtureConstructor::Em => {
                build_em_mixture(cloud, self.components.min(cloud.len()), self.em_max_iters, self.em_tol, self.seed)
            }
        }
    }
}

/// Normalisations of a source/target pair. Each cloud is centred on its own
/// centroid; both share the source's scale so the problem stays rigid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairNormalization {
    pub source: FrameNormalization,
    pub target: FrameNormalization,
}

impl PairNormalization {
    /// Maps a transform between normalised clouds to one between the raw clouds.
    pub fn to_source_frame(&self, t: &RigidTransform) -> RigidTransform {
        let r = t.rotation_matrix();
        let translation =
            self.target.centroid_offset - r * self.source.centroid_offset + t.translation * self.source.scale;
        RigidTransform::new(t.rotation, translation)
    }

    pub fn to_normalized_frame(&self, t: &RigidTransform) -> RigidTransform {
        let r = t.rotation_matrix();
        let translation =
            (t.translation - self.target.centroid_offset + r * self.source.centroid_offset) / self.source.scale;
        RigidTransform::new(t.rotation, translation)
    }
}

pub fn normalize_pair(source: &PointCloud, target: &PointCloud) -> Result<(PointCloud, PointCloud, PairNormalization)> {
    let (src, source_norm) = normalize_point_cloud(source)?;
    let target_norm = FrameNormalization { centroid_offset: target.centroid(), scale: source_norm.scale };
    let tgt = target.normalized_with(&target_norm);
    Ok((src, tgt, PairNormalization { source: source_norm, target: target_norm }))
}

/// Seeded uniform rotations, drawn as unit quaternions and returned as
/// angle-axis vectors with angle at most π.
pub fn sample_rotations(count: usize, seed: u64) -> Vec<AngleAxis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 1e-12 {
                let mut q = Quaternion::new(q[0], q[1], q[2], q[3]);
                if q.w < 0.0 {
                    q = -q;
                }
                break AngleAxis(UnitQuaternion::from_quaternion(q).scaled_axis());
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentErrors {
    /// Degrees, in `[0, 180]`.
    pub rotation_error: f64,
    /// In the units of the transforms passed to [`alignment_errors`].
    pub translation_error: f64,
    /// Translation error in source units, when the frame is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_error_source: Option<f64>,
}

pub fn alignment_errors(estimate: &RigidTransform, ground_truth: &RigidTransform) -> AlignmentErrors {
    let relative = estimate.rotation_matrix() * ground_truth.rotation_matrix().transpose();
    AlignmentErrors {
        rotation_error: rotation_angle(&relative).to_degrees().clamp(0.0, 180.0),
        translation_error: (estimate.translation - ground_truth.translation).norm(),
        translation_error_source: None,
    }
}

/// A lopsided cloud of Gaussian blobs of different sizes, inside roughly
/// `[-1, 1]³`. Used as the stock input for self-alignment experiments.
pub fn synthetic_cloud(points: usize, seed: u64) -> Result<PointCloud> {
    if points == 0 {
        return Err(Error::EmptyCloud);
    }
    const BLOBS: [([f64; 3], f64, f64); 5] = [
        ([0.0, 0.0, 0.0], 0.25, 0.30),
        ([0.7, 0.1, 0.0], 0.12, 0.20),
        ([-0.3, 0.6, 0.2], 0.10, 0.20),
        ([0.1, -0.2, 0.6], 0.08, 0.15),
        ([-0.6, -0.4, -0.3], 0.10, 0.15),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(points);
    let mut assigned = 0;
    for (k, (centre, spread, share)) in BLOBS.iter().enumerate() {
        let count = if k + 1 == BLOBS.len() {
            points - assigned
        } else {
            ((points as f64 * share).round() as usize).min(points - assigned)
        };
        assigned += count;
        let centre = Vector3::from(*centre);
        for _ in 0..count {
            let offset = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            out.push(centre + offset * *spread);
        }
    }
    PointCloud::new(out)
}

/// Drops the `fraction` of points furthest along a seeded random direction,
/// leaving a contiguous part of the cloud.
pub fn crop_contiguous(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("crop fraction must be in [0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            break v / n;
        }
    };
    let centroid = cloud.centroid();
    let mut order: Vec<(f64, usize)> =
        cloud.points().iter().enumerate().map(|(i, p)| ((p - centroid).dot(&dir), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = cloud.len() - (cloud.len() as f64 * fraction).round() as usize;
    let mut kept: Vec<usize> = order[..keep.max(1)].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    let out = PointCloud::new(kept.iter().map(|&i| cloud.points()[i]).collect())?;
    Ok(match &cloud.frame {
        Some(f) => out.with_frame(f.clone()),
        None => out,
    })
}

/// Everything needed to reproduce a run, embedded in every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub mixture: MixtureSettings,
    /// The bandwidth actually used (KDE only).
    pub bandwidth: Option<f64>,
    pub search: SearchConfig,
}

/// Result of one registration, serialised as the result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: ResolvedConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_path: Option<String>,
    pub normalization: PairNormalization,
    pub source_components: usize,
    pub target_components: usize,
    pub transform_normalized: RigidTransform,
    pub transform_source: RigidTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_source: Option<RigidTransform>,
    /// Objective at the ground truth, when one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_at_ground_truth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<AlignmentErrors>,
    pub best_value: f64,
    pub final_lower: f64,
    pub gap: f64,
    pub threshold: f64,
    pub epsilon_optimal: bool,
    pub status: SearchStatus,
    pub nodes_expanded: usize,
    pub refinements_run: usize,
    pub runtime_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    pub trace: Vec<TraceSample>,
}

impl RunRecord {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.runtime_seconds = 0.0;
        for s in &mut r.trace {
            s.elapsed_seconds = 0.0;
        }
        r
    }

    pub fn trace_text(&self) -> String {
        trace_text(&self.trace)
    }
}

/// Tabular trace, one `elapsed_seconds upper lower` row per line after a header.
pub fn trace_text(trace: &[TraceSample]) -> String {
    let mut out = String::from("elapsed_seconds upper lower\n");
    for s in trace {
        out.push_str(&format!("{} {} {}\n", s.elapsed_seconds, s.upper, s.lower));
    }
    out
}

/// Registers `source` onto `target` (both in their raw frames).
/// `ground_truth` maps raw source points onto raw target points.
pub fn run_registration(
    source: &PointCloud,
    target: &PointCloud,
    mixture: &MixtureSettings,
    search: &SearchConfig,
    ground_truth: Option<&RigidTransform>,
) -> Result<RunRecord> {
    mixture.validate()?;
    search.validate()?;
    let started = Instant::now();
    let (src, tgt, norm) = normalize_pair(source, target)?;
    let bandwidth = mixture.resolve_bandwidth(&src);
    let gx = mixture.build(&src, bandwidth)?;
    let gy = mixture.build(&tgt, bandwidth)?;
    let result = register(&gx, &gy, search)?;

    let transform_source = norm.to_source_frame(&result.best_transform);
    let (value_at_ground_truth, errors) = match ground_truth {
        Some(gt) => {
            let gt_normalized = norm.to_normalized_frame(gt);
            let mut errors = alignment_errors(&result.best_transform, &gt_normalized);
            errors.translation_error_source = Some((transform_source.translation - gt.translation).norm());
            (Some(l2_objective(&gx, &gy, &gt_normalized)), Some(errors))
        }
        None => (None, None),
    };

    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        config: ResolvedConfig {
            mixture: mixture.clone(),
            bandwidth: (mixture.constructor == MixtureConstructor::Kde).then_some(bandwidth),
            search: search.clone(),
        },
        source_path: source.frame.clone(),
        target_path: target.frame.clone(),
        normalization: norm,
        source_components: gx.len(),
        target_components: gy.len(),
        transform_normalized: result.best_transform,
        transform_source,
        ground_truth_source: ground_truth.copied(),
        value_at_ground_truth,
        errors,
        best_value: result.best_value,
        final_lower: result.final_lower,
        gap: result.gap,
        threshold: result.threshold,
        epsilon_optimal: result.epsilon_optimal,
        status: result.status,
        nodes_expanded: result.nodes_expanded,
        refinements_run: result.refinements_run,
        runtime_seconds: started.elapsed().as_secs_f64(),
        trace_path: None,
        trace: result.trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuccessLevel {
    Coarse,
    Medium,
    Fine,
}

/// Translation and rotation limits for counting a run as a success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThreshold {
    pub name: SuccessLevel,
    /// Source units.
    pub translation: f64,
    /// Degrees.
    pub rotation: f64,
}

pub const COARSE: SuccessThreshold = SuccessThreshold { name: SuccessLevel::Coarse, translation: 2.0, rotation: 10.0 };
pub const MEDIUM: SuccessThreshold = SuccessThreshold { name: SuccessLevel::Medium, translation: 1.0, rotation: 5.0 };
pub const FINE: SuccessThreshold = SuccessThreshold { name: SuccessLevel::Fine, translation: 0.5, rotation: 2.5 };

impl SuccessThreshold {
    pub fn accepts(&self, errors: &AlignmentErrors) -> bool {
        let t = errors.translation_error_source.unwrap_or(errors.translation_error);
        t < self.translation && errors.rotation_error < self.rotation
    }
}

/// A benchmark: the source aligned with rotated (and optionally cropped)
/// copies of itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub rotations: usize,
    pub rotation_seed: u64,
    /// Fraction of each target removed with [`crop_contiguous`].
    #[serde(default)]
    pub crop_fraction: Option<f64>,
    pub mixture: MixtureSettings,
    pub search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAtThreshold {
    pub threshold: SuccessThreshold,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum BenchmarkRun {
    Completed { index: usize, rotation: AngleAxis, record: Box<RunRecord> },
    Failed { index: usize, rotation: AngleAxis, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub schema_version: u32,
    pub spec: BenchmarkSpec,
    pub runs: Vec<BenchmarkRun>,
    pub completed: usize,
    pub epsilon_optimal: usize,
    pub mean_rotation_error: f64,
    pub max_rotation_error: f64,
    pub mean_translation_error: f64,
    pub max_translation_error: f64,
    pub success_rates: Vec<RateAtThreshold>,
    pub mean_runtime_seconds: f64,
}

impl BenchmarkSummary {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter_map(|r| match r {
            BenchmarkRun::Completed { record, .. } => Some(record.as_ref()),
            BenchmarkRun::Failed { .. } => None,
        })
    }

    pub fn without_timing(&self) -> BenchmarkSummary {
        let mut s = self.clone();
        s.mean_runtime_seconds = 0.0;
        for run in &mut s.runs {
            if let BenchmarkRun::Completed { record, .. } = run {
                **record = record.without_timing();
            }
        }
        s
    }

    /// Plain-text table of the summary.
    pub fn table(&self) -> String {
        let mut out = format!(
            "runs {}  completed {}  epsilon-optimal {}\nrotation error (deg)     mean {:.4}  max {:.4}\ntranslation error        mean {:.6}  max {:.6}\n",
            self.runs.len(),
            self.completed,
            self.epsilon_optimal,
            self.mean_rotation_error,
            self.max_rotation_error,
            self.mean_translation_error,
            self.max_translation_error,
        );
        for rate in &self.success_rates {
            out.push_str(&format!(
                "{:<8} (<{} units, <{} deg)  {}/{}  {:.1}%\n",
                format!("{:?}", rate.threshold.name).to_lowercase(),
                rate.threshold.translation,
                rate.threshold.rotation,
                rate.successes,
                self.runs.len(),
                100.0 * rate.rate
            ));
        }
        out.push_str(&format!("mean runtime {:.2} s\n", self.mean_runtime_seconds));
        out
    }
}

/// Runs one registration per sampled rotation. Failures are recorded in the
/// summary instead of aborting.
pub fn run_benchmark(source: &PointCloud, spec: &BenchmarkSpec) -> Result<BenchmarkSummary> {
    run_benchmark_with(source, spec, |_, _| {})
}

/// As [`run_benchmark`], calling `progress` after each run.
pub fn run_benchmark_with(
    source: &PointCloud,
    spec: &BenchmarkSpec,
    mut progress: impl FnMut(usize, &BenchmarkRun),
) -> Result<BenchmarkSummary> {
    spec.mixture.validate()?;
    spec.search.validate()?;
    if let Some(f) = spec.crop_fraction {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("crop fraction must be in [0, 1), got {f}")));
        }
    }
    let rotations = sample_rotations(spec.rotations, spec.rotation_seed);
    let mut runs = Vec::with_capacity(rotations.len());
    for (index, rotation) in rotations.into_iter().enumerate() {
        let outcome = benchmark_case(source, spec, index, rotation);
        let run = match outcome {
            Ok(record) => BenchmarkRun::Completed { index, rotation, record: Box::new(record) },
            Err(e) => BenchmarkRun::Failed { index, rotation, message: e.to_string() },
        };
        progress(index, &run);
        runs.push(run);
    }
    Ok(summarize(spec.clone(), runs))
}

fn benchmark_case(source: &PointCloud, spec: &BenchmarkSpec, index: usize, rotation: AngleAxis) -> Result<RunRecord> {
    let truth = RigidTransform::new(rotation, Vector3::zeros());
    let base = match spec.crop_fraction {
        Some(f) if f > 0.0 => crop_contiguous(source, f, spec.rotation_seed.wrapping_add(index as u64))?,
        _ => source.clone(),
    };
    let target = base.transformed(&truth);
    run_registration(source, &target, &spec.mixture, &spec.search, Some(&truth))
}

fn summarize(spec: BenchmarkSpec, runs: Vec<BenchmarkRun>) -> BenchmarkSummary {
    let records: Vec<&RunRecord> = runs
        .iter()
        .filter_map(|r| match r {
            BenchmarkRun::Completed { record, .. } => Some(record.as_ref()),
            BenchmarkRun::Failed { .. } => None,
        })
        .collect();
    let errors: Vec<AlignmentErrors> = records.iter().filter_map(|r| r.errors).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let rot: Vec<f64> = errors.iter().map(|e| e.rotation_error).collect();
    let trans: Vec<f64> = errors.iter().map(|e| e.translation_error_source.unwrap_or(e.translation_error)).collect();
    let runtimes: Vec<f64> = records.iter().map(|r| r.runtime_seconds).collect();
    let total = runs.len().max(1) as f64;
    let success_rates = [COARSE, MEDIUM, FINE]
        .into_iter()
        .map(|threshold| {
            let successes = errors.iter().filter(|e| threshold.accepts(e)).count();
            RateAtThreshold { threshold, successes, rate: successes as f64 / total }
        })
        .collect();
    BenchmarkSummary {
        schema_version: SCHEMA_VERSION,
        completed: records.len(),
        epsilon_optimal: records.iter().filter(|r| r.epsilon_optimal).count(),
        mean_rotation_error: mean(&rot),
        max_rotation_error: max(&rot),
        mean_translation_error: mean(&trans),
        max_translation_error: max(&trans),
        success_rates,
        mean_runtime_seconds: mean(&runtimes),
        spec,
        runs,
    }
}
