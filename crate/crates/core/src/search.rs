//! Best-first branch-and-bound over the 6D transform domain.
//!
//! The queue is ordered by lower bound. Each expansion bounds all children
//! of the popped cube in one batch; any child whose centre already beats
//! the incumbent seeds a local refinement, and only children whose lower
//! bound is still below the incumbent are queued. The search stops when the
//! incumbent is within `ε` of the smallest queued lower bound.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::bounds::{BoundEvaluator, NodeBounds};
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::objective::{PairKernel, RefineConfig};
use crate::se3::{RigidTransform, TransformCube};

/// Default cap on the number of queued cubes.
pub const DEFAULT_MAX_QUEUE: usize = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Absolute optimality gap at which the search stops.
    pub epsilon: f64,
    /// When set, the stopping gap is `epsilon_relative · |f*|` instead.
    pub epsilon_relative: Option<f64>,
    /// Subdivisions per axis at every branching step (`split⁶` children).
    pub split: usize,
    /// Translation half-width of the root domain.
    pub tau: f64,
    /// Refine from a grid of cube centres before searching.
    pub batch_init: bool,
    /// Subdivisions per axis of the root for the batch-initialisation grid
    /// (`batch_init_split⁶` starts), independent of `split`.
    pub batch_init_split: usize,
    pub time_budget: Option<Duration>,
    pub max_queue: Option<usize>,
    /// Drop rotation sub-cubes lying wholly outside the π-ball.
    pub prune_outside_pi_ball: bool,
    /// Overrides the root `[-π, π]³ × [-τ, τ]³` domain.
    pub domain: Option<TransformCube>,
    pub refine_max_iters: usize,
    pub refine_grad_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            epsilon_relative: None,
            split: 2,
            tau: 0.5,
            batch_init: true,
            batch_init_split: 4,
            time_budget: None,
            max_queue: Some(DEFAULT_MAX_QUEUE),
            prune_outside_pi_ball: true,
            domain: None,
            refine_max_iters: 200,
            refine_grad_tol: 1e-6,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if let Some(rel) = self.epsilon_relative {
            if !(rel.is_finite() && rel > 0.0) {
                return bad(format!("epsilon_relative must be positive, got {rel}"));
            }
        }
        if self.split < 2 {
            return bad(format!("split must be at least 2, got {}", self.split));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.batch_init_split < 2 {
            return bad(format!("batch_init_split must be at least 2, got {}", self.batch_init_split));
        }
        if self.max_queue == Some(0) {
            return bad("max_queue must be positive".into());
        }
        if let Some(d) = &self.domain {
            if !(d.rotation_half_width >= 0.0 && d.translation_half_width >= 0.0) {
                return bad("domain half-widths must be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn root(&self) -> TransformCube {
        self.domain.unwrap_or_else(|| TransformCube::root(self.tau))
    }

    /// Gap at which the search may stop, given the incumbent value.
    pub fn threshold(&self, best: f64) -> f64 {
        match self.epsilon_relative {
            Some(rel) => rel * best.abs(),
            None => self.epsilon,
        }
    }

    fn refine_config(&self) -> RefineConfig {
        RefineConfig { max_iters: self.refine_max_iters, grad_tol: self.refine_grad_tol, ..RefineConfig::default() }
    }
}

/// How the search ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    /// The incumbent is certified within the stopping gap.
    Optimal,
    /// The time budget ran out.
    TimeBudget,
    /// The queue grew past `max_queue`.
    QueueLimit,
}

/// One row of the bound-evolution trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub elapsed_seconds: f64,
    pub upper: f64,
    pub lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub best_transform: RigidTransform,
    pub best_value: f64,
    pub final_lower: f64,
    pub gap: f64,
    /// The stopping gap in force when the search ended.
    pub threshold: f64,
    pub epsilon_optimal: bool,
    pub status: SearchStatus,
    pub nodes_expanded: usize,
    pub refinements_run: usize,
    pub trace: Vec<TraceSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchNode {
    pub cube: TransformCube,
    pub lower: f64,
    pub upper: f64,
}

/// Heap entry: lowest lower bound first, then deeper cubes, then FIFO.
struct Queued {
    node: SearchNode,
    seq: u64,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap, so "greater" means "pop first".
        other
            .node
            .lower
            .total_cmp(&self.node.lower)
            .then(self.node.cube.depth.cmp(&other.node.cube.depth))
            .then(other.seq.cmp(&self.seq))
    }
}

/// The open nodes: a heap of candidates for expansion plus dormant nodes
/// whose lower bound sat at or above the cut when they were pushed.
#[derive(Default)]
struct Frontier {
    heap: BinaryHeap<Queued>,
    dormant: Vec<Queued>,
}

impl Frontier {
    fn push(&mut self, q: Queued, cut: f64) {
        if q.node.lower < cut {
            self.heap.push(q);
        } else {
            self.dormant.push(q);
        }
    }

    /// Moves dormant nodes below the (lowered) cut into the heap.
    fn wake(&mut self, cut: f64) {
        let mut i = 0;
        while i < self.dormant.len() {
            if self.dormant[i].node.lower < cut {
                self.heap.push(self.dormant.swap_remove(i));
            } else {
                i += 1;
            }
        }
    }

    /// Lowest lower bound among heap nodes, or among dormant ones when the heap is empty.
    fn peek_lower(&self) -> Option<f64> {
        match self.heap.peek() {
            Some(q) => Some(q.node.lower),
            None => self.dormant.iter().map(|q| q.node.lower).min_by(f64::total_cmp),
        }
    }

    fn min_lower(&self) -> f64 {
        let heap = self.heap.peek().map_or(f64::INFINITY, |q| q.node.lower);
        self.dormant.iter().map(|q| q.node.lower).fold(heap, f64::min)
    }

    fn pop(&mut self) -> Option<Queued> {
        self.heap.pop()
    }

    fn len(&self) -> usize {
        self.heap.len() + self.dormant.len()
    }
}

struct Incumbent {
    value: f64,
    transform: RigidTransform,
}

struct Searcher<'a> {
    evaluator: BoundEvaluator<'a>,
    config: &'a SearchConfig,
    root: TransformCube,
    refine: RefineConfig,
}

impl<'a> Searcher<'a> {
    fn kernel(&self) -> &PairKernel<'a> {
        self.evaluator.kernel()
    }

    /// Nodes with lower bound at or above this cannot be expanded before the search stops.
    fn cut(&self, best: f64) -> f64 {
        best - self.config.threshold(best)
    }

    fn children(&self, cube: &TransformCube) -> Result<Vec<TransformCube>> {
        let mut children = cube.subdivide(self.config.split)?;
        if self.config.prune_outside_pi_ball {
            children.retain(|c| !c.rotation_prunable());
        }
        Ok(children)
    }

    /// Refines from `start` and returns a candidate inside the root domain:
    /// the refined optimum when admissible, otherwise `start` itself.
    fn refine_from(&self, start: &RigidTransform) -> (f64, RigidTransform) {
        let res = self.kernel().refine(start, &self.refine);
        let canonical = res.transform.canonical();
        if self.root.contains(&canonical.rotation.0, &canonical.translation) {
            (self.kernel().value(&canonical), canonical)
        } else {
            (self.kernel().value(start), *start)
        }
    }

    fn refine_many(&self, starts: &[RigidTransform]) -> Vec<(f64, RigidTransform)> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            starts.par_iter().map(|s| self.refine_from(s)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            starts.iter().map(|s| self.refine_from(s)).collect()
        }
    }

    fn batch_initialize(&self, root: &TransformCube) -> Result<(f64, RigidTransform, usize)> {
        let mut cells = root.subdivide(self.config.batch_init_split)?;
        if self.config.prune_outside_pi_ball {
            cells.retain(|c| !c.rotation_prunable());
        }
        let starts: Vec<RigidTransform> = cells.iter().map(TransformCube::center_transform).collect();
        let results = self.refine_many(&starts);
        let best = results
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .copied()
            .unwrap_or_else(|| (self.kernel().value(&root.center_transform()), root.center_transform()));
        Ok((best.0, best.1, results.len()))
    }

    fn run(&self) -> Result<RegistrationResult> {
        let start_time = Instant::now();
        let elapsed = || start_time.elapsed().as_secs_f64();
        let root = self.root;

        let mut refinements = 1;
        let (value, transform) = self.refine_from(&root.center_transform());
        let mut best = Incumbent { value, transform };
        if self.config.batch_init {
            let (v, t, n) = self.batch_initialize(&root)?;
            refinements += n;
            if v < best.value {
                best = Incumbent { value: v, transform: t };
            }
        }

        let root_bounds = self.evaluator.bounds(&root);
        let mut global_lower = root_bounds.lower.min(best.value);
        let mut trace = vec![TraceSample { elapsed_seconds: elapsed(), upper: best.value, lower: global_lower }];

        // Nodes whose lower bound is already within the stopping gap of f*
        // can never be popped before the search stops, so they wait in a
        // plain list and only move to the heap if f* improves enough.
        let mut queue = Frontier::default();
        let mut seq = 0u64;
        if root_bounds.lower < best.value {
            queue.push(
                Queued { node: SearchNode { cube: root, lower: root_bounds.lower, upper: root_bounds.upper }, seq },
                self.cut(best.value),
            );
            seq += 1;
        }

        let mut nodes_expanded = 0;
        let status = loop {
            if let Some(budget) = self.config.time_budget {
                if start_time.elapsed() >= budget {
                    break SearchStatus::TimeBudget;
                }
            }
            let Some(node) = queue.peek_lower() else {
                // everything pruned: the incumbent is the global minimum
                global_lower = best.value;
                break SearchStatus::Optimal;
            };
            if node >= self.cut(best.value) {
                // the smallest remaining lower bound certifies the incumbent
                global_lower = global_lower.max(queue.min_lower().min(best.value));
                break SearchStatus::Optimal;
            }
            let Queued { node, .. } = queue.pop().expect("peeked");
            global_lower = global_lower.max(node.lower.min(best.value));

            let children = self.children(&node.cube)?;
            let bounds = self.evaluator.bounds_batch(&children);
            nodes_expanded += 1;

            let starts: Vec<RigidTransform> =
                bounds.iter().filter(|b| b.upper < best.value).map(|b| b.center_transform).collect();
            let mut refined = self.refine_many(&starts).into_iter();

            let before = (best.value, global_lower);
            for (cube, NodeBounds { lower, upper, .. }) in children.into_iter().zip(bounds) {
                if upper < best.value {
                    refinements += 1;
                    let (v, t) = refined.next().expect("one refinement per improving child");
                    if v < best.value {
                        best = Incumbent { value: v, transform: t };
                        queue.wake(self.cut(best.value));
                    }
                } else if upper < before.0 {
                    // precomputed, but superseded by an earlier sibling
                    refined.next();
                }
                if lower < best.value {
                    queue.push(Queued { node: SearchNode { cube, lower, upper }, seq }, self.cut(best.value));
                    seq += 1;
                }
            }
            if best.value < before.0 || global_lower > before.1 {
                trace.push(TraceSample {
                    elapsed_seconds: elapsed(),
                    upper: best.value,
                    lower: global_lower.min(best.value),
                });
            }
            if let Some(max) = self.config.max_queue {
                if queue.len() > max {
                    break SearchStatus::QueueLimit;
                }
            }
        };
        let final_lower = global_lower.min(best.value);
        let last = trace.last().copied();
        if last.is_none_or(|s| s.upper != best.value || s.lower != final_lower) {
            trace.push(TraceSample { elapsed_seconds: elapsed(), upper: best.value, lower: final_lower });
        }
        let gap = best.value - final_lower;
        let threshold = self.config.threshold(best.value);
        Ok(RegistrationResult {
            best_transform: best.transform,
            best_value: best.value,
            final_lower,
            gap,
            threshold,
            epsilon_optimal: status == SearchStatus::Optimal && gap <= threshold,
            status,
            nodes_expanded,
            refinements_run: refinements,
            trace,
        })
    }
}

/// Finds the transform of `source` minimising the objective against `target`.
pub fn register(
    source: &GaussianMixture,
    target: &GaussianMixture,
    config: &SearchConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    Searcher {
        evaluator: BoundEvaluator::new(source, target),
        config,
        root: config.root(),
        refine: config.refine_config(),
    }
    .run()
}

/// Refines from the centre of every cell of `root` split `split` ways per
/// axis and returns the best admissible value and transform.
pub fn batch_initialize(
    source: &GaussianMixture,
    target: &GaussianMixture,
    root: &TransformCube,
    split: usize,
) -> Result<(f64, RigidTransform)> {
    if split < 2 {
        return Err(Error::InvalidArgument(format!("split must be at least 2, got {split}")));
    }
    let config = SearchConfig { batch_init_split: split, domain: Some(*root), ..SearchConfig::default() };
    let searcher = Searcher {
        evaluator: BoundEvaluator::new(source, target),
        config: &config,
        root: *root,
        refine: config.refine_config(),
    };
    searcher.batch_initialize(root).map(|(v, t, _)| (v, t))
}

/// Trace rows `(elapsed_seconds, upper, lower)`.
pub fn export_trace(result: &RegistrationResult) -> Vec<(f64, f64, f64)> {
    result.trace.iter().map(|s| (s.elapsed_seconds, s.upper, s.lower)).collect()
}
