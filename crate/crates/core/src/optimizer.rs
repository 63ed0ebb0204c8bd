//! Levenberg–Marquardt over a factor graph.
//!
//! The solver repeatedly linearizes all factors about the current values,
//! forms the Gauss–Newton normal equations in 6×6 blocks, applies Marquardt
//! damping (each diagonal entry scaled by `1 + λ`), and solves by a
//! block-sparse Cholesky factorization. Steps that do not reduce the total
//! error are rejected and retried with a larger λ; accepted steps shrink λ.
//!
//! Variables are eliminated time-varying poses first (ordered by body and
//! frame), then the static poses. In the graphs produced here the statics —
//! marker poses, camera extrinsics — are the variables shared across many
//! frames, so eliminating them last keeps fill-in confined to a small dense
//! trailing block instead of spreading through the whole system.
//!
//! Whether the problem is solvable at all is decided *structurally* before
//! any algebra: every connected component of the free variables must be tied
//! to the world, either by an absolute prior on one of its members or by a
//! factor that also touches a frozen variable. Damping makes the normal
//! equations positive definite even for gauge-free problems, so a numeric
//! check alone would happily converge to an arbitrary gauge; the structural
//! check refuses instead.

use crate::factor::{Factor, VariableKey};
use crate::graph::{Graph, GraphError};
use crate::se3::Pose;
use nalgebra::{Cholesky, DMatrix, Matrix6, Vector6};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Converged when an accepted step reduces the error by less than this
    /// fraction of the error itself.
    pub rel_decrease_tol: f64,
    /// Converged outright when the total error drops below this.
    pub abs_error_tol: f64,
    pub lambda_max: f64,
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig {
            max_iterations: 100,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 10.0,
            rel_decrease_tol: 1e-9,
            abs_error_tol: 1e-12,
            lambda_max: 1e10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeStatus {
    /// An accepted step made no meaningful progress; the values are a local
    /// minimum to within tolerance.
    Converged,
    /// Ran out of iterations while still improving.
    MaxIterations,
    /// λ grew past its cap without finding an acceptable step.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub initial_error: f64,
    pub final_error: f64,
    /// Number of linearizations performed.
    pub iterations: usize,
    pub status: OptimizeStatus,
    /// Total error after each accepted step, starting with the initial error.
    pub error_trace: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    /// The free variables are not all tied to the world; solving would pick
    /// an arbitrary gauge, so the problem is refused up front.
    #[error("under-constrained system: {0}")]
    SingularSystem(String),
    /// A factor could not be evaluated, even after damping shrank the step
    /// as far as it goes. The initial values were too far off.
    #[error(transparent)]
    Evaluation(#[from] GraphError),
}

/// Minimizes the graph's total error over all variables not listed in
/// `frozen`, updating values in place.
pub fn optimize(
    graph: &mut Graph,
    frozen: &BTreeSet<VariableKey>,
    cfg: &OptimizerConfig,
) -> Result<OptimizeReport, OptimizeError> {
    let free: BTreeSet<VariableKey> = graph
        .variables()
        .map(|(k, _)| k.clone())
        .filter(|k| !frozen.contains(k))
        .collect();

    check_anchoring(graph, &free)?;

    let initial_error = graph.total_error()?;
    let mut error = initial_error;
    let mut trace = vec![error];

    if free.is_empty() || error <= cfg.abs_error_tol {
        return Ok(OptimizeReport {
            initial_error,
            final_error: error,
            iterations: 0,
            status: OptimizeStatus::Converged,
            error_trace: trace,
        });
    }

    // Time-varying poses first, statics last.
    let mut order: Vec<VariableKey> =
        free.iter().filter(|k| k.is_dynamic()).cloned().collect();
    order.extend(free.iter().filter(|k| !k.is_dynamic()).cloned());
    let index: BTreeMap<VariableKey, usize> = order
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i))
        .collect();

    let mut lambda = cfg.lambda_init;
    let mut status = OptimizeStatus::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_iterations {
        iterations += 1;
        let normal = NormalEquations::assemble(graph, &order, &index)?;

        loop {
            let Some(step) = normal.solve_damped(lambda) else {
                // Not positive definite even with damping applied.
                lambda *= cfg.lambda_up;
                if lambda > cfg.lambda_max {
                    return Err(OptimizeError::SingularSystem(
                        "damped normal equations are not positive definite".into(),
                    ));
                }
                continue;
            };

            let saved: Vec<Pose> = order.iter().map(|k| graph.value(k).unwrap()).collect();
            for ((key, old), delta) in order.iter().zip(&saved).zip(&step) {
                graph.set_value(key, old.retract(delta));
            }

            let trial = graph.error_at(&graph.getter());
            match trial {
                Err(e) => {
                    for (key, old) in order.iter().zip(&saved) {
                        graph.set_value(key, *old);
                    }
                    lambda *= cfg.lambda_up;
                    if lambda > cfg.lambda_max {
                        return Err(OptimizeError::Evaluation(e));
                    }
                }
                Ok(new_error) if new_error <= error => {
                    let decrease = error - new_error;
                    error = new_error;
                    trace.push(error);
                    lambda = (lambda / cfg.lambda_down).max(1e-15);
                    if error <= cfg.abs_error_tol
                        || decrease <= cfg.rel_decrease_tol * error.max(cfg.abs_error_tol)
                    {
                        status = OptimizeStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
                Ok(_) => {
                    for (key, old) in order.iter().zip(&saved) {
                        graph.set_value(key, *old);
                    }
                    lambda *= cfg.lambda_up;
                    if lambda > cfg.lambda_max {
                        status = OptimizeStatus::Stalled;
                        break 'outer;
                    }
                }
            }
        }
    }

    // Leave per-factor norms reflecting the final values.
    let final_error = graph.total_error()?;
    Ok(OptimizeReport {
        initial_error,
        final_error,
        iterations,
        status,
        error_trace: trace,
    })
}

/// Refuses graphs where some free variables float: each connected component
/// of free variables needs an absolute prior on a member or a factor shared
/// with a frozen variable, and no free variable may be factor-less.
fn check_anchoring(graph: &Graph, free: &BTreeSet<VariableKey>) -> Result<(), OptimizeError> {
    let index: BTreeMap<&VariableKey, usize> =
        free.iter().enumerate().map(|(i, k)| (k, i)).collect();

    for key in free {
        if graph.factors_of(key).is_empty() {
            return Err(OptimizeError::SingularSystem(format!(
                "variable {key} has no factors"
            )));
        }
    }

    let mut parent: Vec<usize> = (0..free.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for factor in graph.factors() {
        let members: Vec<usize> = factor
            .keys()
            .iter()
            .filter_map(|k| index.get(k).copied())
            .collect();
        for pair in members.windows(2) {
            let (a, b) = (find(&mut parent, pair[0]), find(&mut parent, pair[1]));
            parent[a] = b;
        }
    }

    let mut anchored = vec![false; free.len()];
    for factor in graph.factors() {
        let keys = factor.keys();
        let members: Vec<usize> = keys.iter().filter_map(|k| index.get(k).copied()).collect();
        if members.is_empty() {
            continue;
        }
        let touches_frozen = members.len() < keys.len();
        let is_absolute = matches!(factor, Factor::AbsolutePrior { .. });
        if touches_frozen || is_absolute {
            let root = find(&mut parent, members[0]);
            anchored[root] = true;
        }
    }

    for (key, &i) in &index {
        let root = find(&mut parent, i);
        if !anchored[root] {
            return Err(OptimizeError::SingularSystem(format!(
                "variable {key} is not tied to the world by any prior or frozen variable"
            )));
        }
    }
    Ok(())
}

/// The Gauss–Newton normal equations `H δ = g` in 6×6 blocks.
///
/// `cols[j]` holds the lower-triangular blocks of column `j`: an entry at row
/// `i ≥ j` is `H_ij = Σ J_iᵀ J_j`. The same storage is factorized in place by
/// a right-looking block Cholesky, fill-in appearing as new map entries.
struct NormalEquations {
    cols: Vec<BTreeMap<usize, Matrix6<f64>>>,
    rhs: Vec<Vector6<f64>>,
}

impl NormalEquations {
    fn assemble(
        graph: &Graph,
        order: &[VariableKey],
        index: &BTreeMap<VariableKey, usize>,
    ) -> Result<NormalEquations, GraphError> {
        let n = order.len();
        let mut cols: Vec<BTreeMap<usize, Matrix6<f64>>> = vec![BTreeMap::new(); n];
        let mut rhs = vec![Vector6::zeros(); n];
        let get = graph.getter();

        for (fi, factor) in graph.factors().iter().enumerate() {
            let eval = factor
                .linearize(&get)
                .map_err(|source| GraphError::Evaluation {
                    index: fi,
                    kind: factor.describe().kind,
                    source,
                })?;

            // A factor may carry two jacobians for one variable (a marker
            // mounted on the rig body itself); they sum into one column.
            let mut merged: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
            for (key, jac) in eval.jacobians {
                let Some(&i) = index.get(&key) else { continue };
                match merged.entry(i) {
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &jac;
                    }
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(jac);
                    }
                }
            }

            for (&i, ji) in &merged {
                let g = ji.transpose() * &eval.residual;
                rhs[i] -= Vector6::from_column_slice(g.as_slice());
                for (&j, jj) in merged.range(..=i) {
                    let block = ji.transpose() * jj;
                    let block = Matrix6::from_column_slice(block.as_slice());
                    cols[j]
                        .entry(i)
                        .and_modify(|m| *m += block)
                        .or_insert(block);
                }
            }
        }
        Ok(NormalEquations { cols, rhs })
    }

    /// Solves `(H + λ diag H) δ = g`. `None` means the damped matrix was not
    /// positive definite.
    fn solve_damped(&self, lambda: f64) -> Option<Vec<Vector6<f64>>> {
        let n = self.cols.len();
        let mut cols = self.cols.clone();

        for (j, col) in cols.iter_mut().enumerate() {
            let d = col.get_mut(&j)?;
            for k in 0..6 {
                d[(k, k)] *= 1.0 + lambda;
            }
        }

        // Right-looking block Cholesky, L replacing H in place.
        for j in 0..n {
            let ljj = Cholesky::new(*cols[j].get(&j)?)?.l();
            *cols[j].get_mut(&j).unwrap() = ljj;

            let rows: Vec<usize> = cols[j].range(j + 1..).map(|(&i, _)| i).collect();
            for &i in &rows {
                let hij = cols[j][&i];
                let xt = ljj.solve_lower_triangular(&hij.transpose())?;
                *cols[j].get_mut(&i).unwrap() = xt.transpose();
            }
            for (a, &k) in rows.iter().enumerate() {
                let lkj = cols[j][&k];
                for &i in &rows[a..] {
                    let update = cols[j][&i] * lkj.transpose();
                    cols[k]
                        .entry(i)
                        .and_modify(|m| *m -= update)
                        .or_insert(-update);
                }
            }
        }

        // L y = g, then Lᵀ δ = y, reusing y for both.
        let mut y = self.rhs.clone();
        for j in 0..n {
            y[j] = cols[j][&j].solve_lower_triangular(&y[j])?;
            let yj = y[j];
            for (&i, lij) in cols[j].range(j + 1..) {
                y[i] -= lij * yj;
            }
        }
        for j in (0..n).rev() {
            let mut acc = y[j];
            for (&i, lij) in cols[j].range(j + 1..) {
                acc -= lij.transpose() * y[i];
            }
            y[j] = cols[j][&j].tr_solve_lower_triangular(&acc)?;
        }
        Some(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{tag_object_corners, Intrinsics};
    use crate::scene::Noise6;
    use crate::se3::{Rotation, Twist};
    use approx::assert_relative_eq;
    use nalgebra::{DVector, Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rig(frame: u64) -> VariableKey {
        VariableKey::DynamicBodyInWorld {
            body: "rig".into(),
            frame,
        }
    }

    fn random_pose(rng: &mut impl Rng, rot: f64, trans: f64) -> Pose {
        Pose::new(
            Rotation::exp(&Vector3::new(
                rng.random_range(-rot..rot),
                rng.random_range(-rot..rot),
                rng.random_range(-rot..rot),
            )),
            Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            ),
        )
    }

    #[test]
    fn single_prior_converges_in_a_few_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = random_pose(&mut rng, 1.0, 2.0);
        let mut g = Graph::new();
        let off = random_pose(&mut rng, 0.3, 0.5);
        g.ensure_variable(rig(0), target.compose(&off));
        g.add_factor(Factor::AbsolutePrior {
            target: rig(0),
            pose: target,
            noise: Noise6::isotropic(0.01, 0.02),
        });

        let report = optimize(&mut g, &BTreeSet::new(), &OptimizerConfig::default()).unwrap();
        assert_eq!(report.status, OptimizeStatus::Converged);
        assert!(report.iterations <= 5, "took {} iterations", report.iterations);
        // Stops once the error clears the absolute tolerance.
        assert!(report.final_error < 1e-11);
        let est = g.value(&rig(0)).unwrap();
        assert!(est.ominus(&target).norm() < 1e-6);
    }

    #[test]
    fn accepted_error_is_monotone_and_restart_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let mut truth = vec![Pose::identity()];
        for _ in 1..8 {
            let step = random_pose(&mut rng, 0.2, 0.5);
            let last = *truth.last().unwrap();
            truth.push(last.compose(&step));
        }
        for (t, pose) in truth.iter().enumerate() {
            let noise = random_pose(&mut rng, 0.1, 0.2);
            g.ensure_variable(rig(t as u64), pose.compose(&noise));
        }
        g.add_factor(Factor::AbsolutePrior {
            target: rig(0),
            pose: truth[0],
            noise: Noise6::isotropic(1e-3, 1e-3),
        });
        for t in 1..truth.len() {
            let delta = truth[t - 1].inverse().compose(&truth[t]);
            g.add_factor(Factor::RelativePrior {
                a: rig(t as u64),
                b: rig(t as u64 - 1),
                delta,
                noise: Noise6::isotropic(1e-3, 1e-3),
            });
        }

        let report = optimize(&mut g, &BTreeSet::new(), &OptimizerConfig::default()).unwrap();
        assert_eq!(report.status, OptimizeStatus::Converged);
        for w in report.error_trace.windows(2) {
            assert!(w[1] <= w[0], "error increased: {} -> {}", w[0], w[1]);
        }
        assert!(report.final_error < 1e-11);
        for (t, pose) in truth.iter().enumerate() {
            let est = g.value(&rig(t as u64)).unwrap();
            assert!(est.ominus(pose).norm() < 1e-6, "frame {t} off");
        }

        // Re-running from the minimum makes no further progress.
        let again = optimize(&mut g, &BTreeSet::new(), &OptimizerConfig::default()).unwrap();
        assert_eq!(again.status, OptimizeStatus::Converged);
        assert!(again.iterations <= 1);
        assert_eq!(again.final_error, again.initial_error);
    }

    #[test]
    fn block_cholesky_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for round in 0..20 {
            let mut g = Graph::new();
            let n = 8;
            for t in 0..n {
                g.ensure_variable(rig(t), random_pose(&mut rng, 0.8, 2.0));
            }
            let statics = [
                VariableKey::TagInBody { tag: 3 },
                VariableKey::StaticBodyInWorld { body: "lab".into() },
            ];
            for key in &statics {
                g.ensure_variable(key.clone(), random_pose(&mut rng, 0.8, 2.0));
            }
            g.add_factor(Factor::AbsolutePrior {
                target: rig(0),
                pose: random_pose(&mut rng, 0.5, 1.0),
                noise: Noise6::isotropic(0.1, 0.1),
            });
            for t in 1..n {
                g.add_factor(Factor::RelativePrior {
                    a: rig(t),
                    b: rig(t - 1),
                    delta: random_pose(&mut rng, 0.3, 0.8),
                    noise: Noise6::isotropic(0.05, 0.1),
                });
            }
            // Loop closures and static ties create off-chain fill-in.
            for (a, b) in [(0u64, 5u64), (2, 7), (1, 6)] {
                g.add_factor(Factor::RelativePrior {
                    a: rig(a),
                    b: rig(b),
                    delta: random_pose(&mut rng, 0.3, 0.8),
                    noise: Noise6::isotropic(0.05, 0.1),
                });
            }
            for t in [1u64, 4, 6] {
                for key in &statics {
                    g.add_factor(Factor::RelativePrior {
                        a: key.clone(),
                        b: rig(t),
                        delta: random_pose(&mut rng, 0.3, 0.8),
                        noise: Noise6::isotropic(0.05, 0.1),
                    });
                }
            }

            let free: BTreeSet<VariableKey> =
                g.variables().map(|(k, _)| k.clone()).collect();
            let mut order: Vec<VariableKey> =
                free.iter().filter(|k| k.is_dynamic()).cloned().collect();
            order.extend(free.iter().filter(|k| !k.is_dynamic()).cloned());
            let index: BTreeMap<VariableKey, usize> = order
                .iter()
                .enumerate()
                .map(|(i, k)| (k.clone(), i))
                .collect();

            let normal = NormalEquations::assemble(&g, &order, &index).unwrap();
            let lambda = [0.0, 0.37, 5.0][round % 3];
            let sparse = normal.solve_damped(lambda).unwrap();

            // Dense reference from the same blocks.
            let dim = 6 * order.len();
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for (j, col) in normal.cols.iter().enumerate() {
                for (&i, block) in col {
                    h.view_mut((6 * i, 6 * j), (6, 6)).copy_from(block);
                    if i != j {
                        h.view_mut((6 * j, 6 * i), (6, 6))
                            .copy_from(&block.transpose());
                    }
                }
            }
            for (i, v) in normal.rhs.iter().enumerate() {
                b.rows_mut(6 * i, 6).copy_from(v);
            }
            for k in 0..dim {
                h[(k, k)] *= 1.0 + lambda;
            }
            let dense = h.lu().solve(&b).unwrap();

            for (i, block) in sparse.iter().enumerate() {
                for k in 0..6 {
                    assert_relative_eq!(
                        block[k],
                        dense[6 * i + k],
                        epsilon = 1e-9,
                        max_relative = 1e-7
                    );
                }
            }
        }
    }

    #[test]
    fn relative_factors_alone_are_rejected_as_gauge_free() {
        let mut g = Graph::new();
        g.ensure_variable(rig(0), Pose::identity());
        g.ensure_variable(rig(1), Pose::identity());
        g.add_factor(Factor::RelativePrior {
            a: rig(1),
            b: rig(0),
            delta: Pose::identity(),
            noise: Noise6::isotropic(0.1, 0.1),
        });
        let err = optimize(&mut g, &BTreeSet::new(), &OptimizerConfig::default());
        assert!(matches!(err, Err(OptimizeError::SingularSystem(_))));
    }

    #[test]
    fn factorless_variable_is_rejected() {
        let mut g = Graph::new();
        g.ensure_variable(rig(0), Pose::identity());
        g.ensure_variable(rig(1), Pose::identity());
        g.add_factor(Factor::AbsolutePrior {
            target: rig(0),
            pose: Pose::identity(),
            noise: Noise6::isotropic(0.1, 0.1),
        });
        let err = optimize(&mut g, &BTreeSet::new(), &OptimizerConfig::default());
        match err {
            Err(OptimizeError::SingularSystem(msg)) => {
                assert!(msg.contains("rig@1"), "message was: {msg}");
            }
            other => panic!("expected SingularSystem, got {other:?}"),
        }
    }

    #[test]
    fn frozen_variable_anchors_its_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let anchor = random_pose(&mut rng, 0.5, 1.0);
        g.ensure_variable(rig(0), anchor);
        let delta = random_pose(&mut rng, 0.2, 0.5);
        g.ensure_variable(rig(1), anchor.compose(&delta).compose(&random_pose(&mut rng, 0.05, 0.1)));
        g.add_factor(Factor::RelativePrior {
            a: rig(1),
            b: rig(0),
            delta,
            noise: Noise6::isotropic(0.01, 0.01),
        });

        let frozen: BTreeSet<VariableKey> = [rig(0)].into_iter().collect();
        let report = optimize(&mut g, &frozen, &OptimizerConfig::default()).unwrap();
        assert_eq!(report.status, OptimizeStatus::Converged);
        assert!(report.final_error < 1e-16);
        // The frozen pose must not have moved.
        assert_eq!(g.value(&rig(0)).unwrap().translation, anchor.translation);
        let est = g.value(&rig(1)).unwrap();
        assert!(est.ominus(&anchor.compose(&delta)).norm() < 1e-8);
    }

    /// One rig pose observed through two markers with known layout: the
    /// estimator's scatter over repeated noise draws must match the
    /// covariance predicted by the whitened normal equations, and the truth
    /// must sit inside the 3σ band for nearly all draws.
    #[test]
    fn recovered_pose_scatter_matches_predicted_covariance() {
        let intr = Intrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            dist: [0.0; 4],
            width: 640,
            height: 480,
        };
        let lab = VariableKey::StaticBodyInWorld { body: "lab".into() };
        let cam = VariableKey::CameraInRig { camera: "cam".into() };
        let tag_keys = [VariableKey::TagInBody { tag: 0 }, VariableKey::TagInBody { tag: 1 }];
        let tag_poses = [
            Pose::new(Rotation::exp(&Vector3::new(0.0, std::f64::consts::PI, 0.0)),
                Vector3::new(-0.5, 0.0, 2.0)),
            Pose::new(Rotation::exp(&Vector3::new(0.1, std::f64::consts::PI - 0.2, 0.0)),
                Vector3::new(0.5, 0.1, 2.2)),
        ];
        let tag_size = 0.4;
        let rig_truth = Pose::new(
            Rotation::exp(&Vector3::new(0.02, -0.03, 0.01)),
            Vector3::new(0.05, -0.04, 0.1),
        );

        let exact = |tag: usize| -> [Vector2<f64>; 4] {
            let corners = tag_object_corners(tag_size).unwrap();
            corners.map(|s| {
                let world = tag_poses[tag].transform_point(&s);
                let in_cam = rig_truth.inverse().transform_point(&world);
                intr.project(&in_cam).unwrap()
            })
        };
        let exact_corners = [exact(0), exact(1)];

        let build = |corners: [[Vector2<f64>; 4]; 2], init: Pose| -> Graph {
            let mut g = Graph::new();
            g.ensure_variable(lab.clone(), Pose::identity());
            g.ensure_variable(cam.clone(), Pose::identity());
            g.ensure_variable(tag_keys[0].clone(), tag_poses[0]);
            g.ensure_variable(tag_keys[1].clone(), tag_poses[1]);
            g.ensure_variable(rig(0), init);
            for t in 0..2 {
                g.add_factor(Factor::TagProjection {
                    body: lab.clone(),
                    camera: cam.clone(),
                    tag: tag_keys[t].clone(),
                    rig: rig(0),
                    corners: corners[t],
                    intrinsics: intr,
                    tag_size,
                    pixel_noise: 1.0,
                });
            }
            g
        };
        let frozen: BTreeSet<VariableKey> = [lab.clone(), cam.clone(), tag_keys[0].clone(), tag_keys[1].clone()]
            .into_iter()
            .collect();

        // Predicted covariance from the whitened jacobian at the truth.
        let g0 = build(exact_corners, rig_truth);
        let rig_index: BTreeMap<VariableKey, usize> = [(rig(0), 0usize)].into_iter().collect();
        let normal = NormalEquations::assemble(&g0, &[rig(0)], &rig_index).unwrap();
        let predicted = normal.cols[0][&0]
            .try_inverse()
            .expect("information matrix invertible");
        let predicted_sigma: Vec<f64> = (0..6).map(|k| predicted[(k, k)].sqrt()).collect();
        drop(g0);

        let n_draws = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut errors: Vec<Twist> = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let noisy = exact_corners.map(|quad| {
                quad.map(|c| {
                    let dx: f64 = StandardNormal.sample(&mut rng);
                    let dy: f64 = StandardNormal.sample(&mut rng);
                    c + Vector2::new(dx, dy)
                })
            });
            let init = rig_truth.retract(&{
                let mut d = Twist::zeros();
                for k in 0..3 {
                    d[k] = rng.random_range(-0.05..0.05);
                    d[k + 3] = rng.random_range(-0.05..0.05);
                }
                d
            });
            let mut g = build(noisy, init);
            let report = optimize(&mut g, &frozen, &OptimizerConfig::default()).unwrap();
            assert_eq!(report.status, OptimizeStatus::Converged);
            errors.push(g.value(&rig(0)).unwrap().ominus(&rig_truth));
        }

        for k in 0..6 {
            let mean = errors.iter().map(|e| e[k]).sum::<f64>() / n_draws as f64;
            let var = errors.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>()
                / (n_draws - 1) as f64;
            let sigma = var.sqrt();

            // Unbiased to within sampling error.
            assert!(
                mean.abs() <= 4.0 * sigma / (n_draws as f64).sqrt(),
                "component {k} biased: mean {mean:.2e} vs σ {sigma:.2e}"
            );
            // Scatter agrees with the predicted standard deviation.
            assert!(
                (sigma / predicted_sigma[k] - 1.0).abs() < 0.3,
                "component {k}: sample σ {sigma:.3e}, predicted {:.3e}",
                predicted_sigma[k]
            );
            // Individual draws honor the 3σ band at the Gaussian rate.
            let inside = errors
                .iter()
                .filter(|e| e[k].abs() <= 3.0 * predicted_sigma[k])
                .count();
            assert!(
                inside as f64 >= 0.97 * n_draws as f64,
                "component {k}: only {inside}/{n_draws} draws within 3σ"
            );
        }
    }

    #[test]
    fn optimization_is_bit_for_bit_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mut g = Graph::new();
            let mut truth = vec![Pose::identity()];
            for _ in 1..6 {
                let step = random_pose(&mut rng, 0.3, 0.6);
                let last = *truth.last().unwrap();
                truth.push(last.compose(&step));
            }
            for (t, pose) in truth.iter().enumerate() {
                let noise = random_pose(&mut rng, 0.15, 0.3);
                g.ensure_variable(rig(t as u64), pose.compose(&noise));
            }
            g.add_factor(Factor::AbsolutePrior {
                target: rig(0),
                pose: truth[0],
                noise: Noise6::isotropic(1e-3, 1e-3),
            });
            for t in 1..truth.len() {
                g.add_factor(Factor::RelativePrior {
                    a: rig(t as u64),
                    b: rig(t as u64 - 1),
                    delta: truth[t - 1].inverse().compose(&truth[t]),
                    noise: Noise6::isotropic(1e-2, 1e-2),
                });
            }
            g
        };

        let mut g1 = build();
        let mut g2 = build();
        let r1 = optimize(&mut g1, &BTreeSet::new(), &OptimizerConfig::default()).unwrap();
        let r2 = optimize(&mut g2, &BTreeSet::new(), &OptimizerConfig::default()).unwrap();
        assert_eq!(r1.iterations, r2.iterations);
        assert_eq!(r1.error_trace, r2.error_trace);
        for (k, v) in g1.variables() {
            let w = g2.value(k).unwrap();
            assert_eq!(v.translation.map(f64::to_bits), w.translation.map(f64::to_bits));
            let qa = v.rotation.quaternion_xyzw().map(f64::to_bits);
            let qb = w.rotation.quaternion_xyzw().map(f64::to_bits);
            assert_eq!(qa, qb, "rotation bits differ at {k}");
        }
    }

    #[test]
    fn projection_bundle_recovers_perturbed_rig() {
        // Same scene as the covariance test, no noise: the perturbed rig pose
        // must come back to the truth through the projection factors alone.
        let intr = Intrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            dist: [0.01, -0.002, 0.0005, -0.0003],
            width: 640,
            height: 480,
        };
        let lab = VariableKey::StaticBodyInWorld { body: "lab".into() };
        let cam = VariableKey::CameraInRig { camera: "cam".into() };
        let tag = VariableKey::TagInBody { tag: 9 };
        let tag_pose = Pose::new(
            Rotation::exp(&Vector3::new(0.2, std::f64::consts::PI - 0.1, 0.05)),
            Vector3::new(0.2, -0.1, 1.8),
        );
        let cam_pose = Pose::new(
            Rotation::exp(&Vector3::new(0.0, 0.05, 0.0)),
            Vector3::new(0.1, 0.0, 0.0),
        );
        let rig_truth = Pose::new(
            Rotation::exp(&Vector3::new(0.0, -0.04, 0.02)),
            Vector3::new(-0.1, 0.05, 0.0),
        );
        let size = 0.5;
        let corners = tag_object_corners(size).unwrap().map(|s| {
            let world = tag_pose.transform_point(&s);
            let in_rig = rig_truth.inverse().transform_point(&world);
            intr.project(&cam_pose.inverse().transform_point(&in_rig)).unwrap()
        });

        let mut g = Graph::new();
        g.ensure_variable(lab.clone(), Pose::identity());
        g.ensure_variable(cam.clone(), cam_pose);
        g.ensure_variable(tag.clone(), tag_pose);
        let init = rig_truth.retract(&Twist::from_column_slice(&[
            0.06, -0.04, 0.05, 0.08, -0.1, 0.12,
        ]));
        g.ensure_variable(rig(0), init);
        g.add_factor(Factor::TagProjection {
            body: lab.clone(),
            camera: cam.clone(),
            tag: tag.clone(),
            rig: rig(0),
            corners,
            intrinsics: intr,
            tag_size: size,
            pixel_noise: 0.5,
        });

        let frozen: BTreeSet<VariableKey> = [lab, cam, tag].into_iter().collect();
        let report = optimize(&mut g, &frozen, &OptimizerConfig::default()).unwrap();
        assert_eq!(report.status, OptimizeStatus::Converged);
        assert!(report.final_error < 1e-14, "final error {}", report.final_error);
        let est = g.value(&rig(0)).unwrap();
        assert!(
            est.ominus(&rig_truth).norm() < 1e-6,
            "rig off by {}",
            est.ominus(&rig_truth).norm()
        );
    }
}
