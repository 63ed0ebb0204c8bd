//! Robust bootstrapping of the factor graph: the two-graph design.
//!
//! Every measurement lands immediately in the *full* graph, but only content
//! that can actually be initialized and that survives validation makes it
//! into the *optimized* graph. Each round, new factors are ordered (odometry
//! before tag observations, larger tags before smaller), then each unconsumed
//! factor seeds a connected *subgraph* of newly determinable variables —
//! pulling in old factors when they can determine something new. Subgraphs
//! are initialized by walking their discovery-ordered factor list, optimized
//! in isolation with old poses pinned, and accepted only when their mean
//! whitened error stays under a threshold. A rejected subgraph is retried
//! with rotated initialization orderings before being dropped entirely, so
//! a single bad measurement cannot poison the optimized graph.

use crate::factor::{Factor, FactorDesc, Frame, VariableKey};
use crate::graph::Graph;
use crate::optimizer::{optimize, OptimizeError, OptimizerConfig};
use crate::planar;
use crate::scene::{Noise6, SolverSettings};
use crate::se3::Pose;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Stiffness of the temporary priors pinning already-determined poses
/// during subgraph validation.
const PIN_SIGMA: f64 = 1e-3;

/// The full/optimized graph pair plus bookkeeping about what is determined.
#[derive(Debug, Default)]
pub struct TwoGraphState {
    /// Every variable and factor ever seen.
    pub full: Graph,
    /// Only validated, initialized content.
    pub optimized: Graph,
    determined: BTreeSet<VariableKey>,
    /// Indices (into `full`) of factors that were transferred to `optimized`.
    absorbed: BTreeSet<usize>,
    /// Ambiguity-gate verdicts per projection factor; corners never change,
    /// so the verdict is computed once.
    ambiguity_cache: BTreeMap<usize, bool>,
}

impl TwoGraphState {
    pub fn new() -> TwoGraphState {
        TwoGraphState::default()
    }

    /// Variables with trusted pose estimates in the optimized graph.
    pub fn determined(&self) -> &BTreeSet<VariableKey> {
        &self.determined
    }

    pub fn is_determined(&self, key: &VariableKey) -> bool {
        self.determined.contains(key)
    }

    /// Full-graph indices of factors absorbed into the optimized graph.
    pub fn absorbed(&self) -> &BTreeSet<usize> {
        &self.absorbed
    }
}

/// A connected set of factors determining new variables, with everything
/// needed to initialize and validate it in isolation.
#[derive(Debug, Clone)]
pub struct Subgraph {
    /// Factor indices into the full graph, in discovery order. This ordering
    /// (possibly rotated) governs initialization.
    pub init_list: Vec<usize>,
    /// Variables this subgraph newly determines.
    pub new_vars: BTreeSet<VariableKey>,
    /// Previously determined variables in scope, held by tight priors at
    /// their current optimized values during validation.
    pub pinned: BTreeSet<VariableKey>,
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("no ordering can seed a value for variable {0}")]
    InitializationImpossible(VariableKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected,
    /// Not determinable this round; stays in the full graph for later.
    Deferred,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Accepted => "accepted",
            Verdict::Rejected => "rejected",
            Verdict::Deferred => "deferred",
        })
    }
}

/// Per-factor outcome of one round, the raw material for diagnostics.
#[derive(Debug, Clone)]
pub struct FactorRecord {
    /// Index into the full graph.
    pub index: usize,
    pub desc: FactorDesc,
    pub frame: Option<Frame>,
    /// Whitened residual norm after the subgraph optimization that decided
    /// this factor's fate; `None` if it was never evaluated.
    pub error: Option<f64>,
    pub verdict: Verdict,
    pub rotations: usize,
}

#[derive(Debug, Clone)]
pub struct SubgraphSummary {
    pub accepted: bool,
    pub rotations: usize,
    pub n_factors: usize,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub records: Vec<FactorRecord>,
    pub subgraphs: Vec<SubgraphSummary>,
}

/// Outcome of validating one subgraph.
#[derive(Debug, Clone)]
pub struct SubgraphOutcome {
    pub accepted: bool,
    /// Rotations of the initialization list used before the verdict: 0 means
    /// the discovery ordering was accepted as-is.
    pub rotations: usize,
    pub mean_error: Option<f64>,
    /// (full-graph factor index, whitened norm) from the deciding attempt.
    pub factor_errors: Vec<(usize, Option<f64>)>,
}

/// Settings shared by every subgraph of a round.
pub struct RoundOptions<'a> {
    pub settings: &'a SolverSettings,
    pub optimizer: &'a OptimizerConfig,
    /// Variables held fixed when re-optimizing the optimized graph
    /// (windowed operation); subgraph validation ignores this and relies on
    /// pinning instead.
    pub frozen: &'a BTreeSet<VariableKey>,
}

/// Orders a round's new factors: relative pose priors first (odometry is the
/// most reliable way to establish a body pose), then tag projections by
/// descending pixel area across all cameras, then everything else. Ties
/// break by frame, camera name, and tag id so replays are deterministic.
pub fn order_new_factors(graph: &Graph, new: &[usize]) -> Vec<usize> {
    let mut keyed: Vec<(usize, usize)> = new.iter().copied().enumerate().collect();
    keyed.sort_by(|&(seq_a, a), &(seq_b, b)| {
        let fa = graph.factor(a);
        let fb = graph.factor(b);
        let tier = |f: &Factor| match f {
            Factor::RelativePrior { .. } => 0,
            Factor::TagProjection { .. } => 1,
            Factor::AbsolutePrior { .. } => 2,
        };
        tier(fa).cmp(&tier(fb)).then_with(|| match (fa, fb) {
            (
                Factor::TagProjection {
                    corners: ca,
                    camera: cam_a,
                    tag: tag_a,
                    ..
                },
                Factor::TagProjection {
                    corners: cb,
                    camera: cam_b,
                    tag: tag_b,
                    ..
                },
            ) => crate::camera::pixel_area(cb)
                .total_cmp(&crate::camera::pixel_area(ca))
                .then_with(|| fa.frame().cmp(&fb.frame()))
                .then_with(|| cam_a.cmp(cam_b))
                .then_with(|| tag_a.cmp(tag_b)),
            _ => seq_a.cmp(&seq_b),
        })
    });
    keyed.into_iter().map(|(_, i)| i).collect()
}

enum Class {
    /// All variables already known; joins only as a fresh constraint.
    AllKnown,
    /// Can seed exactly this variable from the known ones.
    Determines(VariableKey),
    Blocked,
}

fn classify(
    full: &Graph,
    index: usize,
    known: &BTreeSet<VariableKey>,
    cache: &mut BTreeMap<usize, bool>,
    settings: &SolverSettings,
) -> Class {
    let factor = full.factor(index);
    let undetermined: BTreeSet<VariableKey> = factor
        .keys()
        .into_iter()
        .filter(|k| !known.contains(k))
        .collect();
    match undetermined.len() {
        0 => Class::AllKnown,
        1 => {
            let target = undetermined.into_iter().next().unwrap();
            if let Factor::TagProjection {
                body,
                tag,
                rig,
                corners,
                intrinsics,
                tag_size,
                ..
            } = factor
            {
                if body == rig && target == *body {
                    // A tag on the rig itself says nothing about the rig's
                    // world pose: the chain cancels.
                    return Class::Blocked;
                }
                if target == *tag {
                    // A tag pose may only enter through a projection if it
                    // has a prior somewhere, or the observation is free of
                    // planar ambiguity.
                    let has_prior = full.factors_of(tag).iter().any(|&i| {
                        matches!(full.factor(i), Factor::AbsolutePrior { target: t, .. } if t == tag)
                    });
                    let passes = has_prior
                        || *cache.entry(index).or_insert_with(|| {
                            planar::ambiguity_check(corners, intrinsics, *tag_size)
                                .map(|a| planar::is_unambiguous(&a, settings))
                                .unwrap_or(false)
                        });
                    if !passes {
                        return Class::Blocked;
                    }
                }
            }
            Class::Determines(target)
        }
        _ => Class::Blocked,
    }
}

/// Grows a connected subgraph from a seed factor: a factor joins when it
/// shares a variable with the subgraph and either determines a new variable
/// (old or new factors alike — history is exploited) or, for factors of the
/// current round only, constrains already-known ones. Returns `None` when
/// the seed itself determines nothing and adds no constraint.
pub fn discover_subgraph(
    state: &mut TwoGraphState,
    seed: usize,
    new_set: &BTreeSet<usize>,
    consumed: &BTreeSet<usize>,
    settings: &SolverSettings,
) -> Option<Subgraph> {
    let TwoGraphState {
        full,
        determined,
        absorbed,
        ambiguity_cache,
        ..
    } = state;

    let mut known = determined.clone();
    let mut sub_vars: BTreeSet<VariableKey> = BTreeSet::new();
    let mut init_list: Vec<usize> = Vec::new();
    let mut members: BTreeSet<usize> = BTreeSet::new();
    let mut new_vars: BTreeSet<VariableKey> = BTreeSet::new();

    match classify(full, seed, &known, ambiguity_cache, settings) {
        Class::Determines(v) => {
            known.insert(v.clone());
            new_vars.insert(v);
        }
        Class::AllKnown => {}
        Class::Blocked => return None,
    }
    init_list.push(seed);
    members.insert(seed);
    sub_vars.extend(full.factor(seed).keys());

    loop {
        let mut progressed = false;
        for index in 0..full.n_factors() {
            if members.contains(&index)
                || consumed.contains(&index)
                || absorbed.contains(&index)
            {
                continue;
            }
            if !full
                .factor(index)
                .keys()
                .iter()
                .any(|k| sub_vars.contains(k))
            {
                continue;
            }
            let joins = match classify(full, index, &known, ambiguity_cache, settings) {
                Class::Determines(v) => {
                    known.insert(v.clone());
                    new_vars.insert(v);
                    true
                }
                Class::AllKnown => new_set.contains(&index),
                Class::Blocked => false,
            };
            if joins {
                init_list.push(index);
                members.insert(index);
                sub_vars.extend(full.factor(index).keys());
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let pinned = sub_vars
        .iter()
        .filter(|k| determined.contains(*k))
        .cloned()
        .collect();
    Some(Subgraph {
        init_list,
        new_vars,
        pinned,
    })
}

/// Builds the standalone graph for one validation attempt: pinned variables
/// at their optimized values under tight priors, then the subgraph's factors
/// in the (rotated) initialization order, walking that order to seed every
/// new variable. The walk re-scans the list until it stops making progress,
/// so a rotated ordering may defer a factor until its prerequisites exist.
pub fn initialize_subgraph(
    state: &TwoGraphState,
    sub: &Subgraph,
    rotation: usize,
) -> Result<Graph, InitError> {
    let n = sub.init_list.len();
    let rotation = rotation % n.max(1);
    let rotated: Vec<usize> = sub.init_list[rotation..]
        .iter()
        .chain(sub.init_list[..rotation].iter())
        .copied()
        .collect();

    let mut g = Graph::new();
    for key in &sub.pinned {
        let pose = state
            .optimized
            .value(key)
            .expect("pinned variable has an optimized value");
        g.ensure_variable(key.clone(), pose);
        g.add_factor(Factor::AbsolutePrior {
            target: key.clone(),
            pose,
            noise: Noise6::isotropic(PIN_SIGMA, PIN_SIGMA),
        });
    }
    for key in &sub.new_vars {
        g.ensure_variable(key.clone(), Pose::identity());
    }
    for &index in &rotated {
        g.add_factor(state.full.factor(index).clone());
    }

    let mut valued = sub.pinned.clone();
    loop {
        let mut progressed = false;
        for &index in &rotated {
            let factor = state.full.factor(index);
            let pending: Vec<VariableKey> = factor
                .keys()
                .into_iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter(|k| !valued.contains(k))
                .collect();
            if pending.len() != 1 {
                continue;
            }
            let target = pending.into_iter().next().unwrap();
            if let Some(pose) = seed_value(factor, &target, &g) {
                g.set_value(&target, pose);
                valued.insert(target);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    for key in &sub.new_vars {
        if !valued.contains(key) {
            return Err(InitError::InitializationImpossible(key.clone()));
        }
    }
    Ok(g)
}

/// The value a factor assigns to its single unseeded variable, given the
/// already-seeded ones: priors propagate directly, projections go through
/// the planar pose of the observed tag and invert the camera chain.
fn seed_value(factor: &Factor, target: &VariableKey, g: &Graph) -> Option<Pose> {
    match factor {
        Factor::AbsolutePrior { pose, .. } => Some(*pose),
        Factor::RelativePrior { a, b, delta, .. } => {
            if target == a {
                Some(g.value(b)?.compose(delta))
            } else {
                Some(g.value(a)?.compose(&delta.inverse()))
            }
        }
        Factor::TagProjection {
            body,
            camera,
            tag,
            rig,
            corners,
            intrinsics,
            tag_size,
            ..
        } => {
            let p = planar::ambiguity_check(corners, intrinsics, *tag_size)
                .ok()?
                .best;
            if target == rig {
                // world-from-rig from the known tag.
                let b = g.value(body)?;
                let t = g.value(tag)?;
                let c = g.value(camera)?;
                Some(b.compose(&t).compose(&p.inverse()).compose(&c.inverse()))
            } else if target == body {
                let gr = g.value(rig)?;
                let c = g.value(camera)?;
                let t = g.value(tag)?;
                Some(gr.compose(&c).compose(&p).compose(&t.inverse()))
            } else if target == tag {
                let b = g.value(body)?;
                let gr = g.value(rig)?;
                let c = g.value(camera)?;
                Some(b.inverse().compose(&gr).compose(&c).compose(&p))
            } else {
                // camera extrinsic.
                let gr = g.value(rig)?;
                let b = g.value(body)?;
                let t = g.value(tag)?;
                Some(gr.inverse().compose(&b).compose(&t).compose(&p.inverse()))
            }
        }
    }
}

/// Optimizes the subgraph in isolation and, if its mean whitened error per
/// measurement factor clears the threshold, transfers factors and values to
/// the optimized graph and re-optimizes it. On failure the initialization
/// list is rotated and the whole attempt repeats, until every rotation has
/// been tried; rejection leaves the optimized graph untouched.
pub fn validate_and_transfer(
    state: &mut TwoGraphState,
    sub: &Subgraph,
    opts: &RoundOptions<'_>,
) -> Result<SubgraphOutcome, OptimizeError> {
    let n = sub.init_list.len();
    let n_pins = sub.pinned.len();
    let mut factor_errors: Vec<(usize, Option<f64>)> =
        sub.init_list.iter().map(|&i| (i, None)).collect();
    let mut last_mean = None;
    let mut rotations_used = 0;

    for rotation in 0..n {
        rotations_used = rotation;
        let Ok(mut g) = initialize_subgraph(state, sub, rotation) else {
            continue;
        };
        match optimize(&mut g, &BTreeSet::new(), opts.optimizer) {
            Ok(_) => {}
            Err(OptimizeError::Evaluation(_)) => continue,
            Err(e) => return Err(e),
        }

        let rotated: Vec<usize> = sub.init_list[rotation..]
            .iter()
            .chain(sub.init_list[..rotation].iter())
            .copied()
            .collect();
        let mut mean = 0.0;
        for (local, &full_index) in rotated.iter().enumerate() {
            let norm = g
                .factor_error(n_pins + local)
                .expect("optimized subgraph has recorded errors");
            mean += norm * norm / state.full.factor(full_index).dim() as f64;
            let slot = factor_errors
                .iter_mut()
                .find(|(i, _)| *i == full_index)
                .unwrap();
            slot.1 = Some(norm);
        }
        mean /= n as f64;
        last_mean = Some(mean);

        if mean <= opts.settings.subgraph_error_threshold {
            for key in &sub.new_vars {
                let pose = g.value(key).expect("initialized variable has a value");
                state.optimized.ensure_variable(key.clone(), pose);
                state.determined.insert(key.clone());
            }
            for &index in &sub.init_list {
                state
                    .optimized
                    .add_factor(state.full.factor(index).clone());
                state.absorbed.insert(index);
            }
            optimize(&mut state.optimized, opts.frozen, opts.optimizer)?;
            return Ok(SubgraphOutcome {
                accepted: true,
                rotations: rotation,
                mean_error: Some(mean),
                factor_errors,
            });
        }
    }

    Ok(SubgraphOutcome {
        accepted: false,
        rotations: rotations_used,
        mean_error: last_mean,
        factor_errors,
    })
}

/// One full round: enter the new factors into the full graph, order them,
/// discover a subgraph from each not-yet-consumed factor, validate each
/// subgraph, and report what happened to every factor that took part.
pub fn process_new_factors(
    state: &mut TwoGraphState,
    new: Vec<Factor>,
    opts: &RoundOptions<'_>,
) -> Result<RoundReport, OptimizeError> {
    let mut new_indices = Vec::with_capacity(new.len());
    for factor in new {
        for key in factor.keys() {
            state.full.ensure_variable(key, Pose::identity());
        }
        new_indices.push(state.full.add_factor(factor));
    }

    let ordered = order_new_factors(&state.full, &new_indices);
    let new_set: BTreeSet<usize> = new_indices.iter().copied().collect();
    let mut consumed: BTreeSet<usize> = BTreeSet::new();
    let mut records: BTreeMap<usize, FactorRecord> = BTreeMap::new();
    let mut subgraphs = Vec::new();

    for &seed in &ordered {
        if consumed.contains(&seed) || state.absorbed.contains(&seed) {
            continue;
        }
        let Some(sub) = discover_subgraph(state, seed, &new_set, &consumed, opts.settings)
        else {
            let factor = state.full.factor(seed);
            records.insert(
                seed,
                FactorRecord {
                    index: seed,
                    desc: factor.describe(),
                    frame: factor.frame(),
                    error: None,
                    verdict: Verdict::Deferred,
                    rotations: 0,
                },
            );
            continue;
        };
        consumed.extend(sub.init_list.iter().copied());
        let outcome = validate_and_transfer(state, &sub, opts)?;
        let verdict = if outcome.accepted {
            Verdict::Accepted
        } else {
            Verdict::Rejected
        };
        for (index, error) in &outcome.factor_errors {
            let factor = state.full.factor(*index);
            records.insert(
                *index,
                FactorRecord {
                    index: *index,
                    desc: factor.describe(),
                    frame: factor.frame(),
                    error: *error,
                    verdict,
                    rotations: outcome.rotations,
                },
            );
        }
        subgraphs.push(SubgraphSummary {
            accepted: outcome.accepted,
            rotations: outcome.rotations,
            n_factors: sub.init_list.len(),
            mean_error: outcome.mean_error,
        });
    }

    Ok(RoundReport {
        records: records.into_values().collect(),
        subgraphs,
    })
}
