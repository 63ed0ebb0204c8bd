//! The factor graph container: variables with current values, factors, and
//! adjacency, plus whole-graph error evaluation.

use crate::camera::CameraError;
use crate::factor::{Factor, VariableKey};
use crate::se3::Pose;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("factor {index} ({kind}) failed to evaluate: {source}")]
    Evaluation {
        index: usize,
        kind: &'static str,
        source: CameraError,
    },
}

/// A bipartite graph of pose variables and measurement factors.
///
/// Values live directly on the variables and are updated in place by the
/// optimizer. All iteration orders are deterministic (sorted by key or by
/// factor insertion index).
#[derive(Debug, Clone, Default)]
pub struct Graph {
    values: BTreeMap<VariableKey, Pose>,
    factors: Vec<Factor>,
    adjacency: BTreeMap<VariableKey, Vec<usize>>,
    /// Whitened residual norm per factor from the most recent evaluation.
    factor_errors: Vec<Option<f64>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// Inserts the variable with an initial value if absent. Returns whether
    /// it was newly created.
    pub fn ensure_variable(&mut self, key: VariableKey, initial: Pose) -> bool {
        match self.values.entry(key) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(initial);
                true
            }
            std::collections::btree_map::Entry::Occupied(_) => false,
        }
    }

    pub fn set_value(&mut self, key: &VariableKey, pose: Pose) {
        let slot = self
            .values
            .get_mut(key)
            .unwrap_or_else(|| panic!("unknown variable {key}"));
        *slot = pose;
    }

    pub fn value(&self, key: &VariableKey) -> Option<Pose> {
        self.values.get(key).copied()
    }

    pub fn has_variable(&self, key: &VariableKey) -> bool {
        self.values.contains_key(key)
    }

    pub fn variables(&self) -> impl Iterator<Item = (&VariableKey, &Pose)> {
        self.values.iter()
    }

    pub fn n_variables(&self) -> usize {
        self.values.len()
    }

    /// Adds a factor; all its variables must already exist.
    pub fn add_factor(&mut self, factor: Factor) -> usize {
        let index = self.factors.len();
        for key in factor.keys() {
            assert!(
                self.values.contains_key(&key),
                "factor references unknown variable {key}"
            );
            let adj = self.adjacency.entry(key).or_default();
            if adj.last() != Some(&index) {
                adj.push(index);
            }
        }
        self.factors.push(factor);
        self.factor_errors.push(None);
        index
    }

    pub fn factor(&self, index: usize) -> &Factor {
        &self.factors[index]
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Indices of the factors touching a variable.
    pub fn factors_of(&self, key: &VariableKey) -> &[usize] {
        self.adjacency.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Whitened residual norm of one factor from the last [`Graph::total_error`]
    /// call.
    pub fn factor_error(&self, index: usize) -> Option<f64> {
        self.factor_errors[index]
    }

    /// Value lookup closure for factor evaluation.
    pub fn getter(&self) -> impl Fn(&VariableKey) -> Pose + '_ {
        move |k: &VariableKey| {
            *self
                .values
                .get(k)
                .unwrap_or_else(|| panic!("unknown variable {k}"))
        }
    }

    /// Half the sum of squared whitened residual norms over all factors,
    /// recording each factor's norm for diagnostics.
    pub fn total_error(&mut self) -> Result<f64, GraphError> {
        let mut total = 0.0;
        let mut norms = Vec::with_capacity(self.factors.len());
        for (index, f) in self.factors.iter().enumerate() {
            let r = f
                .residual(&|k: &VariableKey| {
                    *self
                        .values
                        .get(k)
                        .unwrap_or_else(|| panic!("unknown variable {k}"))
                })
                .map_err(|source| GraphError::Evaluation {
                    index,
                    kind: f.describe().kind,
                    source,
                })?;
            let n = r.norm();
            norms.push(Some(n));
            total += 0.5 * n * n;
        }
        self.factor_errors = norms;
        Ok(total)
    }

    /// Error of the graph's factors at externally supplied values, without
    /// touching stored state. Used to score trial steps.
    pub fn error_at(
        &self,
        get: &dyn Fn(&VariableKey) -> Pose,
    ) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for (index, f) in self.factors.iter().enumerate() {
            let r = f.residual(get).map_err(|source| GraphError::Evaluation {
                index,
                kind: f.describe().kind,
                source,
            })?;
            total += 0.5 * r.norm_squared();
        }
        Ok(total)
    }
}
