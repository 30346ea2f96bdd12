//! Stationary Markov policies tabulated on the grid.

use serde::{Deserialize, Serialize};

use crate::domain::OrthantDomain;
use crate::{Error, Result};

/// One action index per grid node (a one-hot relaxed control), together
/// with the θ-slice it was extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub domain: OrthantDomain,
    pub theta: f64,
    pub n_actions: usize,
    pub actions: Vec<usize>,
}

impl Policy {
    pub fn new(domain: OrthantDomain, theta: f64, n_actions: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != domain.node_count() {
            return Err(Error::validation(
                "policy",
                format!("{} entries for {} nodes", actions.len(), domain.node_count()),
            ));
        }
        if let Some(a) = actions.iter().find(|a| **a >= n_actions) {
            return Err(Error::validation("policy", format!("action {a} out of range")));
        }
        Ok(Self {
            domain,
            theta,
            n_actions,
            actions,
        })
    }

    pub fn uniform_action(domain: OrthantDomain, theta: f64, n_actions: usize, action: usize) -> Result<Self> {
        let n = domain.node_count();
        Self::new(domain, theta, n_actions, vec![action; n])
    }

    /// Action at the grid node nearest to `x` (clamped to the box).
    pub fn action_at(&self, x: &[f64]) -> usize {
        self.actions[self.domain.nearest_node(x)]
    }

    pub fn weights_at(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.action_at(x)] = 1.0;
    }

    /// Share of nodes choosing each action.
    pub fn action_shares(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_actions];
        for a in &self.actions {
            counts[*a] += 1;
        }
        counts.iter().map(|c| *c as f64 / self.actions.len() as f64).collect()
    }
}
