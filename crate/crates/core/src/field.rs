use crate::roadnet::{EdgeId, NodeId};

/// Per-segment and per-intersection Gaussian travel times (seconds) for one
/// time slot and context.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub mu_e: Vec<f64>,
    pub sigma_e: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub sigma_v: Vec<f64>,
}

impl GaussianField {
    pub fn num_edges(&self) -> usize {
        self.mu_e.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.mu_v.len()
    }

    /// Sum of means over the given components.
    pub fn total_mean(&self, edges: &[EdgeId], nodes: &[NodeId]) -> f64 {
        edges.iter().map(|&e| self.mu_e[e]).sum::<f64>() + nodes.iter().map(|&v| self.mu_v[v]).sum::<f64>()
    }

    /// Sum of variances over the given components.
    pub fn total_variance(&self, edges: &[EdgeId], nodes: &[NodeId]) -> f64 {
        edges.iter().map(|&e| self.sigma_e[e].powi(2)).sum::<f64>()
            + nodes.iter().map(|&v| self.sigma_v[v].powi(2)).sum::<f64>()
    }

    /// Multiplies every mean and deviation by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * k).collect();
        Self { mu_e: s(&self.mu_e), sigma_e: s(&self.sigma_e), mu_v: s(&self.mu_v), sigma_v: s(&self.sigma_v) }
    }
}
