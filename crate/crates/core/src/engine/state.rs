use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{ExecGraph, ParamDecl, ParamKind, TopologyHash};

pub const DEFAULT_SEED: u64 = 1234;
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub id: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Per-channel moving statistics of one batch norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `m <- (1 - mu) * m + mu * batch`
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32], momentum: f32) {
        for (m, &b) in self.mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        for (v, &b) in self.var.iter_mut().zip(batch_var) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
    }
}

/// Every parameter tensor of an execution graph plus batch norm moving stats,
/// in graph declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub topology: TopologyHash,
    pub seed: u64,
    pub params: Vec<ParamTensor>,
    pub bn_stats: Vec<BnStats>,
}

/// Draw initial values for one parameter tensor.
pub fn init_values(decl: &ParamDecl, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = decl.numel();
    match decl.kind {
        ParamKind::StemConv
        | ParamKind::DepthwiseConv
        | ParamKind::PointwiseConv
        | ParamKind::HeadWeight => {
            let bound = (6.0 / decl.fan_in as f64).sqrt() as f32;
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        ParamKind::AlphaLogit => (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        ParamKind::BnGamma => vec![1.0; n],
        ParamKind::HeadBias | ParamKind::BnBeta => vec![0.0; n],
    }
}

/// Uniform draw used to re-seed a single conv weight (same law as init).
pub fn init_scalar(decl: &ParamDecl, rng: &mut ChaCha8Rng) -> f32 {
    let bound = (6.0 / decl.fan_in as f64).sqrt() as f32;
    rng.gen_range(-bound..bound)
}

impl ModelState {
    pub fn init(graph: &ExecGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = graph
            .params
            .iter()
            .map(|d| ParamTensor {
                id: d.id.clone(),
                shape: d.shape.clone(),
                data: init_values(d, &mut rng),
            })
            .collect();
        let bn_stats = graph
            .batch_norms
            .iter()
            .map(|b| BnStats::fresh(b.channels))
            .collect();
        Self {
            topology: graph.topology,
            seed,
            params,
            bn_stats,
        }
    }

    /// Check that this state was made for `graph`.
    pub fn check(&self, graph: &ExecGraph) -> Result<()> {
        if self.topology != graph.topology {
            return Err(Error::TopologyMismatch {
                expected: graph.topology.to_hex(),
                found: self.topology.to_hex(),
            });
        }
        let congruent = self.params.len() == graph.params.len()
            && self
                .params
                .iter()
                .zip(&graph.params)
                .all(|(p, d)| p.id == d.id && p.shape == d.shape && p.data.len() == d.numel())
            && self.bn_stats.len() == graph.batch_norms.len()
            && self
                .bn_stats
                .iter()
                .zip(&graph.batch_norms)
                .all(|(s, b)| s.mean.len() == b.channels && s.var.len() == b.channels);
        if !congruent {
            return Err(Error::TopologyMismatch {
                expected: format!("{} parameter tensors of {}", graph.params.len(), graph.topology),
                found: format!("{} tensors that do not match", self.params.len()),
            });
        }
        Ok(())
    }

    pub fn param(&self, id: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.id == id)
    }

    pub fn param_mut(&mut self, id: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.id == id)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
            && self
                .bn_stats
                .iter()
                .all(|s| s.mean.iter().chain(&s.var).all(|v| v.is_finite()))
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, NetworkSpec};

    #[test]
    fn init_follows_declared_laws() {
        let g = build_graph(&NetworkSpec::desk(10)).unwrap();
        let s = ModelState::init(&g, DEFAULT_SEED);
        s.check(&g).unwrap();
        for (p, d) in s.params.iter().zip(&g.params) {
            match d.kind {
                ParamKind::BnGamma => assert!(p.data.iter().all(|&v| v == 1.0)),
                ParamKind::BnBeta | ParamKind::HeadBias => assert!(p.data.iter().all(|&v| v == 0.0)),
                ParamKind::AlphaLogit => assert!(p.data.iter().all(|v| v.abs() < 1.0)),
                _ => {
                    let b = (6.0 / d.fan_in as f32).sqrt();
                    assert!(p.data.iter().all(|v| v.abs() <= b));
                }
            }
        }
        assert!(s.bn_stats.iter().all(|b| b.mean.iter().all(|&m| m == 0.0) && b.var.iter().all(|&v| v == 1.0)));
        assert_eq!(ModelState::init(&g, DEFAULT_SEED), s);
        assert_ne!(ModelState::init(&g, 7), s);
    }

    #[test]
    fn moving_var_update() {
        let mut st = BnStats::fresh(1);
        st.update(&[0.0], &[0.0], 0.1);
        assert!((st.var[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn mismatched_state_rejected() {
        let g = build_graph(&NetworkSpec::desk(10)).unwrap();
        let other = build_graph(&NetworkSpec::desk(5)).unwrap();
        let s = ModelState::init(&other, 1);
        assert!(matches!(s.check(&g), Err(Error::TopologyMismatch { .. })));
    }
}
