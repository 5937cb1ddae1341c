//! Edge-case sampler: rarer topologies are sampled with higher probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockView, Reason, SampleDecision, Sampler, SamplerConfig};
use crate::ids::PatternId;

/// Maps a pattern frequency in (0, 1] to a sampling probability.
pub type EdgeCasePolicy = Box<dyn Fn(f64) -> f64 + Send>;

/// `min(1, c / frequency)`.
pub fn inverse_frequency(c: f64) -> EdgeCasePolicy {
    Box::new(move |freq| if freq <= 0.0 { 1.0 } else { (c / freq).min(1.0) })
}

pub struct EdgeCaseSampler {
    policy: EdgeCasePolicy,
    rng: ChaCha8Rng,
}

impl EdgeCaseSampler {
    pub fn new(cfg: &SamplerConfig, agent_id: &str) -> Self {
        Self::with_policy(inverse_frequency(cfg.edge_case_c), cfg.rng_seed, agent_id)
    }

    /// Each agent gets its own stream derived from the seed and its id.
    pub fn with_policy(policy: EdgeCasePolicy, seed: u64, agent_id: &str) -> Self {
        let salt = PatternId::digest("edge_case", &[agent_id.as_bytes()]).0;
        EdgeCaseSampler {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed ^ salt),
        }
    }

    pub fn probability(&self, frequency: f64) -> f64 {
        (self.policy)(frequency).clamp(0.0, 1.0)
    }

    /// One draw for a pattern of the given frequency.
    pub fn draw(&mut self, frequency: f64) -> (bool, f64) {
        let p = self.probability(frequency);
        (self.rng.gen::<f64>() < p, p)
    }
}

impl Sampler for EdgeCaseSampler {
    fn name(&self) -> &str {
        "edge_case"
    }

    fn decide(&mut self, view: &BlockView<'_>) -> SampleDecision {
        let (hit, p) = self.draw(view.frequency());
        if !hit {
            return SampleDecision::skip();
        }
        SampleDecision::because(vec![Reason::EdgeCase {
            topo: view.topo_id,
            probability: p,
        }])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_values() {
        let p = inverse_frequency(0.01);
        assert_eq!(p(1.0), 0.01);
        assert_eq!(p(0.01), 1.0);
        assert_eq!(p(0.5), 0.02);
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = SamplerConfig::default();
        let mut a = EdgeCaseSampler::new(&cfg, "a0");
        let mut b = EdgeCaseSampler::new(&cfg, "a0");
        let da: Vec<bool> = (0..1000).map(|_| a.draw(0.3).0).collect();
        let db: Vec<bool> = (0..1000).map(|_| b.draw(0.3).0).collect();
        assert_eq!(da, db);
    }
}
