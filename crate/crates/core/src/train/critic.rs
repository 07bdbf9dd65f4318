//! Permutation-invariant state-value network.
//!
//! Each pedestrian is embedded independently relative to the robot, the
//! embeddings are mean-pooled, and the pool is read out together with the
//! robot's own features and the raw features of the nearest pedestrian.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::Observation;
use crate::tensor::nn::Linear;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

const ROBOT_FEATURES: usize = 6;
const HUMAN_FEATURES: usize = 6;

#[derive(Debug, Clone)]
pub struct Critic {
    pub store: ParamStore,
    embed1: Linear,
    embed2: Linear,
    read1: Linear,
    read2: Linear,
    out: Linear,
    width: usize,
}

fn robot_features(o: &Observation) -> Vec<f64> {
    let r = &o.robot;
    let g = [r[5] - r[0], r[6] - r[1]];
    vec![
        g[0] / 8.0,
        g[1] / 8.0,
        (g[0] * g[0] + g[1] * g[1]).sqrt() / 8.0,
        r[2],
        r[3],
        r[7],
    ]
}

fn human_features(o: &Observation) -> Vec<[f64; HUMAN_FEATURES]> {
    let r = &o.robot;
    o.humans
        .iter()
        .map(|h| {
            let d = [h[0] - r[0], h[1] - r[1]];
            let gap = (d[0] * d[0] + d[1] * d[1]).sqrt() - h[4] - r[4];
            [d[0] / 4.0, d[1] / 4.0, h[2] - r[2], h[3] - r[3], h[4], gap / 4.0]
        })
        .collect()
}

impl Critic {
    pub fn new(seed: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        Self {
            embed1: Linear::new(&mut store, "critic.embed1", HUMAN_FEATURES, width, &mut rng),
            embed2: Linear::new(&mut store, "critic.embed2", width, width, &mut rng),
            read1: Linear::new(&mut store, "critic.read1", ROBOT_FEATURES + width + HUMAN_FEATURES, 2 * width, &mut rng),
            read2: Linear::new(&mut store, "critic.read2", 2 * width, 2 * width, &mut rng),
            out: Linear::new(&mut store, "critic.out", 2 * width, 1, &mut rng),
            store,
            width,
        }
    }

    /// `[1×1]` value estimate of the current observation.
    pub fn forward<'t>(&self, tape: &'t Tape, o: &Observation) -> Var<'t> {
        let humans = human_features(o);
        let pooled = if humans.is_empty() {
            tape.constant(Tensor::zeros(&[1, self.width]))
        } else {
            let x = tape.constant(Tensor::from_raw(
                vec![humans.len(), HUMAN_FEATURES],
                humans.iter().flat_map(|h| h.iter().copied()).collect(),
            ));
            let h = self.embed1.forward(tape, &self.store, x).tanh();
            let h = self.embed2.forward(tape, &self.store, h).tanh();
            h.sum_rows().scale(1.0 / humans.len() as f64)
        };
        let nearest = humans
            .iter()
            .min_by(|a, b| a[5].total_cmp(&b[5]))
            .copied()
            .unwrap_or([0.0; HUMAN_FEATURES]);
        let robot = tape.constant(Tensor::from_raw(vec![1, ROBOT_FEATURES], robot_features(o)));
        let near = tape.constant(Tensor::from_raw(vec![1, HUMAN_FEATURES], nearest.to_vec()));
        let z = tape.concat_cols(&[robot, pooled, near]);
        let z = self.read1.forward(tape, &self.store, z).tanh();
        let z = self.read2.forward(tape, &self.store, z).tanh();
        self.out.forward(tape, &self.store, z)
    }

    pub fn value(&self, o: &Observation) -> f64 {
        let tape = Tape::new();
        self.forward(&tape, o).item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(humans: Vec<[f64; 5]>) -> Observation {
        Observation {
            robot: [0.0, -8.0, 0.1, 0.2, 0.3, 0.0, 8.0, 1.0],
            humans,
        }
    }

    #[test]
    fn value_ignores_pedestrian_order() {
        let c = Critic::new(1, 16);
        let a = [1.0, -6.0, 0.5, 0.0, 0.3];
        let b = [-2.0, -3.0, 0.0, -1.0, 0.3];
        let v1 = c.value(&obs(vec![a, b]));
        let v2 = c.value(&obs(vec![b, a]));
        assert!((v1 - v2).abs() < 1e-12);
        assert!(c.value(&obs(vec![])).is_finite());
    }
}
