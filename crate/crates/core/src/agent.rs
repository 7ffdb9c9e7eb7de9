//! Per-agent two-stage action values: `Q_self` from the local history, then a
//! bounded per-action reweighting computed from the accepted peer messages.

use comix_nn::{Activation, Graph, Gru, LayerNorm, LayerSpec, Linear, Matrix, Mlp, NnError, ParamStore, Var, Weights};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::NUM_ACTIONS;
use crate::error::ComixError;
use crate::message::Message;

pub use comix_nn::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub obs_width: usize,
    pub hidden: usize,
    pub feature_width: usize,
    pub encoder_width: usize,
    pub coord_hidden: usize,
}

impl AgentConfig {
    pub fn new(obs_width: usize) -> Self {
        Self { obs_width, hidden: 128, feature_width: 128, encoder_width: 128, coord_hidden: 128 }
    }

    pub fn message_width(&self) -> usize {
        Message::width(self.obs_width)
    }
}

/// One set of weights shared by every agent.
#[derive(Clone, Debug)]
pub struct AgentNet {
    pub config: AgentConfig,
    pub features: Mlp,
    pub gru: Gru,
    pub norm: LayerNorm,
    pub head: Linear,
    pub encoder: Mlp,
    pub coord_head: Mlp,
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: AgentConfig, rng: &mut R) -> Result<Self, ComixError> {
        let c = &config;
        let features = Mlp::new(
            store,
            "agent.features",
            &[c.obs_width, c.feature_width, c.feature_width],
            Activation::Relu,
            Activation::Relu,
            rng,
        )?;
        let gru = Gru::new(store, "agent.gru", c.feature_width, c.hidden, rng)?;
        let norm = LayerNorm::new(store, "agent.norm", c.hidden)?;
        let head = Linear::new(store, "agent.head", LayerSpec::linear(c.hidden, NUM_ACTIONS, Activation::None), rng)?;
        let encoder = Mlp::new(
            store,
            "agent.encoder",
            &[c.message_width(), c.encoder_width, c.encoder_width],
            Activation::Relu,
            Activation::Relu,
            rng,
        )?;
        let coord_head = Mlp::new(
            store,
            "agent.coord_head",
            &[c.encoder_width + c.hidden, c.coord_hidden, NUM_ACTIONS],
            Activation::Relu,
            Activation::Sigmoid,
            rng,
        )?;
        Ok(Self { config, features, gru, norm, head, encoder, coord_head })
    }

    /// Batched `Q_self`: rows of `obs` and `h` are agents. Returns the action
    /// values and the updated hidden state.
    pub fn q_self_graph(&self, g: &mut Graph, w: &Weights<'_>, obs: Var, h: Var) -> Result<(Var, Var), NnError> {
        let f = self.features.forward(g, w, obs)?;
        let h_next = self.gru.step(g, w, f, h)?;
        let n = self.norm.forward(g, w, h_next)?;
        let q = self.head.forward(g, w, n)?;
        Ok((q, h_next))
    }

    /// Encodes message feature rows, optionally scaling each row afterwards
    /// (delay scaling).
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        w: &Weights<'_>,
        messages: Var,
        row_scale: Option<&[f64]>,
    ) -> Result<Var, NnError> {
        let e = self.encoder.forward(g, w, messages)?;
        match row_scale {
            Some(scale) => {
                let col = Matrix::from_shape_vec((scale.len(), 1), scale.to_vec())
                    .map_err(|e| NnError::Config(e.to_string()))?;
                let c = g.constant(col);
                g.mul_col(e, c)
            }
            None => Ok(e),
        }
    }

    /// `W_coord` from the updated hidden state and the averaged encodings of
    /// the accepted messages.
    pub fn coord_weights_graph(&self, g: &mut Graph, w: &Weights<'_>, h_next: Var, avg: Var) -> Result<Var, NnError> {
        let x = g.concat_cols(&[avg, h_next])?;
        self.coord_head.forward(g, w, x)
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.config.hidden]
    }

    /// Single-agent `Q_self`.
    pub fn q_self(&self, store: &ParamStore, obs: &[f64], h: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ComixError> {
        self.check_width("observation", obs.len(), self.config.obs_width)?;
        self.check_width("hidden state", h.len(), self.config.hidden)?;
        let mut g = Graph::new();
        let w = Weights::fixed(store);
        let o = g.row(obs);
        let hv = g.row(h);
        let (q, h_next) = self.q_self_graph(&mut g, &w, o, hv)?;
        Ok((g.value(q).iter().copied().collect(), g.value(h_next).iter().copied().collect()))
    }

    /// Single-agent `W_coord` from an already filtered message list. The
    /// encodings are averaged, so the result does not depend on list order;
    /// an empty list averages to the zero vector.
    pub fn coord_weights(
        &self,
        store: &ParamStore,
        h_next: &[f64],
        accepted: &[Message],
        scale: impl Fn(usize) -> f64,
    ) -> Result<Vec<f64>, ComixError> {
        self.check_width("hidden state", h_next.len(), self.config.hidden)?;
        let mut g = Graph::new();
        let w = Weights::fixed(store);
        let avg = if accepted.is_empty() {
            g.constant(Matrix::zeros((1, self.config.encoder_width)))
        } else {
            let mw = self.config.message_width();
            let mut feats = Matrix::zeros((accepted.len(), mw));
            for (k, m) in accepted.iter().enumerate() {
                let f = m.features();
                self.check_width("message", f.len(), mw)?;
                feats.row_mut(k).assign(&ndarray::ArrayView1::from(&f));
            }
            let ages: Vec<f64> = accepted.iter().map(|m| scale(m.age)).collect();
            let fv = g.constant(feats);
            let enc = self.encode_graph(&mut g, &w, fv, Some(&ages))?;
            let k = accepted.len();
            let mean = g.constant(Matrix::from_elem((1, k), 1.0 / k as f64));
            g.matmul(mean, enc)?
        };
        let hv = g.row(h_next);
        let wc = self.coord_weights_graph(&mut g, &w, hv, avg)?;
        Ok(g.value(wc).iter().copied().collect())
    }

    fn check_width(&self, what: &str, got: usize, want: usize) -> Result<(), ComixError> {
        if got == want {
            Ok(())
        } else {
            Err(ComixError::Contract(format!("{what} width {got}, expected {want}")))
        }
    }
}

/// Intended action: argmax of `Q_self`, lowest index on ties.
pub fn intention(q_self: &[f64]) -> usize {
    argmax(q_self)
}

/// `Q_i = Q_self ⊙ W_coord`.
pub fn q_combined(q_self: &[f64], w: &[f64]) -> Vec<f64> {
    q_self.iter().zip(w).map(|(q, w)| q * w).collect()
}

/// Epsilon-greedy choice over `q`.
pub fn act<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(obs: usize) -> (AgentNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = AgentNet::new(&mut store, AgentConfig::new(obs), &mut rng).unwrap();
        (net, store)
    }

    #[test]
    fn zero_parameters_give_zero_q() {
        let (net, mut store) = net(4);
        store.map_values(|_, v| v.fill(0.0));
        let (q, _) = net.q_self(&store, &[0.3, 0.1, -0.2, 0.9], &net.zero_hidden()).unwrap();
        assert_eq!(q, vec![0.0; 5]);
    }

    #[test]
    fn intention_ties_go_low() {
        assert_eq!(intention(&[0.1, 0.9, 0.2, 0.0, 0.3]), 1);
        assert_eq!(intention(&[0.7; 5]), 0);
    }

    #[test]
    fn combination_is_elementwise() {
        assert_eq!(q_combined(&[2.0, -2.0, 0.0, 1.0, 1.0], &[0.5; 5]), vec![1.0, -1.0, 0.0, 0.5, 0.5]);
        assert_eq!(q_combined(&[2.0, -2.0, 0.0, 1.0, 1.0], &[1.0; 5]), vec![2.0, -2.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_message_set_is_defined() {
        let (net, store) = net(4);
        let w = net.coord_weights(&store, &net.zero_hidden(), &[], |_| 1.0).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn greedy_when_epsilon_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(act(&[0.0, 1.0, 3.0, 2.0, -1.0], 0.0, &mut rng), 2);
        }
    }

    #[test]
    fn wrong_widths_are_rejected() {
        let (net, store) = net(4);
        assert!(net.q_self(&store, &[0.0; 5], &net.zero_hidden()).is_err());
        assert!(net.q_self(&store, &[0.0; 4], &[0.0; 3]).is_err());
    }
}
