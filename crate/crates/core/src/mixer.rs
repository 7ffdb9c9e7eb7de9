//! Monotone mixing of per-agent values into `Q_TOT`, with every mixing
//! weight produced by a hypernetwork from the joint state and passed
//! through an absolute value.

use comix_nn::{Activation, Graph, LayerSpec, Linear, Matrix, Mlp, NnError, ParamStore, Var, Weights};
use rand::Rng;

use crate::error::ComixError;

#[derive(Clone, Debug)]
pub struct Mixer {
    pub agents: usize,
    pub state_width: usize,
    pub embed: usize,
    pub hidden: usize,
    pub hyper_w1: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2: Linear,
    pub hyper_b2: Linear,
    pub hyper_w3: Linear,
    pub hyper_b3: Mlp,
}

impl Mixer {
    /// Mixing layers of `embed` and `hidden` units (32 and 16 by default).
    /// Each hypernetwork head starts scaled by `1/sqrt(k)` for a mixing
    /// layer of fan-in `k`, so an untrained mixer has roughly unit gain.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        agents: usize,
        state_width: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, ComixError> {
        let lin = |store: &mut ParamStore, name: &str, out: usize, rng: &mut R| {
            Linear::new(store, name, LayerSpec::linear(state_width, out, Activation::None), rng)
        };
        let head = |store: &mut ParamStore, name: &str, out: usize, fan_in: usize, rng: &mut R| {
            let layer = lin(store, name, out, rng)?;
            scale_layer(store, &layer, 1.0 / (fan_in as f64).sqrt());
            Ok::<_, NnError>(layer)
        };
        let hyper_b3 = Mlp::new(store, "mixer.hyper_b3", &[state_width, embed, 1], Activation::Relu, Activation::None, rng)?;
        scale_layer(store, &hyper_b3.layers[1], 1.0 / (hidden as f64).sqrt());
        Ok(Self {
            agents,
            state_width,
            embed,
            hidden,
            hyper_w1: head(store, "mixer.hyper_w1", agents * embed, agents, rng)?,
            hyper_b1: head(store, "mixer.hyper_b1", embed, agents, rng)?,
            hyper_w2: head(store, "mixer.hyper_w2", embed * hidden, embed, rng)?,
            hyper_b2: head(store, "mixer.hyper_b2", hidden, embed, rng)?,
            hyper_w3: head(store, "mixer.hyper_w3", hidden, hidden, rng)?,
            hyper_b3,
        })
    }

    /// `q` is `batch x agents`, `state` is `batch x state_width`; returns
    /// `batch x 1`.
    pub fn mix(&self, g: &mut Graph, w: &Weights<'_>, q: Var, state: Var) -> Result<Var, NnError> {
        let w1 = self.hyper_w1.forward(g, w, state)?;
        let w1 = g.abs(w1);
        let b1 = self.hyper_b1.forward(g, w, state)?;
        let h1 = g.batched_vecmat(q, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1);

        let w2 = self.hyper_w2.forward(g, w, state)?;
        let w2 = g.abs(w2);
        let b2 = self.hyper_b2.forward(g, w, state)?;
        let h2 = g.batched_vecmat(h1, w2)?;
        let h2 = g.add(h2, b2)?;
        let h2 = g.relu(h2);

        let w3 = self.hyper_w3.forward(g, w, state)?;
        let w3 = g.abs(w3);
        let b3 = self.hyper_b3.forward(g, w, state)?;
        let out = g.batched_vecmat(h2, w3)?;
        g.add(out, b3)
    }

    /// `w_i`: mean of row `i` of the non-negative first-layer weight matrix,
    /// `batch x agents`.
    pub fn agent_weights_graph(&self, g: &mut Graph, w: &Weights<'_>, state: Var) -> Result<Var, NnError> {
        let batch = g.shape(state).0;
        let w1 = self.hyper_w1.forward(g, w, state)?;
        let w1 = g.abs(w1);
        let rows = g.reshape(w1, batch * self.agents, self.embed)?;
        let sums = g.row_sum(rows);
        let means = g.scale(sums, 1.0 / self.embed as f64);
        g.reshape(means, batch, self.agents)
    }

    /// `Q_TOT` for a single joint state.
    pub fn q_tot(&self, store: &ParamStore, q: &[f64], state: &[f64]) -> Result<f64, ComixError> {
        self.check(q.len(), state.len())?;
        let mut g = Graph::new();
        let w = Weights::fixed(store);
        let qv = g.row(q);
        let sv = g.row(state);
        let out = self.mix(&mut g, &w, qv, sv)?;
        Ok(g.scalar(out))
    }

    pub fn agent_weights(&self, store: &ParamStore, state: &[f64]) -> Result<Vec<f64>, ComixError> {
        self.check(self.agents, state.len())?;
        let mut g = Graph::new();
        let w = Weights::fixed(store);
        let sv = g.row(state);
        let out = self.agent_weights_graph(&mut g, &w, sv)?;
        Ok(g.value(out).iter().copied().collect())
    }

    /// First-layer weight matrix `|W1(s)|`, `agents x embed`.
    pub fn first_layer(&self, store: &ParamStore, state: &[f64]) -> Result<Matrix, ComixError> {
        self.check(self.agents, state.len())?;
        let mut g = Graph::new();
        let w = Weights::fixed(store);
        let sv = g.row(state);
        let w1 = self.hyper_w1.forward(&mut g, &w, sv)?;
        let w1 = g.abs(w1);
        let m = g.reshape(w1, self.agents, self.embed)?;
        Ok(g.value(m).clone())
    }

    fn check(&self, q: usize, state: usize) -> Result<(), ComixError> {
        if q != self.agents || state != self.state_width {
            return Err(ComixError::Contract(format!(
                "mixer expects {} values and a {}-wide state, got {q} and {state}",
                self.agents, self.state_width
            )));
        }
        Ok(())
    }
}


fn scale_layer(store: &mut ParamStore, layer: &Linear, factor: f64) {
    for id in [layer.weight, layer.bias] {
        store.get_mut(id).mapv_inplace(|v| v * factor);
    }
}
