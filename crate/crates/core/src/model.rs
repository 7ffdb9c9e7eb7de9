//! The trainable bundle: shared agent network and mixer (Q parameters) plus
//! the Coordinator (its own parameter store), with batched acting helpers.

use comix_nn::{Graph, Matrix, NnError, ParamStore, Var, Weights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, AgentConfig, AgentNet};
use crate::coordinator::{Coordinator, ACCEPT_THRESHOLD};
use crate::error::ComixError;
use crate::mixer::Mixer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub agents: usize,
    pub agent: AgentConfig,
    pub coord_hidden: usize,
    pub coord_mlp: usize,
    pub mixer_embed: usize,
    pub mixer_hidden: usize,
    pub communication: bool,
}

impl ModelConfig {
    pub fn new(agents: usize, obs_width: usize) -> Self {
        Self {
            agents,
            agent: AgentConfig::new(obs_width),
            coord_hidden: 128,
            coord_mlp: 128,
            mixer_embed: 32,
            mixer_hidden: 16,
            communication: true,
        }
    }

    /// Narrow variant for tests and toys.
    pub fn small(agents: usize, obs_width: usize, width: usize) -> Self {
        Self {
            agents,
            agent: AgentConfig {
                obs_width,
                hidden: width,
                feature_width: width,
                encoder_width: width,
                coord_hidden: width,
            },
            coord_hidden: width,
            coord_mlp: width,
            mixer_embed: width,
            mixer_hidden: width.div_ceil(2),
            communication: true,
        }
    }

    pub fn obs_width(&self) -> usize {
        self.agent.obs_width
    }

    pub fn message_width(&self) -> usize {
        self.agent.message_width()
    }

    pub fn state_width(&self) -> usize {
        self.agents * self.agent.obs_width
    }
}

#[derive(Clone, Debug)]
pub struct Comix {
    pub config: ModelConfig,
    pub agent: AgentNet,
    pub mixer: Mixer,
    pub coordinator: Coordinator,
    /// Agent network and mixer.
    pub q_params: ParamStore,
    pub coord_params: ParamStore,
}

impl Comix {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ComixError> {
        if config.agents == 0 || config.obs_width() == 0 {
            return Err(ComixError::Config("model needs at least one agent and a non-empty observation".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q_params = ParamStore::new();
        let mut coord_params = ParamStore::new();
        let agent = AgentNet::new(&mut q_params, config.agent.clone(), &mut rng)?;
        let mixer = Mixer::new(
            &mut q_params,
            config.agents,
            config.state_width(),
            config.mixer_embed,
            config.mixer_hidden,
            &mut rng,
        )?;
        let coordinator = Coordinator::new(
            &mut coord_params,
            config.message_width(),
            config.coord_hidden,
            config.coord_mlp,
            &mut rng,
        )?;
        Ok(Self { config, agent, mixer, coordinator, q_params, coord_params })
    }

    /// `Q_self` and the next hidden state for every row of `obs`.
    pub fn self_step(&self, obs: &Matrix, hidden: &Matrix) -> Result<(Matrix, Matrix), ComixError> {
        let mut g = Graph::new();
        let w = Weights::fixed(&self.q_params);
        let o = g.constant(obs.clone());
        let h = g.constant(hidden.clone());
        let (q, h_next) = self.agent.q_self_graph(&mut g, &w, o, h)?;
        Ok((g.value(q).clone(), g.value(h_next).clone()))
    }

    /// Accept probabilities, `receivers x peers`; `None` when nobody has a peer.
    pub fn accept_graph(&self, g: &mut Graph, w: &Weights<'_>, comm: &CommBatch) -> Result<Option<Var>, ComixError> {
        if comm.peers() == 0 {
            return Ok(None);
        }
        let pairs = comm.pair_vars(g)?;
        Ok(Some(self.coordinator.accept_graph(g, w, &pairs)?))
    }

    /// `Q_self ⊙ W_coord`, where the averaged encoding of receiver row `r`
    /// weights sender `j` by `averaging[r, j]`.
    pub fn comm_q_graph(
        &self,
        g: &mut Graph,
        w: &Weights<'_>,
        comm: &CommBatch,
        encoded: Var,
        h_next: Var,
        q_self: Var,
        averaging: &Matrix,
    ) -> Result<Var, NnError> {
        let a = g.constant(averaging.clone());
        let avg = g.block_matmul(a, encoded, comm.blocks)?;
        let wc = self.agent.coord_weights_graph(g, w, h_next, avg)?;
        g.mul(q_self, wc)
    }

    pub fn encode_graph(&self, g: &mut Graph, w: &Weights<'_>, comm: &CommBatch) -> Result<Var, NnError> {
        let d = g.constant(comm.delivered.clone());
        self.agent.encode_graph(g, w, d, comm.scale.as_deref())
    }

    /// Execution path for one batch: masks from the current Coordinator,
    /// hardened, then the combined action values.
    pub fn comm_step(&self, comm: &CommBatch, h_next: &Matrix, q_self: &Matrix) -> Result<CommOutput, ComixError> {
        let mut g = Graph::new();
        let accept = match self.accept_graph(&mut g, &Weights::fixed(&self.coord_params), comm)? {
            Some(v) => g.value(v).clone(),
            None => Matrix::zeros((comm.receivers(), 0)),
        };
        let w = Weights::fixed(&self.q_params);
        let enc = self.encode_graph(&mut g, &w, comm)?;
        let h = g.constant(h_next.clone());
        let qs = g.constant(q_self.clone());
        let averaging = comm.averaging(&harden(&accept))?;
        let q = self.comm_q_graph(&mut g, &w, comm, enc, h, qs, &averaging)?;
        Ok(CommOutput { accept, q: g.value(q).clone() })
    }
}

#[derive(Clone, Debug)]
pub struct CommOutput {
    /// Soft accept probabilities, `receivers x peers`.
    pub accept: Matrix,
    pub q: Matrix,
}

/// Hardened mask: 1 where the probability reaches the threshold.
pub fn harden(p: &Matrix) -> Matrix {
    p.mapv(|v| if v >= ACCEPT_THRESHOLD { 1.0 } else { 0.0 })
}

/// Row-wise argmax.
pub fn row_argmax(m: &Matrix) -> Vec<usize> {
    m.outer_iter().map(|r| argmax(&r.to_vec())).collect()
}

/// Messages for `blocks` independent scenes of `agents` receivers and
/// `senders` senders (real agents first, then noisy ones).
#[derive(Clone, Debug)]
pub struct CommBatch {
    pub blocks: usize,
    pub agents: usize,
    pub senders: usize,
    /// Receivers' own messages, `(blocks*agents) x width`.
    pub own: Matrix,
    /// Delivered messages, `(blocks*senders) x width`.
    pub delivered: Matrix,
    /// Delay factor per delivered row.
    pub scale: Option<Vec<f64>>,
}

impl CommBatch {
    pub fn new(
        blocks: usize,
        agents: usize,
        senders: usize,
        own: Matrix,
        delivered: Matrix,
        scale: Option<Vec<f64>>,
    ) -> Result<Self, ComixError> {
        let ok = senders >= agents
            && own.nrows() == blocks * agents
            && delivered.nrows() == blocks * senders
            && own.ncols() == delivered.ncols()
            && scale.as_ref().is_none_or(|s| s.len() == blocks * senders);
        if !ok {
            return Err(ComixError::Contract(format!(
                "message batch of {blocks} scenes, {agents} receivers and {senders} senders has own {:?} and delivered {:?}",
                own.dim(),
                delivered.dim()
            )));
        }
        Ok(Self { blocks, agents, senders, own, delivered, scale })
    }

    pub fn receivers(&self) -> usize {
        self.blocks * self.agents
    }

    pub fn peers(&self) -> usize {
        self.senders.saturating_sub(1)
    }

    /// Sender at position `t` of receiver `i`'s pair sequence.
    pub fn peer(i: usize, t: usize) -> usize {
        if t < i {
            t
        } else {
            t + 1
        }
    }

    /// Position `t` of every receiver's pair sequence, one variable per position.
    pub fn pair_vars(&self, g: &mut Graph) -> Result<Vec<Var>, ComixError> {
        let mw = self.own.ncols();
        let mut out = Vec::with_capacity(self.peers());
        for t in 0..self.peers() {
            let mut m = Matrix::zeros((self.receivers(), 2 * mw));
            for b in 0..self.blocks {
                for i in 0..self.agents {
                    let r = b * self.agents + i;
                    let j = b * self.senders + Self::peer(i, t);
                    m.row_mut(r).slice_mut(ndarray::s![..mw]).assign(&self.own.row(r));
                    m.row_mut(r).slice_mut(ndarray::s![mw..]).assign(&self.delivered.row(j));
                }
            }
            out.push(g.constant(m));
        }
        Ok(out)
    }

    /// Averaging matrix, `receivers x senders`: row `r` spreads weight
    /// `mask[r, t] / sum_t mask[r, t]` over the peers and is zero when the
    /// mask is empty.
    pub fn averaging(&self, mask: &Matrix) -> Result<Matrix, ComixError> {
        if mask.dim() != (self.receivers(), self.peers()) {
            return Err(ComixError::Contract(format!(
                "mask of shape {:?}, expected {:?}",
                mask.dim(),
                (self.receivers(), self.peers())
            )));
        }
        let mut a = Matrix::zeros((self.receivers(), self.senders));
        for r in 0..self.receivers() {
            let total: f64 = mask.row(r).sum();
            if total <= 0.0 {
                continue;
            }
            let i = r % self.agents;
            for t in 0..self.peers() {
                a[[r, Self::peer(i, t)]] = mask[[r, t]] / total;
            }
        }
        Ok(a)
    }
}
