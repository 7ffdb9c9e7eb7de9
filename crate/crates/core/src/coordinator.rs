//! Per-agent coordination masks over incoming messages.

use comix_nn::{Activation, BiGru, Graph, LayerNorm, Matrix, Mlp, NnError, ParamStore, Var, Weights};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ComixError;
use crate::message::Message;

/// Accept probability at or above which a message is kept on the execution path.
pub const ACCEPT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Coordinator {
    pub bigru: BiGru,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub message_width: usize,
}

/// `z_i`: the receiver's own message paired with every other sender's, in
/// ascending sender order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSequence {
    pub receiver: usize,
    pub peers: Vec<usize>,
    pub pairs: Vec<Vec<f64>>,
}

impl PairSequence {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Accept probabilities `c_ij` for every peer `j` of receiver `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinationMask {
    pub receiver: usize,
    pub peers: Vec<usize>,
    pub accept: Vec<f64>,
}

impl CoordinationMask {
    pub fn hard(&self) -> Vec<bool> {
        self.accept.iter().map(|&p| p >= ACCEPT_THRESHOLD).collect()
    }

    pub fn accepted_count(&self) -> usize {
        self.hard().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }
}

/// One line of a mask trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrace {
    pub episode: usize,
    pub step: usize,
    pub agent: usize,
    pub accepted: usize,
    pub peers: Vec<usize>,
    pub bits: Vec<u8>,
}

impl MaskTrace {
    pub fn new(episode: usize, step: usize, mask: &CoordinationMask) -> Self {
        let hard = mask.hard();
        Self {
            episode,
            step,
            agent: mask.receiver,
            accepted: hard.iter().filter(|&&b| b).count(),
            peers: mask.peers.clone(),
            bits: hard.into_iter().map(u8::from).collect(),
        }
    }
}

/// Builds `z_i` from the receiver's own message and the broadcast set.
pub fn build_pairs(own: &Message, all: &[Message]) -> Result<PairSequence, ComixError> {
    if !all.iter().any(|m| m.sender == own.sender) {
        return Err(ComixError::Contract(format!("sender {} missing from the broadcast set", own.sender)));
    }
    let mut peers: Vec<&Message> = all.iter().filter(|m| m.sender != own.sender).collect();
    peers.sort_by_key(|m| m.sender);
    let own_f = own.features();
    Ok(PairSequence {
        receiver: own.sender,
        peers: peers.iter().map(|m| m.sender).collect(),
        pairs: peers
            .iter()
            .map(|m| {
                let mut z = own_f.clone();
                z.extend(m.features());
                z
            })
            .collect(),
    })
}

/// Execution-path filtering: keeps exactly the peers whose hardened bit is 1,
/// unmodified. `messages` must line up with `mask.peers`.
pub fn filter(messages: &[Message], mask: &CoordinationMask) -> Result<Vec<Message>, ComixError> {
    check_alignment(messages, mask)?;
    Ok(messages
        .iter()
        .zip(mask.hard())
        .filter(|(_, keep)| *keep)
        .map(|(m, _)| m.clone())
        .collect())
}

/// Training-path filtering: every peer message with its soft accept weight.
pub fn soft_filter(messages: &[Message], mask: &CoordinationMask) -> Result<Vec<(Message, f64)>, ComixError> {
    check_alignment(messages, mask)?;
    Ok(messages.iter().cloned().zip(mask.accept.iter().copied()).collect())
}

fn check_alignment(messages: &[Message], mask: &CoordinationMask) -> Result<(), ComixError> {
    if messages.len() != mask.peers.len() || messages.iter().zip(&mask.peers).any(|(m, &p)| m.sender != p) {
        return Err(ComixError::Contract(format!(
            "mask over peers {:?} does not match messages from {:?}",
            mask.peers,
            messages.iter().map(|m| m.sender).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

impl Coordinator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        message_width: usize,
        hidden: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self, ComixError> {
        let bigru = BiGru::new(store, "coord.bigru", 2 * message_width, hidden, rng)?;
        let norm = LayerNorm::new(store, "coord.norm", 2 * hidden)?;
        let mlp = Mlp::new(store, "coord.mlp", &[2 * hidden, mlp_hidden, 2], Activation::Relu, Activation::None, rng)?;
        Ok(Self { bigru, norm, mlp, message_width })
    }

    pub fn pair_width(&self) -> usize {
        2 * self.message_width
    }

    /// Batched accept probabilities. `pairs[t]` stacks position `t` of every
    /// receiver's sequence; the result is `receivers x positions`.
    pub fn accept_graph(&self, g: &mut Graph, w: &Weights<'_>, pairs: &[Var]) -> Result<Var, NnError> {
        let len = pairs.len();
        let rows = g.shape(pairs[0]).0;
        let ctx = self.bigru.forward(g, w, pairs)?;
        let stacked = g.concat_rows(&ctx)?;
        let normed = self.norm.forward(g, w, stacked)?;
        let logits = self.mlp.forward(g, w, normed)?;
        let probs = g.softmax_rows(logits);
        let accept = g.slice_cols(probs, 0, 1)?;
        let order: Vec<usize> = (0..rows).flat_map(|r| (0..len).map(move |t| t * rows + r)).collect();
        let by_receiver = g.gather_rows(accept, order)?;
        g.reshape(by_receiver, rows, len)
    }

    /// Accept and reject probabilities for one sequence, `len x 2`.
    pub fn probabilities(&self, store: &ParamStore, seq: &PairSequence) -> Result<Matrix, ComixError> {
        let mut g = Graph::new();
        let w = Weights::fixed(store);
        let vars = self.sequence_vars(&mut g, seq)?;
        let ctx = self.bigru.forward(&mut g, &w, &vars)?;
        let stacked = g.concat_rows(&ctx)?;
        let normed = self.norm.forward(&mut g, &w, stacked)?;
        let logits = self.mlp.forward(&mut g, &w, normed)?;
        let probs = g.softmax_rows(logits);
        Ok(g.value(probs).clone())
    }

    /// Mask for one receiver; an empty sequence gives an empty mask.
    pub fn coordinate(&self, store: &ParamStore, seq: &PairSequence) -> Result<CoordinationMask, ComixError> {
        let accept = if seq.is_empty() {
            Vec::new()
        } else {
            self.probabilities(store, seq)?.column(0).to_vec()
        };
        Ok(CoordinationMask { receiver: seq.receiver, peers: seq.peers.clone(), accept })
    }

    fn sequence_vars(&self, g: &mut Graph, seq: &PairSequence) -> Result<Vec<Var>, ComixError> {
        seq.pairs
            .iter()
            .map(|z| {
                if z.len() != self.pair_width() {
                    return Err(ComixError::Contract(format!(
                        "pair width {}, expected {}",
                        z.len(),
                        self.pair_width()
                    )));
                }
                Ok(g.row(z))
            })
            .collect()
    }
}
