//! Training objectives: the mixed TD loss over replayed segments and the
//! contrastive Coordinator loss.

use comix_nn::{Graph, Matrix, ParamStore, Var, Weights};

use crate::channel::DelayMode;
use crate::config::{ComplementMode, ContrastiveForm, TdError};
use crate::error::ComixError;
use crate::model::{harden, row_argmax, CommBatch, Comix, ModelConfig};
use crate::replay::{Segment, Transition};
use crate::rollout::delay_factors;

/// Inputs of one unroll step across the batch. Rows of absent entries
/// (segments that ended earlier) are zero.
#[derive(Clone, Debug)]
pub struct StepInputs {
    /// `(blocks*agents) x obs_width`
    pub obs: Matrix,
    pub comm: Option<CommBatch>,
    /// Hardened stored masks, `(blocks*agents) x peers`.
    pub mask: Matrix,
    pub actions: Vec<usize>,
    pub team_reward: Vec<f64>,
    pub terminal: Vec<bool>,
    pub present: Vec<bool>,
    /// Whether block `b` contributes a loss term at this step.
    pub loss: Vec<bool>,
}

impl StepInputs {
    /// Joint states, `blocks x (agents*obs_width)`.
    pub fn states(&self, blocks: usize) -> Matrix {
        let width = self.obs.len() / blocks;
        Matrix::from_shape_vec((blocks, width), self.obs.iter().copied().collect()).expect("obs rows divide into blocks")
    }
}

#[derive(Clone, Debug)]
pub struct TdBatch {
    pub blocks: usize,
    pub agents: usize,
    /// Stored hidden state before the first step, `(blocks*agents) x hidden`.
    pub hidden: Matrix,
    pub steps: Vec<StepInputs>,
}

impl TdBatch {
    pub fn from_segments(cfg: &ModelConfig, segments: &[Segment<'_>], delay: DelayMode) -> Result<Self, ComixError> {
        let blocks = segments.len();
        if blocks == 0 {
            return Err(ComixError::Contract("empty segment batch".into()));
        }
        let n = cfg.agents;
        let hdim = cfg.agent.hidden;
        let mut hidden = Matrix::zeros((blocks * n, hdim));
        for (b, seg) in segments.iter().enumerate() {
            let h = &seg.steps[0].hidden;
            check_len("hidden state", h.len(), n * hdim)?;
            for i in 0..n {
                for k in 0..hdim {
                    hidden[[b * n + i, k]] = h[i * hdim + k];
                }
            }
        }
        let unroll = segments.iter().map(|s| s.steps.len()).max().unwrap_or(0);
        let steps = (0..unroll)
            .map(|u| {
                let at: Vec<Option<&Transition>> = segments.iter().map(|s| s.steps.get(u)).collect();
                let loss = segments.iter().map(|s| u < s.len).collect();
                step_inputs(cfg, &at, loss, delay)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { blocks, agents: n, hidden, steps })
    }

    pub fn loss_terms(&self) -> usize {
        self.steps.iter().map(|s| s.loss.iter().filter(|&&l| l).count()).sum()
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), ComixError> {
    if got != want {
        return Err(ComixError::Contract(format!("stored {what} has {got} values, expected {want}")));
    }
    Ok(())
}

fn step_inputs(cfg: &ModelConfig, at: &[Option<&Transition>], loss: Vec<bool>, delay: DelayMode) -> Result<StepInputs, ComixError> {
    let blocks = at.len();
    let n = cfg.agents;
    let ow = cfg.obs_width();
    let mw = cfg.message_width();
    let mut obs = Matrix::zeros((blocks * n, ow));
    let mut actions = vec![0; blocks * n];
    let mut team_reward = vec![0.0; blocks];
    let mut terminal = vec![false; blocks];
    let present: Vec<bool> = at.iter().map(Option::is_some).collect();
    let senders = if cfg.communication {
        at.iter().flatten().map(|t| t.ages.len()).next().unwrap_or(n)
    } else {
        0
    };
    let peers = senders.saturating_sub(1);
    let mut own = Matrix::zeros((blocks * n, mw));
    let mut delivered = Matrix::zeros((blocks * senders, mw));
    let mut ages = vec![0; blocks * senders];
    let mut mask = Matrix::zeros((blocks * n, peers));
    for (b, t) in at.iter().enumerate() {
        let Some(t) = t else { continue };
        check_len("observation", t.obs.len(), n * ow)?;
        check_len("action list", t.actions.len(), n)?;
        team_reward[b] = t.team_reward();
        terminal[b] = t.terminal;
        for i in 0..n {
            let r = b * n + i;
            for k in 0..ow {
                obs[[r, k]] = t.obs[i * ow + k];
            }
            actions[r] = t.actions[i];
        }
        if cfg.communication {
            check_len("delivered messages", t.delivered.len(), senders * mw)?;
            check_len("accept probabilities", t.accept.len(), n * peers)?;
            for i in 0..n {
                let r = b * n + i;
                for k in 0..ow {
                    own[[r, k]] = t.obs[i * ow + k];
                }
                own[[r, ow + t.intentions[i]]] = 1.0;
                for p in 0..peers {
                    mask[[r, p]] = t.accept[i * peers + p];
                }
            }
            for s in 0..senders {
                for k in 0..mw {
                    delivered[[b * senders + s, k]] = t.delivered[s * mw + k];
                }
                ages[b * senders + s] = t.ages[s];
            }
        }
    }
    let comm = if cfg.communication {
        Some(CommBatch::new(blocks, n, senders, own, delivered, delay_factors(delay, &ages))?)
    } else {
        None
    };
    Ok(StepInputs { obs, comm, mask: harden(&mask), actions, team_reward, terminal, present, loss })
}

/// Per-agent action values at every unroll step, rebuilding hidden states
/// from the stored initial one and reusing the stored masks.
pub fn unroll(model: &Comix, g: &mut Graph, w: &Weights<'_>, batch: &TdBatch) -> Result<Vec<Var>, ComixError> {
    let mut h = g.constant(batch.hidden.clone());
    let mut out = Vec::with_capacity(batch.steps.len());
    for step in &batch.steps {
        let o = g.constant(step.obs.clone());
        let (q_self, h_next) = model.agent.q_self_graph(g, w, o, h)?;
        let q = match &step.comm {
            Some(comm) => {
                let enc = model.encode_graph(g, w, comm)?;
                model.comm_q_graph(g, w, comm, enc, h_next, q_self, &comm.averaging(&step.mask)?)?
            }
            None => q_self,
        };
        out.push(q);
        h = h_next;
    }
    Ok(out)
}

/// Result of building the TD loss into a graph.
pub struct TdLoss {
    pub loss: Var,
    pub value: f64,
    /// `y_TOT` per loss term, step-major.
    pub targets: Vec<f64>,
}

/// `mean |y_TOT - Q_TOT|` (or its square) over every loss term. The online network picks the
/// next actions, the target network evaluates them, and terminal steps
/// bootstrap nothing.
pub fn td_loss(
    model: &Comix,
    target: &ParamStore,
    batch: &TdBatch,
    gamma: f64,
    error: TdError,
    g: &mut Graph,
) -> Result<TdLoss, ComixError> {
    let blocks = batch.blocks;
    let n = batch.agents;
    let online_w = Weights::train(&model.q_params);
    let online = unroll(model, g, &online_w, batch)?;

    // Target values for every step after the first.
    let mut next_value = vec![vec![0.0; blocks]; batch.steps.len()];
    if batch.steps.len() > 1 && gamma != 0.0 {
        let mut tg = Graph::new();
        let tw = Weights::fixed(target);
        let tq = unroll(model, &mut tg, &tw, batch)?;
        let mut chosen = Vec::new();
        let mut states = Vec::new();
        for u in 1..batch.steps.len() {
            let greedy = row_argmax(g.value(online[u]));
            let picked = tg.pick(tq[u], greedy)?;
            chosen.push(tg.reshape(picked, blocks, n)?);
            states.push(tg.constant(batch.steps[u].states(blocks)));
        }
        let q = tg.concat_rows(&chosen)?;
        let s = tg.concat_rows(&states)?;
        let qt = model.mixer.mix(&mut tg, &tw, q, s)?;
        let v = tg.value(qt);
        for u in 1..batch.steps.len() {
            for b in 0..blocks {
                next_value[u][b] = v[[(u - 1) * blocks + b, 0]];
            }
        }
    }

    let mut chosen = Vec::new();
    let mut states = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (u, step) in batch.steps.iter().enumerate() {
        if !step.loss.iter().any(|&l| l) {
            continue;
        }
        let picked = g.pick(online[u], step.actions.clone())?;
        chosen.push(g.reshape(picked, blocks, n)?);
        states.push(g.constant(step.states(blocks)));
        for b in 0..blocks {
            let mut y = step.team_reward[b];
            if step.loss[b] && !step.terminal[b] {
                if !batch.steps.get(u + 1).is_some_and(|s| s.present[b]) {
                    return Err(ComixError::Contract("non-terminal loss step without a following transition".into()));
                }
                y += gamma * next_value[u + 1][b];
            }
            targets.push(y);
            weights.push(if step.loss[b] { 1.0 } else { 0.0 });
        }
    }
    let count: f64 = weights.iter().sum();
    if count == 0.0 {
        return Err(ComixError::Contract("TD batch has no loss terms".into()));
    }
    let q = g.concat_rows(&chosen)?;
    let s = g.concat_rows(&states)?;
    let q_tot = model.mixer.mix(g, &online_w, q, s)?;
    let rows = targets.len();
    let y = g.constant(Matrix::from_shape_vec((rows, 1), targets.clone()).expect("one target per row"));
    let m = g.constant(Matrix::from_shape_vec((rows, 1), weights.clone()).expect("one weight per row"));
    let diff = g.sub(q_tot, y)?;
    let penalty = match error {
        TdError::Absolute => g.abs(diff),
        TdError::Squared => g.mul(diff, diff)?,
    };
    let masked = g.mul(penalty, m)?;
    let total = g.sum(masked);
    let loss = g.scale(total, 1.0 / count);
    let kept = targets.iter().zip(&weights).filter(|(_, &w)| w > 0.0).map(|(&y, _)| y).collect();
    Ok(TdLoss { loss, value: g.scalar(loss), targets: kept })
}

/// Fresh acting-time transitions for the Coordinator update.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub blocks: usize,
    pub obs: Matrix,
    pub hidden: Matrix,
    pub comm: CommBatch,
    pub states: Matrix,
}

impl ContrastiveBatch {
    pub fn from_transitions(cfg: &ModelConfig, transitions: &[&Transition], delay: DelayMode) -> Result<Self, ComixError> {
        if !cfg.communication {
            return Err(ComixError::Config("the Coordinator loss needs communication enabled".into()));
        }
        let at: Vec<Option<&Transition>> = transitions.iter().map(|t| Some(*t)).collect();
        let inputs = step_inputs(cfg, &at, vec![true; at.len()], delay)?;
        let n = cfg.agents;
        let hdim = cfg.agent.hidden;
        let mut hidden = Matrix::zeros((at.len() * n, hdim));
        for (b, t) in transitions.iter().enumerate() {
            check_len("hidden state", t.hidden.len(), n * hdim)?;
            for i in 0..n {
                for k in 0..hdim {
                    hidden[[b * n + i, k]] = t.hidden[i * hdim + k];
                }
            }
        }
        let states = inputs.states(at.len());
        Ok(Self {
            blocks: at.len(),
            obs: inputs.obs,
            hidden,
            comm: inputs.comm.expect("communication enabled"),
            states,
        })
    }
}

pub struct ContrastiveLoss {
    pub loss: Var,
    pub value: f64,
    /// `w_i · ΔQ_i` per receiver row.
    pub coefficients: Vec<f64>,
    /// Accept probabilities, `receivers x peers`.
    pub accept: Matrix,
}

/// Action values of every receiver when its peers are averaged with `mask`
/// weights, under fixed Q parameters.
pub fn masked_q(
    model: &Comix,
    g: &mut Graph,
    comm: &CommBatch,
    enc: Var,
    h_next: Var,
    q_self: Var,
    mask: &Matrix,
) -> Result<Matrix, ComixError> {
    let w = Weights::fixed(&model.q_params);
    let q = model.comm_q_graph(g, &w, comm, enc, h_next, q_self, &comm.averaging(mask)?)?;
    Ok(g.value(q).clone())
}

/// `L_C = mean_b sum_i stop(w_i ΔQ_i) · sum_j ĉ_ij`, with
/// `ΔQ_i = max(0, max_a Q_i(complement) - max_a Q_i(mask))`. Only the
/// Coordinator receives gradients. `None` when no receiver has a peer.
pub fn contrastive_loss(
    model: &Comix,
    batch: &ContrastiveBatch,
    form: ContrastiveForm,
    complement: ComplementMode,
    g: &mut Graph,
) -> Result<Option<ContrastiveLoss>, ComixError> {
    let fixed = Weights::fixed(&model.q_params);
    let cw = Weights::train(&model.coord_params);
    let Some(p) = model.accept_graph(g, &cw, &batch.comm)? else {
        return Ok(None);
    };
    let probs = g.value(p).clone();
    let hard = harden(&probs);
    let alt = match complement {
        ComplementMode::Hard => hard.mapv(|c| 1.0 - c),
        ComplementMode::Soft => probs.mapv(|v| 1.0 - v),
    };

    let o = g.constant(batch.obs.clone());
    let h = g.constant(batch.hidden.clone());
    let (q_self, h_next) = model.agent.q_self_graph(g, &fixed, o, h)?;
    let enc = model.encode_graph(g, &fixed, &batch.comm)?;
    let q_mask = masked_q(model, g, &batch.comm, enc, h_next, q_self, &hard)?;
    let q_alt = masked_q(model, g, &batch.comm, enc, h_next, q_self, &alt)?;
    let s = g.constant(batch.states.clone());
    let wv = model.mixer.agent_weights_graph(g, &fixed, s)?;
    let w_agent = g.value(wv).clone();

    let n = batch.comm.agents;
    let receivers = batch.comm.receivers();
    let (best_alt, best_mask) = (row_max(&q_alt), row_max(&q_mask));
    let coefficients: Vec<f64> = (0..receivers)
        .map(|r| {
            let gap = (best_alt[r] - best_mask[r]).max(0.0);
            w_agent[[r / n, r % n]] * gap
        })
        .collect();

    let likelihood = match form {
        ContrastiveForm::Literal => p,
        ContrastiveForm::Selection => {
            let sign = g.constant(hard.mapv(|c| 2.0 * c - 1.0));
            let offset = g.constant(hard.mapv(|c| 1.0 - c));
            let scaled = g.mul(p, sign)?;
            g.add(scaled, offset)?
        }
    };
    let per_row = g.row_sum(likelihood);
    let coef = g.constant(Matrix::from_shape_vec((receivers, 1), coefficients.clone()).expect("one per receiver"));
    let weighted = g.mul(per_row, coef)?;
    let total = g.sum(weighted);
    let loss = g.scale(total, 1.0 / batch.blocks as f64);
    Ok(Some(ContrastiveLoss { loss, value: g.scalar(loss), coefficients, accept: probs }))
}

/// Per-receiver max over actions, as used by the contrastive gap.
pub fn row_max(m: &Matrix) -> Vec<f64> {
    m.outer_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}
