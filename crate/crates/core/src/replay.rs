//! Episode replay with fixed-length segment sampling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ComixError;

/// One environment step as seen by every agent at acting time. Per-agent
/// arrays are stored flat, agent-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// `agents x obs_width`
    pub obs: Vec<f64>,
    /// Hidden state before this step, `agents x hidden`.
    pub hidden: Vec<f64>,
    pub intentions: Vec<usize>,
    /// Delivered messages, `senders x message_width`.
    pub delivered: Vec<f64>,
    pub ages: Vec<usize>,
    /// Soft accept probabilities, `agents x (senders - 1)`.
    pub accept: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    pub fn team_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Up to `T + 1` consecutive transitions of one episode starting at a
/// sampled step. The first `len` steps carry loss; a following step, when
/// present, is only used for bootstrapping.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub steps: &'a [Transition],
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    min_size: usize,
    episodes: VecDeque<Vec<Transition>>,
    len: usize,
}

impl ReplayBuffer {
    /// Sizes count transitions.
    pub fn new(capacity: usize, min_size: usize) -> Result<Self, ComixError> {
        if capacity == 0 || min_size > capacity {
            return Err(ComixError::Config(format!(
                "replay sizes min {min_size} / max {capacity} are inconsistent"
            )));
        }
        Ok(Self { capacity, min_size, episodes: VecDeque::new(), len: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_size(&self) -> usize {
        self.min_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_ready(&self) -> bool {
        self.len >= self.min_size
    }

    /// Appends a finished episode, evicting the oldest ones to stay within capacity.
    pub fn push_episode(&mut self, episode: Vec<Transition>) -> Result<(), ComixError> {
        if episode.len() > self.capacity {
            return Err(ComixError::Config(format!(
                "episode of {} steps exceeds replay capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        if episode.is_empty() {
            return Ok(());
        }
        while self.len + episode.len() > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.len -= old.len();
        }
        self.len += episode.len();
        self.episodes.push_back(episode);
        Ok(())
    }

    /// `batch` segments with start steps drawn uniformly over all stored
    /// transitions. Segments stop at the episode end.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, steps: usize, rng: &mut R) -> Result<Vec<Segment<'_>>, ComixError> {
        if !self.is_ready() || self.is_empty() {
            return Err(ComixError::Contract(format!(
                "replay holds {} transitions, sampling needs {}",
                self.len,
                self.min_size.max(1)
            )));
        }
        if steps == 0 {
            return Err(ComixError::Config("segment length must be positive".into()));
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut k = rng.gen_range(0..self.len);
            for ep in &self.episodes {
                if k < ep.len() {
                    let end = (k + steps + 1).min(ep.len());
                    out.push(Segment { steps: &ep[k..end], len: steps.min(ep.len() - k) });
                    break;
                }
                k -= ep.len();
            }
        }
        Ok(out)
    }

    /// The `count` most recently stored transitions, oldest first.
    pub fn freshest(&self, count: usize) -> Vec<&Transition> {
        let mut out: Vec<&Transition> = self.episodes.iter().rev().flat_map(|e| e.iter().rev()).take(count).collect();
        out.reverse();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(id: usize, len: usize) -> Vec<Transition> {
        (0..len)
            .map(|t| Transition {
                obs: vec![id as f64, t as f64],
                hidden: vec![],
                intentions: vec![0],
                delivered: vec![],
                ages: vec![],
                accept: vec![],
                actions: vec![0],
                rewards: vec![1.0],
                terminal: t + 1 == len,
            })
            .collect()
    }

    #[test]
    fn capacity_counts_transitions() {
        let mut buf = ReplayBuffer::new(10, 4).unwrap();
        buf.push_episode(episode(0, 4)).unwrap();
        buf.push_episode(episode(1, 4)).unwrap();
        assert_eq!(buf.len(), 8);
        buf.push_episode(episode(2, 4)).unwrap();
        assert_eq!(buf.len(), 8);
        assert_eq!(buf.episodes(), 2);
        assert!(buf.push_episode(episode(3, 11)).is_err());
    }

    #[test]
    fn sampling_waits_for_warm_up() {
        let mut buf = ReplayBuffer::new(100, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        buf.push_episode(episode(0, 3)).unwrap();
        assert!(buf.sample(2, 2, &mut rng).is_err());
        buf.push_episode(episode(1, 3)).unwrap();
        assert_eq!(buf.sample(2, 2, &mut rng).unwrap().len(), 2);
    }

    #[test]
    fn segments_stay_inside_episodes() {
        let mut buf = ReplayBuffer::new(100, 1).unwrap();
        for id in 0..5 {
            buf.push_episode(episode(id, 3 + id)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seg in buf.sample(500, 4, &mut rng).unwrap() {
            let id = seg.steps[0].obs[0];
            assert!(seg.steps.iter().all(|t| t.obs[0] == id));
            assert!(seg.len <= 4 && seg.len >= 1 && seg.steps.len() <= 5);
            assert!(seg.steps.windows(2).all(|w| w[1].obs[1] == w[0].obs[1] + 1.0));
            assert!(seg.steps.len() == seg.len + 1 || seg.steps[seg.len - 1].terminal);
        }
    }

    #[test]
    fn freshest_is_most_recent_in_order() {
        let mut buf = ReplayBuffer::new(100, 1).unwrap();
        buf.push_episode(episode(0, 3)).unwrap();
        buf.push_episode(episode(1, 2)).unwrap();
        let f: Vec<(f64, f64)> = buf.freshest(3).iter().map(|t| (t.obs[0], t.obs[1])).collect();
        assert_eq!(f, vec![(0.0, 2.0), (1.0, 0.0), (1.0, 1.0)]);
        assert_eq!(buf.freshest(50).len(), 5);
    }
}
