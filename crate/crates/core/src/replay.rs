//! Episode-structured replay buffer with truncated-sequence sampling.
//!
//! Sequences never cross an episode boundary. A sampled sequence carries the
//! steps preceding its start (up to `burn_in_max`) so recurrent models can
//! rebuild their state from zero before the training segment.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::diffcore::{Checkpoint, Real, Tensor};
use crate::error::{usage_err, Error, Result};
use crate::rng::Rng;

pub const DEFAULT_CAPACITY: usize = 1_000_000;

/// One stored transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Masked observation followed by the previous reward (0 at episode start).
    pub x: Vec<f64>,
    /// Action taken after observing `x`, in environment units.
    pub a: Vec<f64>,
    /// Reward received for `a`.
    pub reward: f64,
    pub done: bool,
    /// `done` was caused by the step limit only.
    pub timeout: bool,
}

impl StepRecord {
    pub fn new(x: Vec<f64>, a: Vec<f64>, reward: f64, done: bool, timeout: bool) -> Self {
        StepRecord {
            x,
            a,
            reward,
            done,
            timeout,
        }
    }

    /// Terminal transition whose successor value must not be bootstrapped.
    pub fn is_terminal(&self) -> bool {
        self.done && !self.timeout
    }
}

#[derive(Clone, Debug, Default)]
struct Episode {
    /// Monotonic index of the first step across the buffer's lifetime.
    first: u64,
    steps: Vec<StepRecord>,
    closed: bool,
}

/// FIFO buffer of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    x_dim: usize,
    action_dim: usize,
    capacity: usize,
    episodes: VecDeque<Episode>,
    size: usize,
    /// Monotonic index of the oldest stored step.
    base: u64,
}

/// One sampled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Action preceding the first record in `burn_in` (or in `steps` when
    /// `burn_in` is empty); zeros at an episode start.
    pub lead_action: Vec<f64>,
    pub burn_in: Vec<StepRecord>,
    /// Valid training steps (at most `seq_len`); the remainder is masked.
    pub steps: Vec<StepRecord>,
    /// The step right after the training segment, if stored in the same episode.
    pub lookahead: Option<StepRecord>,
    /// The training segment starts at episode step 0.
    pub episode_start: bool,
    /// Episode index of the first training step.
    pub start: usize,
}

impl Sequence {
    /// Action preceding the first training step.
    pub fn action_before_training(&self) -> &[f64] {
        self.burn_in.last().map(|r| r.a.as_slice()).unwrap_or(&self.lead_action)
    }

    /// Whether training step `t` forms a usable transition for value learning:
    /// terminal steps need no successor, timeouts are dropped, and every other
    /// step needs the following observation.
    pub fn transition_valid(&self, t: usize) -> bool {
        match self.steps.get(t) {
            None => false,
            Some(r) if r.done => !r.timeout,
            Some(_) => t + 1 < self.steps.len() || self.lookahead.is_some(),
        }
    }

    /// Record at training position `t`, where `t == steps.len()` is the lookahead.
    pub fn record(&self, t: usize) -> Option<&StepRecord> {
        self.steps.get(t).or(if t == self.steps.len() { self.lookahead.as_ref() } else { None })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub seq_len: usize,
    pub sequences: Vec<Sequence>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }

    pub fn max_burn_in(&self) -> usize {
        self.sequences.iter().map(|s| s.burn_in.len()).max().unwrap_or(0)
    }

    /// Number of valid training steps over the whole batch.
    pub fn valid_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.steps.len()).sum()
    }

    /// Time-major `(seq_len * B) x 1` step-validity mask.
    pub fn step_mask<T: Real>(&self) -> Tensor<T> {
        self.time_major_mask(|s, t| t < s.steps.len())
    }

    /// Time-major `(seq_len * B) x 1` transition-validity mask.
    pub fn transition_mask<T: Real>(&self) -> Tensor<T> {
        self.time_major_mask(|s, t| s.transition_valid(t))
    }

    fn time_major_mask<T: Real>(&self, f: impl Fn(&Sequence, usize) -> bool) -> Tensor<T> {
        let b = self.batch_size();
        let mut m = Tensor::zeros(self.seq_len * b, 1);
        for t in 0..self.seq_len {
            for (j, s) in self.sequences.iter().enumerate() {
                if f(s, t) {
                    m.set(t * b + j, 0, T::one());
                }
            }
        }
        m
    }

    /// Time-major per-step scalar: `(seq_len * B) x 1`, zero where masked.
    pub fn scalar_rows<T: Real>(&self, f: impl Fn(&StepRecord) -> f64) -> Tensor<T> {
        let b = self.batch_size();
        let mut out = Tensor::zeros(self.seq_len * b, 1);
        for (j, s) in self.sequences.iter().enumerate() {
            for (t, r) in s.steps.iter().enumerate() {
                out.set(t * b + j, 0, T::of(f(r)));
            }
        }
        out
    }

    /// Time-major rows of a per-record vector over `steps` positions
    /// (`seq_len` or `seq_len + 1` to include lookaheads). Missing rows are zero.
    pub fn vector_rows<T: Real>(&self, steps: usize, width: usize, f: impl Fn(&StepRecord) -> &[f64]) -> Tensor<T> {
        let b = self.batch_size();
        let mut out = Tensor::zeros(steps * b, width);
        for (j, s) in self.sequences.iter().enumerate() {
            for t in 0..steps {
                if let Some(r) = s.record(t) {
                    for (o, &v) in out.row_mut(t * b + j).iter_mut().zip(f(r)) {
                        *o = T::of(v);
                    }
                }
            }
        }
        out
    }

    /// Time-major rows of the action preceding each position in `0..steps`
    /// (position 0 uses the action before the training segment).
    pub fn prev_action_rows<T: Real>(&self, steps: usize, width: usize) -> Tensor<T> {
        let b = self.batch_size();
        let mut out = Tensor::zeros(steps * b, width);
        for (j, s) in self.sequences.iter().enumerate() {
            for t in 0..steps {
                let prev = if t == 0 {
                    Some(s.action_before_training())
                } else {
                    s.record(t).and(s.steps.get(t - 1)).map(|r| r.a.as_slice())
                };
                if let Some(a) = prev {
                    for (o, &v) in out.row_mut(t * b + j).iter_mut().zip(a) {
                        *o = T::of(v);
                    }
                }
            }
        }
        out
    }
}

impl ReplayBuffer {
    /// `capacity` must be at least one full episode so the open episode is never evicted.
    pub fn new(x_dim: usize, action_dim: usize, capacity: usize) -> Self {
        ReplayBuffer {
            x_dim,
            action_dim,
            capacity: capacity.max(1),
            episodes: VecDeque::new(),
            size: 0,
            base: 0,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Lengths of stored episodes, oldest first.
    pub fn episode_lengths(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.steps.len()).collect()
    }

    pub fn append(&mut self, record: StepRecord) -> Result<()> {
        if record.x.len() != self.x_dim || record.a.len() != self.action_dim {
            return Err(Error::Usage(format!(
                "record dims (x {}, a {}) do not match buffer (x {}, a {})",
                record.x.len(),
                record.a.len(),
                self.x_dim,
                self.action_dim
            )));
        }
        if !record.x.iter().chain(&record.a).all(|v| v.is_finite()) || !record.reward.is_finite() {
            return usage_err("record contains non-finite values");
        }
        if record.timeout && !record.done {
            return usage_err("timeout record must also be done");
        }
        let open = matches!(self.episodes.back(), Some(e) if !e.closed);
        if !open {
            if *record.x.last().unwrap_or(&0.0) != 0.0 {
                return usage_err("first step of an episode must carry a zero previous reward");
            }
            let first = self.base + self.size as u64;
            self.episodes.push_back(Episode {
                first,
                steps: Vec::new(),
                closed: false,
            });
        }
        let ep = self.episodes.back_mut().expect("episode just ensured");
        ep.closed = record.done;
        ep.steps.push(record);
        self.size += 1;
        self.evict();
        Ok(())
    }

    /// Mark the newest episode, if still open, as ended by a time limit.
    /// Used when a run resumes and the interrupted episode cannot continue.
    pub fn close_open_episode(&mut self) -> bool {
        match self.episodes.back_mut() {
            Some(ep) if !ep.closed => {
                let last = ep.steps.last_mut().expect("open episodes are never empty");
                last.done = true;
                last.timeout = true;
                ep.closed = true;
                true
            }
            _ => false,
        }
    }

    fn evict(&mut self) {
        while self.size > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("len > 1");
            self.size -= old.steps.len();
            self.base += old.steps.len() as u64;
        }
    }

    /// Episode position of the `i`-th stored step (oldest first).
    fn locate(&self, i: usize) -> (usize, usize) {
        let g = self.base + i as u64;
        let k = self.episodes.partition_point(|e| e.first <= g) - 1;
        (k, (g - self.episodes[k].first) as usize)
    }

    pub fn sample_sequences(
        &self,
        batch_size: usize,
        seq_len: usize,
        burn_in_max: usize,
        rng: &mut Rng,
    ) -> Result<SequenceBatch> {
        if self.size == 0 {
            return usage_err("cannot sample from an empty replay buffer");
        }
        if batch_size == 0 || seq_len == 0 {
            return usage_err("batch size and sequence length must be positive");
        }
        let sequences = (0..batch_size)
            .map(|_| {
                let (k, start) = self.locate(rng.random_range(0..self.size));
                self.sequence_at(k, start, seq_len, burn_in_max)
            })
            .collect();
        Ok(SequenceBatch { seq_len, sequences })
    }

    /// Sequence starting at step `start` of stored episode `episode`.
    pub fn sequence_at(&self, episode: usize, start: usize, seq_len: usize, burn_in_max: usize) -> Sequence {
        let steps = &self.episodes[episode].steps;
        let end = (start + seq_len).min(steps.len());
        let b0 = start.saturating_sub(burn_in_max);
        let lead_action = if b0 == 0 {
            vec![0.0; self.action_dim]
        } else {
            steps[b0 - 1].a.clone()
        };
        Sequence {
            lead_action,
            burn_in: steps[b0..start].to_vec(),
            steps: steps[start..end].to_vec(),
            lookahead: steps.get(end).filter(|_| end == start + seq_len).cloned(),
            episode_start: start == 0,
            start,
        }
    }

    /// Every stored episode as a list of records.
    pub fn episodes(&self) -> impl Iterator<Item = &[StepRecord]> {
        self.episodes.iter().map(|e| e.steps.as_slice())
    }

    /// Store the buffer contents under `prefix`.
    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        let mut x = Vec::with_capacity(self.size * self.x_dim);
        let mut a = Vec::with_capacity(self.size * self.action_dim);
        let mut r = Vec::with_capacity(self.size);
        let mut flags = Vec::with_capacity(self.size);
        for rec in self.episodes.iter().flat_map(|e| &e.steps) {
            x.extend_from_slice(&rec.x);
            a.extend_from_slice(&rec.a);
            r.push(rec.reward);
            flags.push(rec.done as u8 | (rec.timeout as u8) << 1);
        }
        let lens: Vec<f64> = self.episodes.iter().map(|e| e.steps.len() as f64).collect();
        ck.put_f64s(&format!("{prefix}/x"), &x);
        ck.put_f64s(&format!("{prefix}/a"), &a);
        ck.put_f64s(&format!("{prefix}/reward"), &r);
        ck.put_bytes(&format!("{prefix}/flags"), &flags);
        ck.put_f64s(&format!("{prefix}/episode_lengths"), &lens);
        ck.put_u64(&format!("{prefix}/dims"), (self.x_dim as u64) << 32 | self.action_dim as u64);
    }

    /// Rebuild a buffer saved with [`ReplayBuffer::save_into`].
    pub fn load_from(ck: &Checkpoint, prefix: &str, capacity: usize) -> Result<Self> {
        let dims = ck.get_u64(&format!("{prefix}/dims"))?;
        let (x_dim, action_dim) = ((dims >> 32) as usize, (dims & 0xffff_ffff) as usize);
        let x = ck.get_f64s(&format!("{prefix}/x"))?;
        let a = ck.get_f64s(&format!("{prefix}/a"))?;
        let r = ck.get_f64s(&format!("{prefix}/reward"))?;
        let flags = ck.get_bytes(&format!("{prefix}/flags"))?;
        let lens = ck.get_f64s(&format!("{prefix}/episode_lengths"))?;
        let n = r.len();
        let total: f64 = lens.iter().sum();
        if x.len() != n * x_dim || a.len() != n * action_dim || flags.len() != n || total != n as f64 {
            return Err(Error::Checkpoint(format!("replay arrays under `{prefix}` are inconsistent")));
        }
        let mut buf = ReplayBuffer::new(x_dim, action_dim, capacity);
        let mut i = 0;
        for &len in &lens {
            for k in 0..len as usize {
                let f = flags[i];
                let rec = StepRecord::new(
                    x[i * x_dim..(i + 1) * x_dim].to_vec(),
                    a[i * action_dim..(i + 1) * action_dim].to_vec(),
                    r[i],
                    f & 1 != 0,
                    f & 2 != 0,
                );
                let last = k + 1 == len as usize;
                // only the newest episode may still be open
                let ok = if last { rec.done || i + 1 == n } else { !rec.done };
                if !ok {
                    return Err(Error::Checkpoint(format!("replay episode boundaries under `{prefix}` are corrupt")));
                }
                buf.append(rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
                i += 1;
            }
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    /// Record whose x encodes (episode, step) for easy checks.
    fn rec(ep: usize, t: usize, len: usize, timeout: bool) -> StepRecord {
        let prev_r = if t == 0 { 0.0 } else { (t - 1) as f64 };
        let done = t + 1 == len;
        StepRecord::new(vec![ep as f64, t as f64, prev_r], vec![t as f64 + 0.5], t as f64, done, done && timeout)
    }

    fn fill(lens: &[usize], capacity: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(3, 1, capacity);
        for (ep, &len) in lens.iter().enumerate() {
            for t in 0..len {
                b.append(rec(ep, t, len, true)).unwrap();
            }
        }
        b
    }

    #[test]
    fn closing_an_open_episode_marks_a_timeout() {
        let mut b = ReplayBuffer::new(3, 1, 100);
        for t in 0..4 {
            b.append(rec(0, t, 10, false)).unwrap();
        }
        assert!(b.close_open_episode());
        assert!(!b.close_open_episode());
        let last = b.episodes().next().unwrap().last().unwrap();
        assert!(last.done && last.timeout);
        // the next record starts a new episode
        b.append(rec(1, 0, 3, false)).unwrap();
        assert_eq!(b.episode_lengths(), vec![4, 1]);
    }

    #[test]
    fn closed_episode_and_size() {
        assert_eq!(ReplayBuffer::new(3, 1, 10).size(), 0);
        let b = fill(&[200], 1000);
        assert_eq!(b.episode_lengths(), vec![200]);
        assert!(b.episodes[0].closed);
        assert_eq!(fill(&[200, 200, 200], 1000).size(), 600);
    }

    #[test]
    fn eviction_drops_oldest_whole_episodes() {
        let b = fill(&[100, 100, 100, 50], 260);
        assert!(b.size() <= 260);
        assert_eq!(b.episode_lengths(), vec![100, 100, 50]);
        assert_eq!(b.episodes[0].steps[0].x[0], 1.0);
        // locate still maps the oldest step to the right place
        assert_eq!(b.locate(0), (0, 0));
        assert_eq!(b.locate(249), (2, 49));
    }

    #[test]
    fn append_validation() {
        let mut b = ReplayBuffer::new(3, 1, 10);
        assert!(matches!(b.append(StepRecord::new(vec![0.0; 2], vec![0.0], 0.0, false, false)), Err(Error::Usage(_))));
        assert!(b.append(StepRecord::new(vec![0.0, 0.0, 1.0], vec![0.0], 0.0, false, false)).is_err());
        assert!(b.append(StepRecord::new(vec![0.0, f64::NAN, 0.0], vec![0.0], 0.0, false, false)).is_err());
        assert!(b.append(rec(0, 0, 5, false)).is_ok());
    }

    #[test]
    fn empty_buffer_sampling_fails() {
        let b = ReplayBuffer::new(3, 1, 10);
        assert!(matches!(b.sample_sequences(4, 64, 64, &mut substream(0, "r")), Err(Error::Usage(_))));
    }

    #[test]
    fn start_at_episode_step_zero() {
        let b = fill(&[1000], 2000);
        let s = b.sequence_at(0, 0, 64, 64);
        assert!(s.burn_in.is_empty() && s.episode_start);
        assert_eq!(s.lead_action, vec![0.0]);
        assert_eq!(s.action_before_training(), &[0.0]);
    }

    #[test]
    fn burn_in_window_arithmetic() {
        let b = fill(&[1000], 2000);
        let s = b.sequence_at(0, 100, 64, 64);
        let idx: Vec<usize> = s.burn_in.iter().map(|r| r.x[1] as usize).collect();
        assert_eq!(idx, (36..100).collect::<Vec<_>>());
        assert_eq!(s.lead_action, vec![35.5]);
        assert_eq!(s.action_before_training(), &[99.5]);
        assert_eq!(s.steps.len(), 64);
        assert_eq!(s.lookahead.as_ref().unwrap().x[1], 164.0);
        assert!(!s.episode_start);
    }

    #[test]
    fn short_episode_truncation() {
        let b = fill(&[40], 100);
        let s = b.sequence_at(0, 10, 64, 64);
        let batch = SequenceBatch {
            seq_len: 64,
            sequences: vec![s.clone()],
        };
        let m = batch.step_mask::<f64>();
        assert_eq!(m.sum(), 30.0);
        assert_eq!(64 - m.sum() as usize, 34);
        assert_eq!(s.burn_in.len(), 10);
        assert!(s.lookahead.is_none());
    }

    #[test]
    fn transition_validity_rules() {
        // timeout ending: last step cannot bootstrap
        let b = fill(&[10], 100);
        let s = b.sequence_at(0, 0, 64, 64);
        assert!((0..9).all(|t| s.transition_valid(t)));
        assert!(!s.transition_valid(9));
        // true terminal: last step is kept without a successor
        let mut b = ReplayBuffer::new(3, 1, 100);
        for t in 0..10 {
            b.append(rec(0, t, 10, false)).unwrap();
        }
        let s = b.sequence_at(0, 5, 64, 64);
        assert!((0..5).all(|t| s.transition_valid(t)));
        // open episode: newest step has no successor yet
        let mut b = ReplayBuffer::new(3, 1, 100);
        for t in 0..10 {
            b.append(rec(0, t, 100, true)).unwrap();
        }
        let s = b.sequence_at(0, 0, 4, 0);
        assert!(s.lookahead.is_some() && s.transition_valid(3));
        let s = b.sequence_at(0, 6, 4, 0);
        assert!(s.transition_valid(2) && !s.transition_valid(3));
    }

    #[test]
    fn time_major_rows() {
        let b = fill(&[20, 20], 100);
        let batch = SequenceBatch {
            seq_len: 3,
            sequences: vec![b.sequence_at(0, 0, 3, 4), b.sequence_at(1, 18, 3, 4)],
        };
        let x = batch.vector_rows::<f64>(4, 3, |r| &r.x);
        // row t*B + j
        assert_eq!(x.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(x.row(1), &[1.0, 18.0, 17.0]);
        assert_eq!(x.row(6), &[0.0, 3.0, 2.0]);
        assert_eq!(x.row(5), &[0.0; 3]);
        let pa = batch.prev_action_rows::<f64>(4, 1);
        assert_eq!(pa.get(0, 0), 0.0);
        assert_eq!(pa.get(1, 0), 17.5);
        assert_eq!(pa.get(3, 0), 18.5);
        assert_eq!(pa.get(6, 0), 2.5);
        assert_eq!(pa.get(5, 0), 0.0);
        let r = batch.scalar_rows::<f64>(|r| r.reward);
        assert_eq!(r.get(3, 0), 19.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut b = fill(&[30, 12], 1000);
        b.append(rec(2, 0, 50, true)).unwrap();
        b.append(rec(2, 1, 50, true)).unwrap();
        let mut ck = Checkpoint::new();
        b.save_into(&mut ck, "replay");
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let c = ReplayBuffer::load_from(&ck, "replay", 1000).unwrap();
        assert_eq!(c.episode_lengths(), vec![30, 12, 2]);
        assert!(c.episodes.iter().zip(&b.episodes).all(|(p, q)| p.steps == q.steps && p.closed == q.closed));
    }

    proptest! {
        #[test]
        fn sampled_sequences_respect_episodes(
            lens in proptest::collection::vec(1usize..90, 1..8),
            seq_len in 1usize..70,
            burn in 0usize..70,
            seed in any::<u64>(),
        ) {
            let b = fill(&lens, 10_000);
            let run = |seed| b.sample_sequences(6, seq_len, burn, &mut substream(seed, "replay")).unwrap();
            let batch = run(seed);
            prop_assert_eq!(&batch, &run(seed));
            for s in &batch.sequences {
                let ep = s.steps[0].x[0];
                let len = lens[ep as usize];
                prop_assert!(s.steps.iter().chain(&s.burn_in).chain(&s.lookahead).all(|r| r.x[0] == ep));
                for (k, r) in s.burn_in.iter().chain(&s.steps).chain(&s.lookahead).enumerate() {
                    prop_assert_eq!(r.x[1] as usize, s.start - s.burn_in.len() + k);
                }
                prop_assert_eq!(s.steps.len(), seq_len.min(len - s.start));
                prop_assert_eq!(s.burn_in.len(), burn.min(s.start));
                let first = s.burn_in.first().unwrap_or(&s.steps[0]);
                if first.x[1] == 0.0 {
                    prop_assert_eq!(first.x[2], 0.0);
                    prop_assert_eq!(&s.lead_action, &vec![0.0]);
                }
            }
        }
    }
}
