use rand::seq::index::sample;
use rand::Rng;

use crate::data::Example;
use crate::error::{contract, Result};

/// Balanced store of past-task examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    /// Tasks in insertion order with their stored examples.
    stores: Vec<(usize, Vec<Example>)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return contract("replay buffer capacity must be positive");
        }
        Ok(Self {
            capacity,
            stores: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stores.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(task, stored count)` in insertion order.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        self.stores.iter().map(|(t, s)| (*t, s.len())).collect()
    }

    pub fn examples(&self, task: usize) -> &[Example] {
        self.stores
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, s)| s.as_slice())
            .unwrap_or(&[])
    }

    /// Adds `task`'s examples and rebalances so every stored task holds
    /// `⌊C/T⌋` or `⌈C/T⌉` items, or all it has when that is fewer.
    ///
    /// Earlier tasks receive the remainder first. Kept items are drawn
    /// uniformly without replacement and retain their original order.
    pub fn insert(&mut self, task: usize, examples: &[Example], rng: &mut impl Rng) {
        let mut available: Vec<usize> = Vec::with_capacity(self.stores.len() + 1);
        let mut existing = None;
        for (i, (t, s)) in self.stores.iter().enumerate() {
            if *t == task {
                existing = Some(i);
                available.push(s.len() + examples.len());
            } else {
                available.push(s.len());
            }
        }
        if existing.is_none() {
            available.push(examples.len());
        }
        let quotas = water_fill(self.capacity, &available);

        if let Some(i) = existing {
            self.stores[i].1.extend_from_slice(examples);
        } else {
            self.stores.push((task, examples.to_vec()));
        }
        for ((_, store), &q) in self.stores.iter_mut().zip(&quotas) {
            if q < store.len() {
                let mut keep = sample(rng, store.len(), q).into_vec();
                keep.sort_unstable();
                *store = keep.into_iter().map(|i| store[i].clone()).collect();
            }
        }
        self.stores.retain(|(_, s)| !s.is_empty());
    }

    /// `n` stored examples drawn uniformly; without replacement when `n`
    /// does not exceed the stored count, with replacement otherwise.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Example>> {
        let flat: Vec<&Example> = self.stores.iter().flat_map(|(_, s)| s).collect();
        if flat.is_empty() {
            return contract("cannot sample from an empty replay buffer");
        }
        let picks: Vec<usize> = if n <= flat.len() {
            sample(rng, flat.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.gen_range(0..flat.len())).collect()
        };
        Ok(picks.into_iter().map(|i| flat[i].clone()).collect())
    }
}

/// Round-robin allocation of `capacity` slots bounded by `available`.
fn water_fill(capacity: usize, available: &[usize]) -> Vec<usize> {
    let mut quota = vec![0; available.len()];
    let mut left = capacity;
    while left > 0 {
        let mut gave = false;
        for (q, &a) in quota.iter_mut().zip(available) {
            if left == 0 {
                break;
            }
            if *q < a {
                *q += 1;
                left -= 1;
                gave = true;
            }
        }
        if !gave {
            break;
        }
    }
    quota
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Strict-improvement early stopping over per-epoch validation scores
/// (higher is better). Returns the decision and the first best epoch.
pub fn early_stop_check(history: &[f64], patience: usize) -> Result<(StopDecision, usize)> {
    if patience == 0 {
        return contract("patience must be at least 1");
    }
    if history.is_empty() {
        return contract("early stopping needs at least one score");
    }
    let mut best = 0;
    for (i, &s) in history.iter().enumerate() {
        if s > history[best] {
            best = i;
        }
    }
    let since = history.len() - 1 - best;
    let decision = if since >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    };
    Ok((decision, best))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn task(id: usize, n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example::new(format!("in {id} {i}"), format!("out {i}"), id).unwrap())
            .collect()
    }

    fn sorted_counts(b: &ReplayBuffer) -> Vec<usize> {
        let mut c: Vec<usize> = b.counts().into_iter().map(|(_, n)| n).collect();
        c.sort_unstable();
        c
    }

    #[test]
    fn capacity_four_two_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::new(4).unwrap();
        b.insert(0, &task(0, 10), &mut rng);
        assert_eq!(b.counts(), vec![(0, 4)]);
        b.insert(1, &task(1, 10), &mut rng);
        assert_eq!(b.counts(), vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn capacity_five_three_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = ReplayBuffer::new(5).unwrap();
        for t in 0..3 {
            b.insert(t, &task(t, 10), &mut rng);
        }
        assert_eq!(sorted_counts(&b), vec![1, 2, 2]);
        assert_eq!(b.len(), 5);
    }

    #[test]
    fn availability_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ReplayBuffer::new(10).unwrap();
        b.insert(0, &task(0, 1), &mut rng);
        b.insert(1, &task(1, 20), &mut rng);
        assert_eq!(b.examples(0).len(), 1);
        assert_eq!(b.examples(1).len(), 9);
    }

    #[test]
    fn balance_invariant_over_many_inserts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cap in 1..30 {
            let mut b = ReplayBuffer::new(cap).unwrap();
            for t in 0..6 {
                b.insert(t, &task(t, 50), &mut rng);
                let c = sorted_counts(&b);
                assert!(b.len() <= cap);
                assert!(c.last().unwrap() - c.first().unwrap() <= 1, "cap {cap}: {c:?}");
            }
        }
    }

    #[test]
    fn downsampling_keeps_only_original_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = ReplayBuffer::new(6).unwrap();
        let a = task(0, 30);
        b.insert(0, &a, &mut rng);
        b.insert(1, &task(1, 30), &mut rng);
        b.insert(2, &task(2, 30), &mut rng);
        for e in b.examples(0) {
            assert!(a.contains(e));
        }
        let mut dedup = b.examples(0).to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), 2);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn empty_buffer_sample_is_error() {
        let b = ReplayBuffer::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(1, &mut rng).is_err());
    }

    #[test]
    fn full_draw_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = ReplayBuffer::new(8).unwrap();
        b.insert(0, &task(0, 4), &mut rng);
        b.insert(1, &task(1, 4), &mut rng);
        let mut drawn = b.sample(8, &mut rng).unwrap();
        let mut stored: Vec<Example> = [b.examples(0), b.examples(1)].concat();
        drawn.sort_by(|x, y| x.input.cmp(&y.input));
        stored.sort_by(|x, y| x.input.cmp(&y.input));
        assert_eq!(drawn, stored);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = ReplayBuffer::new(8).unwrap();
        b.insert(0, &task(0, 8), &mut rng);
        let x = b.sample(20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let y = b.sample(20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn draw_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = ReplayBuffer::new(10).unwrap();
        b.insert(0, &task(0, 5), &mut rng);
        b.insert(1, &task(1, 5), &mut rng);
        let draws = 10_000;
        let got = b.sample(draws, &mut rng).unwrap();
        let stored: Vec<Example> = [b.examples(0), b.examples(1)].concat();
        let p = 1.0 / stored.len() as f64;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for e in &stored {
            let c = got.iter().filter(|g| *g == e).count() as f64;
            assert!((c - expected).abs() < 3.0 * sigma, "{c} vs {expected}");
        }
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop_check(&[1.0, 2.0, 3.0], 2).unwrap(), (StopDecision::Continue, 2));
        assert_eq!(early_stop_check(&[3.0, 2.0, 1.0, 0.5], 2).unwrap(), (StopDecision::Stop, 0));
        assert_eq!(early_stop_check(&[1.0, 1.0, 1.0], 2).unwrap(), (StopDecision::Stop, 0));
        assert_eq!(early_stop_check(&[1.0, 1.0], 2).unwrap(), (StopDecision::Continue, 0));
        assert!(early_stop_check(&[1.0], 0).is_err());
    }
}
