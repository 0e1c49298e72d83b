//! Per-class FIFO feature queues and hard pair mining.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::numerics::{sq_distance, Real};

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    order: u64,
    feature: Vec<T>,
}

/// One bounded queue per seen class. Entries are plain detached copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassQueueSet<T: Real = f32> {
    capacity: usize,
    queues: BTreeMap<usize, VecDeque<Entry<T>>>,
    pushed: u64,
}

/// A (positive, negative) pair for the triplet loss.
pub type Pair<T> = (Vec<T>, Vec<T>);

impl<T: Real> ClassQueueSet<T> {
    pub fn new(classes: &[usize], capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(Self { capacity, queues: classes.iter().map(|&c| (c, VecDeque::new())).collect(), pushed: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, class_id: usize) -> usize {
        self.queues.get(&class_id).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    /// Queue contents for one class, oldest first.
    pub fn contents(&self, class_id: usize) -> Vec<&[T]> {
        self.queues.get(&class_id).map_or_else(Vec::new, |q| q.iter().map(|e| e.feature.as_slice()).collect())
    }

    pub fn clear(&mut self) {
        self.queues.values_mut().for_each(VecDeque::clear);
        self.pushed = 0;
    }

    pub fn push(&mut self, class_id: usize, feature: &[T]) -> Result<()> {
        let capacity = self.capacity;
        let q = self
            .queues
            .get_mut(&class_id)
            .ok_or_else(|| Error::contract("queue_push", format!("class {class_id} has no queue")))?;
        if q.len() == capacity {
            q.pop_front();
        }
        q.push_back(Entry { order: self.pushed, feature: feature.to_vec() });
        self.pushed += 1;
        Ok(())
    }

    /// Up to `r` pairs: the farthest entries of the anchor's own class
    /// matched by rank with the closest entries of every other class.
    /// Ties go to the older entry.
    pub fn sample_hard_pairs(&self, anchor: &[T], class_id: usize, r: usize) -> Result<Vec<Pair<T>>> {
        let scored = |entries: &mut dyn Iterator<Item = &Entry<T>>| -> Result<Vec<(T, u64, Vec<T>)>> {
            entries
                .map(|e| {
                    if e.feature.len() != anchor.len() {
                        return Err(Error::shapes("sample_hard_pairs", &[anchor.len()], &[e.feature.len()]));
                    }
                    Ok((sq_distance(anchor, &e.feature), e.order, e.feature.clone()))
                })
                .collect()
        };
        let by_dist = |a: &(T, u64, Vec<T>), b: &(T, u64, Vec<T>)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal);

        let mut positives = match self.queues.get(&class_id) {
            Some(q) => scored(&mut q.iter())?,
            None => Vec::new(),
        };
        let mut negatives =
            scored(&mut self.queues.iter().filter(|(&c, _)| c != class_id).flat_map(|(_, q)| q.iter()))?;
        positives.sort_by(|a, b| by_dist(b, a).then(a.1.cmp(&b.1)));
        negatives.sort_by(|a, b| by_dist(a, b).then(a.1.cmp(&b.1)));
        Ok(positives.into_iter().zip(negatives).take(r).map(|(p, n)| (p.2, n.2)).collect())
    }
}
