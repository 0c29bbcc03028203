//! The capacity-bounded pool of best candidates rendered into the meta-prompt.

use std::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PromptCandidate;

/// Top-`capacity` candidates, sorted by ascending mean score.
///
/// Equal scores rank the earlier (iteration, ordinal) higher, so the best
/// entry is always the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptHistory {
    capacity: usize,
    entries: Vec<PromptCandidate>,
}

/// Key used to detect duplicate prompt texts: trimmed, internal whitespace
/// collapsed to single spaces, case preserved.
pub fn dedupe_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ascending rank order of two candidates.
pub fn rank_order(a: &PromptCandidate, b: &PromptCandidate) -> Ordering {
    a.mean_score()
        .total_cmp(&b.mean_score())
        .then_with(|| Reverse(a.iteration()).cmp(&Reverse(b.iteration())))
        .then_with(|| Reverse(a.ordinal()).cmp(&Reverse(b.ordinal())))
}

impl PromptHistory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidInput("history capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PromptCandidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns a new history with `candidate` merged in.
    pub fn insert(&self, candidate: PromptCandidate) -> Self {
        let mut next = self.clone();
        next.insert_in_place(candidate);
        next
    }

    pub fn insert_in_place(&mut self, candidate: PromptCandidate) {
        let key = dedupe_key(candidate.text());
        if let Some(pos) = self
            .entries
            .iter()
            .position(|e| dedupe_key(e.text()) == key)
        {
            if rank_order(&candidate, &self.entries[pos]) != Ordering::Greater {
                return;
            }
            self.entries.remove(pos);
        }
        let at = self
            .entries
            .partition_point(|e| rank_order(e, &candidate) == Ordering::Less);
        self.entries.insert(at, candidate);
        if self.entries.len() > self.capacity {
            let excess = self.entries.len() - self.capacity;
            self.entries.drain(..excess);
        }
    }

    /// The highest-scoring entry.
    pub fn best(&self) -> Result<&PromptCandidate> {
        self.entries.last().ok_or(Error::EmptyHistory)
    }
}
