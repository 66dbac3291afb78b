//! Per-device batch sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Shuffled epochs: batches within an epoch are disjoint.
    #[default]
    Epochs,
    /// Every batch element drawn uniformly from the shard, independently.
    WithReplacement,
}

/// One device's view of the dataset plus its epoch state.
///
/// The permutation is drawn lazily from whatever generator is passed to the
/// call that starts an epoch, so the caller decides which keyed stream an
/// epoch belongs to.
#[derive(Clone, Debug)]
pub struct DeviceShard {
    device_id: usize,
    indices: Vec<usize>,
    mode: SamplingMode,
    perm: Vec<usize>,
    cursor: usize,
}

impl DeviceShard {
    pub fn new(device_id: usize, indices: Vec<usize>, mode: SamplingMode) -> Self {
        DeviceShard {
            device_id,
            indices,
            mode,
            perm: Vec::new(),
            cursor: 0,
        }
    }

    pub fn device_id(&self) -> usize {
        self.device_id
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Dataset indices of the next batch.
    ///
    /// In epoch mode this is the next `batch_size` entries of the current
    /// permutation; the last batch of an epoch may be short, and the following
    /// call starts a new permutation.
    pub fn next_indices<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.indices.is_empty() {
            return Err(Error::InvalidState(format!("device {} has an empty shard", self.device_id)));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        match self.mode {
            SamplingMode::WithReplacement => Ok((0..batch_size)
                .map(|_| self.indices[rng.random_range(0..self.indices.len())])
                .collect()),
            SamplingMode::Epochs => {
                if self.cursor >= self.perm.len() {
                    self.perm = self.indices.clone();
                    self.perm.shuffle(rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + batch_size).min(self.perm.len());
                let out = self.perm[self.cursor..end].to_vec();
                self.cursor = end;
                Ok(out)
            }
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&mut self, dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.next_indices(batch_size, rng)?;
        dataset.batch(&idx)
    }

    /// The device's whole local dataset as one batch.
    pub fn full_batch(&self, dataset: &Dataset) -> Result<Batch> {
        dataset.batch(&self.indices)
    }
}
