use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::derive_seed;

/// `(domain_id, index within that domain)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<(u32, usize)>,
}

/// Mixed-domain batches: every primary sample once per epoch, auxiliary
/// slots filled round-robin over auxiliary domains, each drawn without
/// replacement and reshuffled when exhausted.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    sizes: BTreeMap<u32, usize>,
    primary_id: u32,
    per_primary: usize,
    per_aux: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(
        sizes: &BTreeMap<u32, usize>,
        primary_id: u32,
        batch_size: usize,
        primary_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let n_primary = sizes.get(&primary_id).copied().unwrap_or(0);
        if n_primary == 0 {
            return Err(Error::InvalidBatch(format!("primary domain {primary_id} is empty")));
        }
        let sizes: BTreeMap<u32, usize> = sizes.iter().filter(|(_, &n)| n > 0).map(|(&k, &v)| (k, v)).collect();
        let has_aux = sizes.len() > 1;
        if batch_size == 0 || (has_aux && batch_size < 2) {
            return Err(Error::InvalidBatch(format!(
                "batch size {batch_size} cannot hold a primary and an auxiliary sample"
            )));
        }
        if !(0.0..=1.0).contains(&primary_fraction) {
            return Err(Error::InvalidBatch(format!("primary fraction {primary_fraction} outside [0, 1]")));
        }
        let (per_primary, per_aux) = if has_aux {
            let p = ((batch_size as f64 * primary_fraction).round() as usize).clamp(1, batch_size - 1);
            (p, batch_size - p)
        } else {
            (batch_size, 0)
        };
        Ok(Self {
            sizes,
            primary_id,
            per_primary,
            per_aux,
            seed,
        })
    }

    pub fn per_batch_primary(&self) -> usize {
        self.per_primary
    }

    pub fn epoch_len(&self) -> usize {
        self.sizes[&self.primary_id].div_ceil(self.per_primary)
    }

    fn shuffled(&self, domain: u32, epoch: usize, round: usize) -> Vec<usize> {
        let tag = format!("sampler/{domain}/{epoch}/{round}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &tag));
        let mut idx: Vec<usize> = (0..self.sizes[&domain]).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Batches of epoch `epoch`; a pure function of `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let primary = self.shuffled(self.primary_id, epoch, 0);
        let aux_ids: Vec<u32> = self.sizes.keys().copied().filter(|&d| d != self.primary_id).collect();
        let mut queues: Vec<(Vec<usize>, usize, usize)> =
            aux_ids.iter().map(|&d| (self.shuffled(d, epoch, 0), 0, 0)).collect();
        let mut turn = 0;
        primary
            .chunks(self.per_primary)
            .map(|chunk| {
                let mut items: Vec<(u32, usize)> = chunk.iter().map(|&i| (self.primary_id, i)).collect();
                if !aux_ids.is_empty() {
                    let want = (chunk.len() * self.per_aux).div_ceil(self.per_primary).max(1);
                    for _ in 0..want {
                        let k = turn % aux_ids.len();
                        turn += 1;
                        let (queue, pos, round) = &mut queues[k];
                        if *pos == queue.len() {
                            *round += 1;
                            *queue = self.shuffled(aux_ids[k], epoch, *round);
                            *pos = 0;
                        }
                        items.push((aux_ids[k], queue[*pos]));
                        *pos += 1;
                    }
                }
                Batch { items }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_over_auxiliaries() {
        let sizes = BTreeMap::from([(0, 6), (1, 5), (2, 5)]);
        let s = BatchSampler::new(&sizes, 0, 4, 0.5, 3).unwrap();
        let batches = s.epoch(0);
        assert_eq!(batches.len(), 3);
        let aux: Vec<u32> = batches.iter().flat_map(|b| b.items[2..].iter().map(|x| x.0)).collect();
        assert_eq!(aux, vec![1, 2, 1, 2, 1, 2]);
    }

    #[test]
    fn short_final_batch_keeps_the_ratio() {
        let sizes = BTreeMap::from([(0, 5), (1, 9)]);
        let s = BatchSampler::new(&sizes, 0, 4, 0.5, 0).unwrap();
        let last = s.epoch(0).pop().unwrap();
        assert_eq!(last.items.len(), 2);
    }
}
