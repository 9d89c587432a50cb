use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PairedDataset;
use crate::error::{Error, Result};

/// One training batch of `(caption, paired audio)` index pairs; row `i` pairs with row `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub captions: Vec<usize>,
    pub audio: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

pub type BatchIter = std::vec::IntoIter<Batch>;

pub(crate) fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Shuffled full batches for one epoch.
///
/// Each batch draws one caption from each of the `batch_size` audio items with the most
/// captions left (random tie-break), so an audio item appears at most once per batch
/// whenever the dataset has at least `batch_size` audio items. If fewer distinct items
/// remain than a batch needs, the leftover captions are dropped. Datasets with fewer
/// audio items than `batch_size` repeat items within a batch instead.
pub fn batch_iter(dataset: &PairedDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size {batch_size} leaves no in-batch negatives"
        )));
    }
    let mut rng = epoch_rng(seed, epoch, 0);
    let n_audio = dataset.audio().len();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_audio];
    for (c, &a) in dataset.pairing().iter().enumerate() {
        pools[a].push(c);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let n_batches = dataset.captions().len() / batch_size;
    let distinct = n_audio >= batch_size;

    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut order: Vec<(usize, u64)> = (0..n_audio)
            .filter(|&a| !pools[a].is_empty())
            .map(|a| (a, rng.random()))
            .collect();
        order.sort_by(|x, y| pools[y.0].len().cmp(&pools[x.0].len()).then(x.1.cmp(&y.1)));
        if distinct && order.len() < batch_size {
            break;
        }
        let mut batch = Batch {
            captions: Vec::with_capacity(batch_size),
            audio: Vec::with_capacity(batch_size),
        };
        'fill: while batch.len() < batch_size {
            let mut progressed = false;
            for &(a, _) in &order {
                if let Some(c) = pools[a].pop() {
                    batch.captions.push(c);
                    batch.audio.push(a);
                    progressed = true;
                    if batch.len() == batch_size {
                        break 'fill;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        if batch.len() < batch_size {
            break;
        }
        let mut perm: Vec<usize> = (0..batch_size).collect();
        perm.shuffle(&mut rng);
        batch = Batch {
            captions: perm.iter().map(|&i| batch.captions[i]).collect(),
            audio: perm.iter().map(|&i| batch.audio[i]).collect(),
        };
        batches.push(batch);
    }
    batches.shuffle(&mut rng);
    Ok(batches.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{generate_synthetic, SynthConfig};
    use std::collections::HashSet;

    fn toy(n_audio: usize, cpa: usize) -> PairedDataset {
        generate_synthetic(&SynthConfig {
            n_audio,
            captions_per_audio: cpa,
            d_audio: 2,
            d_text: 2,
            min_len: 1,
            max_len: 1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn ten_batches_of_32() {
        let ds = toy(64, 5);
        let batches: Vec<_> = batch_iter(&ds, 32, 3, 0).unwrap().collect();
        assert_eq!(batches.len(), 10);
        assert!(batches.iter().all(|b| b.len() == 32));
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let ds = toy(64, 5);
        let a: Vec<_> = batch_iter(&ds, 32, 3, 4).unwrap().collect();
        let b: Vec<_> = batch_iter(&ds, 32, 3, 4).unwrap().collect();
        let c: Vec<_> = batch_iter(&ds, 32, 3, 5).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn covers_all_but_remainder() {
        let ds = toy(40, 5);
        let batches: Vec<_> = batch_iter(&ds, 32, 9, 1).unwrap().collect();
        let seen: HashSet<usize> = batches.iter().flat_map(|b| b.captions.iter().copied()).collect();
        let total: usize = batches.iter().map(Batch::len).sum();
        assert_eq!(seen.len(), total, "a caption was used twice");
        assert_eq!(total, 200 / 32 * 32);
        for b in &batches {
            for (&c, &a) in b.captions.iter().zip(&b.audio) {
                assert_eq!(ds.pairing()[c], a);
            }
        }
    }

    #[test]
    fn small_batch_is_config_error() {
        let ds = toy(4, 2);
        assert!(matches!(batch_iter(&ds, 1, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn few_audio_items_repeat_within_batch() {
        let ds = toy(3, 5);
        let batches: Vec<_> = batch_iter(&ds, 4, 0, 0).unwrap().collect();
        assert_eq!(batches.len(), 3);
    }
}
