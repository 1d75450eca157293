use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A group of sequences padded to the longest one.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the source collection.
    pub items: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Padded length.
    pub max_len: usize,
    /// `mask[b][t]` is true for real positions.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_lengths(items: Vec<usize>, lengths: Vec<usize>) -> Self {
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let mask = lengths
            .iter()
            .map(|&l| (0..max_len).map(|t| t < l).collect())
            .collect();
        Batch {
            items,
            lengths,
            max_len,
            mask,
        }
    }

    pub fn size(&self) -> usize {
        self.items.len()
    }

    /// Time-major mask: entry `t·B + b`.
    pub fn time_major_mask(&self) -> Vec<bool> {
        let b = self.size();
        let mut out = vec![false; self.max_len * b];
        for (i, m) in self.mask.iter().enumerate() {
            for (t, &on) in m.iter().enumerate() {
                out[t * b + i] = on;
            }
        }
        out
    }
}

/// Splits `lengths.len()` sequences into batches of at most `batch_size`.
/// With a seed the order is a seeded shuffle, otherwise the input order.
pub fn batch_iter(lengths: &[usize], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_lengths(chunk.to_vec(), chunk.iter().map(|&i| lengths[i]).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_longest() {
        let b = batch_iter(&[3, 5], 2, None);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].max_len, 5);
        assert_eq!(b[0].mask[0], vec![true, true, true, false, false]);
        assert_eq!(b[0].mask[1], vec![true; 5]);
    }

    #[test]
    fn batch_of_one_never_pads() {
        for b in batch_iter(&[3, 5, 1, 7], 1, Some(3)) {
            assert!(b.mask[0].iter().all(|m| *m));
        }
    }

    #[test]
    fn shuffle_is_deterministic_and_complete() {
        let lens: Vec<usize> = (1..=23).collect();
        let a = batch_iter(&lens, 4, Some(9));
        assert_eq!(a, batch_iter(&lens, 4, Some(9)));
        let mut seen: Vec<usize> = a.iter().flat_map(|b| b.items.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        for b in &a {
            for (m, l) in b.mask.iter().zip(&b.lengths) {
                assert_eq!(m.iter().filter(|x| **x).count(), *l);
            }
        }
    }
}
