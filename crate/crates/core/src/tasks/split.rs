use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of all combinations of categorical latent components into a
/// training pool and a held-out pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSplit {
    pub cards: Vec<usize>,
    pub train: Vec<Vec<usize>>,
    pub heldout: Vec<Vec<usize>>,
}

pub fn combo_count(cards: &[usize]) -> usize {
    cards.iter().product()
}

/// Mixed-radix decoding, first component most significant.
pub fn decode_combo(cards: &[usize], mut index: usize) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for i in (0..cards.len()).rev() {
        out[i] = index % cards[i];
        index /= cards[i];
    }
    out
}

pub fn encode_combo(cards: &[usize], combo: &[usize]) -> usize {
    combo.iter().zip(cards).fold(0, |acc, (&c, &k)| acc * k + c)
}

/// Keeps `round(fraction · total)` combinations for training such that every
/// value of every component occurs at least once in the training pool.
pub fn latent_split(cards: &[usize], fraction: f64, rng: &mut impl Rng) -> Result<LatentSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("latent split fraction {fraction} outside (0, 1]")));
    }
    if cards.is_empty() || cards.contains(&0) {
        return Err(Error::Config(format!("latent split over invalid cardinalities {cards:?}")));
    }
    let total = combo_count(cards);
    let n_train = (fraction * total as f64).round() as usize;
    let widest = *cards.iter().max().unwrap();
    if n_train < widest {
        return Err(Error::Config(format!(
            "fraction {fraction} keeps {n_train} of {total} combinations, fewer than the {widest} needed to cover every component value"
        )));
    }
    let perms: Vec<Vec<usize>> = cards
        .iter()
        .map(|&k| {
            let mut p: Vec<usize> = (0..k).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let mut chosen = vec![false; total];
    let mut train_idx = Vec::with_capacity(n_train);
    for i in 0..widest {
        let combo: Vec<usize> = perms.iter().zip(cards).map(|(p, &k)| p[i % k]).collect();
        let idx = encode_combo(cards, &combo);
        if !chosen[idx] {
            chosen[idx] = true;
            train_idx.push(idx);
        }
    }
    let mut rest: Vec<usize> = (0..total).filter(|&i| !chosen[i]).collect();
    rest.shuffle(rng);
    let fill = n_train - train_idx.len();
    train_idx.extend_from_slice(&rest[..fill]);
    let mut heldout_idx = rest[fill..].to_vec();
    train_idx.sort_unstable();
    heldout_idx.sort_unstable();
    Ok(LatentSplit {
        cards: cards.to_vec(),
        train: train_idx.into_iter().map(|i| decode_combo(cards, i)).collect(),
        heldout: heldout_idx.into_iter().map(|i| decode_combo(cards, i)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn moe_half_split() {
        let s = latent_split(&[5; 5], 0.5, &mut rng::stream(0, &[])).unwrap();
        assert!(s.train.len() == 1562 || s.train.len() == 1563);
        assert_eq!(s.train.len() + s.heldout.len(), 3125);
    }

    #[test]
    fn full_fraction_leaves_nothing_heldout() {
        let s = latent_split(&[4; 4], 1.0, &mut rng::stream(0, &[])).unwrap();
        assert!(s.heldout.is_empty());
    }

    #[test]
    fn too_small_fraction_fails() {
        assert!(latent_split(&[5; 5], 0.001, &mut rng::stream(0, &[])).is_err());
        assert!(latent_split(&[5; 5], 0.0, &mut rng::stream(0, &[])).is_err());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_covers_marginals(
            cards in proptest::collection::vec(1usize..6, 1..5),
            fraction in 0.05f64..1.0,
            seed in 0u64..1000,
        ) {
            let total = combo_count(&cards);
            let widest = *cards.iter().max().unwrap();
            let keep = (fraction * total as f64).round() as usize;
            let res = latent_split(&cards, fraction, &mut rng::stream(seed, &[]));
            if keep < widest {
                prop_assert!(res.is_err());
            } else {
                let s = res.unwrap();
                let train: HashSet<_> = s.train.iter().cloned().collect();
                prop_assert_eq!(train.len(), keep);
                prop_assert!(s.heldout.iter().all(|c| !train.contains(c)));
                prop_assert_eq!(s.train.len() + s.heldout.len(), total);
                for (i, &k) in cards.iter().enumerate() {
                    let seen: HashSet<usize> = s.train.iter().map(|c| c[i]).collect();
                    prop_assert_eq!(seen.len(), k);
                }
            }
        }
    }
}
