use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ManifestEntry;
use super::FenceLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!("invalid split fractions {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} do not sum to 1")));
        }
        Ok(())
    }

    /// Train and val sizes for `n` items: `floor(f·n)` each, test takes the rest.
    pub fn totals(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

/// Spreads `total` over classes in proportion to their sizes, by largest
/// remainder. Ties go to the class with more unassigned items, then to the
/// earlier class.
fn apportion(total: usize, pools: &[usize], n: usize) -> Vec<usize> {
    let quota: Vec<f64> = pools
        .iter()
        .map(|&p| total as f64 * p as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = quota
        .iter()
        .zip(pools)
        .map(|(q, &p)| ((q + 1e-9).floor() as usize).min(p))
        .collect();
    let mut left = total.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..pools.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - alloc[a] as f64;
        let rb = quota[b] - alloc[b] as f64;
        rb.total_cmp(&ra)
            .then((pools[b] - alloc[b]).cmp(&(pools[a] - alloc[a])))
            .then(a.cmp(&b))
    });
    while left > 0 {
        let mut progressed = false;
        for &c in &order {
            if left > 0 && alloc[c] < pools[c] {
                alloc[c] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}

/// Assigns every entry to train, val or test, stratified by fence label.
///
/// Overall sizes follow [`SplitFractions::totals`]; each class receives its
/// proportional share. Membership within a class is a seeded shuffle.
pub fn split_dataset(
    entries: &[ManifestEntry],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    fractions.validate()?;
    if entries.is_empty() {
        return Err(Error::Data("cannot split an empty manifest".into()));
    }
    let n = entries.len();
    let mut by_class: BTreeMap<FenceLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_class.entry(e.fence).or_default().push(i);
    }
    let (train_total, val_total, _) = fractions.totals(n);
    let pools: Vec<usize> = by_class.values().map(Vec::len).collect();
    let train = apportion(train_total, &pools, n);
    let rest: Vec<usize> = pools.iter().zip(&train).map(|(p, t)| p - t).collect();
    let val = apportion(val_total, &rest, rest.iter().sum::<usize>().max(1));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = entries.to_vec();
    for (k, members) in by_class.values().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for (rank, &i) in shuffled.iter().enumerate() {
            out[i].split = Some(if rank < train[k] {
                Split::Train
            } else if rank < train[k] + val[k] {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::Source;

    fn entries(single: usize, double: usize) -> Vec<ManifestEntry> {
        (0..single + double)
            .map(|i| ManifestEntry {
                id: format!("img{i:03}"),
                path: format!("images/img{i:03}.png"),
                source: Source::Drone,
                fence: if i < single { FenceLabel::Single } else { FenceLabel::Double },
                split: None,
                mask_path: None,
            })
            .collect()
    }

    fn counts(es: &[ManifestEntry]) -> [usize; 3] {
        let mut c = [0; 3];
        for e in es {
            c[e.split.unwrap() as usize] += 1;
        }
        c
    }

    #[test]
    fn ten_items_single_class() {
        let out = split_dataset(&entries(10, 0), SplitFractions::default(), 1).unwrap();
        assert_eq!(counts(&out), [8, 1, 1]);
    }

    #[test]
    fn drone_dataset_sizes() {
        let out = split_dataset(&entries(26, 26), SplitFractions::default(), 1).unwrap();
        assert_eq!(counts(&out), [41, 5, 6]);
        let out = split_dataset(&entries(40, 40), SplitFractions::default(), 1).unwrap();
        assert_eq!(counts(&out), [64, 8, 8]);
        for label in [FenceLabel::Single, FenceLabel::Double] {
            let test = out
                .iter()
                .filter(|e| e.fence == label && e.split == Some(Split::Test))
                .count();
            assert_eq!(test, 4);
        }
    }

    #[test]
    fn seeded_and_seed_sensitive() {
        let es = entries(20, 20);
        let a = split_dataset(&es, SplitFractions::default(), 5).unwrap();
        assert_eq!(a, split_dataset(&es, SplitFractions::default(), 5).unwrap());
        assert_ne!(a, split_dataset(&es, SplitFractions::default(), 6).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            split_dataset(&[], SplitFractions::default(), 0),
            Err(Error::Data(_))
        ));
        let bad = SplitFractions {
            train: 0.8,
            val: 0.3,
            test: 0.1,
        };
        assert!(matches!(split_dataset(&entries(3, 3), bad, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn splits_are_exhaustive_and_stratified(single in 0usize..60, double in 0usize..60, seed: u64) {
            prop_assume!(single + double > 0);
            let es = entries(single, double);
            let out = split_dataset(&es, SplitFractions::default(), seed).unwrap();
            prop_assert!(out.iter().all(|e| e.split.is_some()));
            let (tr, va, te) = SplitFractions::default().totals(es.len());
            prop_assert_eq!(counts(&out), [tr, va, te]);
            // Each class's train share is within one item of proportional.
            for (label, n_c) in [(FenceLabel::Single, single), (FenceLabel::Double, double)] {
                let got = out.iter().filter(|e| e.fence == label && e.split == Some(Split::Train)).count();
                let ideal = tr as f64 * n_c as f64 / es.len() as f64;
                prop_assert!((got as f64 - ideal).abs() < 1.0 + 1e-9);
            }
            for (a, b) in es.iter().zip(&out) {
                prop_assert_eq!(&a.id, &b.id);
            }
        }
    }
}
