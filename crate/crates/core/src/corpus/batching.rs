use rand::seq::SliceRandom;

use super::io::Manifest;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<String>>,
    pub frame_budget: usize,
}

/// Groups item indices into batches whose total frames stay within
/// `frame_budget`; an item longer than the budget becomes a singleton batch.
///
/// With `shuffle`, items are sorted by duration (equal durations in a seeded
/// random order), cut into batches, and the batch order is shuffled. Without
/// it the input order is kept.
pub fn plan_batch_indices(durations: &[usize], frame_budget: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if frame_budget == 0 {
        return Err(Error::invalid("frame budget must be >= 1"));
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    let mut rng = rng_from(seed, &[0xba7c4]);
    if shuffle {
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| durations[i]);
    }
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut total = 0usize;
    for i in order {
        let d = durations[i];
        if !cur.is_empty() && total + d > frame_budget {
            batches.push(std::mem::take(&mut cur));
            total = 0;
        }
        cur.push(i);
        total += d;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    if shuffle {
        batches.shuffle(&mut rng);
    }
    Ok(batches)
}

pub fn plan_batches(manifest: &Manifest, frame_budget: usize, seed: u64, shuffle: bool) -> Result<BatchPlan> {
    let durations: Vec<usize> = manifest.entries.iter().map(|e| e.duration_frames).collect();
    let batches = plan_batch_indices(&durations, frame_budget, seed, shuffle)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| manifest.entries[i].id.clone()).collect())
        .collect();
    Ok(BatchPlan { batches, frame_budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let sizes = |b: &Vec<Vec<usize>>| {
            let mut s: Vec<usize> = b.iter().map(Vec::len).collect();
            s.sort();
            s
        };
        assert_eq!(sizes(&plan_batch_indices(&[10, 10, 10], 20, 0, true).unwrap()), vec![1, 2]);
        assert_eq!(plan_batch_indices(&[50], 20, 0, true).unwrap(), vec![vec![0]]);
        assert_eq!(plan_batch_indices(&[5, 9, 3, 7], 1_000_000_000, 0, true).unwrap().len(), 1);
        assert!(plan_batch_indices(&[1], 0, 0, false).is_err());
        assert_eq!(plan_batch_indices(&[4, 4, 4], 8, 0, false).unwrap(), vec![vec![0, 1], vec![2]]);
    }

    proptest! {
        #[test]
        fn partitions_within_budget(durs in proptest::collection::vec(1usize..60, 0..80), budget in 1usize..120, seed in any::<u64>(), shuffle in any::<bool>()) {
            let plan = plan_batch_indices(&durs, budget, seed, shuffle).unwrap();
            let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..durs.len()).collect::<Vec<_>>());
            for b in &plan {
                let total: usize = b.iter().map(|&i| durs[i]).sum();
                prop_assert!(total <= budget || b.len() == 1);
            }
            prop_assert_eq!(plan_batch_indices(&durs, budget, seed, shuffle).unwrap(), plan);
        }
    }
}
