//! Batch selection over the unlabeled pool.

use std::collections::BTreeMap;

use crate::arch::Model;
use crate::imaging::Sample;

use super::{predict_sample, PipelineError, SelectionPolicy, SelectionStrategy};

/// Picks up to `policy.batch_size` pool indices to annotate next. A pool no
/// larger than the batch is taken whole. `EntropyTopk` ranks by the model's
/// mean prediction entropy and therefore requires one; `TemporalStratified`
/// works without.
pub fn select_batch(
    pool: &[Sample],
    model: Option<&mut Model<f32>>,
    policy: &SelectionPolicy,
) -> Result<Vec<usize>, PipelineError> {
    policy.validate()?;
    if pool.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    if pool.len() <= policy.batch_size {
        return Ok((0..pool.len()).collect());
    }
    match policy.strategy {
        SelectionStrategy::TemporalStratified => {
            Ok(temporal_stratified(pool, policy.batch_size))
        }
        SelectionStrategy::EntropyTopk => {
            let model = model.ok_or_else(|| {
                PipelineError::InvalidConfig("entropy_topk selection needs a model".into())
            })?;
            entropy_topk(pool, model, policy.batch_size)
        }
    }
}

/// Splits the batch across runs in proportion to run size (largest-remainder
/// rounding, remainder ties to the lexicographically smaller run id), then
/// takes evenly strided frames from each run's timeline.
fn temporal_stratified(pool: &[Sample], batch: usize) -> Vec<usize> {
    let mut runs: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        runs.entry(&s.run_id).or_default().push(i);
    }
    for members in runs.values_mut() {
        members.sort_by(|&a, &b| {
            (pool[a].timestamp_min, &pool[a].id).cmp(&(pool[b].timestamp_min, &pool[b].id))
        });
    }

    let n = pool.len();
    // quota_r = batch * n_r / n, floored; leftovers go to the largest
    // fractional remainders. floor(batch * n_r / n) < n_r whenever
    // batch < n, so even a +1 never overdraws a run.
    let mut quotas: Vec<(&str, usize, usize)> = runs
        .iter()
        .map(|(run, members)| {
            let scaled = batch * members.len();
            (*run, scaled / n, scaled % n)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|&(_, q, _)| q).sum();
    quotas.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(b.0)));
    for slot in quotas.iter_mut().take(batch - assigned) {
        slot.1 += 1;
    }
    quotas.sort_by(|a, b| a.0.cmp(b.0));

    let mut picked = Vec::with_capacity(batch);
    for (run, quota, _) in quotas {
        let members = &runs[run];
        for j in 0..quota {
            picked.push(members[j * members.len() / quota]);
        }
    }
    picked
}

/// Ranks the pool by mean per-pixel prediction entropy, highest first, ties
/// to the lexicographically smaller sample id.
fn entropy_topk(
    pool: &[Sample],
    model: &mut Model<f32>,
    batch: usize,
) -> Result<Vec<usize>, PipelineError> {
    let mut scored = Vec::with_capacity(pool.len());
    for (i, sample) in pool.iter().enumerate() {
        let prediction = predict_sample(model, sample)?;
        scored.push((i, prediction.mean_entropy));
    }
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| pool[a.0].id.cmp(&pool[b.0].id))
    });
    scored.truncate(batch);
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;
    use crate::imaging::{ImageData, ImageU8, MaskU8, SplitTag};

    fn sample(id: &str, run: &str, timestamp: u32) -> Sample {
        let image = ImageU8::new(32, 32, 1, vec![128; 32 * 32]).unwrap();
        Sample {
            id: id.into(),
            run_id: run.into(),
            timestamp_min: timestamp,
            image: ImageData::U8(image),
            mask: Some(MaskU8::new(32, 32, vec![0; 32 * 32]).unwrap()),
            split: SplitTag::Train,
            provenance: None,
        }
    }

    fn policy(strategy: SelectionStrategy, batch_size: usize) -> SelectionPolicy {
        SelectionPolicy { strategy, batch_size }
    }

    #[test]
    fn small_pools_are_taken_whole() {
        let pool = vec![sample("a", "r0", 0), sample("b", "r0", 5)];
        for strategy in [SelectionStrategy::TemporalStratified, SelectionStrategy::EntropyTopk] {
            let picked = select_batch(&pool, None, &policy(strategy, 2)).unwrap();
            assert_eq!(picked, vec![0, 1]);
        }
        assert!(matches!(
            select_batch(&[], None, &policy(SelectionStrategy::TemporalStratified, 2)),
            Err(PipelineError::EmptyPool)
        ));
    }

    #[test]
    fn stratified_quotas_follow_run_sizes() {
        // Runs of size 5, 3, 2 with batch 5: floors are 2, 1, 1 and the
        // leftover slot goes to run a (remainder tie with b, id order).
        let mut pool = Vec::new();
        for t in 0..5 {
            pool.push(sample(&format!("a{t}"), "ra", t * 10));
        }
        for t in 0..3 {
            pool.push(sample(&format!("b{t}"), "rb", t * 10));
        }
        for t in 0..2 {
            pool.push(sample(&format!("c{t}"), "rc", t * 10));
        }
        let picked =
            select_batch(&pool, None, &policy(SelectionStrategy::TemporalStratified, 5)).unwrap();
        let ids: Vec<&str> = picked.iter().map(|&i| pool[i].id.as_str()).collect();
        // Run a, quota 3 of 5: positions 0, 1, 3. Runs b and c: position 0.
        assert_eq!(ids, vec!["a0", "a1", "a3", "b0", "c0"]);
    }

    #[test]
    fn stratified_is_order_invariant() {
        let mut pool = Vec::new();
        for t in 0..6 {
            pool.push(sample(&format!("a{t}"), "ra", t));
        }
        for t in 0..6 {
            pool.push(sample(&format!("b{t}"), "rb", t));
        }
        let pol = policy(SelectionStrategy::TemporalStratified, 4);
        let baseline: Vec<String> = select_batch(&pool, None, &pol)
            .unwrap()
            .iter()
            .map(|&i| pool[i].id.clone())
            .collect();
        pool.reverse();
        let reversed: Vec<String> = select_batch(&pool, None, &pol)
            .unwrap()
            .iter()
            .map(|&i| pool[i].id.clone())
            .collect();
        assert_eq!(baseline, reversed);
    }

    #[test]
    fn entropy_ties_break_toward_smaller_ids() {
        // A freshly built model predicts the uniform distribution (its
        // score heads start at zero), so every sample ties at ln 4 and the
        // ranking degenerates to id order.
        let config = ArchConfig { input_resolution: 32, base_width: 4, ..ArchConfig::default() };
        let mut model = Model::<f32>::build(&config, 0).unwrap();
        let pool = vec![
            sample("c", "r0", 2),
            sample("a", "r0", 0),
            sample("b", "r0", 1),
        ];
        let picked = select_batch(
            &pool,
            Some(&mut model),
            &policy(SelectionStrategy::EntropyTopk, 2),
        )
        .unwrap();
        let ids: Vec<&str> = picked.iter().map(|&i| pool[i].id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn entropy_without_model_is_a_config_error() {
        let pool = vec![sample("a", "r0", 0), sample("b", "r0", 1), sample("c", "r0", 2)];
        let err = select_batch(&pool, None, &policy(SelectionStrategy::EntropyTopk, 2));
        assert!(matches!(err, Err(PipelineError::InvalidConfig(_))));
    }
}
