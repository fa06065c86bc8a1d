//! Runtime-aware workload balancing within one batch.
//!
//! Runtimes come from a seqlen-to-runtime lookup table measured once at
//! startup. Assignment starts from longest-processing-time greedy placement
//! and is then refined: small instances are solved exactly by bounded
//! branch-and-bound, larger ones by move/swap descent, so the result is
//! never worse than plain LPT.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct WorkItem {
    pub id: u64,
    pub seq_len: usize,
    pub runtime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Item indices per rank.
    pub per_rank: Vec<Vec<usize>>,
    pub makespan: f64,
}

impl Assignment {
    fn from_ranks(items: &[WorkItem], per_rank: Vec<Vec<usize>>) -> Self {
        let makespan = per_rank
            .iter()
            .map(|rank| rank.iter().map(|&i| items[i].runtime).sum::<f64>())
            .fold(0.0, f64::max);
        Assignment { per_rank, makespan }
    }
}

/// Seqlen-to-runtime lookup with bucketed interpolation: queries snap to the
/// nearest measured bucket.
#[derive(Debug, Clone)]
pub struct RuntimeLut {
    buckets: Vec<(usize, f64)>,
}

impl RuntimeLut {
    pub fn from_measurements(mut buckets: Vec<(usize, f64)>) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::invalid("empty runtime lookup table"));
        }
        buckets.sort_by_key(|(len, _)| *len);
        for (_, rt) in &buckets {
            if *rt <= 0.0 {
                return Err(Error::invalid("runtime estimates must be positive"));
            }
        }
        Ok(RuntimeLut { buckets })
    }

    /// Measure a lookup table by timing `f` once per bucketed length.
    pub fn measure<F: FnMut(usize) -> Result<()>>(lens: &[usize], mut f: F) -> Result<Self> {
        let mut buckets = Vec::new();
        for &len in lens {
            let t0 = std::time::Instant::now();
            f(len)?;
            buckets.push((len, t0.elapsed().as_secs_f64().max(1e-9)));
        }
        Self::from_measurements(buckets)
    }

    pub fn estimate(&self, seq_len: usize) -> f64 {
        let mut best = self.buckets[0];
        for &(len, rt) in &self.buckets {
            if len.abs_diff(seq_len) < best.0.abs_diff(seq_len) {
                best = (len, rt);
            }
        }
        best.1
    }
}

fn lpt(items: &[WorkItem], ranks: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .runtime
            .partial_cmp(&items[a].runtime)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut per_rank: Vec<Vec<usize>> = vec![Vec::new(); ranks];
    let mut loads = vec![0.0f64; ranks];
    for idx in order {
        let target = loads
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(r, _)| r)
            .unwrap();
        per_rank[target].push(idx);
        loads[target] += items[idx].runtime;
    }
    per_rank
}

/// Bounded branch-and-bound over assignments of descending items, seeded
/// with the incumbent makespan. Returns the optimal per-rank lists if the
/// node budget suffices, None otherwise.
fn exact_refine(
    items: &[WorkItem],
    ranks: usize,
    incumbent: f64,
    node_budget: &mut usize,
) -> Option<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .runtime
            .partial_cmp(&items[a].runtime)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut best = incumbent;
    let mut best_assign: Option<Vec<Vec<usize>>> = None;
    let mut loads = vec![0.0f64; ranks];
    let mut current: Vec<Vec<usize>> = vec![Vec::new(); ranks];

    fn dfs(
        pos: usize,
        order: &[usize],
        items: &[WorkItem],
        loads: &mut Vec<f64>,
        current: &mut Vec<Vec<usize>>,
        best: &mut f64,
        best_assign: &mut Option<Vec<Vec<usize>>>,
        node_budget: &mut usize,
    ) {
        if *node_budget == 0 {
            return;
        }
        *node_budget -= 1;
        if pos == order.len() {
            let makespan = loads.iter().cloned().fold(0.0, f64::max);
            if makespan < *best - 1e-12 {
                *best = makespan;
                *best_assign = Some(current.clone());
            }
            return;
        }
        let item = order[pos];
        let rt = items[item].runtime;
        // symmetry break: skip ranks with identical load to an earlier one
        let mut seen: Vec<f64> = Vec::new();
        for r in 0..loads.len() {
            if seen.iter().any(|&l| (l - loads[r]).abs() < 1e-12) {
                continue;
            }
            seen.push(loads[r]);
            if loads[r] + rt >= *best - 1e-12 {
                continue;
            }
            loads[r] += rt;
            current[r].push(item);
            dfs(
                pos + 1,
                order,
                items,
                loads,
                current,
                best,
                best_assign,
                node_budget,
            );
            current[r].pop();
            loads[r] -= rt;
        }
    }

    dfs(
        0,
        &order,
        items,
        &mut loads,
        &mut current,
        &mut best,
        &mut best_assign,
        node_budget,
    );
    best_assign
}

/// Move/swap descent from an assignment; only ever improves the makespan.
fn descent(items: &[WorkItem], per_rank: &mut Vec<Vec<usize>>) {
    let ranks = per_rank.len();
    loop {
        let loads: Vec<f64> = per_rank
            .iter()
            .map(|r| r.iter().map(|&i| items[i].runtime).sum())
            .collect();
        let max_r = loads
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(r, _)| r)
            .unwrap();
        let old_makespan = loads[max_r];
        let mut improved = false;
        // single move: item off the busiest rank
        'outer: for pos in 0..per_rank[max_r].len() {
            let item = per_rank[max_r][pos];
            let rt = items[item].runtime;
            for r in 0..ranks {
                if r == max_r {
                    continue;
                }
                let new_max = (loads[max_r] - rt).max(loads[r] + rt);
                if new_max < old_makespan - 1e-12 {
                    per_rank[max_r].remove(pos);
                    per_rank[r].push(item);
                    improved = true;
                    break 'outer;
                }
            }
        }
        if improved {
            continue;
        }
        // pairwise swap with the busiest rank
        'swap: for pos_a in 0..per_rank[max_r].len() {
            let a = per_rank[max_r][pos_a];
            for r in 0..ranks {
                if r == max_r {
                    continue;
                }
                for pos_b in 0..per_rank[r].len() {
                    let b = per_rank[r][pos_b];
                    let delta = items[a].runtime - items[b].runtime;
                    if delta <= 1e-12 {
                        continue;
                    }
                    let new_max = (loads[max_r] - delta).max(loads[r] + delta);
                    if new_max < old_makespan - 1e-12 {
                        per_rank[max_r][pos_a] = b;
                        per_rank[r][pos_b] = a;
                        improved = true;
                        break 'swap;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Balance one batch across ranks. The multiset of items is preserved; the
/// result's makespan is never above plain LPT's.
pub fn balance_batch(items: &[WorkItem], ranks: usize) -> Result<Assignment> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if ranks == 0 {
        return Err(Error::invalid("ranks must be >= 1"));
    }
    for item in items {
        if item.runtime <= 0.0 {
            return Err(Error::invalid(format!(
                "item {} has non-positive runtime {}",
                item.id, item.runtime
            )));
        }
    }
    let mut per_rank = lpt(items, ranks);
    let greedy = Assignment::from_ranks(items, per_rank.clone());
    if ranks > 1 {
        if items.len() <= 14 && ranks <= 4 {
            let mut budget = 2_000_000usize;
            if let Some(exact) = exact_refine(items, ranks, greedy.makespan, &mut budget) {
                per_rank = exact;
            }
        } else {
            descent(items, &mut per_rank);
        }
    }
    let refined = Assignment::from_ranks(items, per_rank);
    Ok(if refined.makespan <= greedy.makespan {
        refined
    } else {
        greedy
    })
}

/// Arrival-order round robin, the comparison baseline.
pub fn round_robin(items: &[WorkItem], ranks: usize) -> Assignment {
    let mut per_rank: Vec<Vec<usize>> = vec![Vec::new(); ranks.max(1)];
    for i in 0..items.len() {
        per_rank[i % ranks.max(1)].push(i);
    }
    Assignment::from_ranks(items, per_rank)
}

/// Exhaustive optimum for small instances (test oracle).
pub fn brute_force_makespan(items: &[WorkItem], ranks: usize) -> f64 {
    fn rec(pos: usize, items: &[WorkItem], loads: &mut Vec<f64>, best: &mut f64) {
        if pos == items.len() {
            let m = loads.iter().cloned().fold(0.0, f64::max);
            if m < *best {
                *best = m;
            }
            return;
        }
        for r in 0..loads.len() {
            loads[r] += items[pos].runtime;
            rec(pos + 1, items, loads, best);
            loads[r] -= items[pos].runtime;
        }
    }
    let mut best = f64::INFINITY;
    rec(0, items, &mut vec![0.0; ranks], &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn items_of(runtimes: &[f64]) -> Vec<WorkItem> {
        runtimes
            .iter()
            .enumerate()
            .map(|(i, &rt)| WorkItem {
                id: i as u64,
                seq_len: 16,
                runtime: rt,
            })
            .collect()
    }

    #[test]
    fn named_instance_reaches_optimum_8() {
        let items = items_of(&[5.0, 4.0, 3.0, 3.0, 1.0]);
        let a = balance_batch(&items, 2).unwrap();
        assert_eq!(a.makespan, 8.0);
        assert_eq!(brute_force_makespan(&items, 2), 8.0);
    }

    #[test]
    fn single_rank_makespan_is_sum() {
        let items = items_of(&[2.0, 5.0, 1.5]);
        let a = balance_batch(&items, 1).unwrap();
        assert_eq!(a.makespan, 8.5);
    }

    #[test]
    fn uniform_runtimes_split_evenly() {
        let items = items_of(&[2.0; 12]);
        let a = balance_batch(&items, 4).unwrap();
        assert_eq!(a.makespan, 6.0);
        for rank in &a.per_rank {
            assert_eq!(rank.len(), 3);
        }
    }

    #[test]
    fn assignment_is_a_partition() {
        let mut rng = Rng::seed_from(410);
        for _ in 0..100 {
            let n = 1 + rng.below(24);
            let runtimes: Vec<f64> = (0..n).map(|_| rng.range(0.1, 10.0)).collect();
            let items = items_of(&runtimes);
            let ranks = 1 + rng.below(4);
            let a = balance_batch(&items, ranks).unwrap();
            let mut seen: Vec<usize> = a.per_rank.iter().flatten().copied().collect();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn never_worse_than_round_robin_and_matches_optimum_small() {
        let mut rng = Rng::seed_from(411);
        for trial in 0..2000 {
            let n = 3 + rng.below(10);
            let runtimes: Vec<f64> = (0..n)
                .map(|_| (1 + rng.below(9)) as f64 + rng.range(0.0, 0.5))
                .collect();
            let items = items_of(&runtimes);
            let ranks = 2 + rng.below(2);
            let balanced = balance_batch(&items, ranks).unwrap();
            let rr = round_robin(&items, ranks);
            assert!(
                balanced.makespan <= rr.makespan + 1e-9,
                "trial {trial}: balanced {} > rr {}",
                balanced.makespan,
                rr.makespan
            );
            if n <= 10 && ranks <= 3 {
                let opt = brute_force_makespan(&items, ranks);
                assert!(
                    (balanced.makespan - opt).abs() < 1e-9,
                    "trial {trial}: got {} vs optimum {opt} on {runtimes:?} x{ranks}",
                    balanced.makespan
                );
            }
        }
    }

    #[test]
    fn lut_snaps_to_nearest_bucket() {
        let lut = RuntimeLut::from_measurements(vec![(16, 1.0), (64, 3.0), (256, 10.0)]).unwrap();
        assert_eq!(lut.estimate(20), 1.0);
        assert_eq!(lut.estimate(60), 3.0);
        assert_eq!(lut.estimate(1000), 10.0);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(balance_batch(&[], 2).is_err());
    }
}
