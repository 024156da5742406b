//! Cross-validation folds and pair-level splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// `k` folds stratified on `labels`. Fold sizes differ by at most one, and each
/// class count per fold is the floor or ceiling of its proportional share, so
/// every fold's class proportions lie within `1/|fold|` of the global ones.
pub fn stratified_kfold<L: Ord + Copy>(labels: &[L], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut classes: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    if let Some(small) = classes.values().find(|c| c.len() < k) {
        return Err(Error::Stratification(format!(
            "a class has {} members, fewer than the {k} folds",
            small.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    let sizes: Vec<usize> = (0..k).map(|f| n / k + usize::from(f < n % k)).collect();
    let counts: Vec<usize> = classes.values().map(Vec::len).collect();
    let table = controlled_rounding(&counts, &sizes, &mut rng);
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, members) in classes.values_mut().enumerate() {
        members.shuffle(&mut rng);
        let mut it = members.iter();
        for (f, fold) in held.iter_mut().enumerate() {
            fold.extend(it.by_ref().take(table[c][f]));
        }
    }
    Ok(held
        .into_iter()
        .map(|mut validation| {
            validation.sort_unstable();
            let mut in_fold = vec![false; n];
            for &i in &validation {
                in_fold[i] = true;
            }
            let train = (0..n).filter(|&i| !in_fold[i]).collect();
            Fold { train, validation }
        })
        .collect())
}

/// Integer table with row sums `counts`, column sums `sizes` and every cell the
/// floor or ceiling of `counts[c] * sizes[f] / n`. The cells rounded up are a
/// degree-constrained bipartite subgraph, found by augmenting paths.
fn controlled_rounding(counts: &[usize], sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n: usize = counts.iter().sum();
    let mut table: Vec<Vec<usize>> = counts.iter().map(|&c| sizes.iter().map(|&s| c * s / n).collect()).collect();
    let fractional = |c: usize, f: usize| counts[c] * sizes[f] % n != 0;
    let mut need_row: Vec<usize> = counts.iter().zip(&table).map(|(&c, row)| c - row.iter().sum::<usize>()).collect();
    let mut need_col: Vec<usize> = (0..sizes.len())
        .map(|f| sizes[f] - table.iter().map(|row| row[f]).sum::<usize>())
        .collect();
    let mut up = vec![vec![false; sizes.len()]; counts.len()];
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // one unit of flow per augmenting path: class -> fold (unused cell) -> class (used cell) -> ...
    fn augment(
        c: usize,
        up: &mut [Vec<bool>],
        need_col: &mut [usize],
        seen: &mut [bool],
        order: &[usize],
        fractional: &dyn Fn(usize, usize) -> bool,
    ) -> bool {
        for &f in order {
            if up[c][f] || !fractional(c, f) || seen[f] {
                continue;
            }
            seen[f] = true;
            if need_col[f] > 0 {
                need_col[f] -= 1;
                up[c][f] = true;
                return true;
            }
            for c2 in 0..up.len() {
                if up[c2][f] {
                    up[c2][f] = false;
                    if augment(c2, up, need_col, seen, order, fractional) {
                        up[c][f] = true;
                        return true;
                    }
                    up[c2][f] = true;
                }
            }
        }
        false
    }
    for c in 0..counts.len() {
        while need_row[c] > 0 {
            order.shuffle(rng);
            let mut seen = vec![false; sizes.len()];
            let ok = augment(c, &mut up, &mut need_col, &mut seen, &order, &fractional);
            assert!(ok, "controlled rounding always exists for two-way tables");
            need_row[c] -= 1;
        }
    }
    for (row, ups) in table.iter_mut().zip(&up) {
        for (cell, &u) in row.iter_mut().zip(ups) {
            *cell += usize::from(u);
        }
    }
    table
}

/// Two-way split of (student, question) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSplit {
    /// Indices into the input pairs.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Students with no pair on one of the two sides.
    pub absent_students: Vec<usize>,
}

/// Greedy iterative stratification where every pair carries two labels, its
/// student and its question. Returns the subset of each pair.
fn iterative_assign(pairs: &[(usize, usize)], ratios: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = ratios.len();
    let n_students = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    let n_labels = n_students + pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let labels_of = |&(s, q): &(usize, usize)| [s, n_students + q];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, p) in pairs.iter().enumerate() {
        for l in labels_of(p) {
            members[l].push(i);
        }
    }
    let mut desired_subset: Vec<f64> = ratios.iter().map(|r| r * pairs.len() as f64).collect();
    let mut desired: Vec<Vec<f64>> = members
        .iter()
        .map(|e| ratios.iter().map(|r| r * e.len() as f64).collect())
        .collect();
    let mut remaining: Vec<usize> = members.iter().map(Vec::len).collect();
    let tie_key: Vec<u64> = (0..n_labels).map(|_| rng.random()).collect();
    let mut assigned = vec![usize::MAX; pairs.len()];
    loop {
        let Some(l) = (0..n_labels)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| (remaining[l], tie_key[l]))
        else {
            break;
        };
        let mut todo: Vec<usize> = members[l].iter().copied().filter(|&i| assigned[i] == usize::MAX).collect();
        todo.shuffle(rng);
        for i in todo {
            let best_label = desired[l].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = (0..m).filter(|&j| desired[l][j] == best_label).collect();
            let best_subset = tied.iter().map(|&j| desired_subset[j]).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = tied.into_iter().filter(|&j| desired_subset[j] == best_subset).collect();
            let j = tied[rng.random_range(0..tied.len())];
            assigned[i] = j;
            desired_subset[j] -= 1.0;
            for lab in labels_of(&pairs[i]) {
                desired[lab][j] -= 1.0;
                remaining[lab] -= 1;
            }
        }
    }
    repair_question_coverage(pairs, &mut assigned, m);
    assigned
}

/// Move pairs so every question with at least `m` pairs appears in every subset.
/// The moved pair comes from the subset holding most of that question, and
/// belongs to the student with most pairs there.
fn repair_question_coverage(pairs: &[(usize, usize)], assigned: &mut [usize], m: usize) {
    let n_questions = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    for q in 0..n_questions {
        let of_q: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].1 == q).collect();
        if of_q.len() < m {
            continue;
        }
        for target in 0..m {
            let count = |assigned: &[usize], j: usize| of_q.iter().filter(|&&i| assigned[i] == j).count();
            if count(assigned, target) > 0 {
                continue;
            }
            let source = (0..m).max_by_key(|&j| (count(assigned, j), std::cmp::Reverse(j))).expect("m >= 1");
            let load = |s: usize, assigned: &[usize]| {
                pairs.iter().zip(assigned.iter()).filter(|(p, &a)| p.0 == s && a == source).count()
            };
            let pick = of_q
                .iter()
                .copied()
                .filter(|&i| assigned[i] == source)
                .max_by_key(|&i| (load(pairs[i].0, assigned), std::cmp::Reverse(i)))
                .expect("source holds the question");
            assigned[pick] = target;
        }
    }
}

/// Iterative multi-label stratified train/test split of (student, question) pairs.
pub fn multilabel_stratified_split(pairs: &[(usize, usize)], test_fraction: f64, seed: u64) -> Result<PairSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assigned = iterative_assign(pairs, &[1.0 - test_fraction, test_fraction], &mut rng);
    let train: Vec<usize> = (0..pairs.len()).filter(|&i| assigned[i] == 0).collect();
    let test: Vec<usize> = (0..pairs.len()).filter(|&i| assigned[i] == 1).collect();
    let absent_students = absent(pairs, &[&train, &test]);
    if !absent_students.is_empty() {
        log::warn!("{} students are missing from one side of the split", absent_students.len());
    }
    Ok(PairSplit {
        train,
        test,
        absent_students,
    })
}

/// `k` disjoint test folds of pairs by the same iterative stratification.
pub fn multilabel_kfold(pairs: &[(usize, usize)], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assigned = iterative_assign(pairs, &vec![1.0 / k as f64; k], &mut rng);
    Ok((0..k)
        .map(|j| (0..pairs.len()).filter(|&i| assigned[i] == j).collect())
        .collect())
}

fn absent(pairs: &[(usize, usize)], sides: &[&Vec<usize>]) -> Vec<usize> {
    let n_students = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for s in 0..n_students {
        if !pairs.iter().any(|p| p.0 == s) {
            continue;
        }
        if sides.iter().any(|side| !side.iter().any(|&i| pairs[i].0 == s)) {
            out.push(s);
        }
    }
    out
}
