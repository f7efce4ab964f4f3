use serde::{Deserialize, Serialize};

use super::detection::Detection;
use crate::error::{Error, Result};

/// Weights of the matching cost `λ_cls·(1 − p_gt_class) + λ_L2·‖Δcenter‖`,
/// with the center distance in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub cls: f64,
    pub l2: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { cls: 1.0, l2: 5.0 }
    }
}

/// Minimum-cost one-to-one assignment on a dense `rows × cols` matrix.
///
/// Returns, for each row, its column, or `None` when there are more rows
/// than columns and the row is left out. Shortest augmenting paths with
/// dual potentials, `O(n²·m)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::arg("hungarian", "ragged cost matrix"));
    }
    if let Some((i, j)) = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).find(|&(i, j)| !cost[i][j].is_finite()) {
        return Err(Error::NonFinite {
            op: "hungarian",
            location: format!("cost[{i}][{j}]"),
        });
    }
    if m == 0 {
        return Ok(vec![None; n]);
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = hungarian(&t)?;
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            rows[i.expect("square or wide")] = Some(j);
        }
        return Ok(rows);
    }
    // 1-based rows and columns; column 0 is the virtual source.
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let (mut p, mut way) = (vec![0usize; m + 1], vec![0usize; m + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = Some(j - 1);
        }
    }
    Ok(rows)
}

/// Sum of `cost[i][assignment[i]]` in row order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}

/// Matched `(prediction, ground truth)` index pairs, sorted by prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl Assignment {
    /// Class target per query, `background` for unmatched queries.
    pub fn class_targets(&self, gt: &[Detection], background: usize) -> Vec<usize> {
        let mut t = vec![background; self.num_queries];
        for &(q, g) in &self.pairs {
            t[q] = gt[g].class;
        }
        t
    }
}

/// DETR-style set matching of ground truth to predictions.
///
/// `probs [Q][K+1]` are class probabilities and `centers [Q]` predicted
/// normalized centers over `[-range, range]²`. Costs are built
/// gt-by-prediction.
pub fn match_predictions(
    probs: &[Vec<f64>],
    centers: &[[f64; 2]],
    gt: &[Detection],
    range: f64,
    weights: MatchWeights,
) -> Result<Assignment> {
    let q = probs.len();
    if centers.len() != q {
        return Err(Error::dim("match_predictions", &[q], &[centers.len()]));
    }
    let cost: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| {
            let code = g.encode(range);
            (0..q)
                .map(|k| {
                    let d = 2.0 * range * (centers[k][0] - code[0]).hypot(centers[k][1] - code[1]);
                    weights.cls * (1.0 - probs[k][g.class]) + weights.l2 * d
                })
                .collect()
        })
        .collect();
    let rows = hungarian(&cost)?;
    let mut pairs: Vec<(usize, usize)> = rows.iter().enumerate().filter_map(|(g, p)| p.map(|p| (p, g))).collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs, num_queries: q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over injective maps from the smaller side.
    pub(crate) fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let (n, m) = (cost.len(), cost[0].len());
        if n <= m {
            (0..m)
                .permutations(n)
                .map(|cols| (0..n).map(|i| cost[i][cols[i]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        } else {
            (0..n)
                .permutations(m)
                .map(|rows| {
                    let mut a = vec![None; n];
                    for (j, &i) in rows.iter().enumerate() {
                        a[i] = Some(j);
                    }
                    assignment_cost(cost, &a)
                })
                .fold(f64::INFINITY, f64::min)
        }
    }

    #[test]
    fn zero_diagonal_permutation() {
        let perm = [2, 0, 3, 1];
        let cost: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if perm[i] == j { 0.0 } else { 1.0 }).collect()).collect();
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, perm.map(Some).to_vec());
        assert_eq!(assignment_cost(&cost, &a), 0.0);
    }

    #[test]
    fn two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, vec![Some(0), Some(1)]);
        assert_eq!(assignment_cost(&cost, &a), 2.0);
    }

    #[test]
    fn matches_brute_force_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cost: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let a = hungarian(&cost).unwrap();
        assert_eq!(assignment_cost(&cost, &a), brute_force(&cost));
    }

    #[test]
    fn rectangular_and_degenerate() {
        let wide = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian(&wide).unwrap(), vec![Some(1)]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian(&tall).unwrap(), vec![None, Some(0), None]);
        assert!(hungarian(&[]).unwrap().is_empty());
        assert_eq!(hungarian(&[vec![], vec![]]).unwrap(), vec![None, None]);
        assert!(matches!(hungarian(&[vec![f64::NAN]]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn detection_matching_prefers_near_confident_queries() {
        let gt = [Detection {
            cx: 10.0,
            cy: -10.0,
            l: 1.0,
            w: 1.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
            class: 1,
            score: 1.0,
        }];
        let c = gt[0].encode(50.0);
        let probs = vec![vec![0.1, 0.8, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]];
        let centers = [[0.5, 0.5], [c[0], c[1]], [c[0], c[1]]];
        let a = match_predictions(&probs, &centers, &gt, 50.0, MatchWeights::default()).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.class_targets(&gt, 2), vec![2, 1, 2]);
    }
}
