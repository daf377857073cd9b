//! Query filtering and association: class + GIoU matching costs, optimal
//! query selection per ground-truth instance, and the student/teacher pairing
//! that goes through shared ground-truth indices.

use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::mask::{BoxCxcywh, BoxXyxy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    /// Independent per-column minimum; one query may serve several instances.
    Argmin,
    /// One-to-one assignment minimizing the total cost.
    #[default]
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QfaConfig {
    pub lambda_b: f64,
    pub mode: MatchMethod,
}

impl Default for QfaConfig {
    fn default() -> Self {
        Self {
            lambda_b: 2.0,
            mode: MatchMethod::Hungarian,
        }
    }
}

/// Cross entropy of the ground-truth class under the softmax of `logits`.
pub fn class_cost(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(OokdError::validation(
            "class",
            format!("class {class} out of range for {} logits", logits.len()),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[class]).max(0.0))
}

/// Generalized IoU of two corner-form boxes, in `(-1, 1]`.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    if !(a.x2 > a.x1 && a.y2 > a.y1) || !(b.x2 > b.x1 && b.y2 > b.y1) {
        return Err(OokdError::validation("box", "boxes must have positive width and height"));
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    Ok(inter / union - (hull - union) / hull)
}

/// `1 - GIoU` on center-form boxes.
pub fn box_cost(pred: &BoxCxcywh, gt: &BoxCxcywh) -> Result<f64> {
    Ok(1.0 - giou(&pred.to_corners(), &gt.to_corners())?)
}

const MIN_PRED_SIZE: f64 = 1e-6;

fn clamp_pred(b: &BoxCxcywh) -> BoxCxcywh {
    BoxCxcywh::new(b.cx, b.cy, b.w.max(MIN_PRED_SIZE), b.h.max(MIN_PRED_SIZE))
}

/// `N x M` matching cost, row-major (`n * m_count + m`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub lambda_b: f64,
}

impl CostMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(OokdError::Shape(format!(
                "cost data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(OokdError::validation("cost", "entries must be finite"));
        }
        Ok(Self {
            rows,
            cols,
            data,
            lambda_b: 0.0,
        })
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.data[n * self.cols + m]
    }

    pub fn total(&self, sigma: &[usize]) -> f64 {
        sigma.iter().enumerate().map(|(m, &n)| self.get(n, m)).sum()
    }
}

/// `S[n, m] = CE(logits_n, class_m) + lambda_b * (1 - GIoU(box_n, box_m))`.
///
/// `class_logits` is `N` rows of `N_c` logits; predicted box sizes are floored
/// at `1e-6` so that saturated sigmoid outputs stay valid.
pub fn cost_matrix(
    class_logits: &[Vec<f64>],
    pred_boxes: &[BoxCxcywh],
    gt_classes: &[usize],
    gt_boxes: &[BoxCxcywh],
    lambda_b: f64,
) -> Result<CostMatrix> {
    let n = class_logits.len();
    let m = gt_classes.len();
    if pred_boxes.len() != n || gt_boxes.len() != m {
        return Err(OokdError::Shape(format!(
            "{n} logits rows vs {} boxes; {m} gt classes vs {} gt boxes",
            pred_boxes.len(),
            gt_boxes.len()
        )));
    }
    if n == 0 || m == 0 {
        return Err(OokdError::Shape("cost matrix needs N >= 1 and M >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * m);
    for (logits, pb) in class_logits.iter().zip(pred_boxes) {
        let pb = clamp_pred(pb);
        for (&c, gb) in gt_classes.iter().zip(gt_boxes) {
            let mut s = class_cost(logits, c)?;
            if lambda_b != 0.0 {
                s += lambda_b * box_cost(&pb, gb)?;
            }
            data.push(s);
        }
    }
    let mut cm = CostMatrix::from_vec(n, m, data)?;
    cm.lambda_b = lambda_b;
    Ok(cm)
}

/// Video-level cost: class term on video logits plus the box cost averaged
/// over the frames where the ground-truth instance is visible.
///
/// `pred_boxes[n][t]` is query `n`'s box on frame `t`; `gt_boxes[m][t]` is `None` where invisible.
pub fn video_cost_matrix(
    class_logits: &[Vec<f64>],
    pred_boxes: &[Vec<BoxCxcywh>],
    gt_classes: &[usize],
    gt_boxes: &[Vec<Option<BoxCxcywh>>],
    lambda_b: f64,
) -> Result<CostMatrix> {
    let n = class_logits.len();
    let m = gt_classes.len();
    if pred_boxes.len() != n || gt_boxes.len() != m || n == 0 || m == 0 {
        return Err(OokdError::Shape("video cost matrix input sizes".into()));
    }
    let mut data = Vec::with_capacity(n * m);
    for (logits, pboxes) in class_logits.iter().zip(pred_boxes) {
        for (&c, gboxes) in gt_classes.iter().zip(gt_boxes) {
            let mut s = class_cost(logits, c)?;
            let mut acc = 0.0;
            let mut count = 0usize;
            for (pb, gb) in pboxes.iter().zip(gboxes) {
                if let Some(gb) = gb {
                    acc += box_cost(&clamp_pred(pb), gb)?;
                    count += 1;
                }
            }
            if count > 0 {
                s += lambda_b * acc / count as f64;
            }
            data.push(s);
        }
    }
    let mut cm = CostMatrix::from_vec(n, m, data)?;
    cm.lambda_b = lambda_b;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Query index per ground-truth instance.
    pub sigma: Vec<usize>,
    /// Sorted distinct query indices that survive filtering.
    pub kept: Vec<usize>,
    pub method: MatchMethod,
}

impl Assignment {
    fn new(sigma: Vec<usize>, method: MatchMethod) -> Self {
        let mut kept = sigma.clone();
        kept.sort_unstable();
        kept.dedup();
        Self {
            sigma,
            kept,
            method,
        }
    }

    pub fn empty(method: MatchMethod) -> Self {
        Self::new(Vec::new(), method)
    }

    /// Ground-truth index matched to each query, `None` for filtered queries.
    pub fn gt_of_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for (m, &n) in self.sigma.iter().enumerate() {
            if out[n].is_none() {
                out[n] = Some(m);
            }
        }
        out
    }
}

pub fn match_queries(cost: &CostMatrix, method: MatchMethod) -> Result<Assignment> {
    match method {
        MatchMethod::Argmin => Ok(Assignment::new(argmin_columns(cost), method)),
        MatchMethod::Hungarian => {
            if cost.rows < cost.cols {
                return Err(OokdError::validation(
                    "qfa.mode",
                    format!(
                        "hungarian matching needs N >= M, got N={} M={}",
                        cost.rows, cost.cols
                    ),
                ));
            }
            Ok(Assignment::new(hungarian(cost), method))
        }
    }
}

fn argmin_columns(cost: &CostMatrix) -> Vec<usize> {
    (0..cost.cols)
        .map(|m| {
            let mut best = 0;
            for n in 1..cost.rows {
                if cost.get(n, m) < cost.get(best, m) {
                    best = n;
                }
            }
            best
        })
        .collect()
}

/// Shortest-augmenting-path Hungarian algorithm with potentials, O(M^2 N).
/// Rows of the internal problem are ground-truth columns of `cost`.
fn hungarian(cost: &CostMatrix) -> Vec<usize> {
    let rows = cost.cols; // gt
    let cols = cost.rows; // queries
    if rows == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
            for j in 0..=cols {
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
    let mut sigma = vec![0usize; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            sigma[p[j] - 1] = j - 1;
        }
    }
    sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPair {
    pub gt: usize,
    pub student: usize,
    pub teacher: usize,
}

/// Couples the student query matched to ground truth `m` with the teacher
/// query matched to the same `m`. Queries matched to nothing are dropped.
pub fn associate(sigma_online: &[usize], sigma_offline: &[usize]) -> Result<Vec<QueryPair>> {
    if sigma_online.len() != sigma_offline.len() {
        return Err(OokdError::Shape(format!(
            "online assignment covers {} instances, offline {}",
            sigma_online.len(),
            sigma_offline.len()
        )));
    }
    Ok(sigma_online
        .iter()
        .zip(sigma_offline)
        .enumerate()
        .map(|(gt, (&student, &teacher))| QueryPair {
            gt,
            student,
            teacher,
        })
        .collect())
}

/// Pairs for distillation without filtering or association: query `n` of the
/// student with query `n` of the teacher, for every query.
pub fn index_pairs(num_queries: usize) -> Vec<QueryPair> {
    (0..num_queries)
        .map(|n| QueryPair {
            gt: n,
            student: n,
            teacher: n,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_cost_cases() {
        assert!(class_cost(&[100.0, 0.0, 0.0], 0).unwrap() < 1e-40);
        assert!((class_cost(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(class_cost(&[0.0; 4], 4).is_err());
        // direct log-sum-exp oracle
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(0..6);
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            let oracle = -(logits[c].exp() / denom).ln();
            assert!((class_cost(&logits, c).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn giou_cases() {
        let a = BoxXyxy::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let touching = BoxXyxy::new(1.0, 0.0, 2.0, 1.0);
        assert_eq!(giou(&a, &touching).unwrap(), 0.0);
        let g = giou(&BoxXyxy::new(0.0, 0.0, 2.0, 2.0), &BoxXyxy::new(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((g - (-5.0 / 63.0)).abs() < 1e-9);
        assert!((1.0 - g - 1.0794).abs() < 1e-4);
        assert!(giou(&BoxXyxy::new(0.0, 0.0, 0.0, 1.0), &a).is_err());
    }

    #[test]
    fn zero_lambda_uses_class_only() {
        let logits = vec![vec![2.0, 0.0, -1.0], vec![0.0, 1.0, 0.5]];
        let pb = vec![BoxCxcywh::new(0.2, 0.2, 0.1, 0.1), BoxCxcywh::new(0.8, 0.8, 0.3, 0.3)];
        let gb = vec![BoxCxcywh::new(0.2, 0.2, 0.1, 0.1), BoxCxcywh::new(0.7, 0.5, 0.2, 0.2)];
        let cm = cost_matrix(&logits, &pb, &[1, 1], &gb, 0.0).unwrap();
        for n in 0..2 {
            assert_eq!(cm.get(n, 0), cm.get(n, 1));
        }
    }

    #[test]
    fn perfect_prediction_dominates() {
        let gt = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        let logits = vec![vec![10.0, -10.0, -10.0], vec![0.0, 0.0, 0.0]];
        let pb = vec![gt, BoxCxcywh::new(0.1, 0.1, 0.05, 0.05)];
        let cm = cost_matrix(&logits, &pb, &[0], &[gt], 2.0).unwrap();
        assert!(cm.get(0, 0) < cm.get(1, 0));
    }

    #[test]
    fn cost_matrix_matches_scalar_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rb = |rng: &mut ChaCha8Rng| {
            BoxCxcywh::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            )
        };
        let logits: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let pb: Vec<_> = (0..8).map(|_| rb(&mut rng)).collect();
        let gb: Vec<_> = (0..4).map(|_| rb(&mut rng)).collect();
        let gc: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let cm = cost_matrix(&logits, &pb, &gc, &gb, 1.5).unwrap();
        for n in 0..8 {
            for m in 0..4 {
                let lse = logits[n].iter().map(|l| l.exp()).sum::<f64>().ln();
                let ce = lse - logits[n][gc[m]];
                let (a, b) = (pb[n], gb[m]);
                let ax = [a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0];
                let bx = [b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0];
                let iw = (ax[2].min(bx[2]) - ax[0].max(bx[0])).max(0.0);
                let ih = (ax[3].min(bx[3]) - ax[1].max(bx[1])).max(0.0);
                let inter = iw * ih;
                let union = a.w * a.h + b.w * b.h - inter;
                let hull = (ax[2].max(bx[2]) - ax[0].min(bx[0])) * (ax[3].max(bx[3]) - ax[1].min(bx[1]));
                let g = inter / union - (hull - union) / hull;
                let expected = ce + 1.5 * (1.0 - g);
                assert!((cm.get(n, m) - expected).abs() < 1e-9);
            }
        }
        assert!(cost_matrix(&logits, &pb[..7], &gc, &gb, 1.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let mut d = vec![5.0; 9];
        for i in 0..3 {
            d[i * 3 + i] = 0.1;
        }
        let cm = CostMatrix::from_vec(3, 3, d).unwrap();
        for method in [MatchMethod::Argmin, MatchMethod::Hungarian] {
            assert_eq!(match_queries(&cm, method).unwrap().sigma, vec![0, 1, 2]);
        }
        let cm = CostMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = match_queries(&cm, MatchMethod::Argmin).unwrap();
        let h = match_queries(&cm, MatchMethod::Hungarian).unwrap();
        assert_eq!(a.sigma, vec![1, 0]);
        assert_eq!(h.sigma, vec![1, 0]);
        assert_eq!(cm.total(&h.sigma), 0.0);

        let wide = CostMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(match_queries(&wide, MatchMethod::Hungarian).is_err());
        // argmin tolerates collisions
        let a = match_queries(&wide, MatchMethod::Argmin).unwrap();
        assert_eq!(a.sigma, vec![0, 0]);
        assert_eq!(a.kept, vec![0]);
    }

    #[test]
    fn argmin_ties_go_to_lowest_index() {
        let cm = CostMatrix::from_vec(3, 1, vec![0.5, 0.2, 0.2]).unwrap();
        assert_eq!(match_queries(&cm, MatchMethod::Argmin).unwrap().sigma, vec![1]);
    }

    fn brute_force(cm: &CostMatrix) -> f64 {
        fn rec(cm: &CostMatrix, m: usize, used: &mut Vec<bool>, sigma: &mut Vec<usize>, best: &mut f64) {
            if m == cm.cols {
                let total = cm.total(sigma);
                if total < *best {
                    *best = total;
                }
                return;
            }
            for n in 0..cm.rows {
                if !used[n] {
                    used[n] = true;
                    sigma.push(n);
                    rec(cm, m + 1, used, sigma, best);
                    sigma.pop();
                    used[n] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cm, 0, &mut vec![false; cm.rows], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn hungarian_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let m = rng.random_range(1..=6);
            let data: Vec<f64> = (0..8 * m).map(|_| rng.random_range(0.0..10.0)).collect();
            let cm = CostMatrix::from_vec(8, m, data).unwrap();
            let a = match_queries(&cm, MatchMethod::Hungarian).unwrap();
            let mut seen = a.sigma.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), m, "sigma must be injective");
            assert_eq!(cm.total(&a.sigma), brute_force(&cm));
        }
    }

    #[test]
    fn modes_agree_when_argmin_is_injective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..500 {
            let data: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let cm = CostMatrix::from_vec(8, 3, data).unwrap();
            let a = match_queries(&cm, MatchMethod::Argmin).unwrap();
            if a.kept.len() == 3 {
                checked += 1;
                assert_eq!(a.sigma, match_queries(&cm, MatchMethod::Hungarian).unwrap().sigma);
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn association_bookkeeping() {
        assert!(associate(&[], &[]).unwrap().is_empty());
        let pairs = associate(&[3, 1], &[0, 2]).unwrap();
        assert_eq!(
            pairs,
            vec![
                QueryPair { gt: 0, student: 3, teacher: 0 },
                QueryPair { gt: 1, student: 1, teacher: 2 }
            ]
        );
        assert!(associate(&[1], &[1, 2]).is_err());
        assert_eq!(index_pairs(3)[2], QueryPair { gt: 2, student: 2, teacher: 2 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn constant_shift_keeps_assignment(data in proptest::collection::vec(0.0f64..10.0, 8 * 4), shift in -50.0f64..50.0) {
                let cm = CostMatrix::from_vec(8, 4, data.clone()).unwrap();
                let shifted = CostMatrix::from_vec(8, 4, data.iter().map(|v| v + shift).collect()).unwrap();
                for method in [MatchMethod::Argmin, MatchMethod::Hungarian] {
                    let a = match_queries(&cm, method).unwrap();
                    let b = match_queries(&shifted, method).unwrap();
                    // near-ties can flip under rounding; compare totals on the original matrix
                    prop_assert!((cm.total(&a.sigma) - cm.total(&b.sigma)).abs() < 1e-9);
                }
            }

            #[test]
            fn gt_permutation_permutes_pairs(data in proptest::collection::vec(0.0f64..10.0, 8 * 4),
                                              teacher in proptest::collection::vec(0.0f64..10.0, 8 * 4),
                                              perm in Just(vec![2usize, 0, 3, 1])) {
                let s = CostMatrix::from_vec(8, 4, data.clone()).unwrap();
                let t = CostMatrix::from_vec(8, 4, teacher.clone()).unwrap();
                let permute = |cm: &CostMatrix| {
                    let mut d = Vec::with_capacity(32);
                    for n in 0..8 { for &m in &perm { d.push(cm.get(n, m)); } }
                    CostMatrix::from_vec(8, 4, d).unwrap()
                };
                let pairs = |s: &CostMatrix, t: &CostMatrix| {
                    let a = match_queries(s, MatchMethod::Hungarian).unwrap();
                    let b = match_queries(t, MatchMethod::Hungarian).unwrap();
                    let mut v: Vec<(usize, usize)> = associate(&a.sigma, &b.sigma).unwrap()
                        .into_iter().map(|p| (p.student, p.teacher)).collect();
                    v.sort_unstable();
                    v
                };
                prop_assert_eq!(pairs(&s, &t), pairs(&permute(&s), &permute(&t)));
            }
        }
    }
}
