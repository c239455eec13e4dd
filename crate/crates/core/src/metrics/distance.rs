//! Point-set distances: Chamfer (kd-tree accelerated) and Earth Mover's.

use crate::error::{Error, Result};
use crate::objects::PointSet;

/// Exact assignment up to this many points; ε-scaling auction above.
pub const EMD_EXACT_LIMIT: usize = 1024;

fn coords(ps: &PointSet, channels: usize) -> Result<Vec<[f64; 4]>> {
    if channels != 3 && channels != 4 {
        return Err(Error::Config(format!("channels must be 3 or 4, got {channels}")));
    }
    if ps.is_empty() {
        return Err(Error::Domain("distance to an empty point set".into()));
    }
    Ok(ps.points.iter().map(|p| [p.x, p.y, p.z, if channels == 4 { p.i } else { 0.0 }]).collect())
}

#[inline]
fn sq_dist(a: &[f64; 4], b: &[f64; 4], channels: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..channels {
        let d = a[c] - b[c];
        s += d * d;
    }
    s
}

/// Reference `O(|X| |Y|)` Chamfer distance.
pub fn chamfer_naive(x: &PointSet, y: &PointSet, channels: usize) -> Result<f64> {
    let (a, b) = (coords(x, channels)?, coords(y, channels)?);
    let one_way = |p: &[[f64; 4]], q: &[[f64; 4]]| {
        p.iter()
            .map(|u| q.iter().map(|v| sq_dist(u, v, channels)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
    };
    Ok(one_way(&a, &b) + one_way(&b, &a))
}

/// Static kd-tree over up to 4-channel points.
pub struct KdTree {
    pts: Vec<[f64; 4]>,
    channels: usize,
    /// Implicit median tree: the node of range `[lo, hi)` sits at its midpoint.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    fn new(pts: Vec<[f64; 4]>, channels: usize) -> Self {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut axes = vec![0u8; pts.len()];
        Self::build(&pts, channels, &mut order, &mut axes);
        Self { pts, channels, order, axes }
    }

    fn build(pts: &[[f64; 4]], channels: usize, idx: &mut [usize], axes: &mut [u8]) {
        if idx.len() <= 1 {
            return;
        }
        // split on the widest channel
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..channels {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(pts[i][c]), hi.max(pts[i][c])));
            if hi - lo > best.1 {
                best = (c, hi - lo);
            }
        }
        let axis = best.0;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        axes[mid] = axis as u8;
        let (left, rest) = idx.split_at_mut(mid);
        let (la, ra) = axes.split_at_mut(mid);
        Self::build(pts, channels, left, la);
        Self::build(pts, channels, &mut rest[1..], &mut ra[1..]);
    }

    /// Smallest squared distance from `q` to the indexed points.
    fn nearest(&self, q: &[f64; 4]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.order.len(), &mut best);
        best
    }

    fn search(&self, q: &[f64; 4], lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.pts[self.order[mid]];
        let d = sq_dist(q, p, self.channels);
        if d < *best {
            *best = d;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        // an exact squared distance is never below one of its own terms
        if diff * diff <= *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// `sum_x min_y |x - y|^2 + sum_y min_x |x - y|^2` over the first `channels` channels.
///
/// Bit-identical to [`chamfer_naive`]: minima are taken over identically computed
/// candidate distances and summed in point order.
pub fn chamfer(x: &PointSet, y: &PointSet, channels: usize) -> Result<f64> {
    let (a, b) = (coords(x, channels)?, coords(y, channels)?);
    let one_way = |p: &[[f64; 4]], q: Vec<[f64; 4]>| {
        let tree = KdTree::new(q, channels);
        p.iter().map(|u| tree.nearest(u)).sum::<f64>()
    };
    Ok(one_way(&a, b.clone()) + one_way(&b, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmdResult {
    /// Sum of matched Euclidean distances, or the per-point mean when requested.
    pub cost: f64,
    /// The assignment came from the approximate solver.
    pub approximate: bool,
}

/// Minimum-cost perfect matching on a dense square cost matrix (row-major).
///
/// Shortest augmenting paths with potentials; returns `assign[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[col] = row matched to col (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Forward auction with ε-scaling; near-optimal within `n * eps_final` of the optimum.
pub fn auction(cost: &[f64], n: usize) -> Vec<usize> {
    let max_c = cost.iter().cloned().fold(0.0, f64::max);
    let mut price = vec![0.0; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assign: Vec<Option<usize>> = vec![None; n];
    let eps_final = (max_c / n as f64 * 1e-3).max(1e-12);
    let mut eps = (max_c / 4.0).max(eps_final);
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        assign.iter_mut().for_each(|a| *a = None);
        let mut free: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = free.pop() {
            // maximize value = -cost - price
            let row = &cost[i * n..(i + 1) * n];
            let (mut bj, mut b1, mut b2) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (j, (&c, &pj)) in row.iter().zip(&price).enumerate() {
                let val = -c - pj;
                if val > b1 {
                    b2 = b1;
                    b1 = val;
                    bj = j;
                } else if val > b2 {
                    b2 = val;
                }
            }
            let gap = if b2.is_finite() { b1 - b2 } else { 0.0 };
            price[bj] += gap + eps;
            if let Some(prev) = owner[bj].replace(i) {
                assign[prev] = None;
                free.push(prev);
            }
            assign[i] = Some(bj);
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    assign.into_iter().map(|a| a.expect("auction assigns every row")).collect()
}

/// Earth Mover's distance between equal-size sets under Euclidean ground cost.
pub fn emd(x: &PointSet, y: &PointSet, channels: usize, per_point: bool) -> Result<EmdResult> {
    let (a, b) = (coords(x, channels)?, coords(y, channels)?);
    if a.len() != b.len() {
        return Err(Error::Contract(format!("EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for (i, u) in a.iter().enumerate() {
        for (j, v) in b.iter().enumerate() {
            cost[i * n + j] = sq_dist(u, v, channels).sqrt();
        }
    }
    let approximate = n > EMD_EXACT_LIMIT;
    let assign = if approximate { auction(&cost, n) } else { hungarian(&cost, n) };
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(EmdResult { cost: if per_point { total / n as f64 } else { total }, approximate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objects::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut impl Rng, n: usize) -> PointSet {
        PointSet::new((0..n).map(|_| Point::new(rng.random(), rng.random(), rng.random(), rng.random())).collect())
    }

    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn chamfer_examples() {
        let a = PointSet::new(vec![Point::new(0.0, 0.0, 0.0, 0.0)]);
        let b = PointSet::new(vec![Point::new(1.0, 0.0, 0.0, 0.0)]);
        assert_eq!(chamfer(&a, &b, 3).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a, 4).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointSet::default(), 3), Err(Error::Domain(_))));
    }

    #[test]
    fn indexed_chamfer_bit_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let x = random_set(&mut rng, 50);
            let y = random_set(&mut rng, 30 + trial);
            for ch in [3, 4] {
                assert_eq!(chamfer(&x, &y, ch).unwrap(), chamfer_naive(&x, &y, ch).unwrap());
            }
        }
    }

    #[test]
    fn emd_examples() {
        let x = PointSet::new(vec![Point::new(0.0, 0.0, 0.0, 0.2), Point::new(1.0, 2.0, 0.0, 0.4)]);
        let y = PointSet::new(x.points.iter().map(|p| Point::new(p.x, p.y, p.z + 1.0, p.i)).collect());
        assert_eq!(emd(&x, &x, 3, false).unwrap().cost, 0.0);
        assert_eq!(emd(&x, &y, 3, false).unwrap().cost, 2.0);
        assert_eq!(emd(&x, &y, 3, true).unwrap().cost, 1.0);
        let short = PointSet::new(vec![Point::new(0.0, 0.0, 0.0, 0.0)]);
        assert!(matches!(emd(&x, &short, 3, false), Err(Error::Contract(_))));
    }

    #[test]
    fn hungarian_matches_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..200 {
            let n = 1 + trial % 6;
            let x = random_set(&mut rng, n);
            let y = random_set(&mut rng, n);
            let got = emd(&x, &y, 3, false).unwrap().cost;
            let best = perms(n)
                .iter()
                .map(|p| (0..n).map(|i| sq_dist(&coords(&x, 3).unwrap()[i], &coords(&y, 3).unwrap()[p[i]], 3).sqrt()).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got, best);
        }
    }

    #[test]
    fn auction_is_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
        let exact = total(&hungarian(&cost, n));
        let approx_assign = auction(&cost, n);
        let mut seen = approx_assign.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let approx = total(&approx_assign);
        assert!(approx >= exact - 1e-12 && approx - exact < 1e-2 * exact.max(1.0), "{approx} vs {exact}");
    }

    #[test]
    fn distances_are_symmetric_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = random_set(&mut rng, 12);
            let y = random_set(&mut rng, 12);
            assert_eq!(chamfer(&x, &y, 4).unwrap(), chamfer(&y, &x, 4).unwrap());
            let (exy, eyx) = (emd(&x, &y, 3, false).unwrap().cost, emd(&y, &x, 3, false).unwrap().cost);
            assert!((exy - eyx).abs() < 1e-12);
            assert!(chamfer(&x, &y, 3).unwrap() > 0.0 && exy > 0.0);
        }
    }
}
