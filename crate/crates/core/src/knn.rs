//! Exact k-nearest-neighbor queries over 3-D points.
//!
//! Distances are Euclidean; ties are broken by the lower point index, so all
//! results are a deterministic function of the input order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over a borrowed point slice.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// `(squared distance, index)` candidate list kept sorted ascending.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.items.len() - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, idx: usize) {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d2, idx) >= last {
                return;
            }
        }
        let pos = self.items.partition_point(|&(d, i)| (d, i) < (d2, idx));
        self.items.insert(pos, (d2, idx));
        self.items.truncate(self.k);
    }
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut tree = Self { points, order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let inf = f64::INFINITY;
        let (mut lo, mut hi) = (Vec3::new(inf, inf, inf), Vec3::new(-inf, -inf, -inf));
        for &i in &self.order[start..end] {
            lo = lo.min(self.points[i]);
            hi = hi.max(self.points[i]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a].axis(axis).total_cmp(&pts[b].axis(axis)).then(a.cmp(&b))
        });
        let value = pts[self.order[mid]].axis(axis);
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    fn search(&self, node: usize, q: Vec3, exclude: Option<usize>, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    best.offer((self.points[i] - q).norm_squared(), i);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q.axis(axis) - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude, best);
                // Points equal to the split value can sit on either side.
                if diff * diff <= best.worst() {
                    self.search(far, q, exclude, best);
                }
            }
        }
    }

    /// The `k` nearest points to `q`, nearest first, as `(index, squared distance)`.
    /// `exclude` removes one index from consideration.
    pub fn nearest_k(&self, q: Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut best = Best::new(k);
        self.search(0, q, exclude, &mut best);
        best.items.into_iter().map(|(d, i)| (i, d)).collect()
    }

    /// Nearest point to `q` as `(index, squared distance)`.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        self.nearest_k(q, 1, None).into_iter().next()
    }
}

/// Row-major `N×k` neighbor table: the `k` nearest other points of each point.
pub fn knn_indices(positions: &[Vec3], k: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if k >= n {
        return Err(Error::Config(format!("k-NN needs k < N, got k = {k} with N = {n}")));
    }
    let tree = KdTree::new(positions);
    let mut out = Vec::with_capacity(n * k);
    for (i, &p) in positions.iter().enumerate() {
        out.extend(tree.nearest_k(p, k, Some(i)).into_iter().map(|(j, _)| j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(positions: &[Vec3], k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, &p) in positions.iter().enumerate() {
            let mut c: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &q)| ((q - p).norm_squared(), j))
                .collect();
            c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.extend(c.iter().take(k).map(|&(_, j)| j));
        }
        out
    }

    #[test]
    fn collinear_tie_goes_to_lower_index() {
        let p = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let nn = knn_indices(&p, 1).unwrap();
        assert_eq!(nn, vec![1, 0, 1]);
    }

    #[test]
    fn k_must_be_below_n() {
        assert!(matches!(knn_indices(&[Vec3::ZERO; 3], 3), Err(Error::Config(_))));
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Vec<Vec3> = (0..500).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        assert_eq!(knn_indices(&p, 16).unwrap(), brute(&p, 16));
    }

    #[test]
    fn matches_brute_force_on_lattice_with_ties() {
        let mut p = Vec::new();
        for x in 0..7 {
            for y in 0..6 {
                for z in 0..4 {
                    p.push(Vec3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        p.push(Vec3::new(3.0, 3.0, 2.0)); // exact duplicate
        assert_eq!(knn_indices(&p, 8).unwrap(), brute(&p, 8));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let perm: Vec<usize> = (0..200).rev().collect();
        let q: Vec<Vec3> = perm.iter().map(|&i| p[i]).collect();
        let a = knn_indices(&p, 5).unwrap();
        let b = knn_indices(&q, 5).unwrap();
        // q[i] = p[perm[i]]; neighbor sets map through the permutation (continuous
        // random data has no ties, so order is preserved).
        for i in 0..200 {
            for j in 0..5 {
                assert_eq!(perm[b[i * 5 + j]], a[perm[i] * 5 + j]);
            }
        }
    }
}
