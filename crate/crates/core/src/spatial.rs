//! Static 3D k-d tree for nearest-neighbour queries.
//!
//! Ties are broken towards the smaller point index so queries are deterministic
//! regardless of traversal order.

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

const LEAF_SIZE: usize = 8;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut tree = Self { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
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
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        if hi[axis] - lo[axis] <= 0.0 {
            // All points coincide.
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// Index and squared distance of the nearest point. Panics on an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest-neighbour query on empty set");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut (usize, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Indices of all points within `radius` of `q`, ascending.
    pub fn within(&self, q: &[f64; 3], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.collect(0, q, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn collect(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                out.extend(self.order[start..end].iter().copied().filter(|&i| dist2(&self.points[i], q) <= r2));
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                if diff < 0.0 || diff * diff <= r2 {
                    self.collect(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.collect(right, q, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..500).map(|_| [rng.gen(), rng.gen(), if rng.gen_bool(0.5) { 0.0 } else { rng.gen() }]).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = [rng.gen(), rng.gen(), rng.gen::<f64>() * 0.1];
            let (i, d) = tree.nearest(&q);
            let bf = pts
                .iter()
                .enumerate()
                .map(|(j, p)| (j, dist2(p, &q)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!((i, d), bf);
            let mut w = tree.within(&q, 0.1);
            let mut wb: Vec<usize> = (0..pts.len()).filter(|&j| dist2(&pts[j], &q) <= 0.01).collect();
            w.sort_unstable();
            wb.sort_unstable();
            assert_eq!(w, wb);
        }
    }

    #[test]
    fn planar_duplicates() {
        let pts = vec![[0.0, 0.0, 0.0]; 50];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&[1.0, 1.0, 1.0]).0, 0);
    }
}
