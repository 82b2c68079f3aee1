//! Static k-d tree for exact Euclidean nearest-neighbour queries.
//!
//! Ties are resolved towards the lowest insertion index, so lookups are reproducible
//! regardless of tree layout.

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Row-major coordinates, `dim` values per point, in insertion order.
    coords: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Result of a nearest-neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl KdTree {
    /// Builds the tree over `points`, each of length `dim`.
    pub fn build<P: AsRef<[f64]>>(points: &[P], dim: usize) -> Self {
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            assert_eq!(p.len(), dim, "point dimension mismatch");
            coords.extend_from_slice(p);
        }
        let mut tree = KdTree {
            dim,
            coords,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            let n = points.len();
            tree.build_node(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.coords[index * self.dim..(index + 1) * self.dim]
    }

    fn coord(&self, index: usize, axis: usize) -> f64 {
        self.coords[index * self.dim + axis]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // Split along the axis of largest spread.
        let mut axis = 0;
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.dim {
            let (lo, hi) = self.order[start..end].iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &i| {
                    let v = self.coord(i, a);
                    (lo.min(v), hi.max(v))
                },
            );
            if hi - lo > best {
                best = hi - lo;
                axis = a;
            }
        }
        let mid = start + (end - start) / 2;
        let coords = &self.coords;
        let dim = self.dim;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coords[a * dim + axis].total_cmp(&coords[b * dim + axis])
        });
        let value = self.coord(self.order[mid], axis);
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest stored point to `query`; `None` on an empty tree.
    pub fn nearest(&self, query: &[f64]) -> Option<Neighbor> {
        self.nearest_except(query, None)
    }

    /// Nearest stored point other than `skip`.
    pub fn nearest_except(&self, query: &[f64], skip: Option<usize>) -> Option<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, query, skip, &mut best);
        (best.0 != usize::MAX).then(|| Neighbor {
            index: best.0,
            distance: best.1.sqrt(),
        })
    }

    fn search(&self, node: usize, q: &[f64], skip: Option<usize>, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let p = self.point(i);
                    let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, skip, best);
                // Equal distance must still be explored for the lowest-index tie rule.
                if diff * diff <= best.1 {
                    self.search(far, q, skip, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec<f64>], q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn exact_match_and_ties() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let tree = KdTree::build(&pts, 2);
        let hit = tree.nearest(&[1.0, 1.0]).unwrap();
        assert_eq!(hit.index, 3);
        assert_eq!(hit.distance, 0.0);
        // Equidistant from all four corners: lowest index wins.
        assert_eq!(tree.nearest(&[0.5, 0.5]).unwrap().index, 0);
        assert_eq!(tree.nearest(&[1.0, 0.5]).unwrap().index, 1);
    }

    #[test]
    fn duplicates_resolve_to_first() {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 5) as f64]).collect();
        let tree = KdTree::build(&pts, 1);
        assert_eq!(tree.nearest(&[3.0]).unwrap().index, 3);
        assert_eq!(tree.nearest_except(&[3.0], Some(3)).unwrap().index, 8);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::build::<Vec<f64>>(&[], 3);
        assert!(tree.nearest(&[0.0, 0.0, 0.0]).is_none());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 1..200),
            q in prop::collection::vec(-12.0..12.0f64, 3),
        ) {
            let tree = KdTree::build(&pts, 3);
            let got = tree.nearest(&q).unwrap();
            let (idx, d2) = brute(&pts, &q);
            prop_assert_eq!(got.index, idx);
            prop_assert!((got.distance - d2.sqrt()).abs() < 1e-12);
        }
    }
}
