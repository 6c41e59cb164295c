//! Exact k-d tree over a static point set.
//!
//! Median split on the axis of largest spread, small leaf buckets. All
//! comparisons use squared Euclidean distance; ties are broken by the smaller
//! stored index so results are reproducible and equal to a brute-force scan.

use std::cmp::Ordering;

use nalgebra::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

fn cmp_candidate(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl KdTree {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, index: usize) -> &Point3<f64> {
        &self.points[index]
    }

    /// The `min(k, n)` nearest points, sorted by distance then index.
    pub fn knn(&self, query: &Point3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let k = k.min(self.points.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_node(0, query, k, &mut best);
        best.into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn knn_node(&self, id: usize, q: &Point3<f64>, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = ((self.points[i] - q).norm_squared(), i);
                    if best.len() == k {
                        if cmp_candidate(cand, best[k - 1]) != Ordering::Less {
                            continue;
                        }
                        best.pop();
                    }
                    let pos = best
                        .binary_search_by(|probe| cmp_candidate(*probe, cand))
                        .unwrap_or_else(|p| p);
                    best.insert(pos, cand);
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
                self.knn_node(near, q, k, best);
                // equal bound must still be visited: a farther-side point at the
                // same distance may carry a smaller index
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.knn_node(far, q, k, best);
                }
            }
        }
    }

    /// All points with distance strictly below `radius`, sorted by distance
    /// then index.
    pub fn radius_search(&self, query: &Point3<f64>, radius: f64) -> Vec<Neighbor> {
        let mut found = Vec::new();
        if !self.points.is_empty() && radius > 0.0 {
            self.radius_node(0, query, radius * radius, &mut found);
        }
        found.sort_by(|a, b| cmp_candidate(*a, *b));
        found
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn radius_node(&self, id: usize, q: &Point3<f64>, r2: f64, found: &mut Vec<(f64, usize)>) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < r2 {
                        found.push((d2, i));
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
                self.radius_node(near, q, r2, found);
                if diff * diff < r2 {
                    self.radius_node(far, q, r2, found);
                }
            }
        }
    }

    /// Nearest stored point, or `None` for an empty tree.
    pub fn nearest(&self, query: &Point3<f64>) -> Option<Neighbor> {
        self.knn(query, 1).into_iter().next()
    }
}
