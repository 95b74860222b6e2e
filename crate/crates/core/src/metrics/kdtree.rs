use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
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

/// Exact nearest-neighbor index over a fixed point set. Among equidistant
/// points the lowest index wins, so results match a brute-force scan.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self::build(points, None)
    }

    /// Tree whose points carry a normal each.
    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Self {
        assert_eq!(points.len(), normals.len(), "one normal per point");
        Self::build(points, Some(normals))
    }

    fn build(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            normals,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.split(0, tree.points.len());
        }
        tree
    }

    /// Appends the subtree over `order[start..end]` and returns its node id.
    fn split(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normal(&self, index: usize) -> Option<&Vec3> {
        self.normals.as_ref().map(|n| &n[index])
    }

    /// Index of and squared distance to the nearest point, `None` when empty.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
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
                self.search(near, q, best);
                // equality still visits: an equidistant lower index may hide there
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Reference scan used to validate the tree.
pub fn brute_force_nearest(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - q).norm_squared()))
        .fold(None, |best, (i, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((i, d)),
        })
}
