use super::{TriMesh, Vec3};

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.lo = self.lo.inf(&o.lo);
        self.hi = self.hi.sup(&o.hi);
    }

    /// Slab test; returns the entry distance if the ray hits within `t_max`.
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut ta = (self.lo[a] - origin[a]) * inv_dir[a];
            let mut tb = (self.hi[a] - origin[a]) * inv_dir[a];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf means the origin sits on the slab plane
            if ta.is_nan() || tb.is_nan() {
                if origin[a] < self.lo[a] || origin[a] > self.hi[a] {
                    return false;
                }
                continue;
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// A ray/triangle intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub face: usize,
    /// Barycentric coordinates `(w0, w1, w2)` of the hit point.
    pub bary: [f64; 3],
}

/// Median-split bounding volume hierarchy over the faces of a mesh.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    tris: Vec<[Vec3; 3]>,
}

impl Bvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            build(&mut nodes, &mut order, 0, tris.len(), &tris, &centroids);
        }
        Self { nodes, order, tris }
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    /// Calls `visit` for every triangle hit at `t > 0` along the ray.
    pub fn for_each_hit(&self, origin: &Vec3, dir: &Vec3, mut visit: impl FnMut(RayHit)) {
        if self.nodes.is_empty() {
            return;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.bounds().hit(origin, &inv, f64::INFINITY) {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        if let Some(h) = intersect(&self.tris[f], origin, dir) {
                            visit(RayHit { face: f, ..h });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
    }

    /// Nearest hit at `t > 0`; ties resolved to the lowest face index.
    pub fn nearest_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let t_max = best.map_or(f64::INFINITY, |b| b.t);
            if !node.bounds().hit(origin, &inv, t_max) {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        if let Some(h) = intersect(&self.tris[f], origin, dir) {
                            let better = match best {
                                None => true,
                                Some(b) => h.t < b.t || (h.t == b.t && f < b.face),
                            };
                            if better {
                                best = Some(RayHit { face: f, ..h });
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        best
    }
}

fn build(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &f in &order[start..end] {
        for v in &tris[f] {
            bounds.grow(v);
        }
        cbounds.grow(&centroids[f]);
    }
    let index = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return index;
    }
    let axis = (cbounds.hi - cbounds.lo).imax();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
    });
    nodes.push(Node::Leaf { bounds, start, end });
    let left = build(nodes, order, start, mid, tris, centroids);
    let right = build(nodes, order, mid, end, tris, centroids);
    let mut merged = *nodes[left].bounds();
    merged.merge(nodes[right].bounds());
    nodes[index] = Node::Inner {
        bounds: merged,
        left,
        right,
    };
    index
}

/// Möller–Trumbore ray/triangle intersection, hits with `t > 0` only.
fn intersect(tri: &[Vec3; 3], origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - tri[0];
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t <= 0.0 {
        return None;
    }
    Some(RayHit {
        t,
        face: 0,
        bary: [1.0 - u - v, u, v],
    })
}
