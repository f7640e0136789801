//! Static 3-d tree for nearest-neighbour queries.
//!
//! Ties on distance resolve to the smallest point index so every query is
//! deterministic.

use crate::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Permutation: slot -> original index.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

#[inline]
fn closer(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

#[inline]
fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut nodes = Vec::with_capacity(2 * pts.len() / LEAF_SIZE + 1);
        if !pts.is_empty() {
            build(&pts, &mut order, 0, pts.len(), &mut nodes);
        }
        // Store points in slot order for cache-friendly leaf scans.
        let points = order.iter().map(|&i| pts[i]).collect();
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, q: &Vec3) -> Option<Neighbor> {
        if self.nodes.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(0, &q, &mut best);
        Some(Neighbor {
            index: best.1,
            dist_sq: best.0,
        })
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let cand = (dist_sq(&self.points[slot], q), self.order[slot]);
                    if closer(cand, *best) {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                // `<=` keeps index tie-breaking exact across the split plane.
                if diff * diff <= best.0 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by (distance, index).
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let q = [q.x, q.y, q.z];
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(0, &q, k, &mut heap);
        heap.into_iter()
            .map(|(d, i)| Neighbor {
                index: i,
                dist_sq: d,
            })
            .collect()
    }

    // `found` is kept sorted; k is small in practice so insertion is cheap.
    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let cand = (dist_sq(&self.points[slot], q), self.order[slot]);
                    if found.len() == k && !closer(cand, found[k - 1]) {
                        continue;
                    }
                    let pos = found.partition_point(|&e| closer(e, cand));
                    found.insert(pos, cand);
                    found.truncate(k);
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].0 {
                    self.knn_rec(far, q, k, found);
                }
            }
        }
    }

    /// Indices of all points within `radius` (inclusive), in ascending index order.
    pub fn within_radius(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let q = [q.x, q.y, q.z];
        self.radius_rec(0, &q, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    if dist_sq(&self.points[slot], q) <= r2 {
                        out.push(self.order[slot]);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.radius_rec(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.radius_rec(right, q, r2, out);
                }
            }
        }
    }
}

fn build(pts: &[[f64; 3]], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        for d in 0..3 {
            lo[d] = lo[d].min(pts[i][d]);
            hi[d] = hi[d].max(pts[i][d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[dim] - lo[dim] == 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][dim].total_cmp(&pts[b][dim]));
    let value = pts[order[mid]][dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    // Left holds slots [start, mid) whose coordinates are <= value.
    let left = build(pts, order, start, mid, nodes);
    let right = build(pts, order, mid, end, nodes);
    nodes[id] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    id
}

/// Closest point on triangle `(a, b, c)` to `p` (Ericson's region test).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[derive(Debug, Clone)]
struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: triangle slots `[start, end)`; inner: children in `left`/`right`.
    start: usize,
    end: usize,
    left: usize,
    right: usize,
}

/// Bounding-volume hierarchy over triangles for exact closest-point queries.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

/// Result of a closest-point query on a triangle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub triangle: usize,
    pub dist_sq: f64,
}

const BVH_LEAF: usize = 4;

impl TriangleBvh {
    pub fn new(tris: Vec<[Vec3; 3]>) -> Self {
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
            build_bvh(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Self { tris, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Closest surface point; ties keep the smallest triangle index.
    pub fn closest(&self, q: &Vec3) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = SurfaceHit {
            point: *q,
            triangle: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if box_dist_sq(&node.lo, &node.hi, q) > best.dist_sq {
                continue;
            }
            if node.left == usize::MAX {
                for slot in node.start..node.end {
                    let ti = self.order[slot];
                    let [a, b, c] = &self.tris[ti];
                    let p = closest_point_on_triangle(q, a, b, c);
                    let d = (p - q).norm_squared();
                    if d < best.dist_sq || (d == best.dist_sq && ti < best.triangle) {
                        best = SurfaceHit {
                            point: p,
                            triangle: ti,
                            dist_sq: d,
                        };
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = box_dist_sq(&self.nodes[l].lo, &self.nodes[l].hi, q);
                let dr = box_dist_sq(&self.nodes[r].lo, &self.nodes[r].hi, q);
                // Visit the nearer child first.
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        Some(best)
    }
}

fn box_dist_sq(lo: &Vec3, hi: &Vec3, q: &Vec3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if q[k] < lo[k] {
            lo[k] - q[k]
        } else if q[k] > hi[k] {
            q[k] - hi[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

fn build_bvh(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<BvhNode>,
) -> usize {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in &order[start..end] {
        for v in &tris[i] {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
    }
    let id = nodes.len();
    nodes.push(BvhNode {
        lo,
        hi,
        start,
        end,
        left: usize::MAX,
        right: usize::MAX,
    });
    if end - start <= BVH_LEAF {
        return id;
    }
    let ext = hi - lo;
    let dim = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| centroids[a][dim].total_cmp(&centroids[b][dim]));
    let left = build_bvh(tris, centroids, order, start, mid, nodes);
    let right = build_bvh(tris, centroids, order, mid, end, nodes);
    nodes[id].left = left;
    nodes[id].right = right;
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(pts: &[Vec3], q: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(0.0..5.0)))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-1.0..6.0));
            let expect = brute_knn(&pts, &q, 7);
            let got = tree.k_nearest(&q, 7);
            assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), expect.iter().map(|e| e.1).collect::<Vec<_>>());
            let nn = tree.nearest(&q).unwrap();
            assert_eq!(nn.index, expect[0].1);
            let r = 4.0;
            let mut brute_r: Vec<usize> = pts.iter().enumerate().filter(|(_, p)| (*p - q).norm() <= r).map(|(i, _)| i).collect();
            brute_r.sort_unstable();
            assert_eq!(tree.within_radius(&q, r), brute_r);
        }
    }

    #[test]
    fn ties_resolve_to_smallest_index() {
        // A lattice with many duplicates and equidistant neighbours.
        let mut pts = Vec::new();
        for _ in 0..3 {
            for i in 0..10 {
                for j in 0..10 {
                    pts.push(Vec3::new(i as f64, j as f64, 0.0));
                }
            }
        }
        let tree = KdTree::new(&pts);
        let nn = tree.nearest(&Vec3::new(4.5, 4.5, 0.0)).unwrap();
        assert_eq!(nn.index, 44);
        let nn = tree.nearest(&Vec3::new(7.0, 2.0, 1.0)).unwrap();
        assert_eq!(nn.index, 72);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Vec3::zeros()).is_none());
        assert!(tree.k_nearest(&Vec3::zeros(), 3).is_empty());
    }
    #[test]
    fn triangle_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0));
        let cp = |p: Vec3| closest_point_on_triangle(&p, &a, &b, &c);
        assert_eq!(cp(Vec3::new(0.5, 0.5, 3.0)), Vec3::new(0.5, 0.5, 0.0));
        assert_eq!(cp(Vec3::new(-1.0, -1.0, 0.0)), a);
        assert_eq!(cp(Vec3::new(5.0, -1.0, 0.0)), b);
        assert_eq!(cp(Vec3::new(1.0, -3.0, 1.0)), Vec3::new(1.0, 0.0, 0.0));
        let h = cp(Vec3::new(2.0, 2.0, 0.0));
        assert!((h - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = || Vec3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0));
        let tris: Vec<[Vec3; 3]> = (0..300).map(|_| {
            let a = r();
            [a, a + r() * 0.2, a + r() * 0.2]
        }).collect();
        let bvh = TriangleBvh::new(tris.clone());
        for _ in 0..300 {
            let q = r() * 1.3;
            let hit = bvh.closest(&q).unwrap();
            let brute = tris
                .iter()
                .map(|t| (closest_point_on_triangle(&q, &t[0], &t[1], &t[2]) - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            assert!((hit.dist_sq - brute).abs() < 1e-12);
        }
        assert!(TriangleBvh::new(Vec::new()).closest(&Vec3::zeros()).is_none());
    }
}
