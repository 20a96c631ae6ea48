//! Static kd-tree over 3-component points. Unused trailing coordinates are
//! zero, so the same tree serves planar and spatial sets.

pub type Point = [f64; 3];

const LEAF_SIZE: usize = 8;

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// Squared distance from a point to the closed axis-aligned box `[lo, hi]`.
#[inline]
pub fn point_box_dist2(p: &Point, lo: &Point, hi: &Point) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = if p[a] < lo[a] {
            lo[a] - p[a]
        } else if p[a] > hi[a] {
            p[a] - hi[a]
        } else {
            0.0
        };
        s += d * d;
    }
    s
}

/// Squared distance between two closed boxes.
#[inline]
pub fn box_box_dist2(lo1: &Point, hi1: &Point, lo2: &Point, hi2: &Point) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = if hi1[a] < lo2[a] {
            lo2[a] - hi1[a]
        } else if hi2[a] < lo1[a] {
            lo1[a] - hi2[a]
        } else {
            0.0
        };
        s += d * d;
    }
    s
}

#[derive(Debug, Clone)]
struct Node {
    lo: Point,
    hi: Point,
    // leaf: range into `order`; inner: children indices
    start: u32,
    end: u32,
    left: u32,
    right: u32,
}

const NONE: u32 = u32::MAX;

/// Something a kd-tree can be searched against.
pub trait Probe {
    fn to_point(&self, p: &Point) -> f64;
    fn to_bbox(&self, lo: &Point, hi: &Point) -> f64;
}

pub struct AtPoint(pub Point);

impl Probe for AtPoint {
    fn to_point(&self, p: &Point) -> f64 {
        dist2(&self.0, p)
    }
    fn to_bbox(&self, lo: &Point, hi: &Point) -> f64 {
        point_box_dist2(&self.0, lo, hi)
    }
}

pub struct AtBox {
    pub lo: Point,
    pub hi: Point,
}

impl Probe for AtBox {
    fn to_point(&self, p: &Point) -> f64 {
        point_box_dist2(p, &self.lo, &self.hi)
    }
    fn to_bbox(&self, lo: &Point, hi: &Point) -> f64 {
        box_box_dist2(&self.lo, &self.hi, lo, hi)
    }
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
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

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = &self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            lo,
            hi,
            start: start as u32,
            end: end as u32,
            left: NONE,
            right: NONE,
        });
        if end - start > LEAF_SIZE {
            let axis = (0..3)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            let mid = (start + end) / 2;
            let pts = &self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
                pts[x as usize][axis]
                    .total_cmp(&pts[y as usize][axis])
                    .then(x.cmp(&y))
            });
            let l = self.build(start, mid);
            let r = self.build(mid, end);
            self.nodes[id as usize].left = l;
            self.nodes[id as usize].right = r;
        }
        id
    }

    /// Visits every point with `|p - center| < radius`.
    pub fn within<F: FnMut(usize, f64)>(&self, center: &Point, radius: f64, mut visit: F) {
        if self.nodes.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if point_box_dist2(center, &node.lo, &node.hi) >= r2 {
                continue;
            }
            if node.left == NONE {
                for &i in &self.order[node.start as usize..node.end as usize] {
                    let d2 = dist2(center, &self.points[i as usize]);
                    if d2 < r2 {
                        visit(i as usize, d2);
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
    }

    /// Closest accepted point to the probe with distance `<= bound`.
    /// Ties are broken by the lowest index.
    pub fn nearest_by<P: Probe, F: Fn(usize) -> bool>(
        &self,
        probe: &P,
        bound: f64,
        accept: F,
    ) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut best2 = if bound.is_finite() {
            bound * bound
        } else {
            f64::INFINITY
        };
        let mut stack = vec![(0u32, 0.0f64)];
        while let Some((n, lb)) = stack.pop() {
            if lb > best2 {
                continue;
            }
            let node = &self.nodes[n as usize];
            if node.left == NONE {
                for &i in &self.order[node.start as usize..node.end as usize] {
                    let i = i as usize;
                    let d2 = probe.to_point(&self.points[i]);
                    let better = match best {
                        None => d2 <= best2,
                        Some((bi, _)) => d2 < best2 || (d2 == best2 && i < bi),
                    };
                    if better && accept(i) {
                        best = Some((i, d2));
                        best2 = d2;
                    }
                }
            } else {
                let l = &self.nodes[node.left as usize];
                let r = &self.nodes[node.right as usize];
                let dl = probe.to_bbox(&l.lo, &l.hi);
                let dr = probe.to_bbox(&r.lo, &r.hi);
                // nearer child popped first
                if dl <= dr {
                    stack.push((node.right, dr));
                    stack.push((node.left, dl));
                } else {
                    stack.push((node.left, dl));
                    stack.push((node.right, dr));
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    pub fn nearest(&self, p: &Point) -> Option<(usize, f64)> {
        self.nearest_by(&AtPoint(*p), f64::INFINITY, |_| true)
    }
}
