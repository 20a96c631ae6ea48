//! Discretized Ahlfors-David regular sets: weighted node clouds plus the
//! closed-form geometry used for exact distances where it exists.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{dist, point_box_dist2, AtBox, KdTree, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetKind {
    SegmentLine,
    LipschitzGraph,
    Circle,
    Sphere,
    CantorFourCorner,
}

impl SetKind {
    /// Intrinsic dimension n; the ambient space is R^{n+1}.
    pub fn dim(self) -> usize {
        match self {
            SetKind::Sphere => 2,
            _ => 1,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Construction parameters. Fields not used by a kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetParams {
    /// Segment/graph: x-extent of the window.
    #[serde(default = "one")]
    pub length: f64,
    /// Segment/graph: left end of the window.
    #[serde(default)]
    pub origin: f64,
    /// Segment/graph: measure distances to the untruncated set.
    #[serde(default)]
    pub unbounded: bool,
    #[serde(default = "one")]
    pub radius: f64,
    /// Graph slope magnitude.
    #[serde(default)]
    pub lipschitz: f64,
    /// Graph zigzag period.
    #[serde(default = "one")]
    pub period: f64,
    /// Cantor: IFS depth. Without it the depth is floor(log4(resolution)).
    #[serde(default)]
    pub depth: Option<u32>,
}

impl Default for SetParams {
    fn default() -> Self {
        SetParams {
            length: 1.0,
            origin: 0.0,
            unbounded: false,
            radius: 1.0,
            lipschitz: 0.0,
            period: 1.0,
            depth: None,
        }
    }
}

const CANTOR_SHIFTS: [[f64; 2]; 4] = [[0.0, 0.0], [0.75, 0.0], [0.0, 0.75], [0.75, 0.75]];

#[derive(Debug, Clone)]
pub struct BoundarySet {
    pub kind: SetKind,
    pub n: usize,
    pub params: SetParams,
    pub resolution: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub adr_constant: f64,
    /// `None` when the modelled set is unbounded.
    pub diameter: Option<f64>,
    /// Largest nearest-neighbour distance among nodes.
    pub spacing: f64,
    tree: KdTree,
    cantor_depth: u32,
    circle_k0: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdrReport {
    pub c_lower: f64,
    pub c_upper: f64,
    pub declared: f64,
    pub samples: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub pass: bool,
}

pub fn make_boundary_set(kind: SetKind, resolution: usize, params: &SetParams) -> Result<BoundarySet> {
    if resolution < 2 {
        return Err(Error::param("resolution", "must be at least 2"));
    }
    let p = params.clone();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut cantor_depth = 0;
    let mut circle_k0 = 0;
    let (adr_constant, diameter) = match kind {
        SetKind::SegmentLine => {
            check_pos("length", p.length)?;
            let h = p.length / resolution as f64;
            for i in 0..resolution {
                points.push([p.origin + (i as f64 + 0.5) * h, 0.0, 0.0]);
                weights.push(h);
            }
            (3.0, (!p.unbounded).then_some(p.length))
        }
        SetKind::LipschitzGraph => {
            check_pos("length", p.length)?;
            check_pos("period", p.period)?;
            if !(p.lipschitz >= 0.0) || !p.lipschitz.is_finite() {
                return Err(Error::param("lipschitz", "must be finite and >= 0"));
            }
            let h = p.length / resolution as f64;
            let w = h * (1.0 + p.lipschitz * p.lipschitz).sqrt();
            for i in 0..resolution {
                let x = p.origin + (i as f64 + 0.5) * h;
                points.push([x, zigzag(&p, x), 0.0]);
                weights.push(w);
            }
            let diam = if p.unbounded {
                None
            } else {
                let (a, b) = (p.origin, p.origin + p.length);
                let mut d: f64 = 0.0;
                let v = graph_vertices(&p, a, b);
                for u in &v {
                    for q in &v {
                        d = d.max(dist(u, q));
                    }
                }
                Some(d)
            };
            (3.0 * (1.0 + p.lipschitz * p.lipschitz).sqrt(), diam)
        }
        SetKind::Circle => {
            check_pos("radius", p.radius)?;
            let w = 2.0 * PI * p.radius / resolution as f64;
            for i in 0..resolution {
                let t = 2.0 * PI * (i as f64 + 0.5) / resolution as f64;
                points.push([p.radius * t.cos(), p.radius * t.sin(), 0.0]);
                weights.push(w);
            }
            circle_k0 = (1.0 / (2.0 * PI * p.radius)).log2().round() as i32;
            (3.0, Some(2.0 * p.radius))
        }
        SetKind::Sphere => {
            check_pos("radius", p.radius)?;
            // resolution counts nodes per great circle
            let count = ((resolution * resolution) as f64 / PI).round().max(2.0) as usize;
            let w = 4.0 * PI * p.radius * p.radius / count as f64;
            let golden = PI * (3.0 - 5f64.sqrt());
            for i in 0..count {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                points.push([
                    p.radius * rho * phi.cos(),
                    p.radius * rho * phi.sin(),
                    p.radius * z,
                ]);
                weights.push(w);
            }
            (4.0, Some(2.0 * p.radius))
        }
        SetKind::CantorFourCorner => {
            let depth = match p.depth {
                Some(d) => d,
                None => ((resolution as f64).ln() / 4f64.ln() + 1e-9).floor() as u32,
            };
            if depth == 0 || depth > 12 {
                return Err(Error::param("depth", "Cantor depth must be in 1..=12"));
            }
            cantor_depth = depth;
            let count = 1usize << (2 * depth);
            let w = 1.0 / count as f64;
            let side = w;
            for i in 0..count {
                let mut corner = [0.0, 0.0];
                let mut scale = 1.0;
                for level in 0..depth {
                    let digit = (i >> (2 * (depth - 1 - level))) & 3;
                    corner[0] += scale * CANTOR_SHIFTS[digit][0];
                    corner[1] += scale * CANTOR_SHIFTS[digit][1];
                    scale *= 0.25;
                }
                points.push([corner[0] + side / 2.0, corner[1] + side / 2.0, 0.0]);
                weights.push(w);
            }
            (6.0, Some(2f64.sqrt()))
        }
    };
    let tree = KdTree::new(&points);
    let spacing = max_nn_distance(&tree, &points);
    Ok(BoundarySet {
        kind,
        n: kind.dim(),
        params: p,
        resolution,
        points,
        weights,
        adr_constant,
        diameter,
        spacing,
        tree,
        cantor_depth,
        circle_k0,
    })
}

fn check_pos(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(field, "must be finite and > 0"))
    }
}

fn max_nn_distance(tree: &KdTree, points: &[Point]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        if let Some((_, d)) = tree.nearest_by(&crate::spatial::AtPoint(*p), f64::INFINITY, |j| j != i) {
            worst = worst.max(d);
        }
    }
    worst
}

fn zigzag(p: &SetParams, x: f64) -> f64 {
    let u = x / p.period;
    p.lipschitz * p.period * (u - u.round()).abs()
}

/// Kinks of the zigzag in [a, b] plus the two ends.
fn graph_vertices(p: &SetParams, a: f64, b: f64) -> Vec<Point> {
    let half = p.period / 2.0;
    let mut xs = vec![a];
    let mut m = (a / half).floor() + 1.0;
    while m * half < b {
        xs.push(m * half);
        m += 1.0;
    }
    xs.push(b);
    xs.iter().map(|&x| [x, zigzag(p, x), 0.0]).collect()
}

fn point_segment_dist(x: &Point, a: &Point, b: &Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let t = if len2 > 0.0 {
        (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1] + (x[2] - a[2]) * d[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(x, &[a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]])
}

/// Planar segment vs axis-aligned rectangle.
fn segment_box_dist(a: &Point, b: &Point, lo: &Point, hi: &Point) -> f64 {
    if segment_hits_box(a, b, lo, hi) {
        return 0.0;
    }
    let mut best = point_box_dist2(a, lo, hi).sqrt().min(point_box_dist2(b, lo, hi).sqrt());
    for c in [
        [lo[0], lo[1], 0.0],
        [hi[0], lo[1], 0.0],
        [lo[0], hi[1], 0.0],
        [hi[0], hi[1], 0.0],
    ] {
        best = best.min(point_segment_dist(&c, a, b));
    }
    best
}

// Liang-Barsky clip in the plane.
fn segment_hits_box(a: &Point, b: &Point, lo: &Point, hi: &Point) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for ax in 0..2 {
        let d = b[ax] - a[ax];
        if d == 0.0 {
            if a[ax] < lo[ax] || a[ax] > hi[ax] {
                return false;
            }
        } else {
            let mut ta = (lo[ax] - a[ax]) / d;
            let mut tb = (hi[ax] - a[ax]) / d;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.n + 1
    }

    pub fn total_measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn is_bounded(&self) -> bool {
        self.diameter.is_some()
    }

    /// Diameter of the truncated model, finite even for unbounded kinds.
    pub fn model_extent(&self) -> f64 {
        match self.diameter {
            Some(d) => d,
            None => {
                let v = graph_vertices(&self.params, self.params.origin, self.params.origin + self.params.length);
                let mut d: f64 = 0.0;
                for u in &v {
                    for q in &v {
                        d = d.max(dist(u, q));
                    }
                }
                d
            }
        }
    }

    /// Error bound of `delta` against the modelled set.
    pub fn delta_error(&self) -> f64 {
        match self.kind {
            SetKind::CantorFourCorner => 0.5 * 2f64.sqrt() * 0.25f64.powi(self.cantor_depth as i32),
            _ => 0.0,
        }
    }

    /// Diameter of the piece of E a single node stands for.
    pub fn node_extent(&self) -> f64 {
        match self.kind {
            SetKind::SegmentLine | SetKind::LipschitzGraph | SetKind::Circle => self.weights[0],
            SetKind::Sphere => self.spacing,
            SetKind::CantorFourCorner => 2f64.sqrt() * 0.25f64.powi(self.cantor_depth as i32),
        }
    }

    pub fn cantor_depth(&self) -> u32 {
        self.cantor_depth
    }

    /// Σ weights of nodes in the open ball B(center, radius).
    pub fn sigma_ball(&self, center: &Point, radius: f64) -> f64 {
        let mut s = 0.0;
        self.tree.within(center, radius, |i, _| s += self.weights[i]);
        s
    }

    pub fn delta(&self, x: &Point) -> f64 {
        let p = &self.params;
        match self.kind {
            SetKind::SegmentLine => {
                let dy = (x[1] * x[1] + x[2] * x[2]).sqrt();
                if p.unbounded {
                    return dy;
                }
                let a = p.origin;
                let b = p.origin + p.length;
                let dx = if x[0] < a {
                    a - x[0]
                } else if x[0] > b {
                    x[0] - b
                } else {
                    0.0
                };
                (dx * dx + dy * dy).sqrt()
            }
            SetKind::LipschitzGraph => self.graph_dist(x, None),
            SetKind::Circle => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                ((r - p.radius).powi(2) + x[2] * x[2]).sqrt()
            }
            SetKind::Sphere => {
                let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                (r - p.radius).abs()
            }
            SetKind::CantorFourCorner => self.tree.nearest(x).map(|(_, d)| d).unwrap_or(f64::INFINITY),
        }
    }

    /// x-range of the graph that may hold the nearest point.
    fn graph_range(&self, xlo: f64, xhi: f64, reach: f64) -> (f64, f64) {
        let p = &self.params;
        let (mut a, mut b) = (xlo - reach, xhi + reach);
        if !p.unbounded {
            a = a.max(p.origin);
            b = b.min(p.origin + p.length);
        }
        (a, b)
    }

    fn graph_dist(&self, x: &Point, bbox: Option<(&Point, &Point)>) -> f64 {
        let p = &self.params;
        // an upper bound from a single graph point fixes the search window
        let (cx, lo_x, hi_x) = match bbox {
            Some((lo, hi)) => (0.5 * (lo[0] + hi[0]), lo[0], hi[0]),
            None => (x[0], x[0], x[0]),
        };
        let mut gx = cx;
        if !p.unbounded {
            gx = gx.clamp(p.origin, p.origin + p.length);
        }
        let g = [gx, zigzag(p, gx), 0.0];
        let upper = match bbox {
            Some((lo, hi)) => point_box_dist2(&g, lo, hi).sqrt(),
            None => dist(x, &g),
        };
        let (a, b) = self.graph_range(lo_x, hi_x, upper);
        if a > b {
            return upper;
        }
        let v = graph_vertices(p, a, b);
        let mut best = upper;
        for w in v.windows(2) {
            let d = match bbox {
                Some((lo, hi)) => segment_box_dist(&w[0], &w[1], lo, hi),
                None => point_segment_dist(x, &w[0], &w[1]),
            };
            best = best.min(d);
        }
        best
    }

    /// Distance from the set to the closed box [lo, hi].
    pub fn dist_to_box(&self, lo: &Point, hi: &Point) -> f64 {
        let p = &self.params;
        match self.kind {
            SetKind::SegmentLine => {
                let gap = |l: f64, h: f64, a: f64, b: f64| {
                    if h < a {
                        a - h
                    } else if l > b {
                        l - b
                    } else {
                        0.0
                    }
                };
                let dy = gap(lo[1], hi[1], 0.0, 0.0);
                let dz = gap(lo[2], hi[2], 0.0, 0.0);
                let dx = if p.unbounded {
                    0.0
                } else {
                    gap(lo[0], hi[0], p.origin, p.origin + p.length)
                };
                (dx * dx + dy * dy + dz * dz).sqrt()
            }
            SetKind::LipschitzGraph => self.graph_dist(&[0.0; 3], Some((lo, hi))),
            SetKind::Circle => {
                // torus-free: circle in the plane z = 0
                let lo2 = [lo[0], lo[1], 0.0];
                let hi2 = [hi[0], hi[1], 0.0];
                let dz = if lo[2] > 0.0 {
                    lo[2]
                } else if hi[2] < 0.0 {
                    -hi[2]
                } else {
                    0.0
                };
                let d = radial_gap(&lo2, &hi2, p.radius);
                (d * d + dz * dz).sqrt()
            }
            SetKind::Sphere => radial_gap(lo, hi, p.radius),
            SetKind::CantorFourCorner => self
                .tree
                .nearest_by(&AtBox { lo: *lo, hi: *hi }, f64::INFINITY, |_| true)
                .map(|(_, d)| d)
                .unwrap_or(f64::INFINITY),
        }
    }

    /// Natural cell key of a node at level k, for kinds with an explicit
    /// dyadic structure. `None` for the sphere.
    pub fn natural_cell(&self, node: usize, k: i32) -> Option<i64> {
        let x = &self.points[node];
        match self.kind {
            SetKind::SegmentLine | SetKind::LipschitzGraph => Some((x[0] * 2f64.powi(k)).floor() as i64),
            SetKind::Circle => {
                let mut t = x[1].atan2(x[0]);
                if t < 0.0 {
                    t += 2.0 * PI;
                }
                let rel = k - self.circle_k0;
                if rel <= 0 {
                    Some(0)
                } else {
                    Some(((t / (2.0 * PI)) * 2f64.powi(rel)).floor() as i64)
                }
            }
            SetKind::CantorFourCorner => {
                let m = ((k.max(0) + 1) / 2) as u32;
                let d = self.cantor_depth;
                if m > d {
                    None
                } else {
                    Some((node >> (2 * (d - m))) as i64)
                }
            }
            SetKind::Sphere => None,
        }
    }

    /// Finest level at which `natural_cell` is defined for every node.
    pub fn natural_max_level(&self) -> Option<i32> {
        match self.kind {
            SetKind::Sphere => None,
            SetKind::CantorFourCorner => Some(2 * self.cantor_depth as i32),
            _ => Some(i32::MAX),
        }
    }

    pub fn verify_adr(&self, sample_count: usize, seed: u64) -> Result<AdrReport> {
        if self.len() < 2 {
            return Err(Error::param("set", "ADR check needs at least 2 nodes"));
        }
        if sample_count == 0 {
            return Err(Error::param("sample_count", "must be >= 1"));
        }
        let r_min = 8.0 * self.spacing;
        let r_max = match self.diameter {
            Some(d) => d / 2.0,
            None => self.params.length / 4.0,
        };
        if !(r_min < r_max) {
            return Err(Error::TooCoarse {
                level: 0,
                reason: format!("no radii between 8*spacing = {r_min:e} and {r_max:e}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lnlo, lnhi) = (r_min.ln(), r_max.ln());
        let mut c_lower = f64::INFINITY;
        let mut c_upper: f64 = 0.0;
        let mut taken = 0;
        let mut attempts = 0;
        while taken < sample_count && attempts < 100 * sample_count {
            attempts += 1;
            let i = rng.random_range(0..self.len());
            let r = (lnlo + (lnhi - lnlo) * rng.random::<f64>()).exp();
            let x = self.points[i];
            // unbounded models: keep the ball inside the truncation window
            if self.diameter.is_none()
                && (x[0] - r < self.params.origin || x[0] + r > self.params.origin + self.params.length)
            {
                continue;
            }
            let ratio = self.sigma_ball(&x, r) / r.powi(self.n as i32);
            c_lower = c_lower.min(ratio);
            c_upper = c_upper.max(ratio);
            taken += 1;
        }
        if taken == 0 {
            return Err(Error::param("set", "no admissible ADR samples"));
        }
        Ok(AdrReport {
            c_lower,
            c_upper,
            declared: self.adr_constant,
            samples: taken,
            r_min,
            r_max,
            pass: c_upper.max(1.0 / c_lower) <= self.adr_constant,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let dim = self.ambient_dim();
        let nodes: Vec<serde_json::Value> = self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| serde_json::json!([p[..dim].to_vec(), w]))
            .collect();
        serde_json::json!({
            "kind": self.kind,
            "n": self.n,
            "params": self.params,
            "nodes": nodes,
        })
    }
}

/// Gap between a box and the sphere |X| = r (any ambient dimension <= 3).
fn radial_gap(lo: &Point, hi: &Point, r: f64) -> f64 {
    let near = point_box_dist2(&[0.0; 3], lo, hi).sqrt();
    let mut far2 = 0.0;
    for a in 0..3 {
        let m = lo[a].abs().max(hi[a].abs());
        far2 += m * m;
    }
    let far = far2.sqrt();
    if near > r {
        near - r
    } else if far < r {
        r - far
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(n: usize) -> BoundarySet {
        make_boundary_set(SetKind::SegmentLine, n, &SetParams::default()).unwrap()
    }

    #[test]
    fn total_weights() {
        assert!((seg(1024).total_measure() - 1.0).abs() < 1e-12);
        let c = make_boundary_set(SetKind::Circle, 4096, &SetParams::default()).unwrap();
        assert!((c.total_measure() - 2.0 * PI).abs() < 1e-9);
        let k = make_boundary_set(
            SetKind::CantorFourCorner,
            2,
            &SetParams {
                depth: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(k.len(), 1024);
        assert!(k.weights.iter().all(|&w| w == 0.25f64.powi(5)));
    }

    #[test]
    fn cantor_nodes_follow_the_ifs() {
        // every depth-d node is f_a(node of depth d-1 set) for some map
        let p = |d| SetParams {
            depth: Some(d),
            ..Default::default()
        };
        let coarse = make_boundary_set(SetKind::CantorFourCorner, 2, &p(3)).unwrap();
        let fine = make_boundary_set(SetKind::CantorFourCorner, 2, &p(4)).unwrap();
        for (a, s) in CANTOR_SHIFTS.iter().enumerate() {
            for (i, q) in coarse.points.iter().enumerate() {
                let img = [q[0] / 4.0 + s[0], q[1] / 4.0 + s[1], 0.0];
                let j = a * coarse.len() + i;
                assert!(dist(&img, &fine.points[j]) < 1e-14);
            }
        }
        assert!((fine.spacing - 3.0 * 0.25f64.powi(4)).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_params() {
        let bad = SetParams {
            lipschitz: -1.0,
            ..Default::default()
        };
        assert!(make_boundary_set(SetKind::LipschitzGraph, 64, &bad).is_err());
        let bad = SetParams {
            radius: 0.0,
            ..Default::default()
        };
        assert!(make_boundary_set(SetKind::Circle, 64, &bad).is_err());
        assert!(make_boundary_set(SetKind::Circle, 1, &SetParams::default()).is_err());
    }

    #[test]
    fn sigma_ball_examples() {
        let s = seg(4096);
        let v = s.sigma_ball(&s.points[2048], 0.1);
        assert!((v - 0.2).abs() <= 1.0 / 4096.0);
        let c = make_boundary_set(SetKind::Circle, 4096, &SetParams::default()).unwrap();
        let v = c.sigma_ball(&c.points[7], 1.0);
        assert!((v - 2.0 * PI / 3.0).abs() <= 2.0 * PI / 4096.0);
        // below the node spacing only the centre counts
        assert_eq!(s.sigma_ball(&s.points[5], 0.5 / 4096.0), s.weights[5]);
        // whole set
        assert!((c.sigma_ball(&c.points[0], 2.0 + 1e-9) - c.total_measure()).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        let line = make_boundary_set(
            SetKind::SegmentLine,
            64,
            &SetParams {
                unbounded: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(line.delta(&[0.3, 0.7, 0.0]), 0.7);
        assert_eq!(seg(64).delta(&[2.0, 0.0, 0.0]), 1.0);
        let c = make_boundary_set(SetKind::Circle, 64, &SetParams::default()).unwrap();
        assert_eq!(c.delta(&[2.0, 0.0, 0.0]), 1.0);
        for p in &c.points {
            assert!(c.delta(p) < 1e-15);
        }
        let sp = make_boundary_set(SetKind::Sphere, 64, &SetParams::default()).unwrap();
        assert!((sp.delta(&[0.0, 0.0, 0.25]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn graph_distance_matches_dense_polyline() {
        let p = SetParams {
            lipschitz: 1.5,
            period: 0.25,
            ..Default::default()
        };
        let g = make_boundary_set(SetKind::LipschitzGraph, 256, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dense: Vec<Point> = (0..=200_000)
            .map(|i| {
                let x = i as f64 / 200_000.0;
                [x, zigzag(&p, x), 0.0]
            })
            .collect();
        for _ in 0..50 {
            let x = [rng.random_range(-0.3..1.3), rng.random_range(-0.5..0.8), 0.0];
            let brute = dense.iter().map(|q| dist(q, &x)).fold(f64::INFINITY, f64::min);
            assert!((g.delta(&x) - brute).abs() < 2e-5, "{x:?}");
        }
    }

    #[test]
    fn box_distances_match_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kinds = [
            (SetKind::SegmentLine, SetParams::default()),
            (
                SetKind::LipschitzGraph,
                SetParams {
                    lipschitz: 1.0,
                    period: 0.5,
                    ..Default::default()
                },
            ),
            (SetKind::Circle, SetParams::default()),
        ];
        for (kind, p) in kinds {
            let s = make_boundary_set(kind, 128, &p).unwrap();
            for _ in 0..40 {
                let lo = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0];
                let side = rng.random_range(0.01..0.5);
                let hi = [lo[0] + side, lo[1] + side, 0.0];
                let exact = s.dist_to_box(&lo, &hi);
                let mut sampled = f64::INFINITY;
                for a in 0..=60 {
                    for b in 0..=60 {
                        let x = [lo[0] + side * a as f64 / 60.0, lo[1] + side * b as f64 / 60.0, 0.0];
                        sampled = sampled.min(s.delta(&x));
                    }
                }
                assert!(exact <= sampled + 1e-12, "{kind:?}");
                assert!(sampled - exact <= side / 60.0 * 2f64.sqrt(), "{kind:?}");
            }
        }
    }

    #[test]
    fn delta_is_one_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sets = [
            make_boundary_set(SetKind::Circle, 256, &SetParams::default()).unwrap(),
            make_boundary_set(SetKind::CantorFourCorner, 256, &SetParams::default()).unwrap(),
            make_boundary_set(SetKind::Sphere, 64, &SetParams::default()).unwrap(),
        ];
        for s in &sets {
            for _ in 0..500 {
                let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0];
                let b = [a[0] + rng.random_range(-0.1..0.1), a[1] + rng.random_range(-0.1..0.1), 0.0];
                let slack = 2.0 * s.delta_error();
                assert!((s.delta(&a) - s.delta(&b)).abs() <= dist(&a, &b) + slack + 1e-14);
            }
        }
    }

    #[test]
    fn adr_line_and_circle() {
        let line = make_boundary_set(
            SetKind::SegmentLine,
            8192,
            &SetParams {
                unbounded: true,
                ..Default::default()
            },
        )
        .unwrap();
        let r = line.verify_adr(500, 4).unwrap();
        // counting error is at most one node: h / 2r <= 1/16 at r = 8h
        assert!((r.c_lower - 2.0).abs() <= 2.0 / 16.0 && (r.c_upper - 2.0).abs() <= 2.0 / 16.0);
        assert!(r.pass);
        let c = make_boundary_set(SetKind::Circle, 4096, &SetParams::default()).unwrap();
        let r = c.verify_adr(500, 4).unwrap();
        let tol = 1.0 / 16.0 * 2.0;
        assert!(r.c_lower >= 2.0 - tol && r.c_upper <= PI + tol, "{r:?}");
        assert!(r.pass);
    }

    #[test]
    fn adr_passes_for_all_kinds() {
        let graph = SetParams {
            lipschitz: 1.0,
            period: 0.25,
            ..Default::default()
        };
        for res in [64usize, 256, 1024] {
            for (kind, p) in [
                (SetKind::SegmentLine, SetParams::default()),
                (SetKind::LipschitzGraph, graph.clone()),
                (SetKind::Circle, SetParams::default()),
                (SetKind::Sphere, SetParams::default()),
                (SetKind::CantorFourCorner, SetParams::default()),
            ] {
                let s = make_boundary_set(kind, res, &p).unwrap();
                let r = s.verify_adr(300, 11).unwrap();
                assert!(r.pass, "{kind:?} at {res}: {r:?}");
            }
        }
    }

    #[test]
    fn natural_cells_of_segment_are_dyadic() {
        let s = seg(4096);
        let i = (0.3 * 4096.0) as usize;
        assert_eq!(s.natural_cell(i, 1), Some(0));
        assert_eq!(s.natural_cell(i, 2), Some(1));
    }

    #[test]
    fn json_layout() {
        let v = seg(4).to_json();
        assert_eq!(v["kind"], "segment-line");
        assert_eq!(v["nodes"].as_array().unwrap().len(), 4);
        assert_eq!(v["nodes"][0][0].as_array().unwrap().len(), 2);
    }
}
