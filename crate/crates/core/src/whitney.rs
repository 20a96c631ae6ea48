//! Dyadic Whitney boxes of a truncated complement, the box collections
//! attached to surface cubes, and the cones built from them.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic::DyadicGrid;
use crate::error::{Error, Result};
use crate::geometry::BoundarySet;
use crate::par;
use crate::spatial::{point_box_dist2, AtBox, KdTree, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: Point,
    pub hi: Point,
}

impl Window {
    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WhitneyBox {
    pub corner: Point,
    pub side: f64,
    pub level: i32,
    /// dist(I, E)
    pub dist: f64,
    /// dist(4I, E)
    pub dist4: f64,
}

impl WhitneyBox {
    pub fn hi(&self, dim: usize) -> Point {
        let mut h = self.corner;
        for v in h.iter_mut().take(dim) {
            *v += self.side;
        }
        h
    }

    pub fn center(&self, dim: usize) -> Point {
        let mut c = self.corner;
        for v in c.iter_mut().take(dim) {
            *v += 0.5 * self.side;
        }
        c
    }

    pub fn diam(&self, dim: usize) -> f64 {
        self.side * (dim as f64).sqrt()
    }

    pub fn volume(&self, dim: usize) -> f64 {
        self.side.powi(dim as i32)
    }
}

#[derive(Debug, Clone)]
pub struct WhitneyDecomposition {
    pub dim: usize,
    pub window: Window,
    pub k_min: i32,
    pub k_max: i32,
    pub boxes: Vec<WhitneyBox>,
    pub by_level: Vec<Vec<usize>>,
    /// Every window point with δ above this lies in some box.
    pub floor_scale: f64,
    /// Each box is sampled on a 2^refine grid per axis.
    pub refine: u32,
    trees: Vec<KdTree>,
}

fn dilate(lo: &Point, side: f64, dim: usize, factor: f64) -> (Point, Point) {
    let mut a = *lo;
    let mut b = *lo;
    let grow = 0.5 * (factor - 1.0) * side;
    for i in 0..dim {
        a[i] = lo[i] - grow;
        b[i] = lo[i] + side + grow;
    }
    (a, b)
}

pub fn build_whitney(set: &BoundarySet, window: Window, k_min: i32, k_max: i32) -> Result<WhitneyDecomposition> {
    let dim = set.ambient_dim();
    if k_min > k_max {
        return Err(Error::param("whitney.k_min", "must not exceed k_max"));
    }
    let top = 2f64.powi(-k_min);
    let mut counts = [1usize; 3];
    for a in 0..dim {
        let lo = window.lo[a] / top;
        let hi = window.hi[a] / top;
        if (lo - lo.round()).abs() > 1e-9 || (hi - hi.round()).abs() > 1e-9 || hi <= lo {
            return Err(Error::param(
                "whitney.window",
                format!("axis {a} must be a nonempty range aligned to 2^-{k_min}"),
            ));
        }
        counts[a] = (hi.round() - lo.round()) as usize;
    }
    let finest = 2f64.powi(-k_max);
    if finest < 8.0 * set.delta_error() {
        return Err(Error::TooCoarse {
            level: k_max,
            reason: format!("2^-{k_max} is below 8 x distance-field error {:e}", set.delta_error()),
        });
    }
    let mut roots = Vec::new();
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for l in 0..counts[2] {
                let mut c = [0.0; 3];
                let idx = [i, j, l];
                for a in 0..dim {
                    c[a] = window.lo[a] + idx[a] as f64 * top;
                }
                roots.push(c);
            }
        }
    }
    let found: Vec<Result<Vec<WhitneyBox>>> = par::map_slice(&roots, |c| subdivide(set, *c, k_min, k_max, dim));
    let mut boxes = Vec::new();
    for f in found {
        boxes.extend(f?);
    }
    if boxes.is_empty() {
        return Err(Error::EmptyDecomposition(format!(
            "no box in the window clears the band above level {k_max}"
        )));
    }
    boxes.sort_by(|a, b| {
        a.level
            .cmp(&b.level)
            .then(a.corner[0].total_cmp(&b.corner[0]))
            .then(a.corner[1].total_cmp(&b.corner[1]))
            .then(a.corner[2].total_cmp(&b.corner[2]))
    });
    let mut by_level = vec![Vec::new(); (k_max - k_min + 1) as usize];
    for (i, b) in boxes.iter().enumerate() {
        by_level[(b.level - k_min) as usize].push(i);
    }
    let trees = by_level
        .iter()
        .map(|ids| {
            let pts: Vec<Point> = ids.iter().map(|&i| boxes[i].center(dim)).collect();
            KdTree::new(&pts)
        })
        .collect();
    let floor_scale = 8.0 * finest * (dim as f64).sqrt();
    log::debug!("whitney: {} boxes on levels {k_min}..={k_max}", boxes.len());
    Ok(WhitneyDecomposition {
        dim,
        window,
        k_min,
        k_max,
        boxes,
        by_level,
        floor_scale,
        refine: 0,
        trees,
    })
}

fn subdivide(set: &BoundarySet, corner: Point, k: i32, k_max: i32, dim: usize) -> Result<Vec<WhitneyBox>> {
    let mut out = Vec::new();
    let mut stack = vec![(corner, k)];
    while let Some((c, k)) = stack.pop() {
        let side = 2f64.powi(-k);
        let diam = side * (dim as f64).sqrt();
        let (lo4, hi4) = dilate(&c, side, dim, 4.0);
        let dist4 = set.dist_to_box(&lo4, &hi4);
        if dist4 >= 4.0 * diam {
            let (lo, hi) = dilate(&c, side, dim, 1.0);
            let dist = set.dist_to_box(&lo, &hi);
            if dist > 40.0 * diam {
                return Err(Error::param(
                    "whitney.k_min",
                    format!("box at {c:?} (level {k}) is farther than 40 diam from the set; raise k_min or shrink the window"),
                ));
            }
            out.push(WhitneyBox {
                corner: c,
                side,
                level: k,
                dist,
                dist4,
            });
        } else if k < k_max {
            let h = side / 2.0;
            for mask in 0..(1usize << dim) {
                let mut cc = c;
                for a in 0..dim {
                    if mask >> a & 1 == 1 {
                        cc[a] += h;
                    }
                }
                stack.push((cc, k + 1));
            }
        }
    }
    Ok(out)
}

fn closures_touch(a: &WhitneyBox, b: &WhitneyBox, dim: usize) -> bool {
    let (ah, bh) = (a.hi(dim), b.hi(dim));
    (0..dim).all(|i| a.corner[i] <= bh[i] && b.corner[i] <= ah[i])
}

fn interiors_overlap(a: &WhitneyBox, b: &WhitneyBox, dim: usize) -> bool {
    let (ah, bh) = (a.hi(dim), b.hi(dim));
    (0..dim).all(|i| a.corner[i] < bh[i] && b.corner[i] < ah[i])
}

#[derive(Debug, Clone, Serialize)]
pub struct WhitneyReport {
    pub boxes: usize,
    pub band_violations: usize,
    pub touching_pairs: usize,
    pub ratio_violations: usize,
    pub min_touch_ratio: f64,
    pub max_touch_ratio: f64,
    pub overlaps: usize,
    pub coverage_samples: usize,
    pub uncovered: usize,
    pub pass: bool,
}

impl WhitneyDecomposition {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level(&self, k: i32) -> &[usize] {
        if k < self.k_min || k > self.k_max {
            return &[];
        }
        &self.by_level[(k - self.k_min) as usize]
    }

    /// Returns a copy that samples each box on `2^refine` points per axis.
    pub fn with_refine(mut self, refine: u32) -> Self {
        self.refine = refine;
        self
    }

    /// Quadrature nodes of a box: sub-box centres with equal volume weights.
    pub fn quad_points(&self, b: usize) -> Vec<(Point, f64)> {
        let bx = &self.boxes[b];
        let per = 1usize << self.refine;
        let h = bx.side / per as f64;
        let vol = h.powi(self.dim as i32);
        let total = per.pow(self.dim as u32);
        (0..total)
            .map(|mut t| {
                let mut p = bx.corner;
                for a in 0..self.dim {
                    let i = t % per;
                    t /= per;
                    p[a] += (i as f64 + 0.5) * h;
                }
                (p, vol)
            })
            .collect()
    }

    pub fn points_per_box(&self) -> usize {
        (1usize << self.refine).pow(self.dim as u32)
    }

    /// Boxes whose centre at level `k` lies within `r` of `p`.
    pub fn centers_within(&self, k: i32, p: &Point, r: f64, mut visit: impl FnMut(usize)) {
        if k < self.k_min || k > self.k_max {
            return;
        }
        let li = (k - self.k_min) as usize;
        let ids = &self.by_level[li];
        self.trees[li].within(p, r, |i, _| visit(ids[i]));
    }

    /// Box containing `p`, if any.
    pub fn find(&self, p: &Point) -> Option<usize> {
        for k in self.k_min..=self.k_max {
            let li = (k - self.k_min) as usize;
            if let Some((i, _)) = self.trees[li].nearest(p) {
                let b = self.by_level[li][i];
                let bx = &self.boxes[b];
                if point_box_dist2(p, &bx.corner, &bx.hi(self.dim)) == 0.0 {
                    return Some(b);
                }
            }
        }
        None
    }

    /// Boxes whose closure meets the closure of box `b`, excluding `b`.
    pub fn touching(&self, b: usize) -> Vec<usize> {
        let bx = &self.boxes[b];
        let c = bx.center(self.dim);
        let mut out = Vec::new();
        for k in self.k_min..=self.k_max {
            let s = 2f64.powi(-k);
            let r = 0.5 * (bx.side + s) * (self.dim as f64).sqrt() * (1.0 + 1e-12);
            self.centers_within(k, &c, r, |o| {
                if o != b && closures_touch(bx, &self.boxes[o], self.dim) {
                    out.push(o);
                }
            });
        }
        out.sort_unstable();
        out
    }

    pub fn verify(&self, set: &BoundarySet, coverage_samples: usize, seed: u64) -> WhitneyReport {
        let dim = self.dim;
        let band_violations = self
            .boxes
            .iter()
            .filter(|b| {
                let d = b.diam(dim);
                !(4.0 * d <= b.dist4 && b.dist4 <= b.dist && b.dist <= 40.0 * d)
            })
            .count();
        let per_box: Vec<(usize, usize, usize, f64, f64)> = par::map_range(self.boxes.len(), |b| {
            let mut pairs = 0;
            let mut bad = 0;
            let mut overlap = 0;
            let mut lo = f64::INFINITY;
            let mut hi: f64 = 0.0;
            for o in self.touching(b) {
                if o < b {
                    continue;
                }
                pairs += 1;
                let r = self.boxes[o].side / self.boxes[b].side;
                lo = lo.min(r.min(1.0 / r));
                hi = hi.max(r.max(1.0 / r));
                if !(0.25..=4.0).contains(&r) {
                    bad += 1;
                }
                if interiors_overlap(&self.boxes[b], &self.boxes[o], dim) {
                    overlap += 1;
                }
            }
            (pairs, bad, overlap, lo, hi)
        });
        let mut touching_pairs = 0;
        let mut ratio_violations = 0;
        let mut overlaps = 0;
        let mut min_r = f64::INFINITY;
        let mut max_r: f64 = 0.0;
        for (p, b, o, lo, hi) in per_box {
            touching_pairs += p;
            ratio_violations += b;
            overlaps += o;
            min_r = min_r.min(lo);
            max_r = max_r.max(hi);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken = 0;
        let mut uncovered = 0;
        let mut tries = 0;
        while taken < coverage_samples && tries < 50 * coverage_samples.max(1) {
            tries += 1;
            let mut p = [0.0; 3];
            for a in 0..dim {
                p[a] = rng.random_range(self.window.lo[a]..self.window.hi[a]);
            }
            if set.delta(&p) <= self.floor_scale {
                continue;
            }
            taken += 1;
            if self.find(&p).is_none() {
                uncovered += 1;
            }
        }
        WhitneyReport {
            boxes: self.boxes.len(),
            band_violations,
            touching_pairs,
            ratio_violations,
            min_touch_ratio: if min_r.is_finite() { min_r } else { 1.0 },
            max_touch_ratio: if touching_pairs > 0 { max_r } else { 1.0 },
            overlaps,
            coverage_samples: taken,
            uncovered,
            pass: band_violations == 0 && ratio_violations == 0 && overlaps == 0 && uncovered == 0,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let d = self.dim;
        let boxes: Vec<serde_json::Value> = self
            .boxes
            .iter()
            .map(|b| serde_json::json!({"corner": b.corner[..d].to_vec(), "side": b.side, "dist": b.dist}))
            .collect();
        serde_json::json!({
            "window": {"lo": self.window.lo[..d].to_vec(), "hi": self.window.hi[..d].to_vec()},
            "k_min": self.k_min,
            "k_max": self.k_max,
            "boxes": boxes,
        })
    }
}

/// dist(Q, I) between the node set of a cube and a closed box, if at most `bound`.
fn cube_box_dist(set: &BoundarySet, grid: &DyadicGrid, q: usize, lo: &Point, hi: &Point, bound: f64) -> Option<f64> {
    set.tree()
        .nearest_by(&AtBox { lo: *lo, hi: *hi }, bound, |j| grid.node_in(j, q))
        .map(|(_, d)| d)
}

/// 𝒞_{Q,β}: boxes with ℓ(I)/8 ≤ ℓ(Q) ≤ 8ℓ(I) and dist(Q, I) ≤ βℓ(Q).
pub fn collection_cq(
    whit: &WhitneyDecomposition,
    grid: &DyadicGrid,
    set: &BoundarySet,
    q: usize,
    beta: f64,
) -> Vec<usize> {
    let cube = &grid.cubes[q];
    let reach = beta * cube.length;
    let c = set.points[cube.center];
    let rad = grid.radius(set, q);
    let mut out = Vec::new();
    for k in (cube.level - 3)..=(cube.level + 3) {
        let s = 2f64.powi(-k);
        let r = reach + rad + 0.5 * s * (whit.dim as f64).sqrt();
        whit.centers_within(k, &c, r * (1.0 + 1e-12), |b| {
            let bx = &whit.boxes[b];
            if cube_box_dist(set, grid, q, &bx.corner, &bx.hi(whit.dim), reach).is_some() {
                out.push(b);
            }
        });
    }
    out.sort_unstable();
    out
}

/// Smallest β/ℓ(Q) at which the collection of `q` becomes nonempty.
fn beta_needed(whit: &WhitneyDecomposition, grid: &DyadicGrid, set: &BoundarySet, q: usize) -> Option<f64> {
    let cube = &grid.cubes[q];
    let c = set.points[cube.center];
    let rad = grid.radius(set, q);
    let mut b = 0.25;
    while b <= 4096.0 {
        let reach = b * cube.length;
        let mut best: Option<f64> = None;
        for k in (cube.level - 3)..=(cube.level + 3) {
            let s = 2f64.powi(-k);
            let r = reach + rad + 0.5 * s * (whit.dim as f64).sqrt();
            whit.centers_within(k, &c, r * (1.0 + 1e-12), |i| {
                let bx = &whit.boxes[i];
                if let Some(d) = cube_box_dist(set, grid, q, &bx.corner, &bx.hi(whit.dim), reach) {
                    best = Some(best.map_or(d, |x: f64| x.min(d)));
                }
            });
        }
        if let Some(d) = best {
            return Some(d / cube.length);
        }
        b *= 2.0;
    }
    None
}

/// 𝒞_Q for every admissible cube at a fixed aperture.
#[derive(Debug, Clone)]
pub struct Collections {
    pub beta: f64,
    /// Whether β was measured (true) or taken from configuration.
    pub beta_measured: bool,
    pub admissible: Vec<bool>,
    pub per_cube: Vec<Vec<usize>>,
}

impl Collections {
    /// Builds 𝒞_Q for cubes whose nodes all lie in `analysis` (all cubes
    /// if `None`). With `beta = None`, β* is the smallest power of two
    /// giving every admissible cube a nonempty collection.
    pub fn build(
        whit: &WhitneyDecomposition,
        grid: &DyadicGrid,
        set: &BoundarySet,
        beta: Option<f64>,
        analysis: Option<&Window>,
    ) -> Result<Self> {
        let admissible: Vec<bool> = grid
            .cubes
            .iter()
            .map(|q| analysis.is_none_or(|w| q.members.iter().all(|&m| w.contains(&set.points[m]))))
            .collect();
        let ids: Vec<usize> = (0..grid.cubes.len()).filter(|&q| admissible[q]).collect();
        if ids.is_empty() {
            return Err(Error::param("analysis_window", "no grid cube lies inside the analysis window"));
        }
        let (beta, measured) = match beta {
            Some(b) if b > 0.0 => (b, false),
            Some(_) => return Err(Error::param("whitney.beta", "must be > 0")),
            None => {
                let need = par::map_slice(&ids, |&q| beta_needed(whit, grid, set, q));
                let mut worst: f64 = 0.0;
                for (q, n) in ids.iter().zip(need) {
                    match n {
                        Some(v) => worst = worst.max(v),
                        None => {
                            return Err(Error::param(
                                "whitney.window",
                                format!("cube {q} has no Whitney box within 4096 side lengths"),
                            ))
                        }
                    }
                }
                (2f64.powi(worst.max(2f64.powi(-4)).log2().ceil() as i32), true)
            }
        };
        let lists = par::map_slice(&ids, |&q| collection_cq(whit, grid, set, q, beta));
        let mut per_cube = vec![Vec::new(); grid.cubes.len()];
        for (q, l) in ids.into_iter().zip(lists) {
            per_cube[q] = l;
        }
        Ok(Collections {
            beta,
            beta_measured: measured,
            admissible,
            per_cube,
        })
    }

    pub fn admissible_cubes(&self) -> impl Iterator<Item = usize> + '_ {
        self.admissible.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConeKind {
    Gamma,
    GammaTruncated(f64),
    GammaQ,
    GammaQEps(f64),
    SawtoothGammaQ,
    SawtoothGammaQEps(f64),
    TQ,
}

#[derive(Debug, Clone, Copy)]
pub struct ConeSpec<'a> {
    pub kind: ConeKind,
    pub root: Option<usize>,
    /// Stopping cubes for the sawtooth kinds.
    pub stops: Option<&'a [usize]>,
}

/// Boxes of a cone, listed once per contributing cube, so a box shared by
/// two Whitney regions is counted in each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeRegion {
    pub kind: ConeKind,
    pub beta: f64,
    pub cubes: Vec<usize>,
    pub boxes: Vec<usize>,
}

impl ConeRegion {
    pub fn box_set(&self) -> BTreeSet<usize> {
        self.boxes.iter().copied().collect()
    }
}

/// Whether `q` lies in Good(root) for the stopping cubes `stops`: not
/// contained in any of them.
pub fn is_good(grid: &DyadicGrid, q: usize, root: usize, stops: &[usize]) -> bool {
    let mut c = Some(q);
    while let Some(id) = c {
        if stops.contains(&id) {
            return false;
        }
        if id == root {
            return true;
        }
        c = grid.cubes[id].parent;
    }
    false
}

fn eps_ok(eps: f64, l: f64) -> bool {
    eps < l && l < 1.0 / eps
}

/// Cubes Q′ whose Whitney regions make up the cone at `x`.
pub fn cone_cubes(grid: &DyadicGrid, x: usize, spec: &ConeSpec) -> Result<Vec<usize>> {
    let needs_root = !matches!(spec.kind, ConeKind::Gamma | ConeKind::GammaTruncated(_));
    let root = if needs_root {
        let r = spec
            .root
            .ok_or_else(|| Error::param("cone.root", "this cone kind needs a root cube"))?;
        grid.cube(r)?;
        Some(r)
    } else {
        None
    };
    match spec.kind {
        ConeKind::GammaTruncated(e) | ConeKind::GammaQEps(e) | ConeKind::SawtoothGammaQEps(e) if !(e > 0.0) => {
            return Err(Error::param("cone.eps", "must be > 0"));
        }
        _ => {}
    }
    if let ConeKind::TQ = spec.kind {
        let r = root.unwrap_or(0);
        return grid.descendants(r, |_| true);
    }
    grid.locate(x, grid.k_min)?;
    if let Some(r) = root {
        if !grid.node_in(x, r) {
            return Err(Error::NotInCube { point: x, cube: r });
        }
    }
    let lo = root.map_or(grid.k_min, |r| grid.cubes[r].level);
    let mut out = Vec::new();
    for k in lo..=grid.k_max {
        let q = grid.cube_at(x, k);
        let l = grid.cubes[q].length;
        let keep = match spec.kind {
            ConeKind::Gamma | ConeKind::GammaQ => true,
            ConeKind::GammaTruncated(e) | ConeKind::GammaQEps(e) => eps_ok(e, l),
            ConeKind::SawtoothGammaQ | ConeKind::SawtoothGammaQEps(_) => {
                let stops = spec
                    .stops
                    .ok_or_else(|| Error::param("cone.family", "sawtooth cones need a stopping family"))?;
                let e_ok = match spec.kind {
                    ConeKind::SawtoothGammaQEps(e) => eps_ok(e, l),
                    _ => true,
                };
                e_ok && is_good(grid, q, root.unwrap_or(q), stops)
            }
            ConeKind::TQ => unreachable!(),
        };
        if keep {
            out.push(q);
        }
    }
    Ok(out)
}

pub fn cone(grid: &DyadicGrid, coll: &Collections, x: usize, spec: &ConeSpec) -> Result<ConeRegion> {
    let cubes = cone_cubes(grid, x, spec)?;
    let mut boxes = Vec::new();
    for &q in &cubes {
        boxes.extend_from_slice(&coll.per_cube[q]);
    }
    if spec.kind == ConeKind::TQ {
        boxes.sort_unstable();
        boxes.dedup();
    }
    Ok(ConeRegion {
        kind: spec.kind,
        beta: coll.beta,
        cubes,
        boxes,
    })
}
