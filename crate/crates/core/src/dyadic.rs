//! Nested dyadic partitions of a boundary set and the bump cutoffs built on
//! them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundarySet, SetKind};
use crate::par;
use crate::spatial::{dist, AtPoint, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GridStrategy {
    /// Natural cells where the set has them, greedy nets otherwise.
    #[default]
    Auto,
    Natural,
    GreedyNet,
}

#[derive(Debug, Clone, Serialize)]
pub struct DyadicCube {
    pub level: i32,
    pub index: i64,
    pub members: Vec<usize>,
    pub center: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub measure: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Default)]
pub struct GridConstants {
    pub alpha0: f64,
    pub c1: f64,
    pub eta_thin: Option<f64>,
    pub c2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DyadicGrid {
    pub k_min: i32,
    pub k_max: i32,
    pub cubes: Vec<DyadicCube>,
    pub by_level: Vec<Vec<usize>>,
    pub constants: GridConstants,
    pub strategy: GridStrategy,
    node_cube: Vec<Vec<u32>>,
    n_nodes: usize,
    n: usize,
}

/// Declared targets for `verify_grid`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridDeclared {
    pub c1: f64,
    pub alpha0: f64,
    pub eta_thin: f64,
}

impl GridDeclared {
    pub fn for_kind(kind: SetKind) -> Self {
        match kind {
            SetKind::SegmentLine => GridDeclared {
                c1: 1.0,
                alpha0: 0.5,
                eta_thin: 1.0,
            },
            SetKind::Circle => GridDeclared {
                c1: 8.0,
                alpha0: 0.25,
                eta_thin: 1.0,
            },
            _ => GridDeclared {
                c1: 8.0,
                alpha0: 0.05,
                eta_thin: 1.0,
            },
        }
    }
}

pub fn build_grid(set: &BoundarySet, k_min: i32, k_max: i32) -> Result<DyadicGrid> {
    build_grid_with(set, k_min, k_max, GridStrategy::Auto)
}

pub fn build_grid_with(
    set: &BoundarySet,
    k_min: i32,
    k_max: i32,
    strategy: GridStrategy,
) -> Result<DyadicGrid> {
    if k_min > k_max {
        return Err(Error::param("k_min", "must not exceed k_max"));
    }
    let finest = 2f64.powi(-k_max);
    if finest < 4.0 * set.spacing {
        return Err(Error::TooCoarse {
            level: k_max,
            reason: format!(
                "2^-{k_max} = {finest:e} is below 4 x node spacing {:e}",
                set.spacing
            ),
        });
    }
    if 2f64.powi(-k_min) > 4.0 * set.model_extent() {
        return Err(Error::param(
            "k_min",
            format!("2^-{k_min} exceeds the set's extent {}", set.model_extent()),
        ));
    }
    let natural_ok = set.natural_max_level().is_some_and(|m| k_max <= m);
    let used = match strategy {
        GridStrategy::Auto if natural_ok => GridStrategy::Natural,
        GridStrategy::Auto => GridStrategy::GreedyNet,
        GridStrategy::Natural if !natural_ok => {
            return Err(Error::Unsupported(format!(
                "{:?} has no natural cells down to level {k_max}",
                set.kind
            )))
        }
        s => s,
    };
    let mut grid = DyadicGrid {
        k_min,
        k_max,
        cubes: Vec::new(),
        by_level: Vec::new(),
        constants: GridConstants::default(),
        strategy: used,
        node_cube: Vec::new(),
        n_nodes: set.len(),
        n: set.n,
    };
    for k in k_min..=k_max {
        match used {
            GridStrategy::Natural => grid.push_natural_level(set, k),
            _ => grid.push_greedy_level(set, k),
        }
    }
    grid.constants.c1 = grid.measure_c1(set);
    grid.constants.alpha0 = grid.measure_alpha0(set);
    log::debug!(
        "grid {:?} levels {k_min}..={k_max}: {} cubes, C1 = {:.4}, alpha0 = {:.4}",
        used,
        grid.cubes.len(),
        grid.constants.c1,
        grid.constants.alpha0
    );
    Ok(grid)
}

impl DyadicGrid {
    fn push_level(&mut self, set: &BoundarySet, k: i32, groups: Vec<(i64, Vec<usize>, Option<usize>)>) {
        let mut table = vec![u32::MAX; self.n_nodes];
        let mut ids = Vec::with_capacity(groups.len());
        for (index, members, center) in groups {
            let id = self.cubes.len();
            let measure = members.iter().map(|&i| set.weights[i]).sum();
            for &m in &members {
                table[m] = id as u32;
            }
            let center = center.unwrap_or_else(|| centroid_node(set, &members));
            let parent = if k > self.k_min {
                Some(self.node_cube[(k - 1 - self.k_min) as usize][members[0]] as usize)
            } else {
                None
            };
            if let Some(p) = parent {
                self.cubes[p].children.push(id);
            }
            self.cubes.push(DyadicCube {
                level: k,
                index,
                members,
                center,
                parent,
                children: Vec::new(),
                measure,
                length: 2f64.powi(-k),
            });
            ids.push(id);
        }
        self.node_cube.push(table);
        self.by_level.push(ids);
    }

    fn push_natural_level(&mut self, set: &BoundarySet, k: i32) {
        let mut keyed: Vec<(i64, usize)> = (0..set.len())
            .map(|i| (set.natural_cell(i, k).unwrap_or(0), i))
            .collect();
        keyed.sort_unstable();
        let mut groups: Vec<(i64, Vec<usize>, Option<usize>)> = Vec::new();
        for (key, i) in keyed {
            match groups.last_mut() {
                Some((k2, m, _)) if *k2 == key => m.push(i),
                _ => groups.push((key, vec![i], None)),
            }
        }
        // a natural cell that straddles two parents would break nesting; split it
        if k > self.k_min {
            let prev = &self.node_cube[(k - 1 - self.k_min) as usize];
            let mut split = Vec::with_capacity(groups.len());
            for (key, members, c) in groups {
                let mut parts: Vec<(u32, Vec<usize>)> = Vec::new();
                for m in members {
                    match parts.iter_mut().find(|(p, _)| *p == prev[m]) {
                        Some((_, v)) => v.push(m),
                        None => parts.push((prev[m], vec![m])),
                    }
                }
                for (_, v) in parts {
                    split.push((key, v, c));
                }
            }
            groups = split;
        }
        self.push_level(set, k, groups);
    }

    fn push_greedy_level(&mut self, set: &BoundarySet, k: i32) {
        let sep = 2f64.powi(-k);
        let parents: Vec<Option<usize>> = if k == self.k_min {
            vec![None]
        } else {
            self.by_level[(k - 1 - self.k_min) as usize].iter().map(|&c| Some(c)).collect()
        };
        let prev_table = (k > self.k_min).then(|| &self.node_cube[(k - 1 - self.k_min) as usize]);
        let split: Vec<Vec<(usize, Vec<usize>)>> = par::map_slice(&parents, |parent| {
            let (members, first): (Vec<usize>, Option<usize>) = match parent {
                None => ((0..set.len()).collect(), None),
                Some(p) => (self.cubes[*p].members.clone(), Some(self.cubes[*p].center)),
            };
            let inside = |y: usize| match (parent, prev_table) {
                (Some(p), Some(t)) => t[y] as usize == *p,
                _ => true,
            };
            greedy_children(set, &members, first, sep, &inside)
        });
        let mut groups = Vec::new();
        let mut index = 0i64;
        for part in split {
            for (center, members) in part {
                groups.push((index, members, Some(center)));
                index += 1;
            }
        }
        self.push_level(set, k, groups);
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn cube(&self, id: usize) -> Result<&DyadicCube> {
        self.cubes.get(id).ok_or(Error::UnknownCube(id))
    }

    pub fn level(&self, k: i32) -> &[usize] {
        if k < self.k_min || k > self.k_max {
            return &[];
        }
        &self.by_level[(k - self.k_min) as usize]
    }

    pub fn top_cubes(&self) -> &[usize] {
        &self.by_level[0]
    }

    pub fn locate(&self, node: usize, k: i32) -> Result<usize> {
        if node >= self.n_nodes {
            return Err(Error::UnknownNode(node));
        }
        if k < self.k_min || k > self.k_max {
            return Err(Error::LevelOutOfRange {
                level: k,
                k_min: self.k_min,
                k_max: self.k_max,
            });
        }
        Ok(self.node_cube[(k - self.k_min) as usize][node] as usize)
    }

    /// Cube at the level of `cube` containing `node`, unchecked.
    #[inline]
    pub(crate) fn cube_at(&self, node: usize, k: i32) -> usize {
        self.node_cube[(k - self.k_min) as usize][node] as usize
    }

    /// Chain of cubes containing `node`, coarsest first.
    pub fn chain(&self, node: usize) -> Vec<usize> {
        (self.k_min..=self.k_max).map(|k| self.cube_at(node, k)).collect()
    }

    pub fn contains(&self, outer: usize, inner: usize) -> bool {
        let mut c = Some(inner);
        let lvl = self.cubes[outer].level;
        while let Some(id) = c {
            if id == outer {
                return true;
            }
            if self.cubes[id].level <= lvl {
                return false;
            }
            c = self.cubes[id].parent;
        }
        false
    }

    pub fn node_in(&self, node: usize, cube: usize) -> bool {
        self.cube_at(node, self.cubes[cube].level) == cube
    }

    /// Subcubes of `root` (itself included) passing `keep`, depth-first.
    pub fn descendants<F: Fn(&DyadicCube) -> bool>(&self, root: usize, keep: F) -> Result<Vec<usize>> {
        self.cube(root)?;
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(c) = stack.pop() {
            if keep(&self.cubes[c]) {
                out.push(c);
            }
            stack.extend(self.cubes[c].children.iter().rev());
        }
        Ok(out)
    }

    /// Level-`k` subcubes of `root`.
    pub fn descendants_at(&self, root: usize, k: i32) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(c) = stack.pop() {
            let q = &self.cubes[c];
            if q.level == k {
                out.push(c);
            } else if q.level < k {
                stack.extend(q.children.iter().rev());
            }
        }
        out
    }

    /// Exact diameter of the cube's node set plus one node extent.
    pub fn diameter(&self, set: &BoundarySet, cube: usize) -> f64 {
        let q = &self.cubes[cube];
        node_set_diameter(set, &q.members, &set.points[q.center]) + set.node_extent()
    }

    /// Largest distance from the centre node to a member.
    pub fn radius(&self, set: &BoundarySet, cube: usize) -> f64 {
        let q = &self.cubes[cube];
        let c = set.points[q.center];
        q.members.iter().map(|&m| dist(&c, &set.points[m])).fold(0.0, f64::max)
    }

    /// Distance from `node` to the nearest node outside its level-k cube,
    /// if one lies within `bound`.
    pub fn complement_dist(&self, set: &BoundarySet, node: usize, k: i32, bound: f64) -> Option<f64> {
        let own = self.cube_at(node, k);
        let table = &self.node_cube[(k - self.k_min) as usize];
        set.tree()
            .nearest_by(&AtPoint(set.points[node]), bound, |j| table[j] as usize != own)
            .map(|(_, d)| d)
    }

    fn measure_c1(&self, set: &BoundarySet) -> f64 {
        let n = self.n as i32;
        let worst = par::map_range(self.cubes.len(), |c| {
            let q = &self.cubes[c];
            let d = self.diameter(set, c);
            let l = q.length;
            let ln = l.powi(n);
            (d / l).max(l / d).max(q.measure / ln).max(ln / q.measure)
        });
        worst.into_iter().fold(1.0, f64::max)
    }

    fn measure_alpha0(&self, set: &BoundarySet) -> f64 {
        let vals = par::map_range(self.cubes.len(), |c| {
            let q = &self.cubes[c];
            self.complement_dist(set, q.center, q.level, f64::INFINITY)
                .map(|d| d / q.length)
                .unwrap_or(f64::INFINITY)
        });
        vals.into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cubes: Vec<serde_json::Value> = self
            .cubes
            .iter()
            .map(|q| {
                serde_json::json!({
                    "k": q.level,
                    "j": q.index,
                    "parent": q.parent,
                    "children": q.children,
                    "center": q.center,
                    "node_ids": q.members,
                    "measure": q.measure,
                })
            })
            .collect();
        serde_json::json!({
            "constants": self.constants,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "cubes": cubes,
        })
    }
}

fn centroid_node(set: &BoundarySet, members: &[usize]) -> usize {
    let mut c = [0.0; 3];
    let mut w = 0.0;
    for &m in members {
        let p = &set.points[m];
        let wm = set.weights[m].max(f64::MIN_POSITIVE);
        for a in 0..3 {
            c[a] += wm * p[a];
        }
        w += wm;
    }
    for v in &mut c {
        *v /= w;
    }
    let mut best = (members[0], f64::INFINITY);
    for &m in members {
        let d = dist(&c, &set.points[m]);
        if d < best.1 || (d == best.1 && m < best.0) {
            best = (m, d);
        }
    }
    best.0
}

fn node_set_diameter(set: &BoundarySet, members: &[usize], anchor: &Point) -> f64 {
    let mut by_r: Vec<(f64, usize)> = members.iter().map(|&m| (dist(anchor, &set.points[m]), m)).collect();
    by_r.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: f64 = 0.0;
    for (i, &(ri, a)) in by_r.iter().enumerate() {
        if 2.0 * ri <= best {
            break;
        }
        for &(rj, b) in &by_r[i + 1..] {
            if ri + rj <= best {
                break;
            }
            best = best.max(dist(&set.points[a], &set.points[b]));
        }
    }
    best
}

/// Greedy `sep`-net over one parent's members, interior candidates first,
/// then nearest-centre assignment. Returns (centre, members) per child.
fn greedy_children<F: Fn(usize) -> bool>(
    set: &BoundarySet,
    members: &[usize],
    first: Option<usize>,
    sep: f64,
    inside: &F,
) -> Vec<(usize, Vec<usize>)> {
    let mut centers: Vec<usize> = Vec::new();
    let mut covered = std::collections::HashSet::new();
    let mut near = std::collections::HashSet::new();
    let add = |c: usize, centers: &mut Vec<usize>, covered: &mut std::collections::HashSet<usize>, near: &mut std::collections::HashSet<usize>| {
        centers.push(c);
        set.tree().within(&set.points[c], 1.5 * sep, |j, d2| {
            if inside(j) {
                near.insert(j);
                if d2 < sep * sep {
                    covered.insert(j);
                }
            }
        });
    };
    if let Some(c) = first {
        add(c, &mut centers, &mut covered, &mut near);
    }
    let interior = |m: usize| {
        set.tree()
            .nearest_by(&AtPoint(set.points[m]), sep / 4.0, |j| !inside(j))
            .is_none()
    };
    for &m in members {
        if !covered.contains(&m) && interior(m) {
            add(m, &mut centers, &mut covered, &mut near);
        }
    }
    // edge nodes get their own centre only when no centre is reasonably close
    for &m in members {
        if !near.contains(&m) {
            add(m, &mut centers, &mut covered, &mut near);
        }
    }
    let cpts: Vec<Point> = centers.iter().map(|&c| set.points[c]).collect();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for &m in members {
        let p = &set.points[m];
        let mut best = (0usize, f64::INFINITY);
        for (ci, cp) in cpts.iter().enumerate() {
            let d = dist(p, cp);
            if d < best.1 || (d == best.1 && centers[ci] < centers[best.0]) {
                best = (ci, d);
            }
        }
        groups[best.0].push(m);
    }
    centers.into_iter().zip(groups).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub pass: bool,
    pub violations: usize,
    pub measured: Option<f64>,
    pub declared: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub properties: Vec<PropertyCheck>,
    pub constants: GridConstants,
    pub declared: GridDeclared,
    pub tau: Vec<f64>,
    pub strip_fraction: Vec<f64>,
    pub pass: bool,
}

/// Relative slack when comparing measured constants to declared ones.
const ROUNDOFF: f64 = 1e-9;

pub fn verify_grid(grid: &DyadicGrid, set: &BoundarySet, tau_samples: usize) -> GridReport {
    verify_grid_against(grid, set, tau_samples, GridDeclared::for_kind(set.kind))
}

pub fn verify_grid_against(
    grid: &DyadicGrid,
    set: &BoundarySet,
    tau_samples: usize,
    declared: GridDeclared,
) -> GridReport {
    let mut props = Vec::new();

    // (1) each level partitions the node set
    let mut bad = 0;
    for k in grid.k_min..=grid.k_max {
        let mut seen = vec![0u32; set.len()];
        for &c in grid.level(k) {
            for &m in &grid.cubes[c].members {
                seen[m] += 1;
            }
        }
        bad += seen.iter().filter(|&&s| s != 1).count();
    }
    props.push(PropertyCheck {
        name: "partition".into(),
        pass: bad == 0,
        violations: bad,
        measured: None,
        declared: None,
    });

    // (2) children partition the parent
    let mut bad = 0;
    for (id, q) in grid.cubes.iter().enumerate() {
        if q.level == grid.k_max {
            continue;
        }
        let total: usize = q.children.iter().map(|&c| grid.cubes[c].members.len()).sum();
        let nested = q
            .children
            .iter()
            .all(|&c| grid.cubes[c].members.iter().all(|&m| grid.cube_at(m, q.level) == id));
        if total != q.members.len() || !nested {
            bad += 1;
        }
    }
    props.push(PropertyCheck {
        name: "nesting".into(),
        pass: bad == 0,
        violations: bad,
        measured: None,
        declared: None,
    });

    // (3) one ancestor per coarser level
    let mut bad = 0;
    for q in &grid.cubes {
        let mut depth = 0;
        let mut cur = q.parent;
        let mut lvl = q.level;
        while let Some(p) = cur {
            if grid.cubes[p].level != lvl - 1 {
                bad += 1;
                break;
            }
            lvl -= 1;
            depth += 1;
            cur = grid.cubes[p].parent;
        }
        if depth != q.level - grid.k_min {
            bad += 1;
        }
    }
    props.push(PropertyCheck {
        name: "unique-ancestors".into(),
        pass: bad == 0,
        violations: bad,
        measured: None,
        declared: None,
    });

    // (4) size bounds
    let c1 = grid.constants.c1;
    props.push(PropertyCheck {
        name: "size-bounds".into(),
        pass: c1 <= declared.c1 * (1.0 + ROUNDOFF),
        violations: usize::from(c1 > declared.c1 * (1.0 + ROUNDOFF)),
        measured: Some(c1),
        declared: Some(declared.c1),
    });

    // (5) surface-ball containment
    let a0 = grid.constants.alpha0;
    let ok5 = a0 * (1.0 + ROUNDOFF) >= declared.alpha0;
    props.push(PropertyCheck {
        name: "ball-containment".into(),
        pass: ok5,
        violations: usize::from(!ok5),
        measured: a0.is_finite().then_some(a0),
        declared: Some(declared.alpha0),
    });

    // (6) thin boundaries
    let (tau, frac) = thin_boundary_curve(grid, set, tau_samples.max(8));
    let pos: Vec<(f64, f64)> = tau.iter().zip(&frac).filter(|(_, f)| **f > 0.0).map(|(t, f)| (*t, *f)).collect();
    let (eta, c2, ok6) = if pos.len() >= 2 {
        let eta = fit_slope(&pos);
        let c2 = pos.iter().map(|(t, f)| f / t.powf(eta)).fold(0.0, f64::max);
        (Some(eta), Some(c2), eta >= 0.5 * declared.eta_thin)
    } else if tau.is_empty() {
        (None, None, false)
    } else {
        // strips empty at every sampled width
        let c2 = tau.iter().zip(&frac).map(|(t, f)| f / t.powf(declared.eta_thin)).fold(0.0, f64::max);
        (None, Some(c2), true)
    };
    props.push(PropertyCheck {
        name: "thin-boundary".into(),
        pass: ok6,
        violations: usize::from(!ok6),
        measured: eta,
        declared: Some(declared.eta_thin),
    });

    let pass = props.iter().all(|p| p.pass);
    GridReport {
        properties: props,
        constants: GridConstants {
            alpha0: a0,
            c1,
            eta_thin: eta,
            c2,
        },
        declared,
        tau,
        strip_fraction: frac,
        pass,
    }
}

/// F(τ) = max over resolvable cubes of σ̂(strip of width τℓ)/σ̂(Q).
fn thin_boundary_curve(grid: &DyadicGrid, set: &BoundarySet, samples: usize) -> (Vec<f64>, Vec<f64>) {
    let a0 = if grid.constants.alpha0.is_finite() {
        grid.constants.alpha0
    } else {
        1.0
    };
    let (lo, hi) = (a0 * 2f64.powi(-6), 0.95 * a0);
    let taus: Vec<f64> = (0..samples)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (samples - 1) as f64).exp())
        .collect();
    let floor = 4.0 * set.spacing;
    // complement distance per level, searched only out to the widest strip
    let mut per_level: Vec<(i32, Vec<f64>)> = Vec::new();
    for k in grid.k_min..=grid.k_max {
        let l = 2f64.powi(-k);
        if hi * l < floor {
            continue;
        }
        let bound = hi * l;
        let d = par::map_range(set.len(), |i| {
            grid.complement_dist(set, i, k, bound).unwrap_or(f64::INFINITY)
        });
        per_level.push((k, d));
    }
    let mut out_t = Vec::new();
    let mut out_f = Vec::new();
    for &t in &taus {
        let mut best: Option<f64> = None;
        for (k, d) in &per_level {
            let l = 2f64.powi(-*k);
            if t * l < floor {
                continue;
            }
            for &c in grid.level(*k) {
                let q = &grid.cubes[c];
                // cubes with no outside neighbours have no boundary strip
                let strip: f64 = q
                    .members
                    .iter()
                    .filter(|&&m| d[m] <= t * l)
                    .map(|&m| set.weights[m])
                    .sum();
                let f = strip / q.measure;
                best = Some(best.map_or(f, |b: f64| b.max(f)));
            }
        }
        if let Some(f) = best {
            out_t.push(t);
            out_f.push(f);
        }
    }
    (out_t, out_f)
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(t, f) in pts {
        let (x, y) = (t.ln(), f.ln());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[derive(Debug, Clone, Serialize)]
pub struct Cutoff {
    pub parent: usize,
    pub level: i32,
    pub scale: f64,
    /// Values on the parent's members, in member order. Zero elsewhere.
    pub values: Vec<f64>,
    pub core: Vec<usize>,
    pub kept: Vec<usize>,
    pub lipschitz: f64,
    /// σ̂(Q'∖R) / (2^-m ℓ(Q')^{n-1}).
    pub boundary_ratio: f64,
}

impl Cutoff {
    pub fn value_at(&self, grid: &DyadicGrid, node: usize) -> f64 {
        if !grid.node_in(node, self.parent) {
            return 0.0;
        }
        let pos = grid.cubes[self.parent].members.binary_search(&node);
        match pos {
            Ok(i) => self.values[i],
            Err(_) => self.values[grid.cubes[self.parent].members.iter().position(|&m| m == node).unwrap_or(0)],
        }
    }
}

/// Level pairing m = ⌈(k + j)/2⌉ of the cutoff scale.
pub fn cutoff_level(k: i32, j: i32) -> i32 {
    (k + j + 1).div_euclid(2)
}

fn bump(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    }
}

pub fn build_cutoff(grid: &DyadicGrid, set: &BoundarySet, parent: usize, m: i32) -> Result<Cutoff> {
    let q = grid.cube(parent)?;
    let k = q.level;
    if m < k + 2 {
        return Err(Error::param("m", format!("cutoff level {m} must be at least k + 2 = {}", k + 2)));
    }
    if m > grid.k_max {
        return Err(Error::LevelOutOfRange {
            level: m,
            k_min: grid.k_min,
            k_max: grid.k_max,
        });
    }
    let scale = 2f64.powi(-m);
    let c1 = grid.constants.c1;
    let reach = c1 * c1 * scale;
    let subs = grid.descendants_at(parent, m);
    let near_edge: Vec<bool> = q
        .members
        .iter()
        .map(|&x| grid.complement_dist(set, x, k, reach).is_some())
        .collect();
    let member_pos: std::collections::HashMap<usize, usize> =
        q.members.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let kept: Vec<usize> = subs
        .iter()
        .copied()
        .filter(|&s| grid.cubes[s].members.iter().all(|x| !near_edge[member_pos[x]]))
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateCutoff(parent));
    }
    let a0 = grid.constants.alpha0.min(1.0);
    let mut total = vec![0.0; q.members.len()];
    let mut kept_sum = vec![0.0; q.members.len()];
    for &s in &subs {
        let sq = &grid.cubes[s];
        let rho = 2.0 * grid.radius(set, s).max(a0 * sq.length);
        let c = set.points[sq.center];
        let is_kept = kept.binary_search(&s).is_ok() || kept.contains(&s);
        set.tree().within(&c, rho, |y, d2| {
            if let Some(&i) = member_pos.get(&y) {
                let v = bump(d2.sqrt() / rho);
                total[i] += v;
                if is_kept {
                    kept_sum[i] += v;
                }
            }
        });
    }
    let values: Vec<f64> = total
        .iter()
        .zip(&kept_sum)
        .map(|(&t, &s)| if t > 0.0 { (s / t).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let core: Vec<usize> = q
        .members
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v == 1.0)
        .map(|(&x, _)| x)
        .collect();
    let outside: f64 = q
        .members
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v < 1.0)
        .map(|(&x, _)| set.weights[x])
        .sum();
    let boundary_ratio = outside / (scale * q.length.powi(set.n as i32 - 1));

    let val = |y: usize| member_pos.get(&y).map_or(0.0, |&i| values[i]);
    let pair_r = 2.01 * set.spacing;
    let mut lip: f64 = 0.0;
    for &x in &q.members {
        let vx = val(x);
        set.tree().within(&set.points[x], pair_r, |y, d2| {
            if y != x && d2 > 0.0 {
                lip = lip.max((vx - val(y)).abs() / d2.sqrt());
            }
        });
    }
    Ok(Cutoff {
        parent,
        level: m,
        scale,
        values,
        core,
        kept,
        lipschitz: lip,
        boundary_ratio,
    })
}
