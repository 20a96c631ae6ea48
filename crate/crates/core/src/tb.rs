//! Square functions over cones, Carleson functionals, stopping times, the
//! Tb and T1 hypothesis checks, the discrete Carleson embedding and the
//! far-field tail of a bounded set.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic::DyadicGrid;
use crate::error::{Error, Result};
use crate::geometry::BoundarySet;
use crate::operators::{dyadic_maximal, theta_apply, BoundaryFunction, Kernel, KernelKind};
use crate::par;
use crate::spatial::Point;
use crate::whitney::{cone, cone_cubes, Collections, ConeKind, ConeRegion, ConeSpec, WhitneyDecomposition};

/// Θf sampled at the quadrature points of some Whitney boxes.
#[derive(Debug, Clone)]
pub struct ThetaField {
    pub values: Vec<Option<Vec<Complex64>>>,
    /// Σ_q w_q |Θf|² / δ^{n+1} per box
    cone_mass: Vec<Option<f64>>,
    /// Σ_q w_q |Θf|² / δ per box
    global_mass: Vec<Option<f64>>,
}

impl ThetaField {
    pub fn compute(
        kernel: &Kernel,
        set: &BoundarySet,
        whit: &WhitneyDecomposition,
        f: &BoundaryFunction,
        boxes: &[usize],
    ) -> Result<Self> {
        let mut pts = Vec::new();
        let mut owner = Vec::with_capacity(boxes.len());
        for &b in boxes {
            if b >= whit.len() {
                return Err(Error::MissingBoxValue(b));
            }
            let q = whit.quad_points(b);
            owner.push((b, pts.len(), q.len()));
            pts.extend(q.into_iter().map(|(p, _)| p));
        }
        let theta = theta_apply(kernel, set, f, &pts)?;
        let mut values = vec![None; whit.len()];
        for (b, start, len) in owner {
            values[b] = Some(theta[start..start + len].to_vec());
        }
        Self::from_values(set, whit, values)
    }

    pub fn compute_all(kernel: &Kernel, set: &BoundarySet, whit: &WhitneyDecomposition, f: &BoundaryFunction) -> Result<Self> {
        let all: Vec<usize> = (0..whit.len()).collect();
        Self::compute(kernel, set, whit, f, &all)
    }

    /// Values given per quadrature point of each box (`None` = not sampled).
    pub fn from_values(set: &BoundarySet, whit: &WhitneyDecomposition, values: Vec<Option<Vec<Complex64>>>) -> Result<Self> {
        if values.len() != whit.len() {
            return Err(Error::param("theta_values", "one entry per Whitney box is required"));
        }
        let n = set.n as i32;
        let mut cone_mass = vec![None; whit.len()];
        let mut global_mass = vec![None; whit.len()];
        for (b, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let q = whit.quad_points(b);
            if q.len() != v.len() {
                return Err(Error::param("theta_values", format!("box {b} needs {} values", q.len())));
            }
            let (mut c, mut g) = (0.0, 0.0);
            for ((p, w), z) in q.iter().zip(v) {
                let d = set.delta(p);
                let m = w * z.norm_sqr();
                c += m / d.powi(n + 1);
                g += m / d;
            }
            cone_mass[b] = Some(c);
            global_mass[b] = Some(g);
        }
        Ok(ThetaField {
            values,
            cone_mass,
            global_mass,
        })
    }

    pub fn cone_mass(&self, b: usize) -> Result<f64> {
        self.cone_mass.get(b).copied().flatten().ok_or(Error::MissingBoxValue(b))
    }

    pub fn global_mass(&self, b: usize) -> Result<f64> {
        self.global_mass.get(b).copied().flatten().ok_or(Error::MissingBoxValue(b))
    }
}

/// Σ_I |Θf(Y_I)|² |I| / δ(Y_I)^{n+1} over the boxes of a cone.
pub fn local_square_function(cone: &ConeRegion, field: &ThetaField) -> Result<f64> {
    cone.boxes.iter().map(|&b| field.cone_mass(b)).sum()
}

/// The geometry a functional is evaluated on.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub set: &'a BoundarySet,
    pub grid: &'a DyadicGrid,
    pub whit: &'a WhitneyDecomposition,
    pub coll: &'a Collections,
    pub kernel: &'a Kernel,
}

/// Ranges a finite computation actually covered.
#[derive(Debug, Clone, Serialize)]
pub struct Truncation {
    pub window_lo: Point,
    pub window_hi: Point,
    pub whitney_levels: (i32, i32),
    pub grid_levels: (i32, i32),
    pub refine: u32,
    pub aperture_beta: f64,
}

impl<'a> Context<'a> {
    pub fn truncation(&self) -> Truncation {
        Truncation {
            window_lo: self.whit.window.lo,
            window_hi: self.whit.window.hi,
            whitney_levels: (self.whit.k_min, self.whit.k_max),
            grid_levels: (self.grid.k_min, self.grid.k_max),
            refine: self.whit.refine,
            aperture_beta: self.coll.beta,
        }
    }

    fn check_cube(&self, q: usize) -> Result<()> {
        self.grid.cube(q)?;
        if !self.coll.admissible[q] {
            return Err(Error::param("cube", format!("cube {q} lies outside the analysis window")));
        }
        Ok(())
    }

    /// Boxes of 𝒰_{Q′} for Q′ ⊆ Q.
    pub fn boxes_under(&self, q: usize) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        for c in self.grid.descendants(q, |_| true)? {
            out.extend_from_slice(&self.coll.per_cube[c]);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Boxes of every admissible 𝒰_Q.
    pub fn boxes_admissible(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.coll.admissible_cubes().flat_map(|q| self.coll.per_cube[q].iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn field(&self, f: &BoundaryFunction, boxes: &[usize]) -> Result<ThetaField> {
        ThetaField::compute(self.kernel, self.set, self.whit, f, boxes)
    }

    /// α_Q = ∬_{𝒰_Q} |Θf|² dY/δ^{n+1} for the given cubes, zero elsewhere.
    pub fn masses(&self, field: &ThetaField, cubes: impl IntoIterator<Item = usize>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.grid.len()];
        for q in cubes {
            let mut s = 0.0;
            for &b in &self.coll.per_cube[q] {
                s += field.cone_mass(b)?;
            }
            out[q] = s;
        }
        Ok(out)
    }

    pub fn masses_admissible(&self, field: &ThetaField) -> Result<Vec<f64>> {
        self.masses(field, self.coll.admissible_cubes())
    }

    /// Θ1 on all admissible regions and the resulting α_Q.
    pub fn theta_one_masses(&self) -> Result<Vec<f64>> {
        let one = BoundaryFunction::constant(self.set, 1.0);
        let field = self.field(&one, &self.boxes_admissible())?;
        self.masses_admissible(&field)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Variant<'a> {
    Gamma,
    Sawtooth(Option<&'a [usize]>),
    Truncated(f64),
}

impl Variant<'_> {
    fn spec(&self, q: usize) -> ConeSpec<'_> {
        match *self {
            Variant::Gamma => ConeSpec {
                kind: ConeKind::GammaQ,
                root: Some(q),
                stops: None,
            },
            Variant::Sawtooth(stops) => ConeSpec {
                kind: ConeKind::SawtoothGammaQ,
                root: Some(q),
                stops,
            },
            Variant::Truncated(e) => ConeSpec {
                kind: ConeKind::GammaQEps(e),
                root: Some(q),
                stops: None,
            },
        }
    }
}

/// Per-node cone sums Σ_{Q′ in the cone at x} α_{Q′} for x ∈ Q.
fn cone_sums(ctx: &Context, masses: &[f64], q: usize, variant: Variant) -> Result<Vec<(usize, f64)>> {
    ctx.check_cube(q)?;
    let spec = variant.spec(q);
    ctx.grid.cubes[q]
        .members
        .iter()
        .map(|&x| {
            let cubes = cone_cubes(ctx.grid, x, &spec)?;
            Ok((x, cubes.iter().map(|&c| masses[c]).sum()))
        })
        .collect()
}

/// (1/σ(Q)) Σ_{x∈Q} w(x) (∬_{cone(x)} |Θf|² dY/δ^{n+1})^{q/2}, with the
/// per-cube masses α of Θf precomputed.
pub fn carleson_functional(ctx: &Context, masses: &[f64], q: usize, variant: Variant, exponent: f64) -> Result<f64> {
    if !(exponent > 0.0 && exponent.is_finite()) {
        return Err(Error::param("q", "must be in (0, inf)"));
    }
    let sums = cone_sums(ctx, masses, q, variant)?;
    let cube = &ctx.grid.cubes[q];
    let acc: f64 = sums.iter().map(|&(x, s)| ctx.set.weights[x] * s.powf(exponent / 2.0)).sum();
    Ok(acc / cube.measure)
}

#[derive(Debug, Clone, Serialize)]
pub struct SquareNorm {
    pub value: f64,
    pub context: Truncation,
}

/// Σ over all boxes of |Θf|² |I| / δ.
pub fn global_square_norm(ctx: &Context, field: &ThetaField) -> Result<SquareNorm> {
    let value = (0..ctx.whit.len()).map(|b| field.global_mass(b)).sum::<Result<f64>>()?;
    Ok(SquareNorm {
        value,
        context: ctx.truncation(),
    })
}

/// Test functions b_Q. Built-in generators produce b_Q supported on Q.
#[derive(Debug, Clone)]
pub enum Generator {
    /// 1 on Q
    ConstantOne,
    /// 1 on the first child of Q (on Q itself for a leaf)
    HalfIndicator,
    /// Accretive with C₀ = 4 and p ≤ 2 by construction
    RandomAccretive { seed: u64 },
    Zero,
    /// One function per cube id.
    Explicit(Vec<BoundaryFunction>),
}

#[derive(Debug, Clone)]
pub struct TestSystem {
    pub generator: Generator,
    pub c0: f64,
    pub p: f64,
}

impl TestSystem {
    pub fn new(generator: Generator, c0: f64, p: f64) -> Result<Self> {
        if !(c0 > 0.0) {
            return Err(Error::param("constants.c0", "must be > 0"));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::param("constants.p", "must be in (1, inf)"));
        }
        Ok(TestSystem { generator, c0, p })
    }

    pub fn b(&self, grid: &DyadicGrid, set: &BoundarySet, q: usize) -> Result<BoundaryFunction> {
        let cube = grid.cube(q)?;
        let mut f = BoundaryFunction::zeros(set.len());
        let fill = |f: &mut BoundaryFunction, c: usize, v: Complex64| {
            for &m in &grid.cubes[c].members {
                f.values[m] = v;
            }
        };
        match &self.generator {
            Generator::Zero => {}
            Generator::ConstantOne => fill(&mut f, q, Complex64::new(1.0, 0.0)),
            Generator::HalfIndicator => fill(&mut f, cube.children.first().copied().unwrap_or(q), Complex64::new(1.0, 0.0)),
            Generator::RandomAccretive { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(q as u64);
                let depth = (cube.level + 3).min(grid.k_max);
                for leaf in grid.descendants_at(q, depth) {
                    let v = Complex64::new(rng.random_range(-1.0..2.0), rng.random_range(-0.5..0.5));
                    fill(&mut f, leaf, v);
                }
                let mean: f64 = cube.members.iter().map(|&m| f.values[m].re * set.weights[m]).sum::<f64>() / cube.measure;
                if mean < 0.5 {
                    for &m in &cube.members {
                        f.values[m].re += 0.5 - mean;
                    }
                }
            }
            Generator::Explicit(list) => {
                let g = list.get(q).ok_or_else(|| Error::param("system", format!("no function for cube {q}")))?;
                g.check_len(set)?;
                f = g.clone();
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TbCubeRow {
    pub cube: usize,
    pub level: i32,
    /// |Σ_Q b w| / σ(Q)
    pub eq1: f64,
    /// Σ_E |b|^p w / σ(Q)
    pub eq2: f64,
    /// Γ_Q Carleson functional of Θb_Q at exponent p
    pub eq3: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TbReport {
    pub rows: Vec<TbCubeRow>,
    pub worst_eq1: f64,
    pub worst_eq2: f64,
    pub worst_eq3: f64,
    pub pass_eq1: bool,
    pub pass_eq2: bool,
    pub pass_eq3: bool,
    pub pass: bool,
    pub context: Truncation,
}

pub fn verify_tb_hypotheses(ctx: &Context, system: &TestSystem) -> Result<TbReport> {
    let cubes: Vec<usize> = ctx.coll.admissible_cubes().collect();
    let rows = par::map_slice(&cubes, |&q| -> Result<TbCubeRow> {
        let b = system.b(ctx.grid, ctx.set, q)?;
        let cube = &ctx.grid.cubes[q];
        let s: Complex64 = cube.members.iter().map(|&m| b.values[m] * ctx.set.weights[m]).sum();
        let lp: f64 = b.values.iter().zip(&ctx.set.weights).map(|(v, w)| v.norm().powf(system.p) * w).sum();
        let field = ctx.field(&b, &ctx.boxes_under(q)?)?;
        let masses = ctx.masses(&field, ctx.grid.descendants(q, |_| true)?)?;
        Ok(TbCubeRow {
            cube: q,
            level: cube.level,
            eq1: s.norm() / cube.measure,
            eq2: lp / cube.measure,
            eq3: carleson_functional(ctx, &masses, q, Variant::Gamma, system.p)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let worst_eq1 = rows.iter().map(|r| r.eq1).fold(f64::INFINITY, f64::min);
    let worst_eq2 = rows.iter().map(|r| r.eq2).fold(0.0, f64::max);
    let worst_eq3 = rows.iter().map(|r| r.eq3).fold(0.0, f64::max);
    let pass_eq1 = worst_eq1 >= 1.0 / system.c0;
    let pass_eq2 = worst_eq2 <= system.c0;
    let pass_eq3 = worst_eq3 <= system.c0;
    Ok(TbReport {
        rows,
        worst_eq1,
        worst_eq2,
        worst_eq3,
        pass_eq1,
        pass_eq2,
        pass_eq3,
        pass: pass_eq1 && pass_eq2 && pass_eq3,
        context: ctx.truncation(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingFamily {
    pub parent: usize,
    pub members: Vec<usize>,
    /// 1 − Σσ(Q_k)/σ(Q)
    pub eta_measured: f64,
    /// Q itself met the stopping condition
    pub degenerate: bool,
    /// every member's parent violates the stopping condition
    pub maximal: bool,
    /// min over Good(Q) of |𝔼_{Q′} b_Q|
    pub good_min_mean: Option<f64>,
}

fn mean(grid: &DyadicGrid, set: &BoundarySet, b: &BoundaryFunction, q: usize) -> Complex64 {
    let c = &grid.cubes[q];
    c.members.iter().map(|&m| b.values[m] * set.weights[m]).sum::<Complex64>() / c.measure
}

/// Maximal subcubes Q_k of Q with Re Σ_{Q_k} b w ≤ σ(Q_k)/C₀.
pub fn stopping_time(grid: &DyadicGrid, set: &BoundarySet, q: usize, b: &BoundaryFunction, c0: f64) -> Result<StoppingFamily> {
    grid.cube(q)?;
    b.check_len(set)?;
    if !(c0 > 0.0) {
        return Err(Error::param("c0", "must be > 0"));
    }
    let stops = |c: usize| mean(grid, set, b, c).re <= 1.0 / c0;
    let mut members = Vec::new();
    let degenerate = stops(q);
    if degenerate {
        members.push(q);
    } else {
        let mut stack = vec![q];
        while let Some(c) = stack.pop() {
            for &ch in grid.cubes[c].children.iter().rev() {
                if stops(ch) {
                    members.push(ch);
                } else {
                    stack.push(ch);
                }
            }
        }
    }
    members.sort_unstable();
    let covered: f64 = members.iter().map(|&m| grid.cubes[m].measure).sum();
    let maximal = members
        .iter()
        .all(|&m| m == q || grid.cubes[m].parent.is_some_and(|p| !stops(p)));
    let good = good_cubes(grid, q, &members)?;
    let good_min_mean = good.iter().map(|&g| mean(grid, set, b, g).norm()).reduce(f64::min);
    Ok(StoppingFamily {
        parent: q,
        members,
        eta_measured: 1.0 - covered / grid.cubes[q].measure,
        degenerate,
        maximal,
        good_min_mean,
    })
}

fn intersects(grid: &DyadicGrid, a: usize, b: usize) -> bool {
    grid.contains(a, b) || grid.contains(b, a)
}

/// Q′ ⊆ Q that, for every k, either miss Q_k or are strictly larger than it.
pub fn good_cubes_by_intersection(grid: &DyadicGrid, q: usize, family: &[usize]) -> Result<Vec<usize>> {
    grid.descendants(q, |_| true).map(|all| {
        all.into_iter()
            .filter(|&c| {
                family
                    .iter()
                    .all(|&k| !intersects(grid, c, k) || grid.cubes[c].length > grid.cubes[k].length)
            })
            .collect()
    })
}

/// Q′ ⊆ Q not contained in any Q_k.
pub fn good_cubes_by_containment(grid: &DyadicGrid, q: usize, family: &[usize]) -> Result<Vec<usize>> {
    grid.descendants(q, |_| true)
        .map(|all| all.into_iter().filter(|&c| !family.iter().any(|&k| grid.contains(k, c))).collect())
}

/// Good(Q), computed both ways; the two must agree.
pub fn good_cubes(grid: &DyadicGrid, q: usize, family: &[usize]) -> Result<Vec<usize>> {
    let a = good_cubes_by_intersection(grid, q, family)?;
    let b = good_cubes_by_containment(grid, q, family)?;
    assert_eq!(a, b, "the two descriptions of Good(Q) disagree");
    Ok(b)
}

#[derive(Debug, Clone, Serialize)]
pub struct PackingReport {
    /// (Q, Σσ(Q_k)/σ(Q))
    pub ratios: Vec<(usize, f64)>,
    pub eta_packing: f64,
    pub eta_min: f64,
    pub pass: bool,
}

pub fn verify_packing(grid: &DyadicGrid, families: &[StoppingFamily], eta_min: f64) -> PackingReport {
    let ratios: Vec<(usize, f64)> = families
        .iter()
        .map(|f| {
            let s: f64 = f.members.iter().map(|&m| grid.cubes[m].measure).sum();
            (f.parent, s / grid.cubes[f.parent].measure)
        })
        .collect();
    let eta = ratios.iter().map(|r| 1.0 - r.1).fold(1.0, f64::min);
    PackingReport {
        ratios,
        eta_packing: eta,
        eta_min,
        pass: eta >= eta_min && eta > 0.0,
    }
}

/// Boxes of Γ_{Q,ε}(x) missing from Γ_{Q_k,ε}(x) ∪ γ_{Q,ε}(x), summed over
/// members Q_k and x ∈ Q_k.
pub fn sawtooth_inclusion_violations(grid: &DyadicGrid, coll: &Collections, family: &StoppingFamily, eps: f64) -> Result<usize> {
    let q = family.parent;
    let mut bad = 0;
    for &k in &family.members {
        for &x in &grid.cubes[k].members {
            let spec = |kind, root| ConeSpec {
                kind,
                root: Some(root),
                stops: Some(&family.members),
            };
            let whole = cone(grid, coll, x, &spec(ConeKind::GammaQEps(eps), q))?.box_set();
            let mut cover = cone(grid, coll, x, &spec(ConeKind::GammaQEps(eps), k))?.box_set();
            cover.extend(cone(grid, coll, x, &spec(ConeKind::SawtoothGammaQEps(eps), q))?.boxes);
            bad += whole.difference(&cover).count();
        }
    }
    Ok(bad)
}

/// sup over admissible Q of the truncated Γ_{Q,ε} functional of Θ1 at q = 2.
pub fn k_epsilon(ctx: &Context, one_masses: &[f64], eps: f64) -> Result<f64> {
    let cubes: Vec<usize> = ctx.coll.admissible_cubes().collect();
    let vals = par::map_slice(&cubes, |&q| carleson_functional(ctx, one_masses, q, Variant::Truncated(eps), 2.0));
    vals.into_iter().try_fold(0.0, |m, v| v.map(|v| f64::max(m, v)))
}

/// σ({x ∈ Q : g_Q(x) > N}) / σ(Q), g_Q = (Γ_Q square function of Θ1)^{p/2}.
pub fn level_set_fraction(ctx: &Context, one_masses: &[f64], q: usize, level: f64, p: f64) -> Result<f64> {
    if !(level > 0.0) {
        return Err(Error::param("N", "must be > 0"));
    }
    let sums = cone_sums(ctx, one_masses, q, Variant::Gamma)?;
    let above: f64 = sums
        .iter()
        .filter(|(_, s)| s.powf(p / 2.0) > level)
        .map(|&(x, _)| ctx.set.weights[x])
        .sum();
    // + 0.0 turns the empty sum -0.0 into 0.0
    Ok(above / ctx.grid.cubes[q].measure + 0.0)
}

/// α_Q ≥ 0 per cube with its Carleson norm.
#[derive(Debug, Clone, Serialize)]
pub struct CarlesonCoefficients {
    pub alpha: Vec<f64>,
    pub carleson_norm: f64,
}

impl CarlesonCoefficients {
    pub fn new(grid: &DyadicGrid, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != grid.len() {
            return Err(Error::param("alpha", "one coefficient per cube is required"));
        }
        if alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::param("alpha", "coefficients must be >= 0"));
        }
        let norm = tree_sums(grid, &alpha)
            .iter()
            .zip(&grid.cubes)
            .filter(|(_, c)| c.measure > 0.0)
            .map(|(s, c)| s / c.measure)
            .fold(0.0, f64::max);
        Ok(CarlesonCoefficients {
            alpha,
            carleson_norm: norm,
        })
    }

    /// Per cube Q₀: Σ_{Q⊆Q₀} α_Q σ(Q) / σ(Q₀).
    pub fn per_cube(&self, grid: &DyadicGrid) -> Vec<f64> {
        tree_sums(grid, &self.alpha)
            .iter()
            .zip(&grid.cubes)
            .map(|(s, c)| if c.measure > 0.0 { s / c.measure } else { 0.0 })
            .collect()
    }

    pub fn normalized(mut self) -> Self {
        if self.carleson_norm > 0.0 {
            let s = self.carleson_norm;
            self.alpha.iter_mut().for_each(|a| *a /= s);
            self.carleson_norm = 1.0;
        }
        self
    }
}

/// S(Q) = Σ_{Q′⊆Q} α_{Q′} σ(Q′), accumulated from the finest level up.
fn tree_sums(grid: &DyadicGrid, alpha: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = alpha.iter().zip(&grid.cubes).map(|(a, c)| a * c.measure).collect();
    for level in grid.by_level.iter().rev() {
        for &q in level {
            if let Some(p) = grid.cubes[q].parent {
                s[p] += s[q];
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EmbeddingResult {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// lhs = Σ_x w Σ_{Q∋x} α_Q |𝔼_Q f|², rhs = Σ_x w ℳ(|f|)², ratio = lhs/(‖α‖_C rhs).
pub fn carleson_embedding_check(
    grid: &DyadicGrid,
    set: &BoundarySet,
    alpha: &CarlesonCoefficients,
    f: &BoundaryFunction,
) -> Result<EmbeddingResult> {
    f.check_len(set)?;
    let avg: Vec<f64> = grid
        .cubes
        .iter()
        .enumerate()
        .map(|(q, c)| {
            if c.measure > 0.0 {
                mean(grid, set, f, q).norm_sqr()
            } else {
                0.0
            }
        })
        .collect();
    let mut lhs = 0.0;
    for (x, w) in set.weights.iter().enumerate() {
        lhs += w * grid.chain(x).iter().map(|&q| alpha.alpha[q] * avg[q]).sum::<f64>();
    }
    let m = dyadic_maximal(grid, set, f);
    let rhs: f64 = m.iter().zip(&set.weights).map(|(v, w)| v * v * w).sum();
    assert!(!(rhs == 0.0 && lhs > 0.0), "embedding lhs is positive while the maximal function vanishes");
    let ratio = if lhs == 0.0 { 0.0 } else { lhs / (alpha.carleson_norm * rhs) };
    Ok(EmbeddingResult { lhs, rhs, ratio })
}

#[derive(Debug, Clone, Serialize)]
pub struct T1Report {
    /// sup over admissible Q of the Γ_Q functional of Θ1
    pub carleson_sup: f64,
    /// (Q, Γ_Q functional of Θ1)
    pub per_cube: Vec<(usize, f64)>,
    /// global_square_norm(f) / ‖f‖₂² per test function
    pub ratios: Vec<f64>,
    pub carleson_bound: f64,
    pub ratio_bound: f64,
    pub pass: bool,
    pub context: Truncation,
}

/// Γ_Q functional of Θ1 at q = 2 for every admissible Q.
pub fn t1_carleson_values(ctx: &Context, one_masses: &[f64]) -> Result<Vec<(usize, f64)>> {
    let cubes: Vec<usize> = ctx.coll.admissible_cubes().collect();
    let vals = par::map_slice(&cubes, |&q| carleson_functional(ctx, one_masses, q, Variant::Gamma, 2.0));
    cubes.into_iter().zip(vals).map(|(q, v)| v.map(|v| (q, v))).collect()
}

pub fn t1_carleson_sup(ctx: &Context, one_masses: &[f64]) -> Result<f64> {
    Ok(t1_carleson_values(ctx, one_masses)?.iter().map(|v| v.1).fold(0.0, f64::max))
}

pub fn t1_check(
    ctx: &Context,
    one_masses: &[f64],
    test_functions: &[BoundaryFunction],
    carleson_bound: f64,
    ratio_bound: f64,
) -> Result<T1Report> {
    let per_cube = t1_carleson_values(ctx, one_masses)?;
    let carleson_sup = per_cube.iter().map(|v| v.1).fold(0.0, f64::max);
    let mut ratios = Vec::with_capacity(test_functions.len());
    for f in test_functions {
        let field = ThetaField::compute_all(ctx.kernel, ctx.set, ctx.whit, f)?;
        let l2 = f.l2_squared(ctx.set);
        if l2 == 0.0 {
            return Err(Error::param("test_functions", "a test function has zero norm"));
        }
        ratios.push(global_square_norm(ctx, &field)?.value / l2);
    }
    let pass = carleson_sup <= carleson_bound && ratios.iter().all(|&r| r <= ratio_bound);
    Ok(T1Report {
        carleson_sup,
        per_cube,
        ratios,
        carleson_bound,
        ratio_bound,
        pass,
        context: ctx.truncation(),
    })
}

/// Nodes and weights of the m-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if m == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[m - 1 - i] = w[i];
    }
    (x, w)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailQuadrature {
    pub radial: usize,
    pub angular: usize,
}

impl Default for TailQuadrature {
    fn default() -> Self {
        TailQuadrature { radial: 12, angular: 48 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Annulus {
    pub k: u32,
    pub inner: f64,
    pub outer: f64,
    /// ∬ (∫ δ^α |X−y|^{-n-α} |f| dσ)² dX/δ
    pub envelope: f64,
    /// ∬ |Θf|² dX/δ
    pub direct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub center: Point,
    pub r0: f64,
    pub annuli: Vec<Annulus>,
    pub total: f64,
    pub ratio_to_l2: f64,
}

/// The far field of a bounded set: annuli B_{2^{k+1}r₀} ∖ B_{2^k r₀},
/// k = 3..=k_max, around the weighted centroid with r₀ = diam E.
pub fn bounded_tail(set: &BoundarySet, kernel: &Kernel, f: &BoundaryFunction, k_max: u32, quad: TailQuadrature) -> Result<TailReport> {
    let r0 = match set.diameter {
        Some(d) if set.is_bounded() => d,
        _ => return Err(Error::Unsupported("the tail term needs a bounded set".into())),
    };
    if k_max < 3 {
        return Err(Error::param("k_max_annulus", "must be >= 3"));
    }
    if quad.radial == 0 || quad.angular == 0 {
        return Err(Error::param("tail.quadrature", "needs at least one point per direction"));
    }
    f.check_len(set)?;
    let dim = set.ambient_dim();
    let mass = set.total_measure();
    let mut center = [0.0; 3];
    for (p, w) in set.points.iter().zip(&set.weights) {
        for a in 0..3 {
            center[a] += p[a] * w / mass;
        }
    }
    let alpha = kernel.alpha();
    let envelope = Kernel::new(KernelKind::Envelope { alpha }, set.n)?;
    let abs_f = BoundaryFunction::from_real(f.values.iter().map(|v| v.norm()).collect());
    let dirs = directions(dim, quad.angular);
    let (gx, gw) = gauss_legendre(quad.radial);
    let mut annuli = Vec::new();
    for k in 3..=k_max {
        let inner = 2f64.powi(k as i32) * r0;
        let outer = 2.0 * inner;
        let mut pts = Vec::with_capacity(gx.len() * dirs.len());
        let mut wts = Vec::with_capacity(pts.capacity());
        for (x, w) in gx.iter().zip(&gw) {
            let rho = inner + 0.5 * (x + 1.0) * (outer - inner);
            let jac = 0.5 * (outer - inner) * rho.powi(dim as i32 - 1);
            for (u, du) in &dirs {
                let mut p = center;
                for a in 0..dim {
                    p[a] += rho * u[a];
                }
                pts.push(p);
                wts.push(w * jac * du);
            }
        }
        let env = theta_apply(&envelope, set, &abs_f, &pts)?;
        let th = theta_apply(kernel, set, f, &pts)?;
        let (mut e, mut d) = (0.0, 0.0);
        for i in 0..pts.len() {
            let delta = set.delta(&pts[i]);
            e += wts[i] * env[i].norm_sqr() / delta;
            d += wts[i] * th[i].norm_sqr() / delta;
        }
        annuli.push(Annulus {
            k,
            inner,
            outer,
            envelope: e,
            direct: d,
        });
    }
    let total = annuli.iter().map(|a| a.envelope).sum();
    let l2 = f.l2_squared(set);
    Ok(TailReport {
        center,
        r0,
        annuli,
        total,
        ratio_to_l2: if l2 > 0.0 { total / l2 } else { 0.0 },
    })
}

/// Unit directions with surface weights: a uniform rule on the circle, or
/// Gauss–Legendre in cos φ times a uniform rule in θ on the sphere.
fn directions(dim: usize, m: usize) -> Vec<(Point, f64)> {
    let step = 2.0 * PI / m as f64;
    let ring = (0..m).map(|i| step * (i as f64 + 0.5));
    if dim == 2 {
        return ring.map(|t| ([t.cos(), t.sin(), 0.0], step)).collect();
    }
    let (zs, ws) = gauss_legendre(m.div_ceil(2));
    let mut out = Vec::new();
    for (z, w) in zs.iter().zip(&ws) {
        let s = (1.0 - z * z).sqrt();
        for t in ring.clone() {
            out.push(([s * t.cos(), s * t.sin(), *z], w * step));
        }
    }
    out
}
