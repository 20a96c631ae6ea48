//! Kernels ψ and the operator Θ, the approximation to the identity S_j with
//! its differences D_j, dyadic averages and the dyadic maximal function.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic::DyadicGrid;
use crate::error::{Error, Result};
use crate::geometry::BoundarySet;
use crate::par;
use crate::spatial::{dist, Point};

/// Node values of a function on E. On an unbounded line `far` is the value
/// taken on the part of the line outside the node window; it enters Θ only.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFunction {
    pub values: Vec<Complex64>,
    pub far: f64,
}

impl BoundaryFunction {
    pub fn zeros(n: usize) -> Self {
        BoundaryFunction {
            values: vec![Complex64::new(0.0, 0.0); n],
            far: 0.0,
        }
    }

    /// c on all of E, including beyond the window of an unbounded line.
    pub fn constant(set: &BoundarySet, c: f64) -> Self {
        BoundaryFunction {
            values: vec![Complex64::new(c, 0.0); set.len()],
            far: if set.is_bounded() { 0.0 } else { c },
        }
    }

    pub fn from_real(v: Vec<f64>) -> Self {
        BoundaryFunction {
            values: v.into_iter().map(|x| Complex64::new(x, 0.0)).collect(),
            far: 0.0,
        }
    }

    pub fn from_fn(set: &BoundarySet, f: impl Fn(&Point) -> f64) -> Self {
        Self::from_real(set.points.iter().map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        BoundaryFunction {
            values: self.values.iter().map(|v| v * s).collect(),
            far: self.far * s,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        BoundaryFunction {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            far: self.far + other.far,
        }
    }

    pub fn l2_squared(&self, set: &BoundarySet) -> f64 {
        self.values.iter().zip(&set.weights).map(|(v, w)| v.norm_sqr() * w).sum()
    }

    pub fn check_len(&self, set: &BoundarySet) -> Result<()> {
        if self.len() != set.len() {
            return Err(Error::param(
                "f",
                format!("has {} values but the set has {} nodes", self.len(), set.len()),
            ));
        }
        Ok(())
    }

    /// Reads `node_id,value[,imag]` rows with a header line. Nodes not
    /// listed are zero.
    pub fn from_csv(path: &Path, set: &BoundarySet) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut f = Self::zeros(set.len());
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| -> Result<f64> {
                row.get(i)
                    .unwrap_or("0")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::param("csv", format!("line {:?}: {e}", row.position().map(|p| p.line()))))
            };
            let id: usize = row
                .get(0)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| Error::param("csv.node_id", format!("{e}")))?;
            if id >= set.len() {
                return Err(Error::UnknownNode(id));
            }
            f.values[id] = Complex64::new(field(1)?, if row.len() > 2 { field(2)? } else { 0.0 });
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelKind {
    /// t ∂_t P_t for n = 1, with t = δ(X).
    PoissonDerivative,
    /// δ(X)^α / |X − y|^{n+α}.
    Envelope { alpha: f64 },
    /// ψ ≡ value, with the constants it is checked against.
    Constant { value: f64, alpha: f64, c_psi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub kind: KernelKind,
    pub scale: f64,
    pub n: usize,
}

impl Kernel {
    pub fn new(kind: KernelKind, n: usize) -> Result<Self> {
        match kind {
            KernelKind::PoissonDerivative if n != 1 => {
                return Err(Error::Unsupported("PoissonDerivative is defined for n = 1 only".into()))
            }
            KernelKind::Envelope { alpha } | KernelKind::Constant { alpha, .. } if !(alpha > 0.0) => {
                return Err(Error::param("kernel.alpha", "must be > 0"))
            }
            _ => {}
        }
        Ok(Kernel { kind, scale: 1.0, n })
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.scale *= s;
        self
    }

    pub fn alpha(&self) -> f64 {
        match self.kind {
            KernelKind::PoissonDerivative => 1.0,
            KernelKind::Envelope { alpha } | KernelKind::Constant { alpha, .. } => alpha,
        }
    }

    /// Declared constant C of the decay and Hölder bounds.
    pub fn c_psi(&self) -> f64 {
        let c = match self.kind {
            // |dψ/dr| ≤ 10t/(πr³) and r' ≥ r/2 give 80/π
            KernelKind::PoissonDerivative => 80.0 / PI,
            KernelKind::Envelope { alpha } => {
                let e = self.n as f64 + alpha;
                (e * 2f64.powf(e + 1.0)).max(1.0)
            }
            KernelKind::Constant { c_psi, .. } => c_psi,
        };
        c * self.scale.abs()
    }

    /// ψ(X, y) given δ(X).
    #[inline]
    pub fn eval(&self, x: &Point, delta: f64, y: &Point) -> f64 {
        let r2 = crate::spatial::dist2(x, y);
        let v = match self.kind {
            KernelKind::PoissonDerivative => {
                let t = delta;
                t * (r2 - 2.0 * t * t) / (PI * r2 * r2)
            }
            KernelKind::Envelope { alpha } => {
                let e = self.n as f64 + alpha;
                if alpha == 1.0 && self.n == 1 {
                    delta / r2
                } else {
                    delta.powf(alpha) / r2.powf(0.5 * e)
                }
            }
            KernelKind::Constant { value, .. } => value,
        };
        self.scale * v
    }
}

/// Θf at each point, by direct summation over the nodes.
pub fn theta_apply(kernel: &Kernel, set: &BoundarySet, f: &BoundaryFunction, points: &[Point]) -> Result<Vec<Complex64>> {
    f.check_len(set)?;
    let err = set.delta_error();
    let deltas: Vec<f64> = par::map_slice(points, |p| set.delta(p));
    for (p, &d) in points.iter().zip(&deltas) {
        if d <= err || d == 0.0 {
            return Err(Error::Singular { point: *p, delta: d });
        }
    }
    let terms: Vec<(Point, f64, f64)> = set
        .points
        .iter()
        .zip(&f.values)
        .zip(&set.weights)
        .filter(|((_, v), _)| v.re != 0.0 || v.im != 0.0)
        .map(|((p, v), w)| (*p, v.re * w, v.im * w))
        .collect();
    let complex = terms.iter().any(|t| t.2 != 0.0);
    let far: Vec<f64> = if f.far != 0.0 {
        points
            .iter()
            .zip(&deltas)
            .map(|(p, &d)| far_field(kernel, set, p, d).map(|v| v * f.far))
            .collect::<Result<_>>()?
    } else {
        vec![0.0; points.len()]
    };
    let idx: Vec<usize> = (0..points.len()).collect();
    Ok(par::map_slice(&idx, |&i| {
        let x = &points[i];
        let d = deltas[i];
        let (mut re, mut im) = (far[i], 0.0);
        if complex {
            for (y, a, b) in &terms {
                let k = kernel.eval(x, d, y);
                re += k * a;
                im += k * b;
            }
        } else {
            for (y, a, _) in &terms {
                re += kernel.eval(x, d, y) * a;
            }
        }
        Complex64::new(re, im)
    }))
}

/// ∫ ψ(X, y) dy over the part of an unbounded line outside its node window.
fn far_field(kernel: &Kernel, set: &BoundarySet, x: &Point, t: f64) -> Result<f64> {
    if set.is_bounded() || set.kind != crate::geometry::SetKind::SegmentLine {
        return Err(Error::Unsupported(
            "a value beyond the node window needs an unbounded line".into(),
        ));
    }
    let a = set.params.origin - x[0];
    let b = set.params.origin + set.params.length - x[0];
    let v = match kernel.kind {
        // antiderivative of (u² − t²)/(u² + t²)² is −u/(u² + t²)
        KernelKind::PoissonDerivative => t / PI * (b / (b * b + t * t) - a / (a * a + t * t)),
        KernelKind::Envelope { alpha: 1.0 } => PI - (b / t).atan() + (a / t).atan(),
        KernelKind::Constant { value: 0.0, .. } => 0.0,
        _ => {
            return Err(Error::Unsupported(
                "far-field integral is available for PoissonDerivative and Envelope with alpha = 1".into(),
            ))
        }
    };
    Ok(kernel.scale * v)
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub decay_ok: bool,
    pub holder_ok: bool,
    pub measured_c_decay: f64,
    pub measured_c_holder: f64,
    pub declared_c: f64,
    pub alpha: f64,
    pub samples: usize,
}

pub fn verify_kernel(kernel: &Kernel, set: &BoundarySet, sample_count: usize, seed: u64) -> Result<KernelReport> {
    if sample_count == 0 {
        return Err(Error::param("sample_count", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = set.ambient_dim();
    let alpha = kernel.alpha();
    let n = set.n as f64;
    let lo = (4.0 * set.spacing).max(8.0 * set.delta_error()).ln();
    let hi = set.model_extent().ln();
    let mut c_decay: f64 = 0.0;
    let mut c_holder: f64 = 0.0;
    let mut taken = 0;
    let mut tries = 0;
    while taken < sample_count && tries < 100 * sample_count {
        tries += 1;
        let i = rng.random_range(0..set.len());
        let y = set.points[i];
        let mut dir = [0.0; 3];
        let mut norm = 0.0;
        for d in dir.iter_mut().take(dim) {
            *d = rng.random_range(-1.0..1.0);
            norm += *d * *d;
        }
        if norm < 1e-6 {
            continue;
        }
        let rho = (lo + (hi - lo) * rng.random::<f64>()).exp();
        let mut x = y;
        for a in 0..dim {
            x[a] += rho * dir[a] / norm.sqrt();
        }
        let delta = set.delta(&x);
        if delta <= 2.0 * set.delta_error() || delta == 0.0 {
            continue;
        }
        let r = dist(&x, &y);
        let v = kernel.eval(&x, delta, &y);
        c_decay = c_decay.max(v.abs() * r.powf(n + alpha) / delta.powf(alpha));
        // a second node with 2|y - y'| <= |X - y|
        let mut partners = Vec::new();
        set.tree().within(&y, 0.5 * r, |j, _| {
            if j != i {
                partners.push(j)
            }
        });
        if let Some(&j) = partners.get(rng.random_range(0..partners.len().max(1))) {
            let yp = set.points[j];
            let dy = dist(&y, &yp);
            let diff = (v - kernel.eval(&x, delta, &yp)).abs();
            c_holder = c_holder.max(diff * r.powf(n + alpha) / dy.powf(alpha));
        }
        taken += 1;
    }
    let declared = kernel.c_psi();
    Ok(KernelReport {
        decay_ok: c_decay <= declared,
        holder_ok: c_holder <= declared,
        measured_c_decay: c_decay,
        measured_c_holder: c_holder,
        declared_c: declared,
        alpha,
        samples: taken,
    })
}

/// Sparse symmetric S_j tables on node pairs.
#[derive(Debug, Clone)]
pub struct ApproxIdentityFamily {
    pub j_min: i32,
    pub j_max: i32,
    pub eps: f64,
    /// Support radius of S_j is `support * 2^-j`.
    pub support: f64,
    /// rows[j - j_min + 1][x] = [(y, S_j(x, y))]; includes level j_min - 1.
    rows: Vec<Vec<Vec<(u32, f64)>>>,
    pub sweeps: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproxIdentityReport {
    pub max_row_deviation: f64,
    pub max_col_deviation: f64,
    pub support_ok: bool,
    /// max_j max S_j(x, y) 2^{-jn}
    pub pointwise_constant: f64,
    pub sweeps: Vec<usize>,
}

const SINKHORN_TOL: f64 = 1e-8;
const SINKHORN_SWEEPS: usize = 100;

fn mollifier(t: f64, eps: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (1.0 - t * t).powf(eps)
    }
}

/// Builds S_j for j in `j_min - 1 ..= j_max` so that D_j is available on
/// `j_min..=j_max`.
pub fn build_approx_identity(
    grid: &DyadicGrid,
    set: &BoundarySet,
    eps_smooth: f64,
    j_min: i32,
    j_max: i32,
) -> Result<ApproxIdentityFamily> {
    if !(eps_smooth > 0.0 && eps_smooth <= 1.0) {
        return Err(Error::param("eps_smooth", "must be in (0, 1]"));
    }
    if j_min - 1 < grid.k_min || j_max > grid.k_max || j_min > j_max {
        return Err(Error::LevelOutOfRange {
            level: if j_max > grid.k_max { j_max } else { j_min - 1 },
            k_min: grid.k_min,
            k_max: grid.k_max,
        });
    }
    let support = 2.0;
    let mut rows = Vec::new();
    let mut sweeps = Vec::new();
    for j in (j_min - 1)..=j_max {
        let radius = support * 2f64.powi(-j);
        let kernel: Vec<Vec<(u32, f64)>> = par::map_range(set.len(), |x| {
            let mut row = Vec::new();
            set.tree().within(&set.points[x], radius, |y, d2| {
                let v = mollifier(d2.sqrt() / radius, eps_smooth);
                if v > 0.0 {
                    row.push((y as u32, v));
                }
            });
            row.sort_unstable_by_key(|e| e.0);
            row
        });
        let (d, used) = sinkhorn(&kernel, &set.weights)?;
        let scaled: Vec<Vec<(u32, f64)>> = kernel
            .into_iter()
            .enumerate()
            .map(|(x, row)| row.into_iter().map(|(y, v)| (y, d[x] * v * d[y as usize])).collect())
            .collect();
        rows.push(scaled);
        sweeps.push(used);
    }
    Ok(ApproxIdentityFamily {
        j_min,
        j_max,
        eps: eps_smooth,
        support,
        rows,
        sweeps,
    })
}

/// Symmetric scaling d with Σ_y d_x K(x,y) d_y w_y = 1 for every x.
fn sinkhorn(kernel: &[Vec<(u32, f64)>], w: &[f64]) -> Result<(Vec<f64>, usize)> {
    let mut d = vec![1.0; kernel.len()];
    let mut residual = f64::INFINITY;
    for sweep in 1..=SINKHORN_SWEEPS {
        let kd: Vec<f64> = kernel
            .iter()
            .map(|row| row.iter().map(|&(y, v)| v * d[y as usize] * w[y as usize]).sum())
            .collect();
        residual = d.iter().zip(&kd).map(|(a, b)| (a * b - 1.0).abs()).fold(0.0, f64::max);
        if residual <= SINKHORN_TOL {
            return Ok((d, sweep - 1));
        }
        for (di, k) in d.iter_mut().zip(&kd) {
            *di = (*di / k).sqrt();
        }
    }
    Err(Error::NoConvergence {
        sweeps: SINKHORN_SWEEPS,
        residual,
    })
}

impl ApproxIdentityFamily {
    fn table(&self, j: i32) -> &[Vec<(u32, f64)>] {
        &self.rows[(j - self.j_min + 1) as usize]
    }

    pub fn apply_s(&self, j: i32, set: &BoundarySet, f: &BoundaryFunction) -> BoundaryFunction {
        let t = self.table(j);
        BoundaryFunction {
            far: 0.0,
            values: t
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&(y, v)| f.values[y as usize] * (v * set.weights[y as usize]))
                        .sum()
                })
                .collect(),
        }
    }

    /// D_j f = S_j f − S_{j−1} f.
    pub fn apply_d(&self, j: i32, set: &BoundarySet, f: &BoundaryFunction) -> BoundaryFunction {
        let a = self.apply_s(j, set, f);
        let b = self.apply_s(j - 1, set, f);
        BoundaryFunction {
            values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(),
            far: 0.0,
        }
    }

    /// S_j(x, y), zero off the stored support.
    pub fn entry(&self, j: i32, x: usize, y: usize) -> f64 {
        let row = &self.table(j)[x];
        row.binary_search_by_key(&(y as u32), |e| e.0).map_or(0.0, |i| row[i].1)
    }

    pub fn verify(&self, set: &BoundarySet) -> ApproxIdentityReport {
        let mut row_dev: f64 = 0.0;
        let mut col_dev: f64 = 0.0;
        let mut support_ok = true;
        let mut pointwise: f64 = 0.0;
        for j in (self.j_min - 1)..=self.j_max {
            let t = self.table(j);
            let radius = self.support * 2f64.powi(-j);
            let mut cols = vec![0.0; set.len()];
            for (x, row) in t.iter().enumerate() {
                let mut s = 0.0;
                for &(y, v) in row {
                    let y = y as usize;
                    s += v * set.weights[y];
                    cols[y] += v * set.weights[x];
                    if dist(&set.points[x], &set.points[y]) >= radius {
                        support_ok = false;
                    }
                    pointwise = pointwise.max(v * 2f64.powi(-j * set.n as i32));
                }
                row_dev = row_dev.max((s - 1.0).abs());
            }
            col_dev = cols.iter().map(|c| (c - 1.0).abs()).fold(col_dev, f64::max);
        }
        ApproxIdentityReport {
            max_row_deviation: row_dev,
            max_col_deviation: col_dev,
            support_ok,
            pointwise_constant: pointwise,
            sweeps: self.sweeps.clone(),
        }
    }
}

/// ∫ (Σ_j |D_j f|²)^{p/2} dσ̂, with D_j standing in for the dual family.
pub fn square_sum_dj(fam: &ApproxIdentityFamily, set: &BoundarySet, f: &BoundaryFunction, p: f64) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::param("p", "must be in (1, inf)"));
    }
    f.check_len(set)?;
    let mut acc = vec![0.0; set.len()];
    for j in fam.j_min..=fam.j_max {
        let d = fam.apply_d(j, set, f);
        for (a, v) in acc.iter_mut().zip(&d.values) {
            *a += v.norm_sqr();
        }
    }
    Ok(acc.iter().zip(&set.weights).map(|(a, w)| a.powf(p / 2.0) * w).sum())
}

/// ‖f − Σ_j D_j D_j f‖₂ over the family's range.
pub fn reproducing_residual(fam: &ApproxIdentityFamily, set: &BoundarySet, f: &BoundaryFunction) -> f64 {
    let mut sum = BoundaryFunction::zeros(set.len());
    for j in fam.j_min..=fam.j_max {
        let d = fam.apply_d(j, set, &fam.apply_d(j, set, f));
        sum = sum.add(&d);
    }
    let diff = f.add(&sum.scaled(-1.0));
    diff.l2_squared(set).sqrt()
}

pub fn dyadic_average(grid: &DyadicGrid, set: &BoundarySet, f: &BoundaryFunction, q: usize) -> Result<Complex64> {
    let cube = grid.cube(q)?;
    if cube.measure <= 0.0 {
        return Err(Error::ZeroMeasure(q));
    }
    let s: Complex64 = cube.members.iter().map(|&m| f.values[m] * set.weights[m]).sum();
    Ok(s / cube.measure)
}

/// 𝔼_Q|f| for every cube.
pub fn abs_averages(grid: &DyadicGrid, set: &BoundarySet, f: &BoundaryFunction) -> Vec<f64> {
    grid.cubes
        .iter()
        .map(|q| {
            if q.measure <= 0.0 {
                0.0
            } else {
                q.members.iter().map(|&m| f.values[m].norm() * set.weights[m]).sum::<f64>() / q.measure
            }
        })
        .collect()
}

/// ℳf(x) = max over grid cubes Q ∋ x of 𝔼_Q|f|.
pub fn dyadic_maximal(grid: &DyadicGrid, set: &BoundarySet, f: &BoundaryFunction) -> Vec<f64> {
    let avg = abs_averages(grid, set, f);
    (0..set.len())
        .map(|x| grid.chain(x).iter().map(|&q| avg[q]).fold(0.0, f64::max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::build_grid;
    use crate::geometry::{make_boundary_set, SetKind, SetParams};
    use proptest::{prop_assert, proptest};

    fn seg(n: usize) -> BoundarySet {
        make_boundary_set(SetKind::SegmentLine, n, &SetParams::default()).unwrap()
    }

    fn long_line() -> BoundarySet {
        make_boundary_set(
            SetKind::SegmentLine,
            16384,
            &SetParams {
                origin: -64.0,
                length: 128.0,
                unbounded: true,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn poisson_derivative_on_a_window_matches_arctan_form() {
        // ∫_a^b P_t(x - y) dy = (arctan((b-x)/t) - arctan((a-x)/t)) / π, so
        // t ∂_t of it is (t/π)((a-x)/(t²+(a-x)²) - (b-x)/(t²+(b-x)²))
        let s = long_line();
        let (a, b) = (-64.0, 64.0);
        let k = Kernel::new(KernelKind::PoissonDerivative, 1).unwrap();
        let mut one = BoundaryFunction::constant(&s, 1.0);
        one.far = 0.0;
        let pts: Vec<Point> = (0..20)
            .map(|i| [-1.0 + 0.1 * i as f64, 0.05 + 0.45 * (i as f64 / 19.0), 0.0])
            .collect();
        let v = theta_apply(&k, &s, &one, &pts).unwrap();
        for (p, z) in pts.iter().zip(v) {
            let (x, t) = (p[0], p[1]);
            let exact = t / PI * ((a - x) / (t * t + (a - x).powi(2)) - (b - x) / (t * t + (b - x).powi(2)));
            assert!((z.re - exact).abs() <= 1e-4, "{} vs {exact}", z.re);
            assert!(exact.abs() <= 2.0 * t / (PI * 63.0));
        }
    }

    #[test]
    fn constants_on_the_whole_line_are_annihilated() {
        let s = long_line();
        let one = BoundaryFunction::constant(&s, 1.0);
        assert_eq!(one.far, 1.0);
        let pts: Vec<Point> = (0..40)
            .map(|i| [-3.0 + 0.15 * i as f64, 0.03 + 2.0 * (i as f64 / 39.0), 0.0])
            .collect();
        let k = Kernel::new(KernelKind::PoissonDerivative, 1).unwrap();
        // midpoint error for a pole at distance t is about e^{-2πt/h}/t
        for z in theta_apply(&k, &s, &one, &pts).unwrap() {
            assert!(z.norm() <= 1e-8, "{z}");
        }
        // ∫_R t / (u² + t²) du = π
        let e = Kernel::new(KernelKind::Envelope { alpha: 1.0 }, 1).unwrap();
        for z in theta_apply(&e, &s, &one, &pts).unwrap() {
            assert!((z.re - PI).abs() <= 1e-8, "{z}");
        }
        let bounded = seg(64);
        let mut g = BoundaryFunction::zeros(64);
        g.far = 1.0;
        assert!(theta_apply(&k, &bounded, &g, &[[0.5, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn theta_zero_and_linear() {
        let s = seg(256);
        let k = Kernel::new(KernelKind::Envelope { alpha: 0.5 }, 1).unwrap();
        let pts = vec![[0.5, 0.3, 0.0], [2.0, -1.0, 0.0]];
        let z = theta_apply(&k, &s, &BoundaryFunction::zeros(256), &pts).unwrap();
        assert!(z.iter().all(|v| v.norm() == 0.0));
        let f = BoundaryFunction::from_fn(&s, |p| p[0].sin());
        let g = BoundaryFunction::from_fn(&s, |p| (3.0 * p[0]).cos());
        let a = theta_apply(&k, &s, &f, &pts).unwrap();
        let b = theta_apply(&k, &s, &g, &pts).unwrap();
        let ab = theta_apply(&k, &s, &f.add(&g), &pts).unwrap();
        for i in 0..2 {
            assert!((ab[i] - a[i] - b[i]).norm() <= 1e-15 * (a[i].norm() + b[i].norm()));
        }
        assert!(matches!(
            theta_apply(&k, &s, &f, &[s.points[3]]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn poisson_derivative_matches_closed_form() {
        // t ∂_t P_t(x) with P_t(x) = t / (π (t² + x²)), by central difference
        let k = Kernel::new(KernelKind::PoissonDerivative, 1).unwrap();
        let p = |t: f64, x: f64| t / (PI * (t * t + x * x));
        for &(x, t) in &[(0.3, 0.2), (-1.0, 0.05), (2.0, 3.0)] {
            let h = 1e-5 * t;
            let fd = t * (p(t + h, x) - p(t - h, x)) / (2.0 * h);
            let v = k.eval(&[x, t, 0.0], t, &[0.0, 0.0, 0.0]);
            assert!((v - fd).abs() < 1e-6 * fd.abs().max(1.0), "{v} vs {fd}");
        }
    }

    #[test]
    fn kernel_checks() {
        let s = long_line();
        let k = Kernel::new(KernelKind::PoissonDerivative, 1).unwrap();
        let r = verify_kernel(&k, &s, 2000, 5).unwrap();
        assert!(r.decay_ok && r.holder_ok, "{r:?}");
        assert!(r.measured_c_decay <= 1.0 / PI + 1e-12, "{r:?}");
        let c = Kernel::new(
            KernelKind::Constant {
                value: 1.0,
                alpha: 1.0,
                c_psi: 1.0,
            },
            1,
        )
        .unwrap();
        let r = verify_kernel(&c, &s, 500, 5).unwrap();
        assert!(!r.decay_ok);
        let circle = make_boundary_set(SetKind::Circle, 1024, &SetParams::default()).unwrap();
        let e = Kernel::new(KernelKind::Envelope { alpha: 1.0 }, 1).unwrap();
        let r = verify_kernel(&e, &circle, 1000, 2).unwrap();
        assert!(r.decay_ok && r.holder_ok, "{r:?}");
        assert!(Kernel::new(KernelKind::PoissonDerivative, 2).is_err());
        assert!(Kernel::new(KernelKind::Envelope { alpha: 0.0 }, 1).is_err());
    }

    fn family(n: usize, j0: i32, j1: i32) -> (BoundarySet, DyadicGrid, ApproxIdentityFamily) {
        let s = seg(n);
        let g = build_grid(&s, 0, j1).unwrap();
        let fam = build_approx_identity(&g, &s, 0.5, j0, j1).unwrap();
        (s, g, fam)
    }

    #[test]
    fn approx_identity_marginals_and_support() {
        let (s, _, fam) = family(1024, 2, 7);
        let r = fam.verify(&s);
        assert!(r.max_row_deviation <= 1e-8 && r.max_col_deviation <= 1e-8, "{r:?}");
        assert!(r.support_ok);
        assert_eq!(fam.entry(7, 0, 1000), 0.0);
        // D_j annihilates constants
        let one = BoundaryFunction::constant(&s, 1.0);
        for j in 2..=7 {
            let d = fam.apply_d(j, &s, &one);
            assert!(d.values.iter().all(|v| v.norm() <= 1e-7));
        }
        assert!(square_sum_dj(&fam, &s, &one, 2.0).unwrap() <= 1e-12);
        assert_eq!(square_sum_dj(&fam, &s, &BoundaryFunction::zeros(s.len()), 1.5).unwrap(), 0.0);
    }

    #[test]
    fn s_j_reproduces_linear_functions() {
        let (s, _, fam) = family(2048, 6, 8);
        let f = BoundaryFunction::from_fn(&s, |p| p[0]);
        for j in 5..=8 {
            let sf = fam.apply_s(j, &s, &f);
            let err = sf
                .values
                .iter()
                .zip(&f.values)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err <= 2.0 * 2f64.powi(-j), "j = {j}: {err}");
        }
    }

    #[test]
    fn square_sum_of_random_signs() {
        let (s, _, fam) = family(1024, 2, 7);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = BoundaryFunction::from_real((0..s.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect());
            let v = square_sum_dj(&fam, &s, &f, 2.0).unwrap();
            assert!(v <= 4.0 * f.l2_squared(&s), "{v}");
        }
        let f = BoundaryFunction::from_fn(&s, |p| (7.0 * p[0]).sin());
        assert!(reproducing_residual(&fam, &s, &f).is_finite());
    }

    #[test]
    fn averages_and_maximal() {
        let s = seg(1024);
        let g = build_grid(&s, 0, 5).unwrap();
        let root = g.top_cubes()[0];
        let c = BoundaryFunction::constant(&s, 2.5);
        assert!((dyadic_average(&g, &s, &c, root).unwrap().re - 2.5).abs() < 1e-12);
        let left = g.cubes[root].children[0];
        let ind = BoundaryFunction::from_real((0..s.len()).map(|i| if g.node_in(i, left) { 1.0 } else { 0.0 }).collect());
        assert!((dyadic_average(&g, &s, &ind, root).unwrap().re - 0.5).abs() < 1e-12);
        let f = BoundaryFunction::from_fn(&s, |p| (5.0 * p[0]).cos());
        for (q, cube) in g.cubes.iter().enumerate() {
            if cube.children.is_empty() {
                continue;
            }
            let whole = dyadic_average(&g, &s, &f, q).unwrap();
            let parts: Complex64 = cube
                .children
                .iter()
                .map(|&ch| dyadic_average(&g, &s, &f, ch).unwrap() * (g.cubes[ch].measure / cube.measure))
                .sum();
            assert!((whole - parts).norm() < 1e-12);
        }
        let m = dyadic_maximal(&g, &s, &c);
        assert!(m.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // indicator of one leaf: 1 on the leaf, 1/2 on its sibling
        let leaf = g.level(5)[6];
        let sib = g.cubes[g.cubes[leaf].parent.unwrap()].children[1];
        let spike = BoundaryFunction::from_real((0..s.len()).map(|i| if g.node_in(i, leaf) { 1.0 } else { 0.0 }).collect());
        let m = dyadic_maximal(&g, &s, &spike);
        assert!(g.cubes[leaf].members.iter().all(|&i| m[i] == 1.0));
        assert!(g.cubes[sib].members.iter().all(|&i| (m[i] - 0.5).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn maximal_is_sublinear_and_monotone(
            a in proptest::collection::vec(-2.0f64..2.0, 256),
            b in proptest::collection::vec(0.0f64..2.0, 256),
        ) {
            let s = seg(256);
            let g = build_grid(&s, 0, 4).unwrap();
            let f = BoundaryFunction::from_real(a.clone());
            let h = BoundaryFunction::from_real(b.clone());
            let mf = dyadic_maximal(&g, &s, &f);
            let mh = dyadic_maximal(&g, &s, &h);
            let mfh = dyadic_maximal(&g, &s, &f.add(&h));
            for i in 0..256 {
                prop_assert!(mfh[i] <= mf[i] + mh[i] + 1e-12);
            }
            let abs_f = BoundaryFunction::from_real(a.iter().map(|v| v.abs()).collect());
            let bigger = abs_f.add(&h);
            let m1 = dyadic_maximal(&g, &s, &abs_f);
            let m2 = dyadic_maximal(&g, &s, &bigger);
            for i in 0..256 {
                prop_assert!(m1[i] <= m2[i] + 1e-12);
            }
        }
    }

    #[test]
    fn maximal_l2_bound_is_stable() {
        let s = seg(512);
        let g = build_grid(&s, 0, 6).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = BoundaryFunction::from_real((0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let m = BoundaryFunction::from_real(dyadic_maximal(&g, &s, &f));
            worst = worst.max((m.l2_squared(&s) / f.l2_squared(&s)).sqrt());
        }
        // Doob: ‖ℳf‖₂ ≤ 2‖f‖₂
        assert!(worst <= 2.0, "{worst}");
    }

    #[test]
    fn csv_round_trip() {
        let s = seg(8);
        let dir = std::env::temp_dir().join(format!("adrsq-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("f.csv");
        std::fs::write(&p, "node_id,value\n0,1.5\n7,-2\n").unwrap();
        let f = BoundaryFunction::from_csv(&p, &s).unwrap();
        assert_eq!(f.values[0].re, 1.5);
        assert_eq!(f.values[7].re, -2.0);
        assert_eq!(f.values[3].re, 0.0);
        std::fs::write(&p, "node_id,value\n9,1\n").unwrap();
        assert!(BoundaryFunction::from_csv(&p, &s).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
