//! Scenario files and the staged diagnostic pipeline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dyadic::{build_grid_with, verify_grid, DyadicGrid, GridStrategy};
use crate::error::{Error, Result};
use crate::geometry::{make_boundary_set, BoundarySet, SetKind, SetParams};
use crate::operators::{verify_kernel, BoundaryFunction, Kernel, KernelKind};
use crate::tb::{
    bounded_tail, carleson_functional, global_square_norm, k_epsilon, level_set_fraction, sawtooth_inclusion_violations,
    stopping_time, t1_check, verify_packing, verify_tb_hypotheses, Context, Generator, TailQuadrature, TestSystem,
    ThetaField, Variant,
};
use crate::whitney::{build_whitney, Collections, WhitneyDecomposition, Window};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub set: SetSpec,
    pub grid: GridSpec,
    pub whitney: WhitneySpec,
    pub kernel: KernelKind,
    pub system: SystemSpec,
    pub constants: Constants,
    pub thresholds: Thresholds,
    #[serde(default)]
    pub test_functions: Vec<TestFunctionSpec>,
    #[serde(default)]
    pub tail: Option<TailSpec>,
    #[serde(default)]
    pub checks: Checks,
    /// Directory relative paths resolve against; set by `load_scenario`.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub kind: SetKind,
    pub resolution: usize,
    #[serde(default)]
    pub params: SetParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub k_min: i32,
    pub k_max: i32,
    #[serde(default)]
    pub strategy: GridStrategy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl WindowSpec {
    fn to_window(&self, path: &str) -> Result<Window> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() || self.lo.len() > 3 {
            return Err(Error::Scenario {
                path: path.into(),
                message: "lo and hi need the same length, 1 to 3".into(),
            });
        }
        let mut w = Window {
            lo: [0.0; 3],
            hi: [0.0; 3],
        };
        w.lo[..self.lo.len()].copy_from_slice(&self.lo);
        w.hi[..self.hi.len()].copy_from_slice(&self.hi);
        Ok(w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhitneySpec {
    pub window: WindowSpec,
    pub k_min: i32,
    pub k_max: i32,
    #[serde(default)]
    pub refine: u32,
    #[serde(default)]
    pub aperture_beta: Option<f64>,
    #[serde(default)]
    pub analysis_window: Option<WindowSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    ConstantOne,
    HalfIndicator,
    RandomAccretive { seed: u64 },
    Zero,
}

impl SystemSpec {
    fn generator(&self) -> Generator {
        match *self {
            SystemSpec::ConstantOne => Generator::ConstantOne,
            SystemSpec::HalfIndicator => Generator::HalfIndicator,
            SystemSpec::RandomAccretive { seed } => Generator::RandomAccretive { seed },
            SystemSpec::Zero => Generator::Zero,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub c0: f64,
    pub p: f64,
    /// exponent of the sawtooth functional, in (1, 2]
    pub p_sawtooth: f64,
    /// exponent of the level-set check, in (1, 2)
    pub p_goodlambda: f64,
    pub eps: Vec<f64>,
    pub levels_n: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub eta_min: f64,
    pub sawtooth_carleson: f64,
    pub goodlambda_beta: f64,
    pub t1_carleson: f64,
    pub t1_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunctionSpec {
    /// exp(−(x − center)²/scale) cos(freq x) in the first coordinate
    GaussianWave {
        #[serde(default)]
        center: f64,
        scale: f64,
        freq: f64,
    },
    Spike {
        node: usize,
    },
    Constant {
        value: f64,
    },
    Csv {
        path: PathBuf,
    },
}

impl TestFunctionSpec {
    pub fn build(&self, set: &BoundarySet, base: Option<&Path>) -> Result<BoundaryFunction> {
        Ok(match *self {
            TestFunctionSpec::GaussianWave { center, scale, freq } => {
                if !(scale > 0.0) {
                    return Err(Error::param("test_functions.scale", "must be > 0"));
                }
                BoundaryFunction::from_fn(set, |p| (-(p[0] - center).powi(2) / scale).exp() * (freq * p[0]).cos())
            }
            TestFunctionSpec::Spike { node } => {
                if node >= set.len() {
                    return Err(Error::UnknownNode(node));
                }
                let mut f = BoundaryFunction::zeros(set.len());
                f.values[node].re = 1.0;
                f
            }
            TestFunctionSpec::Constant { value } => BoundaryFunction::constant(set, value),
            TestFunctionSpec::Csv { ref path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                BoundaryFunction::from_csv(&full, set)?
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSpec {
    pub k_max: u32,
    /// number of seeded random f in the uniformity check
    pub functions: usize,
    #[serde(default)]
    pub quadrature: TailQuadrature,
    pub ratio_range: [f64; 2],
    pub constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    pub adr_samples: usize,
    pub tau_samples: usize,
    pub whitney_coverage: usize,
    pub kernel_samples: usize,
}

impl Default for Checks {
    fn default() -> Self {
        Checks {
            adr_samples: 400,
            tau_samples: 24,
            whitney_coverage: 2000,
            kernel_samples: 1000,
        }
    }
}

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses a scenario, naming the offending field on failure.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.inner().to_string();
        if let Some(rest) = message.strip_prefix("missing field `") {
            if let Some(field) = rest.split('`').next() {
                path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
            }
        }
        Error::Scenario { path, message }
    })?;
    sc.validate()?;
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let mut sc = parse_scenario(&text)?;
    sc.base_dir = path.parent().map(Path::to_path_buf);
    Ok(sc)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.grid.k_min > self.grid.k_max {
            return Err(bad("grid.k_min", "exceeds grid.k_max"));
        }
        if self.whitney.k_min > self.whitney.k_max {
            return Err(bad("whitney.k_min", "exceeds whitney.k_max"));
        }
        if self.whitney.k_max < self.grid.k_max {
            return Err(bad("whitney.k_max", "must reach the finest grid level"));
        }
        let c = &self.constants;
        if !(c.c0 > 0.0) {
            return Err(bad("constants.c0", "must be > 0"));
        }
        if !(c.p > 1.0 && c.p.is_finite()) {
            return Err(bad("constants.p", "must be in (1, inf)"));
        }
        if !(c.p_sawtooth > 1.0 && c.p_sawtooth <= 2.0) {
            return Err(bad("constants.p_sawtooth", "must be in (1, 2]"));
        }
        if !(c.p_goodlambda > 1.0 && c.p_goodlambda < 2.0) {
            return Err(bad("constants.p_goodlambda", "must be in (1, 2)"));
        }
        if c.eps.is_empty() || c.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(bad("constants.eps", "needs at least one value, all > 0"));
        }
        if c.levels_n.is_empty() || c.levels_n.iter().any(|n| !(*n > 0.0)) {
            return Err(bad("constants.levels_n", "needs at least one value, all > 0"));
        }
        let t = &self.thresholds;
        if !(t.goodlambda_beta > 0.0 && t.goodlambda_beta < 1.0) {
            return Err(bad("thresholds.goodlambda_beta", "must be in (0, 1)"));
        }
        if let Some(tail) = &self.tail {
            if tail.k_max < 3 {
                return Err(bad("tail.k_max", "must be >= 3"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Adr,
    Grid,
    Whitney,
    Kernel,
    TbHypotheses,
    Stopping,
    KEpsilon,
    LevelSets,
    T1,
    Tail,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Adr,
        Stage::Grid,
        Stage::Whitney,
        Stage::Kernel,
        Stage::TbHypotheses,
        Stage::Stopping,
        Stage::KEpsilon,
        Stage::LevelSets,
        Stage::T1,
        Stage::Tail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Adr => "adr",
            Stage::Grid => "grid",
            Stage::Whitney => "whitney",
            Stage::Kernel => "kernel",
            Stage::TbHypotheses => "tb-hypotheses",
            Stage::Stopping => "stopping",
            Stage::KEpsilon => "k-epsilon",
            Stage::LevelSets => "level-sets",
            Stage::T1 => "t1",
            Stage::Tail => "tail",
        }
    }

    fn after_hypotheses(self) -> bool {
        self > Stage::TbHypotheses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    HypothesesNotMet,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub name: &'static str,
    pub status: Status,
    pub pass: bool,
    pub values: Value,
    pub context: Value,
}

/// Rows (cube_id, level, value).
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub rows: Vec<(usize, i32, f64)>,
}

impl Table {
    fn new(name: &str, grid: &DyadicGrid, vals: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Table {
            name: name.into(),
            rows: vals.into_iter().map(|(q, v)| (q, grid.cubes[q].level, v)).collect(),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cube_id", "level", "value"])?;
        for (q, l, v) in &self.rows {
            w.serialize((q, l, v))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub stages: Vec<Stage>,
    /// Run the grid property checks (off for a bare build).
    pub verify_grid: bool,
    pub refine: Option<u32>,
}

impl RunOptions {
    pub fn all() -> Self {
        RunOptions {
            stages: Stage::ALL.to_vec(),
            verify_grid: true,
            refine: None,
        }
    }

    /// Stages behind a CLI command name.
    pub fn for_command(command: &str) -> Result<Self> {
        use Stage::*;
        let (stages, verify_grid) = match command {
            "verify-geometry" => (vec![Adr], false),
            "build-grid" => (vec![Grid], false),
            "verify-grid" => (vec![Grid], true),
            "run-t1" => (vec![Grid, Whitney, Kernel, T1], true),
            "run-tb" => (vec![Grid, Whitney, Kernel, TbHypotheses, Stopping, KEpsilon, LevelSets], true),
            "tail" => (vec![Tail], false),
            "all" => (Stage::ALL.to_vec(), true),
            other => return Err(Error::param("command", format!("unknown command `{other}`"))),
        };
        Ok(RunOptions {
            stages,
            verify_grid,
            refine: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Value,
    pub stages: Vec<StageReport>,
    pub tables: Vec<Table>,
}

impl Outcome {
    pub fn all_pass(&self) -> bool {
        self.stages.iter().all(|s| matches!(s.status, Status::Pass | Status::Skipped))
    }

    /// 0 when every stage that ran passed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_pass() {
            0
        } else {
            2
        }
    }
}

/// Grid, Whitney boxes and collections built from a scenario.
pub struct Geometry {
    pub grid: DyadicGrid,
    pub whit: WhitneyDecomposition,
    pub coll: Collections,
}

impl Geometry {
    pub fn context<'a>(&'a self, set: &'a BoundarySet, kernel: &'a Kernel) -> Context<'a> {
        Context {
            set,
            grid: &self.grid,
            whit: &self.whit,
            coll: &self.coll,
            kernel,
        }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

pub fn build_set(sc: &Scenario) -> Result<BoundarySet> {
    make_boundary_set(sc.set.kind, sc.set.resolution, &sc.set.params)
}

pub fn build_geometry(sc: &Scenario, set: &BoundarySet, refine: u32) -> Result<Geometry> {
    let grid = build_grid_with(set, sc.grid.k_min, sc.grid.k_max, sc.grid.strategy).map_err(|e| e.in_stage("grid"))?;
    let window = sc.whitney.window.to_window("whitney.window")?;
    let whit = build_whitney(set, window, sc.whitney.k_min, sc.whitney.k_max)
        .map_err(|e| e.in_stage("whitney"))?
        .with_refine(refine);
    let analysis = sc
        .whitney
        .analysis_window
        .as_ref()
        .map(|w| w.to_window("whitney.analysis_window"))
        .transpose()?;
    let coll = Collections::build(&whit, &grid, set, sc.whitney.aperture_beta, analysis.as_ref())
        .map_err(|e| e.in_stage("whitney"))?;
    Ok(Geometry { grid, whit, coll })
}

fn random_function(set: &BoundarySet, seed: u64, stream: u64) -> BoundaryFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    BoundaryFunction::from_real((0..set.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Runs the requested stages in order and assembles the report.
pub fn run_tb_pipeline(sc: &Scenario, opts: &RunOptions) -> Result<Outcome> {
    let wants = |s: Stage| opts.stages.contains(&s);
    let refine = opts.refine.unwrap_or(sc.whitney.refine);
    let clock = Instant::now();
    let set = build_set(sc).map_err(|e| e.in_stage("adr"))?;
    let mut stages: Vec<StageReport> = Vec::new();
    let mut tables = Vec::new();
    let mut measured = serde_json::Map::new();
    let mut hypotheses_ok = true;

    let mut push = |stages: &mut Vec<StageReport>, stage: Stage, pass: bool, values: Value, context: Value| {
        let status = if !pass {
            Status::Fail
        } else {
            Status::Pass
        };
        log::info!("stage {} {:?} at {:.2?}", stage.name(), status, clock.elapsed());
        stages.push(StageReport {
            name: stage.name(),
            status,
            pass,
            values,
            context,
        });
    };

    if wants(Stage::Adr) {
        let r = set.verify_adr(sc.checks.adr_samples, sc.seed).map_err(|e| e.in_stage("adr"))?;
        measured.insert("adr_lower".into(), json!(r.c_lower));
        measured.insert("adr_upper".into(), json!(r.c_upper));
        push(&mut stages, Stage::Adr, r.pass, json!(r), json!({ "nodes": set.len(), "spacing": set.spacing }));
    }

    let needs_geometry = opts.stages.iter().any(|s| !matches!(s, Stage::Adr | Stage::Tail | Stage::Grid));
    let mut geo: Option<Geometry> = None;
    if wants(Stage::Grid) && !needs_geometry {
        let grid = build_grid_with(&set, sc.grid.k_min, sc.grid.k_max, sc.grid.strategy).map_err(|e| e.in_stage("grid"))?;
        grid_stage(sc, &set, &grid, opts.verify_grid, &mut stages, &mut tables, &mut measured, &mut push);
    } else if needs_geometry {
        let g = build_geometry(sc, &set, refine)?;
        if wants(Stage::Grid) {
            grid_stage(sc, &set, &g.grid, opts.verify_grid, &mut stages, &mut tables, &mut measured, &mut push);
        }
        geo = Some(g);
    }

    let kernel = Kernel::new(sc.kernel, set.n).map_err(|e| e.in_stage("kernel"))?;

    if let Some(g) = &geo {
        if wants(Stage::Whitney) {
            let r = g.whit.verify(&set, sc.checks.whitney_coverage, sc.seed);
            measured.insert("aperture_beta".into(), json!(g.coll.beta));
            tables.push(Table::new(
                "collections",
                &g.grid,
                g.coll.admissible_cubes().map(|q| (q, g.coll.per_cube[q].len() as f64)),
            ));
            let context = json!({
                "window": [g.whit.window.lo, g.whit.window.hi],
                "levels": [g.whit.k_min, g.whit.k_max],
                "refine": g.whit.refine,
                "floor_scale": g.whit.floor_scale,
            });
            let empty = g.coll.admissible_cubes().filter(|&q| g.coll.per_cube[q].is_empty()).count();
            let values = json!({
                "report": r,
                "aperture_beta": g.coll.beta,
                "aperture_measured": g.coll.beta_measured,
                "admissible_cubes": g.coll.admissible_cubes().count(),
                "empty_collections": empty,
            });
            push(&mut stages, Stage::Whitney, r.pass && empty == 0, values, context);
        }
        if wants(Stage::Kernel) {
            let r = verify_kernel(&kernel, &set, sc.checks.kernel_samples, sc.seed).map_err(|e| e.in_stage("kernel"))?;
            measured.insert("kernel_decay".into(), json!(r.measured_c_decay));
            measured.insert("kernel_holder".into(), json!(r.measured_c_holder));
            push(&mut stages, Stage::Kernel, r.decay_ok && r.holder_ok, json!(r), json!({ "kind": sc.kernel }));
        }

        let ctx = g.context(&set, &kernel);
        let trunc = serde_json::to_value(ctx.truncation())?;
        let system = TestSystem::new(sc.system.generator(), sc.constants.c0, sc.constants.p)?;

        if wants(Stage::TbHypotheses) {
            let r = verify_tb_hypotheses(&ctx, &system).map_err(|e| e.in_stage("tb-hypotheses"))?;
            for (name, pick) in [("tb_eq1", 0), ("tb_eq2", 1), ("tb_eq3", 2)] {
                tables.push(Table::new(
                    name,
                    &g.grid,
                    r.rows.iter().map(|row| (row.cube, [row.eq1, row.eq2, row.eq3][pick])),
                ));
            }
            hypotheses_ok = r.pass;
            let values = json!({
                "worst_eq1": r.worst_eq1, "worst_eq2": r.worst_eq2, "worst_eq3": r.worst_eq3,
                "pass_eq1": r.pass_eq1, "pass_eq2": r.pass_eq2, "pass_eq3": r.pass_eq3,
                "c0": system.c0, "p": system.p, "cubes": r.rows.len(),
            });
            push(&mut stages, Stage::TbHypotheses, r.pass, values, trunc.clone());
        }

        let needs_one = [Stage::Stopping, Stage::KEpsilon, Stage::LevelSets, Stage::T1].iter().any(|&s| wants(s));
        let one_masses = if needs_one {
            ctx.theta_one_masses().map_err(|e| e.in_stage("t1"))?
        } else {
            Vec::new()
        };

        if wants(Stage::Stopping) {
            let v = stopping_stage(sc, &ctx, &system, &one_masses, &mut tables).map_err(|e| e.in_stage("stopping"))?;
            let pass = v["pass"].as_bool().unwrap_or(false);
            measured.insert("eta_packing".into(), v["eta_packing"].clone());
            push(&mut stages, Stage::Stopping, pass, v, trunc.clone());
        }
        if wants(Stage::KEpsilon) {
            let eps = sorted(&sc.constants.eps);
            let ks = eps
                .iter()
                .map(|&e| k_epsilon(&ctx, &one_masses, e))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("k-epsilon"))?;
            let curve: Vec<Value> = eps.iter().zip(&ks).map(|(e, k)| json!({ "eps": e, "k": k })).collect();
            let ok = non_increasing(&ks);
            push(&mut stages, Stage::KEpsilon, ok, json!({ "curve": curve, "monotone": ok }), trunc.clone());
        }
        if wants(Stage::LevelSets) {
            let v = level_stage(sc, &ctx, &one_masses).map_err(|e| e.in_stage("level-sets"))?;
            let pass = v["pass"].as_bool().unwrap_or(false);
            push(&mut stages, Stage::LevelSets, pass, v, trunc.clone());
        }
        if wants(Stage::T1) {
            let fs = sc
                .test_functions
                .iter()
                .map(|t| t.build(&set, sc.base_dir.as_deref()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("t1"))?;
            let r = t1_check(&ctx, &one_masses, &fs, sc.thresholds.t1_carleson, sc.thresholds.t1_ratio)
                .map_err(|e| e.in_stage("t1"))?;
            tables.push(Table::new("t1", &g.grid, r.per_cube.iter().copied()));
            measured.insert("t1_carleson_sup".into(), json!(r.carleson_sup));
            measured.insert("global_ratios".into(), json!(r.ratios));
            let values = json!({
                "carleson_sup": r.carleson_sup,
                "ratios": r.ratios,
                "carleson_bound": r.carleson_bound,
                "ratio_bound": r.ratio_bound,
            });
            push(&mut stages, Stage::T1, r.pass, values, trunc.clone());
        }
    }

    if wants(Stage::Tail) {
        match &sc.tail {
            Some(spec) if set.is_bounded() => {
                let v = tail_stage(sc, spec, &set, &kernel).map_err(|e| e.in_stage("tail"))?;
                let pass = v["pass"].as_bool().unwrap_or(false);
                push(&mut stages, Stage::Tail, pass, v, json!({ "k_max": spec.k_max, "quadrature": spec.quadrature }));
            }
            _ => stages.push(StageReport {
                name: Stage::Tail.name(),
                status: Status::Skipped,
                pass: true,
                values: json!({ "reason": if set.is_bounded() { "no tail section" } else { "set is unbounded" } }),
                context: Value::Null,
            }),
        }
    }

    if !hypotheses_ok {
        for s in stages.iter_mut() {
            let st = Stage::ALL.iter().find(|x| x.name() == s.name).copied();
            if st.is_some_and(Stage::after_hypotheses) && s.status != Status::Skipped {
                s.status = Status::HypothesesNotMet;
            }
        }
    }

    let report = json!({
        "schema": SCHEMA_VERSION,
        "scenario": sc.name,
        "seed": sc.seed,
        "stages": stages,
        "constants_measured": measured,
    });
    Ok(Outcome { report, stages, tables })
}

#[allow(clippy::too_many_arguments)]
fn grid_stage(
    sc: &Scenario,
    set: &BoundarySet,
    grid: &DyadicGrid,
    verify: bool,
    stages: &mut Vec<StageReport>,
    tables: &mut Vec<Table>,
    measured: &mut serde_json::Map<String, Value>,
    push: &mut impl FnMut(&mut Vec<StageReport>, Stage, bool, Value, Value),
) {
    tables.push(Table::new("grid", grid, (0..grid.len()).map(|q| (q, grid.cubes[q].measure))));
    let counts: Vec<usize> = grid.by_level.iter().map(Vec::len).collect();
    let context = json!({ "levels": [grid.k_min, grid.k_max], "strategy": grid.strategy });
    measured.insert("c1".into(), json!(grid.constants.c1));
    measured.insert("alpha0".into(), json!(grid.constants.alpha0));
    if verify {
        let r = verify_grid(grid, set, sc.checks.tau_samples);
        measured.insert("eta_thin".into(), json!(r.constants.eta_thin));
        measured.insert("c2".into(), json!(r.constants.c2));
        push(stages, Stage::Grid, r.pass, json!({ "cubes_per_level": counts, "report": r }), context);
    } else {
        push(stages, Stage::Grid, true, json!({ "cubes_per_level": counts }), context);
    }
}

fn stopping_stage(
    sc: &Scenario,
    ctx: &Context,
    system: &TestSystem,
    one_masses: &[f64],
    tables: &mut Vec<Table>,
) -> Result<Value> {
    let cubes: Vec<usize> = ctx.coll.admissible_cubes().collect();
    let c0 = sc.constants.c0;
    let mut families = Vec::with_capacity(cubes.len());
    for &q in &cubes {
        let b = system.b(ctx.grid, ctx.set, q)?;
        families.push(stopping_time(ctx.grid, ctx.set, q, &b, c0)?);
    }
    let packing = verify_packing(ctx.grid, &families, sc.thresholds.eta_min);
    let degenerate = families.iter().filter(|f| f.degenerate).count();
    let not_maximal = families.iter().filter(|f| !f.maximal).count();
    let certificate = families
        .iter()
        .filter_map(|f| f.good_min_mean)
        .fold(f64::INFINITY, f64::min);
    let mut saw = Vec::with_capacity(cubes.len());
    let mut violations = 0;
    for f in &families {
        let v = carleson_functional(ctx, one_masses, f.parent, Variant::Sawtooth(Some(&f.members)), sc.constants.p_sawtooth)?;
        saw.push((f.parent, v));
        for &e in &sc.constants.eps {
            violations += sawtooth_inclusion_violations(ctx.grid, ctx.coll, f, e)?;
        }
    }
    let saw_sup = saw.iter().map(|v| v.1).fold(0.0, f64::max);
    tables.push(Table::new("packing", ctx.grid, packing.ratios.iter().copied()));
    tables.push(Table::new("sawtooth", ctx.grid, saw));
    let cert_ok = certificate >= 1.0 / c0 || certificate == f64::INFINITY;
    let pass = packing.pass && degenerate == 0 && not_maximal == 0 && cert_ok && violations == 0 && saw_sup <= sc.thresholds.sawtooth_carleson;
    Ok(json!({
        "families": families.len(),
        "degenerate": degenerate,
        "not_maximal": not_maximal,
        "eta_packing": packing.eta_packing,
        "eta_min": packing.eta_min,
        "good_min_mean": if certificate.is_finite() { json!(certificate) } else { Value::Null },
        "sawtooth_sup": saw_sup,
        "sawtooth_p": sc.constants.p_sawtooth,
        "inclusion_violations": violations,
        "pass": pass,
    }))
}

fn level_stage(sc: &Scenario, ctx: &Context, one_masses: &[f64]) -> Result<Value> {
    let ns = sorted(&sc.constants.levels_n);
    let cubes: Vec<usize> = ctx.coll.admissible_cubes().collect();
    let mut sups = Vec::with_capacity(ns.len());
    let mut monotone = true;
    let mut prev: Option<Vec<f64>> = None;
    for &n in &ns {
        let fr = cubes
            .iter()
            .map(|&q| level_set_fraction(ctx, one_masses, q, n, sc.constants.p_goodlambda))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = &prev {
            monotone &= fr.iter().zip(p).all(|(a, b)| a <= b);
        }
        sups.push(fr.iter().copied().fold(0.0, f64::max));
        prev = Some(fr);
    }
    let target = 1.0 - sc.thresholds.goodlambda_beta;
    let best = sups.iter().copied().fold(f64::INFINITY, f64::min);
    let curve: Vec<Value> = ns.iter().zip(&sups).map(|(n, s)| json!({ "n": n, "sup_fraction": s })).collect();
    Ok(json!({
        "curve": curve,
        "monotone": monotone,
        "p": sc.constants.p_goodlambda,
        "goodlambda_beta": sc.thresholds.goodlambda_beta,
        "pass": monotone && best <= target,
    }))
}

fn tail_stage(sc: &Scenario, spec: &TailSpec, set: &BoundarySet, kernel: &Kernel) -> Result<Value> {
    let one = BoundaryFunction::constant(set, 1.0);
    let r = bounded_tail(set, kernel, &one, spec.k_max, spec.quadrature)?;
    let steps: Vec<f64> = r.annuli.windows(2).map(|w| w[1].envelope / w[0].envelope).collect();
    let [lo, hi] = spec.ratio_range;
    let steps_ok = steps.iter().all(|s| (lo..=hi).contains(s));
    let mut ratios = Vec::with_capacity(spec.functions);
    for i in 0..spec.functions {
        let f = random_function(set, sc.seed, i as u64 + 1);
        ratios.push(bounded_tail(set, kernel, &f, spec.k_max, spec.quadrature)?.ratio_to_l2);
    }
    let worst = ratios.iter().copied().fold(r.ratio_to_l2, f64::max);
    Ok(json!({
        "center": r.center,
        "r0": r.r0,
        "annuli": r.annuli,
        "successive_ratios": steps,
        "ratio_to_l2": r.ratio_to_l2,
        "random_ratios": ratios,
        "worst_ratio": worst,
        "constant": spec.constant,
        "pass": steps_ok && worst <= spec.constant,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub resolution: usize,
    pub k_epsilon: f64,
    pub t1_sup: f64,
    pub global_ratio: f64,
}

/// Reruns the T1 quantities at doubled resolutions, one finer grid and
/// Whitney level per doubling.
pub fn emit_convergence(sc: &Scenario, levels: usize, refine: Option<u32>) -> Result<Vec<ConvergenceRow>> {
    if levels < 2 {
        return Err(Error::param("levels", "≥ 2 levels required"));
    }
    let spec = sc
        .test_functions
        .first()
        .ok_or_else(|| bad("test_functions", "convergence needs at least one test function"))?;
    let eps = sorted(&sc.constants.eps)[0];
    let mut rows = Vec::with_capacity(levels);
    for i in 0..levels {
        let mut s = sc.clone();
        s.set.resolution = sc.set.resolution << i;
        s.grid.k_max += i as i32;
        s.whitney.k_max += i as i32;
        let set = build_set(&s)?;
        let g = build_geometry(&s, &set, refine.unwrap_or(s.whitney.refine))?;
        let kernel = Kernel::new(s.kernel, set.n)?;
        let ctx = g.context(&set, &kernel);
        let one = ctx.theta_one_masses()?;
        let f = spec.build(&set, s.base_dir.as_deref())?;
        let field = ThetaField::compute_all(&kernel, &set, &g.whit, &f)?;
        rows.push(ConvergenceRow {
            resolution: s.set.resolution,
            k_epsilon: k_epsilon(&ctx, &one, eps)?,
            t1_sup: crate::tb::t1_carleson_sup(&ctx, &one)?,
            global_ratio: global_square_norm(&ctx, &field)?.value / f.l2_squared(&set),
        });
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL_LINE: &str = r#"{
        "name": "small-line",
        "seed": 3,
        "set": {"kind": "segment-line", "resolution": 2048,
                "params": {"origin": -16.0, "length": 32.0, "unbounded": true}},
        "grid": {"k_min": 1, "k_max": 3},
        "whitney": {"window": {"lo": [-4, 0], "hi": [4, 2]}, "k_min": 1, "k_max": 5,
                    "analysis_window": {"lo": [-1, -1], "hi": [1, 1]}},
        "kernel": {"name": "poisson-derivative"},
        "system": {"generator": "constant-one"},
        "constants": {"c0": 4, "p": 2, "p_sawtooth": 1.5, "p_goodlambda": 1.5,
                      "eps": [0.05, 0.1, 0.2], "levels_n": [1e-6, 1e-3, 1]},
        "thresholds": {"eta_min": 0.01, "sawtooth_carleson": 1e-3, "goodlambda_beta": 0.5,
                       "t1_carleson": 1e-3, "t1_ratio": 0.3},
        "test_functions": [{"kind": "gaussian-wave", "scale": 2, "freq": 2}]
    }"#;

    #[test]
    fn missing_field_is_named_with_its_path() {
        let text = SMALL_LINE.replace(r#"{"name": "poisson-derivative"}"#, r#"{"name": "envelope"}"#);
        match parse_scenario(&text) {
            Err(Error::Scenario { path, .. }) => assert_eq!(path, "kernel.alpha"),
            other => panic!("{other:?}"),
        }
        let text = SMALL_LINE.replace(r#"{"generator": "constant-one"}"#, r#"{"generator": "random-accretive"}"#);
        match parse_scenario(&text) {
            Err(Error::Scenario { path, .. }) => assert_eq!(path, "system.seed"),
            other => panic!("{other:?}"),
        }
        let text = SMALL_LINE.replace(r#""seed": 3,"#, "");
        assert!(matches!(parse_scenario(&text), Err(Error::Scenario { path, .. }) if path == "seed"));
        let text = SMALL_LINE.replace(r#""p_sawtooth": 1.5"#, r#""p_sawtooth": 3"#);
        assert!(matches!(parse_scenario(&text), Err(Error::Scenario { path, .. }) if path == "constants.p_sawtooth"));
    }

    #[test]
    fn small_line_passes_and_is_deterministic() {
        let sc = parse_scenario(SMALL_LINE).unwrap();
        let a = run_tb_pipeline(&sc, &RunOptions::all()).unwrap();
        for s in &a.stages {
            assert!(matches!(s.status, Status::Pass | Status::Skipped), "{} {:?} {}", s.name, s.status, s.values);
        }
        assert_eq!(a.exit_code(), 0);
        let b = run_tb_pipeline(&sc, &RunOptions::all()).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.report["schema"], 1);
    }

    #[test]
    fn violated_hypotheses_mark_downstream_stages() {
        let text = SMALL_LINE.replace(r#"{"generator": "constant-one"}"#, r#"{"generator": "zero"}"#);
        let sc = parse_scenario(&text).unwrap();
        let out = run_tb_pipeline(&sc, &RunOptions::for_command("run-tb").unwrap()).unwrap();
        let status = |n: &str| out.stages.iter().find(|s| s.name == n).unwrap().status;
        assert_eq!(status("tb-hypotheses"), Status::Fail);
        for n in ["stopping", "k-epsilon", "level-sets"] {
            assert_eq!(status(n), Status::HypothesesNotMet);
        }
        assert_eq!(status("grid"), Status::Pass);
        assert_eq!(out.exit_code(), 2);
    }

    #[test]
    fn convergence_needs_two_levels() {
        let sc = parse_scenario(SMALL_LINE).unwrap();
        assert!(emit_convergence(&sc, 1, None).is_err());
        let rows = emit_convergence(&sc, 2, None).unwrap();
        assert_eq!(rows[1].resolution, 4096);
        assert!(!convergence_csv(&rows).unwrap().is_empty());
    }
}
