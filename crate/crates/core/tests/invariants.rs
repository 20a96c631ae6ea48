use adrsq_core::dyadic::{build_grid, DyadicGrid};
use adrsq_core::geometry::{make_boundary_set, BoundarySet, SetKind, SetParams};
use adrsq_core::operators::{theta_apply, BoundaryFunction, Kernel, KernelKind};
use adrsq_core::tb::{
    carleson_functional, good_cubes, level_set_fraction, sawtooth_inclusion_violations, stopping_time, Context,
    Generator, TestSystem, Variant,
};
use adrsq_core::whitney::{build_whitney, cone, Collections, ConeKind, ConeSpec, Window, WhitneyDecomposition};
use num_complex::Complex64;
use proptest::prelude::*;
use std::sync::OnceLock;

struct Fixture {
    set: BoundarySet,
    grid: DyadicGrid,
    whit: WhitneyDecomposition,
    coll: Collections,
    kernel: Kernel,
    cubes: Vec<usize>,
}

fn fx() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let params = SetParams {
            origin: -8.0,
            length: 16.0,
            unbounded: true,
            ..SetParams::default()
        };
        let set = make_boundary_set(SetKind::SegmentLine, 2048, &params).unwrap();
        let grid = build_grid(&set, 0, 4).unwrap();
        let window = Window {
            lo: [-4.0, 0.0, 0.0],
            hi: [4.0, 2.0, 0.0],
        };
        let whit = build_whitney(&set, window, 0, 7).unwrap();
        let analysis = Window {
            lo: [-1.0, -1.0, 0.0],
            hi: [1.0, 1.0, 0.0],
        };
        let coll = Collections::build(&whit, &grid, &set, None, Some(&analysis)).unwrap();
        let kernel = Kernel::new(KernelKind::PoissonDerivative, 1).unwrap();
        let cubes = coll.admissible_cubes().collect();
        Fixture {
            set,
            grid,
            whit,
            coll,
            kernel,
            cubes,
        }
    })
}

fn ctx(f: &Fixture) -> Context<'_> {
    Context {
        set: &f.set,
        grid: &f.grid,
        whit: &f.whit,
        coll: &f.coll,
        kernel: &f.kernel,
    }
}

fn masses(seed: u64) -> Vec<f64> {
    let f = fx();
    // cheap deterministic spread, heavy at a few cubes
    (0..f.grid.len())
        .map(|i| {
            let h = (i as u64 ^ seed).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            u * u * u
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cone_fubini(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let m = masses(seed);
        let lhs = carleson_functional(&ctx(f), &m, q, Variant::Gamma, 2.0).unwrap() * f.grid.cubes[q].measure;
        let rhs: f64 = f.grid.descendants(q, |_| true).unwrap().iter().map(|&c| f.grid.cubes[c].measure * m[c]).sum();
        prop_assert!(close(lhs, rhs), "{lhs} vs {rhs}");
    }

    #[test]
    fn cone_is_the_sum_of_its_regions(pick in any::<prop::sample::Index>(), node in any::<prop::sample::Index>()) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let members = &f.grid.cubes[q].members;
        let x = members[node.index(members.len())];
        let spec = ConeSpec { kind: ConeKind::GammaQ, root: Some(q), stops: None };
        let c = cone(&f.grid, &f.coll, x, &spec).unwrap();
        let expected: usize = c.cubes.iter().map(|&k| f.coll.per_cube[k].len()).sum();
        prop_assert_eq!(c.boxes.len(), expected);
        for &k in &c.cubes {
            prop_assert!(f.grid.node_in(x, k) && f.grid.contains(q, k));
        }
    }

    #[test]
    fn truncated_functional_shrinks_with_eps(seed in any::<u64>(), pick in any::<prop::sample::Index>(),
                                             e1 in 0.01f64..0.9, e2 in 0.01f64..0.9) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let m = masses(seed);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let a = carleson_functional(&ctx(f), &m, q, Variant::Truncated(lo), 2.0).unwrap();
        let b = carleson_functional(&ctx(f), &m, q, Variant::Truncated(hi), 2.0).unwrap();
        prop_assert!(b <= a * (1.0 + 1e-12));
    }

    #[test]
    fn level_sets_shrink_with_n(seed in any::<u64>(), pick in any::<prop::sample::Index>(),
                                n1 in 1e-6f64..10.0, n2 in 1e-6f64..10.0, p in 1.01f64..1.99) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let m = masses(seed);
        let (lo, hi) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
        let a = level_set_fraction(&ctx(f), &m, q, lo, p).unwrap();
        let b = level_set_fraction(&ctx(f), &m, q, hi, p).unwrap();
        prop_assert!(b <= a && (0.0..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn functionals_are_homogeneous(seed in any::<u64>(), pick in any::<prop::sample::Index>(),
                                   lambda in -20.0f64..20.0, p in 1.0f64..3.0) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let m = masses(seed);
        let scaled: Vec<f64> = m.iter().map(|v| v * lambda * lambda).collect();
        let stops: Vec<usize> = f.grid.cubes[q].children.iter().copied().take(1).collect();
        for v in [Variant::Gamma, Variant::Truncated(0.2), Variant::Sawtooth(Some(&stops))] {
            let a = carleson_functional(&ctx(f), &m, q, v, p).unwrap();
            let b = carleson_functional(&ctx(f), &scaled, q, v, p).unwrap();
            prop_assert!((b - lambda.abs().powf(p) * a).abs() <= 1e-12 * b.abs().max(1e-300), "{a} {b}");
        }
    }

    #[test]
    fn stopping_certificates(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let c0 = 4.0;
        let system = TestSystem::new(Generator::RandomAccretive { seed }, c0, 2.0).unwrap();
        let b = system.b(&f.grid, &f.set, q).unwrap();
        let fam = stopping_time(&f.grid, &f.set, q, &b, c0).unwrap();
        prop_assert!(fam.maximal);
        prop_assert!((0.0..=1.0).contains(&fam.eta_measured));
        for g in good_cubes(&f.grid, q, &fam.members).unwrap() {
            let c = &f.grid.cubes[g];
            let mean: Complex64 = c.members.iter().map(|&m| b.values[m] * f.set.weights[m]).sum::<Complex64>() / c.measure;
            prop_assert!(mean.norm() >= 1.0 / c0);
        }
        // stopping cubes are pairwise disjoint
        for (i, &a) in fam.members.iter().enumerate() {
            for &k in &fam.members[i + 1..] {
                prop_assert!(!f.grid.contains(a, k) && !f.grid.contains(k, a));
            }
        }
        prop_assert_eq!(sawtooth_inclusion_violations(&f.grid, &f.coll, &fam, 0.1).unwrap(), 0);
    }

    #[test]
    fn sawtooth_cone_lies_in_the_full_cone(seed in any::<u64>(), pick in any::<prop::sample::Index>(),
                                           node in any::<prop::sample::Index>()) {
        let f = fx();
        let q = f.cubes[pick.index(f.cubes.len())];
        let system = TestSystem::new(Generator::RandomAccretive { seed }, 4.0, 2.0).unwrap();
        let b = system.b(&f.grid, &f.set, q).unwrap();
        let fam = stopping_time(&f.grid, &f.set, q, &b, 4.0).unwrap();
        let members = &f.grid.cubes[q].members;
        let x = members[node.index(members.len())];
        let full = cone(&f.grid, &f.coll, x, &ConeSpec { kind: ConeKind::GammaQ, root: Some(q), stops: None }).unwrap();
        let saw = cone(&f.grid, &f.coll, x, &ConeSpec {
            kind: ConeKind::SawtoothGammaQ,
            root: Some(q),
            stops: Some(&fam.members),
        }).unwrap();
        prop_assert!(saw.box_set().is_subset(&full.box_set()));
    }

    #[test]
    fn theta_is_linear(a in -3.0f64..3.0, w in 0.5f64..6.0, x in -2.0f64..2.0, t in 0.05f64..1.5) {
        let f = fx();
        let g1 = BoundaryFunction::from_fn(&f.set, |p| (-p[0] * p[0]).exp());
        let g2 = BoundaryFunction::from_fn(&f.set, |p| (w * p[0]).sin() / (1.0 + p[0] * p[0]));
        let mix = g1.scaled(a).add(&g2);
        let pts = [[x, t, 0.0]];
        let u = theta_apply(&f.kernel, &f.set, &g1, &pts).unwrap()[0];
        let v = theta_apply(&f.kernel, &f.set, &g2, &pts).unwrap()[0];
        let m = theta_apply(&f.kernel, &f.set, &mix, &pts).unwrap()[0];
        prop_assert!((m - (u * a + v)).norm() <= 1e-12 * (1.0 + m.norm()));
    }

    #[test]
    fn segment_levels_partition_the_nodes(exp in 8u32..12, k_max in 1i32..5) {
        let set = make_boundary_set(SetKind::SegmentLine, 1 << exp, &SetParams::default()).unwrap();
        let grid = build_grid(&set, 0, k_max).unwrap();
        for k in 0..=k_max {
            let mut seen = vec![0u8; set.len()];
            let mut mass = 0.0;
            for &c in grid.level(k) {
                mass += grid.cubes[c].measure;
                for &m in &grid.cubes[c].members {
                    seen[m] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }
    }
}
