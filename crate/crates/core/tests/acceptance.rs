//! Acceptance suite: one check per criterion, one PASS/FAIL line each.
//! Runs without the libtest harness so the lines always reach the output.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapflow::dataset::sample_demands;
use tapflow::fixed_point::{free_flow_alpha, pinv_delta_od, project_demand, refine, RefineOptions};
use tapflow::metrics::{evaluate_sample, ZERO_TOL};
use tapflow::mlp::{init_mlp, loss_and_gradients, train, LossMatrices, Mlp, Phase, TrainConfig};
use tapflow::pipeline::{run_pipeline, PipelineConfig};
use tapflow::routes::OdIncidence;
use tapflow::{enumerate_routes, fixtures, frank_wolfe, route_costs, FwOptions, Incidence, RouteSet};

use common::{grid_vi_solution, simplex_grid, vi_margin, wardrop_holds, AffineOd};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn routes_of(name: &str) -> (tapflow::Network, RouteSet) {
    let net = fixtures::load(name).unwrap();
    let rs = enumerate_routes(&net, net.route_bound().unwrap()).unwrap();
    (net, rs)
}

fn c1_pigou_equilibrium() -> Check {
    let net = fixtures::load("pigou").unwrap();
    let started = Instant::now();
    let sol = frank_wolfe(&net, &[3.0], &FwOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    // 1 + v1 = 2 + v2 and v1 + v2 = 3
    let expected = [2.0, 1.0];
    let costs = net.link_times(&sol.flows).unwrap();
    let dev = max_abs(&sol.flows, &expected);
    let cost_dev = costs.iter().map(|c| (c - 3.0).abs()).fold(0.0, f64::max);
    ensure(dev <= 1e-4, || format!("flows {:?}", sol.flows))?;
    ensure(cost_dev <= 1e-4, || format!("costs {costs:?}"))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("flows {:?}, |cost - 3| {cost_dev:.1e}, {elapsed:?}", sol.flows))
}

fn c2_fw_convergence() -> Check {
    let net = fixtures::load("nguyen-dupuis").unwrap();
    let rs = enumerate_routes(&net, net.route_bound().unwrap()).unwrap();
    ensure(
        (net.num_od_pairs(), net.num_links(), rs.len()) == (4, 19, 25),
        || "fixture sizes differ from (4, 19, 25)".into(),
    )?;
    let x = sample_demands(100, 4, net.demand_interval().unwrap(), 2024).unwrap();
    let mut worst = (0usize, 0.0f64);
    for row in x.rows() {
        let sol = frank_wolfe(&net, &row.to_vec(), &FwOptions::default()).map_err(|e| e.to_string())?;
        ensure(sol.relative_gap <= 1e-6 && sol.iterations <= 5000, || {
            format!("gap {:e} after {} iterations", sol.relative_gap, sol.iterations)
        })?;
        worst = (worst.0.max(sol.iterations), worst.1.max(sol.relative_gap));
    }
    Ok(format!("100/100 converged, max iterations {}, max gap {:.2e}", worst.0, worst.1))
}

fn gradient_error(model: &Mlp, x: &Array2<f64>, y: &Array2<f64>, mats: &LossMatrices, phase: Phase) -> f64 {
    let (_, g) = loss_and_gradients(model, x, y, mats, phase).unwrap();
    let f = |m: &Mlp| loss_and_gradients(m, x, y, mats, phase).unwrap().0.total;
    let step = 1e-6;
    let mut worst = 0.0f64;
    let analytic: [Vec<f64>; 4] = [
        g.w1.iter().copied().collect(),
        g.b1.to_vec(),
        g.w2.iter().copied().collect(),
        g.b2.to_vec(),
    ];
    for (block, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let bump = |delta: f64| {
                let mut m = model.clone();
                match block {
                    0 => m.w1.as_slice_mut().unwrap()[i] += delta,
                    1 => m.b1[i] += delta,
                    2 => m.w2.as_slice_mut().unwrap()[i] += delta,
                    _ => m.b2[i] += delta,
                }
                f(&m)
            };
            numeric.push((bump(step) - bump(-step)) / (2.0 * step));
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    worst
}

fn c3_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for name in ["pigou", "diamond", "small"] {
        let (_, rs) = routes_of(name);
        let mats = LossMatrices::new(&rs);
        for trial in 0..4 {
            let mut model = init_mlp(rs.num_od_pairs(), rs.len(), 100 + trial, trial % 2 == 0).unwrap();
            for b in model.b1.iter_mut().chain(model.b2.iter_mut()) {
                *b = rng.random_range(-0.5..0.5);
            }
            if let Some(n) = &mut model.norm {
                n.mean = (0..n.mean.len()).map(|_| rng.random_range(0.0..2.0)).collect();
                n.std = (0..n.std.len()).map(|_| rng.random_range(0.5..2.0)).collect();
            }
            let batch = 1 + trial as usize * 2;
            let x = Array2::from_shape_fn((batch, rs.num_od_pairs()), |_| rng.random_range(0.0..3.0));
            let y = Array2::from_shape_fn((batch, rs.num_links()), |_| rng.random_range(0.0..3.0));
            for phase in [Phase::DemandOnly, Phase::Full] {
                let e = gradient_error(&model, &x, &y, &mats, phase);
                ensure(e < 1e-5, || format!("{name} trial {trial} {phase:?}: relative error {e:e}"))?;
                worst = worst.max(e);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, max blockwise relative error {worst:.2e}"))
}

fn c4_pseudoinverse() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut penrose, mut svd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n_od = rng.random_range(1..=6);
        let extra = rng.random_range(0..=10);
        let mut assign: Vec<usize> = (0..n_od).collect();
        assign.extend((0..extra).map(|_| rng.random_range(0..n_od)));
        // shuffle so routes of one OD pair are not contiguous
        for i in (1..assign.len()).rev() {
            assign.swap(i, rng.random_range(0..=i));
        }
        let delta = OdIncidence::new(n_od, assign).unwrap();
        let d = delta.to_dense();
        let p = pinv_delta_od(&delta).map_err(|e| e.to_string())?.to_dense();
        let dpd = d.dot(&p).dot(&d);
        let pdp = p.dot(&d).dot(&p);
        let dp = d.dot(&p);
        let pd = p.dot(&d);
        let err = |a: &Array2<f64>, b: &Array2<f64>| (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = [err(&dpd, &d), err(&pdp, &p), err(&dp, &dp.t().to_owned()), err(&pd, &pd.t().to_owned())]
            .into_iter()
            .fold(0.0, f64::max);
        penrose = penrose.max(e);

        let m = DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[[i, j]]);
        let oracle = m.pseudo_inverse(1e-12).map_err(|e| e.to_string())?;
        let s = (0..p.nrows())
            .flat_map(|i| (0..p.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (p[[i, j]] - oracle[(i, j)]).abs())
            .fold(0.0, f64::max);
        svd = svd.max(s);
    }
    ensure(penrose <= 1e-12, || format!("Penrose residual {penrose:e}"))?;
    ensure(svd <= 1e-10, || format!("SVD oracle deviation {svd:e}"))?;
    Ok(format!("100 matrices, Penrose residual {penrose:.1e}, SVD deviation {svd:.1e}"))
}

fn c5_projection_exactness() -> Check {
    let (net, rs) = routes_of("nguyen-dupuis");
    let pinv = pinv_delta_od(rs.delta_od()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut proj = 0.0f64;
    for _ in 0..1000 {
        let h: Vec<f64> = (0..rs.len()).map(|_| rng.random_range(-100.0..100.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..200.0)).collect();
        let p = project_demand(&h, &x, rs.delta_od(), &pinv).unwrap();
        proj = proj.max(max_abs(&rs.delta_od().mul_vec(&p), &x));
    }
    ensure(proj <= 1e-10, || format!("projection residual {proj:e}"))?;

    let x = sample_demands(50, 4, net.demand_interval().unwrap(), 55).unwrap();
    let opts = RefineOptions {
        alpha: free_flow_alpha(&net, &rs),
        tol: 1e-9,
        max_iters: 100_000,
    };
    let mut e2 = 0.0f64;
    for row in x.rows() {
        let d = row.to_vec();
        let y = frank_wolfe(&net, &d, &FwOptions::default()).unwrap().flows;
        let h0: Vec<f64> = (0..rs.len()).map(|_| rng.random_range(-5.0..60.0)).collect();
        let r = refine(&h0, &d, &net, &rs, &opts).map_err(|e| e.to_string())?;
        let rec = evaluate_sample(&r.flows, &d, &y, &net, &rs, &[0.1], ZERO_TOL).unwrap();
        let before = evaluate_sample(&h0, &d, &y, &net, &rs, &[0.1], ZERO_TOL).unwrap();
        ensure(r.converged, || format!("refine stopped at residual {:e}", r.residual))?;
        ensure(rec.e2 <= before.e2 + 1e-10, || "refinement worsened demand feasibility".into())?;
        e2 = e2.max(rec.e2);
    }
    ensure(e2 <= 1e-8, || format!("per-sample E2 after refine {e2:e}"))?;
    Ok(format!("projection residual {proj:.1e}; max per-sample E2 after refine {e2:.1e} (50 samples)"))
}

fn c6_fixed_point() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut notes = Vec::new();
    for (name, oracle, demand) in [("pigou", AffineOd::pigou(), 3.0), ("diamond", AffineOd::diamond(), 4.0)] {
        let (net, rs) = routes_of(name);
        let (h_star, pi) = oracle.all_used_equilibrium(demand);
        ensure(h_star.iter().all(|&v| v > 0.0), || format!("{name}: oracle has an empty route"))?;
        let x = [demand];
        let mut opts = RefineOptions {
            alpha: free_flow_alpha(&net, &rs),
            tol: 1e-10,
            max_iters: 1_000_000,
        };
        let at_eq = refine(&h_star, &x, &net, &rs, &opts).map_err(|e| e.to_string())?;
        ensure(at_eq.iterations <= 1 && at_eq.residual <= opts.tol, || {
            format!("{name}: {} iterations, residual {:e} from equilibrium", at_eq.iterations, at_eq.residual)
        })?;

        opts.tol = 1e-13;
        let start: Vec<f64> = h_star.iter().map(|v| v * (1.0 + rng.random_range(-0.1..0.1))).collect();
        let r = refine(&start, &x, &net, &rs, &opts).map_err(|e| e.to_string())?;
        let dev = max_abs(&r.flows, &h_star);
        ensure(dev <= 1e-6, || format!("{name}: recovered {:?}, expected {h_star:?}", r.flows))?;

        let costs = route_costs(&net, &rs, &r.flows).unwrap();
        let oracle_costs = oracle.route_costs(&r.flows);
        ensure(max_abs(&costs, &oracle_costs) <= 1e-12, || format!("{name}: cost maps disagree"))?;
        ensure(wardrop_holds(&r.flows, &costs, 1e-9, 1e-6), || format!("{name}: Wardrop fails, costs {costs:?}"))?;
        ensure(costs.iter().all(|c| (c - pi).abs() <= 1e-6 * pi), || format!("{name}: costs {costs:?} vs {pi}"))?;

        let grid = simplex_grid(rs.len(), demand, 120);
        let margin = vi_margin(&costs, &r.flows, &grid);
        ensure(margin >= -1e-6, || format!("{name}: VI violated by {margin:e}"))?;
        let best = grid_vi_solution(&oracle, &grid);
        let spacing = demand / 120.0;
        let grid_dev = max_abs(&best, &r.flows);
        ensure(grid_dev <= spacing, || format!("{name}: grid VI solution {best:?} far from {:?}", r.flows))?;
        notes.push(format!("{name}: {} iters, deviation {dev:.1e}", r.iterations));
    }
    Ok(notes.join("; "))
}

// Reference Nguyen-Dupuis scores the envelopes must contain.
const REFERENCE_E1: f64 = 0.07;
const REFERENCE_E_MM_DOMINANCE_01: f64 = 0.0;
const REFERENCE_E_MM_SPREAD_01: f64 = 0.021;

fn c7_pipeline() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        network: "nguyen-dupuis".into(),
        n: 1000,
        epochs: 8000,
        lr: 0.01,
        split_ratio: 0.7,
        out: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let started = Instant::now();
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let split = out.dataset.meta.split.as_ref().unwrap();
    ensure(out.dataset.len() == 1000, || format!("{} converged rows", out.dataset.len()))?;
    ensure((split.train.len(), split.test.len()) == (700, 300), || "split is not 700/300".into())?;
    let r = &out.report.refined;
    let i01 = r.eps.iter().position(|&e| e == 0.1).unwrap();
    let (e_dom, e_spread) = (r.e_m_m[i01], r.e_mm[i01]);
    ensure(elapsed <= Duration::from_secs(15 * 60), || format!("took {elapsed:?}"))?;
    ensure(r.e1 <= 0.15, || format!("E1 {}", r.e1))?;
    ensure(r.e2 <= 1e-6, || format!("E2 {}", r.e2))?;
    ensure(e_dom <= 0.01, || format!("E_mM(0.1) {e_dom}"))?;
    ensure(e_spread <= 0.1, || format!("E_Mm(0.1) {e_spread}"))?;
    ensure(
        REFERENCE_E1 <= 0.15 && REFERENCE_E_MM_DOMINANCE_01 <= 0.01 && REFERENCE_E_MM_SPREAD_01 <= 0.1,
        || "reference values fall outside the envelopes".into(),
    )?;
    let raw = &out.report.raw;
    Ok(format!(
        "refined E1 {:.2e} E2 {:.2e} E_mM(0.1) {e_dom:.2e} E_Mm(0.1) {e_spread:.2e}; \
         network-only E1 {:.2e} E2 {:.2e} E_mM(0.1) {:.2e} E_Mm(0.1) {:.2e}; {:.1?}",
        r.e1, r.e2, raw.e1, raw.e2, raw.e_m_m[i01], raw.e_mm[i01], elapsed
    ))
}

fn c8_dynamic_loss() -> Check {
    let (net, rs) = routes_of("diamond");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array2::from_shape_fn((12, 1), |_| rng.random_range(1.0..6.0));
    let mut y = Array2::zeros((12, rs.num_links()));
    for (i, d) in x.column(0).iter().enumerate() {
        let sol = frank_wolfe(&net, &[*d], &FwOptions::default()).unwrap();
        y.row_mut(i).assign(&Array1::from(sol.flows));
    }
    let garbage = Array2::from_shape_fn(y.dim(), |_| rng.random_range(-50.0..50.0));
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let run = |labels: &Array2<f64>| {
        let samples = tapflow::dataset::Samples {
            x: x.clone(),
            y: labels.clone(),
            network_fingerprint: net.fingerprint().to_string(),
        };
        let mut m = init_mlp(1, rs.len(), 80, true).unwrap();
        let h = train(&mut m, &samples, &rs, &cfg).unwrap();
        (m, h)
    };
    let (m_true, h_true) = run(&y);
    let (m_garbage, h_garbage) = run(&garbage);
    let switch = cfg.switch_epoch();
    ensure(h_true.switch_epoch == 100, || "switch epoch is not epochs/2".into())?;
    ensure(
        h_true.epochs.iter().all(|r| r.phase == if r.epoch < switch { 1 } else { 2 }),
        || "phase labels do not switch at epochs/2".into(),
    )?;
    // The L1 value at epoch e is a function of the weights entering epoch e,
    // so identical L1 through the switch epoch means identical weights.
    let same_phase1 = (0..=switch).all(|e| h_true.epochs[e].l1.to_bits() == h_garbage.epochs[e].l1.to_bits());
    ensure(same_phase1, || "phase-1 trajectory depends on the arc-flow labels".into())?;
    ensure(m_true.w2 != m_garbage.w2, || "phase 2 ignores the arc-flow labels".into())?;
    let first_diff = (0..cfg.epochs).find(|&e| h_true.epochs[e].l1 != h_garbage.epochs[e].l1);
    ensure(first_diff == Some(switch + 1), || format!("trajectories diverge at {first_diff:?}"))?;
    Ok(format!("switch at epoch {switch}; trajectories identical through epoch {switch}, diverge at {}", switch + 1))
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn c9_eps_monotone() -> Check {
    let mut checked = 0;
    for (name, n, epochs) in [("nguyen-dupuis", 200, 300), ("small", 200, 300), ("steenbrink", 120, 200)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            network: name.into(),
            n,
            epochs,
            seed: 9,
            out: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
        ensure(out.report.refined.eps == vec![0.1, 0.05, 0.01], || "unexpected epsilon list".into())?;
        for (label, agg) in [("network-only", &out.report.raw), ("refined", &out.report.refined)] {
            // eps is listed in decreasing order, so the errors must not decrease
            ensure(non_increasing(&agg.e_mm) && non_increasing(&agg.e_m_m), || {
                format!("{name} {label}: E_Mm {:?} E_mM {:?}", agg.e_mm, agg.e_m_m)
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} evaluations monotone across eps 0.1/0.05/0.01"))
}

fn c10_determinism() -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = |dir: &std::path::Path| PipelineConfig {
        network: "nguyen-dupuis".into(),
        n: 60,
        epochs: 300,
        seed: 10,
        out: dir.to_path_buf(),
        ..PipelineConfig::default()
    };
    run_pipeline(&cfg(a.path())).map_err(|e| e.to_string())?;
    run_pipeline(&cfg(b.path())).map_err(|e| e.to_string())?;
    let files = ["dataset.json", "routes.json", "model.json", "history.csv", "report.json", "report.csv"];
    for f in files {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts bitwise identical", files.len()))
}

fn main() {
    let checks: [(u32, &str, fn() -> Check); 10] = [
        (1, "analytic equilibrium", c1_pigou_equilibrium),
        (2, "Frank-Wolfe convergence", c2_fw_convergence),
        (3, "gradient correctness", c3_gradients),
        (4, "pseudoinverse", c4_pseudoinverse),
        (5, "projection exactness", c5_projection_exactness),
        (6, "fixed-point consistency", c6_fixed_point),
        (7, "desk-scale pipeline", c7_pipeline),
        (8, "dynamic-loss schedule", c8_dynamic_loss),
        (9, "epsilon monotonicity", c9_eps_monotone),
        (10, "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] criterion {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {id:>2} {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
