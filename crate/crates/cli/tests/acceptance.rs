//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs sequentially so the timing criteria are not disturbed.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vseg_core::affinity::{row_normalize, second_eigenvector};
use vseg_core::flowops::{apply_warp, build_warp, DISOCCLUDED_VALUE};
use vseg_core::objective::{optimize, Objective, OptimizeOutcome};
use vseg_core::oracle::{dense_second_eigenvector, dense_spectrum, full_affinity, oracle_segment};
use vseg_core::pipeline::{compute_reliability, evaluate, frame_affinity_at, mean_jaccard, run};
use vseg_core::segmentation::{binarize, contour_f, jaccard};
use vseg_core::synth::{generate, planted_two_block, Corruption, CorruptionKind, LongRangeSpec, Rect};
use vseg_core::{
    AffinityConfig, AffinityMatrix, BinaryMask, Deviation, Grid, ObjectiveConfig, PipelineConfig, SceneSpec,
    Segmentation, SoftMask, Tensor, VideoBundle, WarpSet,
};

type Check = fn() -> (bool, String);

fn main() -> ExitCode {
    let checks: [(&str, &str, Check); 13] = [
        ("A1", "eigen-solver correctness", a1_eigen_solver),
        ("A2", "row-stochasticity", a2_row_stochastic),
        ("A3", "warp matches explicit matrix", a3_warp_oracle),
        ("A4", "gradient check", a4_gradient),
        ("A5", "monotone descent", a5_descent),
        ("A6", "agreement with dense spectral oracle", a6_oracle_agreement),
        ("A7", "refinement gain", a7_refinement_gain),
        ("A8", "cross-entropy vs dot product", a8_deviation),
        ("A9", "horizon direction", a9_horizon),
        ("A10", "norm stability", a10_norm_ratio),
        ("A11", "metric sanity", a11_metrics),
        ("A12", "determinism of segment", a12_determinism),
        ("A13", "throughput", a13_throughput),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let start = Instant::now();
        let (pass, detail) = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {id} {name}: {detail} [{:.2}s]",
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of 13 criteria passed", 13 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- suites

/// Bundle of the noisy refinement suite: a moving square with one frame
/// whose features are corrupted by a foreground-like blob.
fn corrupted_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, n) = (12usize, 12usize, 5usize);
    let size = rng.gen_range(4..=5);
    let v = [rng.gen_range(-1..=1i64), rng.gen_range(-1..=1i64)];
    let span = |vel: i64| size + vel.unsigned_abs() as usize * (n - 1);
    let top0 = rng.gen_range(1..=h - 1 - span(v[1]));
    let left0 = rng.gen_range(1..=w - 1 - span(v[0]));
    let top = if v[1] < 0 { top0 + n - 1 } else { top0 };
    let left = if v[0] < 0 { left0 + n - 1 } else { left0 };
    let mut spec = SceneSpec::moving_square(
        h,
        w,
        n,
        Rect {
            top,
            left,
            height: size,
            width: size,
        },
        v,
    );
    spec.feature_noise = 0.3;
    spec.flow_noise = 0.3;
    spec.seed = seed;
    let frame = rng.gen_range(1..n - 1);
    let obj = spec.object_at(frame).expect("frame in range");
    let blob = 3;
    let region = loop {
        let r = Rect {
            top: rng.gen_range(0..=h - blob),
            left: rng.gen_range(0..=w - blob),
            height: blob,
            width: blob,
        };
        let apart = r.top + r.height < obj.top
            || obj.top + obj.height < r.top
            || r.left + r.width < obj.left
            || obj.left + obj.width < r.left;
        if apart {
            break r;
        }
    };
    spec.corruptions.push(Corruption {
        frame,
        region,
        kind: CorruptionKind::ForegroundFeatures,
    });
    spec
}

const SUITE: u64 = 20;

struct SuiteRun {
    j_init: f64,
    j_opt: f64,
    j_dot: f64,
    seg: Segmentation,
    seg_dot: Segmentation,
}

fn scored(seg: &Segmentation, bundle: &VideoBundle) -> (f64, f64) {
    let gt = bundle.gt_masks.as_ref().expect("synthetic gt");
    (
        mean_jaccard(&evaluate(&seg.init_binary, gt).unwrap()),
        mean_jaccard(&evaluate(&seg.binary, gt).unwrap()),
    )
}

fn corrupted_suite() -> &'static [SuiteRun] {
    static RUNS: OnceLock<Vec<SuiteRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..SUITE)
            .map(|seed| {
                let bundle = generate(&corrupted_scene(seed)).unwrap();
                let cfg = PipelineConfig::default();
                let seg = run(&bundle, &cfg).unwrap();
                let mut dot_cfg = cfg.clone();
                dot_cfg.objective.deviation = Deviation::DotProduct;
                let seg_dot = run(&bundle, &dot_cfg).unwrap();
                let (j_init, j_opt) = scored(&seg, &bundle);
                let (_, j_dot) = scored(&seg_dot, &bundle);
                SuiteRun {
                    j_init,
                    j_opt,
                    j_dot,
                    seg,
                    seg_dot,
                }
            })
            .collect()
    })
}

/// Low-noise bundles for the oracle comparison.
fn low_noise_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = 3 + (seed as usize % 2);
    let size = rng.gen_range(3..=4);
    let v = [rng.gen_range(-1..=1i64), rng.gen_range(-1..=1i64)];
    let span = |vel: i64| size + vel.unsigned_abs() as usize * (n - 1);
    let top0 = rng.gen_range(1..=10 - 1 - span(v[1]));
    let left0 = rng.gen_range(1..=10 - 1 - span(v[0]));
    let top = if v[1] < 0 { top0 + n - 1 } else { top0 };
    let left = if v[0] < 0 { left0 + n - 1 } else { left0 };
    let mut spec = SceneSpec::moving_square(
        10,
        10,
        n,
        Rect {
            top,
            left,
            height: size,
            width: size,
        },
        v,
    );
    spec.feature_noise = 0.1;
    spec.flow_noise = 0.05;
    spec.seed = seed;
    spec
}

struct OracleRun {
    seg: Segmentation,
    worst: f64,
}

fn oracle_suite() -> &'static [OracleRun] {
    static RUNS: OnceLock<Vec<OracleRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..10)
            .map(|seed| {
                let bundle = generate(&low_noise_scene(seed)).unwrap();
                let cfg = PipelineConfig::default();
                let seg = run(&bundle, &cfg).unwrap();
                let oracle = oracle_segment(&bundle, &cfg).unwrap();
                let worst = seg
                    .binary
                    .iter()
                    .zip(&oracle.masks)
                    .map(|(m, o)| m.agreement(o).unwrap())
                    .fold(1.0, f64::min);
                OracleRun { seg, worst }
            })
            .collect()
    })
}

/// Random objective instance: N frames on a small grid with random integer
/// flows and random soft inits.
struct Instance {
    inits: Vec<SoftMask>,
    warps: WarpSet,
    cfg: ObjectiveConfig,
    logits: Vec<f64>,
}

fn random_flow(rng: &mut ChaCha8Rng, grid: Grid, reach: f64) -> Tensor {
    let data = (0..2 * grid.len())
        .map(|_| rng.gen_range(-reach..reach) as f32)
        .collect();
    Tensor::new(vec![grid.height, grid.width, 2], data).unwrap()
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let grid = Grid::new(rng.gen_range(3..=8), rng.gen_range(3..=8));
    let fwd = (0..n - 1)
        .map(|_| build_warp(&random_flow(&mut rng, grid, 2.0)).unwrap())
        .collect();
    let bwd = (0..n - 1)
        .map(|_| build_warp(&random_flow(&mut rng, grid, 2.0)).unwrap())
        .collect();
    let horizon = rng.gen_range(1..n);
    let warps = WarpSet::adjacent(n, grid, fwd, bwd)
        .unwrap()
        .compose_to(horizon)
        .unwrap();
    let inits: Vec<SoftMask> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.05..0.95)).collect();
            SoftMask::from_values(grid, &v).unwrap()
        })
        .collect();
    let cfg = ObjectiveConfig {
        lambda: rng.gen_range(1.0..20.0),
        horizon_t: horizon,
        ..Default::default()
    };
    let logits = (0..n * grid.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Instance {
        inits,
        warps,
        cfg,
        logits,
    }
}

// ---------------------------------------------------------------- criteria

fn a1_eigen_solver() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AffinityConfig::default();
    let (mut worst_cos, mut worst_res, mut min_gap) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < 50 {
        seed += 1;
        let n = rng.gen_range(20..=200);
        let within = rng.gen_range(0.3..0.9);
        let cross = rng.gen_range(0.0..0.25);
        let a = planted_two_block(n, within, cross, seed);
        let spectrum = dense_spectrum(&a);
        let gap = spectrum[1] - spectrum[2].max(spectrum[n - 1].abs());
        if gap < 0.05 {
            continue;
        }
        accepted += 1;
        min_gap = min_gap.min(gap);
        let (lambda, exact) = dense_second_eigenvector(&a);
        let est = second_eigenvector(&a, &cfg).unwrap();
        let cos = exact.iter().zip(&est.values).map(|(x, y)| x * y).sum::<f64>().abs();
        worst_cos = worst_cos.max(1.0 - cos);
        // residual of the returned pair under D^-1 A, recomputed densely
        let dense = a.to_dense();
        let res = (0..n)
            .map(|i| {
                let wi: f64 = (0..n).map(|j| dense[i * n + j] * est.values[j]).sum::<f64>() / a.degrees()[i];
                (wi - est.eigenvalue * est.values[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        worst_res = worst_res.max(res);
        assert!(
            (est.eigenvalue - lambda).abs() < 1e-3,
            "eigenvalue {} vs {lambda}",
            est.eigenvalue
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_cos <= 0.01 && worst_res <= 1e-4 && secs < 10.0;
    (
        pass,
        format!("50 instances (min gap {min_gap:.3}), max cosine distance {worst_cos:.2e}, max residual {worst_res:.2e}, {secs:.2}s"),
    )
}

fn row_sum_error(a: &AffinityMatrix) -> f64 {
    let w = row_normalize(a).unwrap();
    (0..a.n()).map(|i| (w.row_sum(i) - 1.0).abs()).fold(0.0, f64::max)
}

fn a2_row_stochastic() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..20 {
        worst = worst.max(row_sum_error(&planted_two_block(
            50 + 5 * seed as usize,
            0.7,
            0.1,
            seed,
        )));
        count += 1;
    }
    let cfg = PipelineConfig::default();
    for seed in 0..SUITE {
        let bundle = generate(&corrupted_scene(seed)).unwrap();
        let rel = compute_reliability(&bundle, cfg.percentile_k).unwrap();
        for p in 0..bundle.n_frames() {
            let a = frame_affinity_at(&bundle, &rel, p, &cfg.affinity).unwrap();
            worst = worst.max(row_sum_error(&a));
            count += 1;
        }
    }
    for seed in 0..10 {
        let bundle = generate(&low_noise_scene(seed)).unwrap();
        let full = full_affinity(&bundle, &cfg).unwrap();
        let dim = full.dim();
        for row in full.values.chunks_exact(dim) {
            let d: f64 = row.iter().sum();
            worst = worst.max((row.iter().map(|v| v / d).sum::<f64>() - 1.0).abs());
        }
        count += 1;
    }
    (
        worst <= 1e-6,
        format!("{count} affinities, max |row sum - 1| = {worst:.2e}"),
    )
}

fn a3_warp_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut valid_mismatch = 0;
    for _ in 0..100 {
        let grid = Grid::new(rng.gen_range(2..=8), rng.gen_range(2..=8));
        let m = grid.len();
        let flow = random_flow(&mut rng, grid, 3.0);
        let mask: Vec<f64> = (0..m).map(|_| rng.gen()).collect();
        // explicit 0/1 matrix: F[j][i] = 1 when source i lands on target j
        let mut f = vec![0.0f64; m * m];
        for y in 0..grid.height {
            for x in 0..grid.width {
                let i = grid.index(y, x);
                let d = flow.data();
                let ty = y as f64 + (d[2 * i + 1] as f64).round();
                let tx = x as f64 + (d[2 * i] as f64).round();
                if ty >= 0.0 && tx >= 0.0 && ty < grid.height as f64 && tx < grid.width as f64 {
                    f[grid.index(ty as usize, tx as usize) * m + i] = 1.0;
                }
            }
        }
        let out = apply_warp(&build_warp(&flow).unwrap(), &mask).unwrap();
        for j in 0..m {
            let row = &f[j * m..(j + 1) * m];
            let count: f64 = row.iter().sum();
            let expect = if count > 0.0 {
                row.iter().zip(&mask).map(|(a, b)| a * b).sum::<f64>() / count
            } else {
                DISOCCLUDED_VALUE
            };
            worst = worst.max((out.values[j] - expect).abs());
            if out.valid[j] != (count > 0.0) {
                valid_mismatch += 1;
            }
        }
    }
    (
        worst <= 1e-6 && valid_mismatch == 0,
        format!("100 pairs, max abs diff {worst:.2e}, validity mismatches {valid_mismatch}"),
    )
}

fn a4_gradient() -> (bool, String) {
    let start = Instant::now();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let inst = random_instance(400 + seed);
        let obj = Objective::new(&inst.inits, &inst.warps, &inst.cfg).unwrap();
        let (_, g) = obj.value_and_gradient(&inst.logits);
        let mut x = inst.logits.clone();
        let fd: Vec<f64> = (0..x.len())
            .map(|k| {
                let orig = x[k];
                x[k] = orig + h;
                let up = obj.value(&x);
                x[k] = orig - h;
                let down = obj.value(&x);
                x[k] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && secs < 30.0,
        format!("20 instances, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

fn outcome_monotone(out: &OptimizeOutcome) -> bool {
    let trace: Vec<f64> = out.trace.iter().map(|r| r.value).collect();
    non_increasing(&trace) && non_increasing(&out.step_values)
}

fn segmentation_monotone(seg: &Segmentation) -> bool {
    let trace: Vec<f64> = seg.trace.iter().map(|r| r.value).collect();
    non_increasing(&trace) && non_increasing(&seg.step_values)
}

fn a5_descent() -> (bool, String) {
    let mut total = 0;
    let mut bad = 0;
    for seed in 0..20 {
        let inst = random_instance(400 + seed);
        for deviation in [Deviation::CrossEntropy, Deviation::DotProduct] {
            let cfg = ObjectiveConfig {
                deviation,
                ..inst.cfg.clone()
            };
            total += 1;
            if !outcome_monotone(&optimize(&inst.inits, &inst.warps, &cfg).unwrap()) {
                bad += 1;
            }
        }
    }
    for r in corrupted_suite() {
        for seg in [&r.seg, &r.seg_dot] {
            total += 1;
            bad += usize::from(!segmentation_monotone(seg));
        }
    }
    for r in oracle_suite() {
        total += 1;
        bad += usize::from(!segmentation_monotone(&r.seg));
    }
    (
        bad == 0,
        format!("{total} optimizer runs, {bad} with an increasing step"),
    )
}

fn a6_oracle_agreement() -> (bool, String) {
    let runs = oracle_suite();
    let worst = runs.iter().map(|r| r.worst).fold(1.0, f64::min);
    let mean = runs.iter().map(|r| r.worst).sum::<f64>() / runs.len() as f64;
    (
        worst >= 0.9,
        format!(
            "10 bundles, worst per-frame agreement {:.1}% (mean of per-bundle worst {:.1}%)",
            100.0 * worst,
            100.0 * mean
        ),
    )
}

fn a7_refinement_gain() -> (bool, String) {
    let runs = corrupted_suite();
    let n = runs.len() as f64;
    let init = runs.iter().map(|r| r.j_init).sum::<f64>() / n;
    let opt = runs.iter().map(|r| r.j_opt).sum::<f64>() / n;
    let worst = runs.iter().map(|r| r.j_opt - r.j_init).fold(f64::INFINITY, f64::min);
    (
        opt - init >= 0.02 && worst >= -0.005,
        format!(
            "mean J init {:.1} -> optimized {:.1} (+{:.1} points), worst bundle change {:+.2} points",
            100.0 * init,
            100.0 * opt,
            100.0 * (opt - init),
            100.0 * worst
        ),
    )
}

fn a8_deviation() -> (bool, String) {
    let runs = corrupted_suite();
    let n = runs.len() as f64;
    let ce = runs.iter().map(|r| r.j_opt).sum::<f64>() / n;
    let dot = runs.iter().map(|r| r.j_dot).sum::<f64>() / n;
    (
        ce >= dot,
        format!(
            "mean J cross-entropy {:.1} vs dot product {:.1}",
            100.0 * ce,
            100.0 * dot
        ),
    )
}

fn a9_horizon() -> (bool, String) {
    let (mut j1, mut j3) = (0.0, 0.0);
    for seed in 0..SUITE {
        let mut spec = corrupted_scene(seed);
        spec.long_range = Some(LongRangeSpec { horizon: 3, noise: 4.0 });
        let bundle = generate(&spec).unwrap();
        let mut cfg = PipelineConfig::default();
        j1 += scored(&run(&bundle, &cfg).unwrap(), &bundle).1;
        cfg.objective.horizon_t = 3;
        j3 += scored(&run(&bundle, &cfg).unwrap(), &bundle).1;
    }
    let n = SUITE as f64;
    let (j1, j3) = (j1 / n, j3 / n);
    (
        j1 >= j3,
        format!("mean J T=1 {:.2} vs T=3 {:.2}", 100.0 * j1, 100.0 * j3),
    )
}

fn a10_norm_ratio() -> (bool, String) {
    let runs = corrupted_suite();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut outer = 0;
    for r in runs {
        for rec in &r.seg.trace[1..] {
            lo = lo.min(rec.mean_norm_ratio);
            hi = hi.max(rec.mean_norm_ratio);
            outer += 1;
        }
    }
    (
        outer == runs.len() * 5 && lo >= 0.95 && hi <= 1.05,
        format!("{outer} outer iterations, mean norm ratio in [{lo:.4}, {hi:.4}]"),
    )
}

fn mask(grid: Grid, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
    let values = (0..grid.len())
        .map(|i| {
            let (y, x) = grid.coords(i);
            f(y, x)
        })
        .collect();
    BinaryMask::from_grid(grid, values).unwrap()
}

/// Foreground set from an exhaustive scan of every split of the sorted values.
fn brute_force_foreground(values: &[f64]) -> Vec<bool> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0);
    for k in 1..sorted.len() {
        let cost = sse(&sorted[..k]) + sse(&sorted[k..]);
        if cost < best.0 {
            best = (cost, k);
        }
    }
    let threshold = sorted[best.1 - 1];
    values.iter().map(|&v| v > threshold).collect()
}

fn a11_metrics() -> (bool, String) {
    let mut failures = Vec::new();
    let g = Grid::new(8, 8);
    let square = mask(g, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
    let upper = mask(g, |y, _| y < 4);
    let left = mask(g, |_, x| x < 4);
    let a = mask(g, |y, x| y < 2 && x < 2);
    let b = mask(g, |y, x| y > 5 && x > 5);
    let empty = BinaryMask::empty(g);
    let shifted = mask(g, |y, x| (2..6).contains(&y) && (3..7).contains(&x));
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    expect("J identical", jaccard(&square, &square).unwrap() == 1.0);
    expect("J disjoint", jaccard(&a, &b).unwrap() == 0.0);
    expect("J halves", (jaccard(&upper, &left).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    expect("J both empty", jaccard(&empty, &empty).unwrap() == 1.0);
    expect(
        "J symmetric",
        jaccard(&square, &shifted).unwrap() == jaccard(&shifted, &square).unwrap(),
    );
    expect("F identical", contour_f(&square, &square, 1).unwrap().contour_f == 1.0);
    expect(
        "F empty prediction",
        contour_f(&empty, &square, 1).unwrap().contour_f == 0.0,
    );
    expect(
        "F shift within tolerance",
        contour_f(&shifted, &square, 2).unwrap().contour_f == 1.0,
    );
    let pr = contour_f(&shifted, &upper, 1).unwrap();
    let rp = contour_f(&upper, &shifted, 1).unwrap();
    expect("P/R swap", pr.contour_precision == rp.contour_recall);
    let sep: Vec<f64> = (0..16).map(|i| if i < 8 { 0.1 } else { 0.9 }).collect();
    expect(
        "binarize separable",
        binarize(&sep, Grid::new(4, 4)).unwrap().count() == 8,
    );
    expect(
        "binarize constant",
        binarize(&[0.5; 16], Grid::new(4, 4)).unwrap().count() == 0,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut brute_mismatch = 0;
    for _ in 0..100 {
        let grid = Grid::new(rng.gen_range(1..=12), rng.gen_range(2..=12));
        let values: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        if binarize(&values, grid).unwrap().values() != brute_force_foreground(&values).as_slice() {
            brute_mismatch += 1;
        }
    }
    expect("binarize brute force", brute_mismatch == 0);
    let pass = failures.is_empty();
    let detail = if pass {
        "analytic J/F/binarize cases hold; binarize matches brute force on 100 vectors".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    (pass, detail)
}

fn a12_determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("bundle");
    generate(&corrupted_scene(5)).unwrap().save(&bundle).unwrap();
    let outs = [tmp.path().join("run1"), tmp.path().join("run2")];
    for out in &outs {
        let status = Command::new(env!("CARGO_BIN_EXE_vseg"))
            .arg("segment")
            .arg(&bundle)
            .arg("--out")
            .arg(out)
            .args(["--seed", "42", "--lambda", "10", "--horizon", "2"])
            .status()
            .unwrap();
        assert!(status.success(), "segment exited with {status}");
    }
    let mut compared = 0;
    let mut differing = 0;
    for p in 0..5 {
        let name = format!("mask_{p:05}.pgm");
        let a = fs::read(outs[0].join(&name)).unwrap();
        let b = fs::read(outs[1].join(&name)).unwrap();
        compared += 1;
        differing += usize::from(a != b);
    }
    (
        differing == 0,
        format!("{compared} PGM files compared, {differing} differ"),
    )
}

fn a13_throughput() -> (bool, String) {
    let mut spec = SceneSpec::moving_square(
        60,
        107,
        3,
        Rect {
            top: 15,
            left: 30,
            height: 20,
            width: 30,
        },
        [2, 1],
    );
    spec.feature_dim = 64;
    spec.feature_noise = 0.2;
    spec.flow_noise = 0.3;
    spec.seed = 13;
    let bundle = generate(&spec).unwrap();
    let seg = run(&bundle, &PipelineConfig::default()).unwrap();
    let t = seg.timings;
    let (_, j) = scored(&seg, &bundle);
    (
        t.init_s_per_frame <= 1.0 && t.optimize_s_per_frame <= 4.0,
        format!(
            "60x107, {} threads: init {:.3} s/frame, optimize {:.3} s/frame (J {:.1})",
            rayon_threads(),
            t.init_s_per_frame,
            t.optimize_s_per_frame,
            100.0 * j
        ),
    )
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
