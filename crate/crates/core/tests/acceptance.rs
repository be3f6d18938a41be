//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use geoloss::crossloss::{cross_gates, cross_terms, evaluate, task_weight, task_weights, LossKind};
use geoloss::gradcheck::{run_suite, CheckOptions};
use geoloss::grid::{FlowField, ImageGrid, ScalarMap};
use geoloss::io;
use geoloss::loss::LossConfig;
use geoloss::occlusion::{occlusion_from_flow, range_map};
use geoloss::photometric::direction_weights;
use geoloss::refine::{refine, PosePerturbation, RefineConfig};
use geoloss::synthworld::{gradcheck_state, moving_object_scene, render, rigid_scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

/// Splat of every source pixel onto every target pixel, no shortcuts.
fn brute_force_range(flow: &FlowField, tw: usize, th: usize) -> Vec<f64> {
    let k = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; tw * th];
    for y in 0..th {
        for x in 0..tw {
            let mut r = 0.0;
            for j in 0..flow.height() {
                for i in 0..flow.width() {
                    let (u, v) = flow.get(i, j);
                    r += k(x as f64 - (i as f64 + u)) * k(y as f64 - (j as f64 + v));
                }
            }
            out[y * tw + x] = r;
        }
    }
    out
}

fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: f64) -> FlowField {
    FlowField::from_fn(w, h, |_, _| (rng.random_range(-scale..scale), rng.random_range(-scale..scale))).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let w = rng.random_range(1..=16);
        let h = rng.random_range(1..=16);
        let scale = [0.5, 2.0, 6.0][case % 3];
        let mut flow = random_flow(&mut rng, w, h, scale);
        // integer displacements exercise the kernel's zero-weight edges
        if case % 5 == 0 {
            flow = FlowField::from_fn(w, h, |x, y| {
                let (u, v) = flow.get(x, y);
                (u.round(), v.round())
            })
            .unwrap();
        }
        let fast = range_map(&flow, w, h);
        for (a, b) in fast.data().iter().zip(brute_force_range(&flow, w, h)) {
            worst = worst.max((a - b).abs());
        }
    }
    let ones = [(1, 1), (7, 3), (16, 16)]
        .iter()
        .all(|&(w, h)| occlusion_from_flow(&FlowField::zeros(w, h), w, h).as_map().data().iter().all(|&m| m == 1.0));
    let t = start.elapsed();
    outcome(
        worst <= 1e-12 && ones && within(t, 10.0),
        format!("max |fast - brute| = {worst:.2e} over 200 flows, zero flow gives M = 1: {ones}, {t:.2?}"),
    )
}

/// True where a 3x3 neighbourhood of the label map is not constant.
fn label_boundary(labels: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x];
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && labels[ny as usize * w + nx as usize] != c {
                        out[y * w + x] = true;
                        break 'n;
                    }
                }
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (mut agree, mut total, mut worst) = (0usize, 0usize, 1.0f64);
    let mut error = None;
    for seed in 0..20 {
        let truth = match render(&moving_object_scene(64, 48, seed)) {
            Ok(t) => t,
            Err(e) => {
                error = Some(format!("scene {seed}: {e}"));
                break;
            }
        };
        let (w, h) = (truth.width(), truth.height());
        for s in 0..2 {
            let m = occlusion_from_flow(&truth.backward_flows[s], w, h);
            let labels: Vec<bool> = truth.occlusion[s].data().iter().map(|&o| o > 0.5).collect();
            let boundary = label_boundary(&labels, w, h);
            let (mut a, mut n) = (0usize, 0usize);
            for i in 0..w * h {
                if boundary[i] {
                    continue;
                }
                n += 1;
                if (m.as_map().data()[i] < 0.5) == labels[i] {
                    a += 1;
                }
            }
            worst = worst.min(a as f64 / n as f64);
            agree += a;
            total += n;
        }
    }
    let t = start.elapsed();
    if let Some(e) = error {
        return outcome(false, e);
    }
    let rate = agree as f64 / total as f64;
    outcome(
        rate >= 0.95 && within(t, 30.0),
        format!(
            "agreement {:.2}% over 20 scenes x 2 sources ({total} non-boundary pixels, worst map {:.2}%), {t:.2?}",
            100.0 * rate,
            100.0 * worst
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let config = LossConfig::default();
    let opts = CheckOptions::default();
    let mut checks = 0;
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    let mut control_caught = true;
    for seed in 0..3 {
        let state = match gradcheck_state(seed) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        match run_suite(&state, &config, &opts) {
            Ok(reports) => {
                for r in reports {
                    checks += 1;
                    worst = worst.max(r.max_rel_err);
                    if !r.pass {
                        failed.push(format!("seed {seed} {}", r.name));
                    }
                }
            }
            Err(e) => return outcome(false, format!("suite on scene {seed}: {e}")),
        }
        if seed == 0 {
            let control = CheckOptions { analytic_scale: 2.0, ..opts };
            match run_suite(&state, &config, &control) {
                // every check with a non-zero gradient must notice the scaling
                Ok(reports) => control_caught = reports.iter().all(|r| !r.pass),
                Err(e) => return outcome(false, format!("negative control: {e}")),
            }
        }
    }
    let t = start.elapsed();
    outcome(
        failed.is_empty() && control_caught && within(t, 120.0),
        format!(
            "{checks} checks on 3 scenes, worst rel err {worst:.2e} (tol {:.0e}), failures {failed:?}, x2 control rejected: {control_caught}, {t:.2?}",
            opts.tol
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let config = LossConfig::default();
    let (mut op, mut ap, mut epi, mut grad) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..3 {
        let truth = match render(&rigid_scene(64, 48, seed)) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        let state = truth.state();
        let eval = |kind, g| evaluate(&state, &config, kind, g);
        let (Ok(b_op), Ok(b_ap), Ok(terms)) = (eval(LossKind::Op, false), eval(LossKind::Ap, true), cross_terms(&state, &config))
        else {
            return outcome(false, format!("evaluation failed on scene {seed}"));
        };
        op = op.max(b_op.value);
        ap = ap.max(b_ap.value);
        for t in &terms {
            epi = epi.max(t.l_eo.data().iter().chain(t.l_ed.data()).fold(0.0, |m, &v| m.max(v)));
        }
        if let Some(g) = b_ap.grad_twist() {
            grad = grad.max((g[0].norm().powi(2) + g[1].norm().powi(2)).sqrt());
        } else {
            return outcome(false, "no twist gradient".into());
        }
    }
    let t = start.elapsed();
    outcome(
        op <= 1e-6 && ap <= 1e-6 && epi <= 1e-9 && grad <= 1e-6 && within(t, 10.0),
        format!("3 rigid scenes: L_op {op:.2e}, L_ap {ap:.2e}, max epipolar residual {epi:.2e}, |grad_twist L_ap| {grad:.2e}, {t:.2?}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let equal: Vec<f64> = (0..64).map(|_| rng.random_range(-50.0..50.0)).collect();
    let eq = ScalarMap::new(8, 8, equal).unwrap();
    let (a, b) = direction_weights(&eq, &eq).unwrap();
    let exact_one = a.data().iter().chain(b.data()).all(|&w| w == 1.0);

    let (w_bo, _) = direction_weights(&ScalarMap::filled(1, 1, 1.0), &ScalarMap::filled(1, 1, 0.0)).unwrap();
    let e = std::f64::consts::E;
    let direct = (0.5 - e / (e + 1.0)).exp();
    let closed_err = (w_bo.data()[0] - direct).abs();

    let l_bo = ScalarMap::from_fn(32, 32, |_, _| rng.random_range(0.0..5.0));
    let l_fo = ScalarMap::from_fn(32, 32, |_, _| rng.random_range(0.0..5.0));
    let (p, q) = direction_weights(&l_bo, &l_fo).unwrap();
    let product_err = p.data().iter().zip(q.data()).fold(0.0f64, |m, (x, y)| m.max((x * y - 1.0).abs()));
    outcome(
        exact_one && closed_err <= 1e-9 && product_err <= 1e-12,
        format!(
            "equal losses give 1 exactly: {exact_one}, w_bo(1, 0) = {:.12} (direct {direct:.12}, err {closed_err:.1e}), max |w_bo w_fo - 1| {product_err:.1e}",
            w_bo.data()[0]
        ),
    )
}

fn criterion_6() -> Outcome {
    let threshold = LossConfig::default().threshold;
    let margin = (0.72f64 / 0.28).ln();
    // exactly at the margin the strict test fails
    let at = task_weight(margin, 0.0, threshold);
    let below = task_weight(margin - 1e-12, 0.0, threshold);
    let rival_at = task_weight(0.0, margin, threshold);
    let boundary_ok = at == 0.0 && below == 1.0 && rival_at == 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let l_o = ScalarMap::from_fn(64, 64, |_, _| rng.random_range(0.0..3.0));
    let l_d = ScalarMap::from_fn(64, 64, |_, _| rng.random_range(0.0..3.0));
    let (w_o, w_d) = task_weights(&l_o, &l_d, threshold).unwrap();
    let both_zero = w_o.data().iter().zip(w_d.data()).filter(|(a, b)| **a == 0.0 && **b == 0.0).count();

    let dominated = [1.0, 10.0, 1e3, 1e12].iter().all(|&gap| {
        let base = rng.random_range(0.0..1.0);
        task_weight(base + gap, base, threshold) == 0.0 && task_weight(base, base + gap, threshold) == 1.0
    });
    outcome(
        boundary_ok && both_zero == 0 && dominated,
        format!(
            "at margin {margin:.6}: w_o = {at}, just below: {below}, rival: {rival_at}; both-zero pixels {both_zero}/4096; dominated task off: {dominated}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let config = LossConfig::default();
    let (mut gated, mut total) = (0usize, 0usize);
    let mut worst = 1.0f64;
    for seed in 0..5 {
        let truth = match render(&moving_object_scene(128, 96, seed)) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        let gates = match cross_gates(&truth.state(), &config) {
            Ok(g) => g,
            Err(e) => return outcome(false, format!("gates {seed}: {e}")),
        };
        let (mut g, mut n) = (0usize, 0usize);
        for i in 0..truth.object_mask.len() {
            if truth.object_mask.data()[i] < 0.5 {
                continue;
            }
            for s in &gates.sources {
                n += 1;
                if s.w_d.data()[i] == 0.0 || s.w_eo.data()[i] == 0.0 {
                    g += 1;
                }
            }
        }
        worst = worst.min(g as f64 / n as f64);
        gated += g;
        total += n;
    }
    let rate = gated as f64 / total as f64;
    outcome(
        rate >= 0.9 && worst >= 0.9,
        format!(
            "{:.2}% of object (pixel, source) pairs gated over 5 scenes, worst scene {:.2}%",
            100.0 * rate,
            100.0 * worst
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let truth = match render(&rigid_scene(128, 96, 0)) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("scene: {e}")),
    };
    let perturbed = PosePerturbation::default().apply(&truth.poses).unwrap();
    let config = RefineConfig::default();
    let out = match refine(&truth.state().with_poses(perturbed), &config, Some(&truth.poses)) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("refine: {e}")),
    };
    let t_rigid = start.elapsed();
    let e = out.final_point().error.expect("truth given");
    let rigid_ok = e.rot_err_deg < 0.1 && e.trans_err_pct < 1.0 && out.iterations_used <= 500 && within(t_rigid, 60.0);
    let rigid = format!(
        "rigid: rot {:.2e} deg, trans {:.2e}% after {} iterations in {t_rigid:.1?}",
        e.rot_err_deg, e.trans_err_pct, out.iterations_used
    );

    let mut ablation = Vec::new();
    let mut all_better = true;
    for seed in 0..5 {
        let truth = match render(&moving_object_scene(128, 96, seed)) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("moving scene {seed}: {e}")),
        };
        let start_state = truth
            .state()
            .with_poses(PosePerturbation { seed, ..Default::default() }.apply(&truth.poses).unwrap());
        let mut scores = [0.0; 2];
        for (k, gating) in [true, false].into_iter().enumerate() {
            let mut cfg = RefineConfig::default();
            cfg.loss_config.gating = gating;
            match refine(&start_state, &cfg, Some(&truth.poses)) {
                Ok(o) => scores[k] = o.final_point().error.expect("truth given").score(),
                Err(e) => return outcome(false, format!("ablation {seed}: {e}")),
            }
        }
        all_better &= scores[0] < scores[1];
        ablation.push(format!("{:.3}/{:.3}", scores[0], scores[1]));
    }
    outcome(
        rigid_ok && all_better,
        format!(
            "{rigid}; ablation scores gated/ungated [{}] (score = rot/0.1deg + trans%), gated strictly better on all: {all_better}, total {:.1?}",
            ablation.join(", "),
            start.elapsed()
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Bit patterns of a loss evaluation and a short refinement.
fn fingerprint() -> Vec<u64> {
    let truth = render(&moving_object_scene(64, 48, 3)).unwrap();
    let state = truth.state();
    let config = LossConfig::default();
    let mut out = bits(truth.target.data());
    let b = evaluate(&state, &config, LossKind::Total, true).unwrap();
    out.push(b.value.to_bits());
    out.extend(bits(b.per_pixel.data()));
    out.extend(bits(b.grad_depth().unwrap().data()));
    for f in b.grad_flow().unwrap() {
        out.extend(bits(f.u()));
        out.extend(bits(f.v()));
    }
    let start = state.with_poses(PosePerturbation::default().apply(&truth.poses).unwrap());
    let cfg = RefineConfig {
        iterations: 15,
        warmup_iterations: 5,
        ..Default::default()
    };
    for p in refine(&start, &cfg, Some(&truth.poses)).unwrap().trajectory {
        out.push(p.loss.to_bits());
    }
    out
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(std::fs::read(p).unwrap())))
        })
        .collect()
}

fn cli_outputs(threads: usize, root: &Path) -> Result<Vec<(String, String)>, String> {
    let exe = env!("CARGO_BIN_EXE_geoloss");
    let scene = root.join(format!("scene{threads}"));
    let refined = root.join(format!("refine{threads}"));
    let runs: [Vec<String>; 3] = [
        vec!["synth".into(), "--preset".into(), "moving-object".into(), "--width".into(), "48".into(), "--height".into(), "36".into(), "--seed".into(), "2".into(), "-o".into(), scene.display().to_string()],
        vec!["eval-loss".into(), scene.display().to_string(), "-o".into(), scene.join("eval").display().to_string()],
        vec!["refine".into(), scene.display().to_string(), "--iterations".into(), "20".into(), "--warmup".into(), "5".into(), "-o".into(), refined.display().to_string()],
    ];
    let mut stdout = Vec::new();
    for args in runs {
        let out = Command::new(exe)
            .arg("--threads")
            .arg(threads.to_string())
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        stdout.push(out.stdout);
    }
    let mut digests = digest_dir(&scene);
    digests.extend(digest_dir(&scene.join("eval")));
    digests.extend(digest_dir(&refined));
    // the eval-loss report carries no timings or paths that depend on the thread count
    let eval: serde_json::Value = serde_json::from_slice(&stdout[1]).map_err(|e| e.to_string())?;
    digests.push(("eval.value".into(), eval["value"].to_string()));
    Ok(digests)
}

fn round_trips() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let w = rng.random_range(1..=40);
        let h = rng.random_range(1..=40);
        let channels = if case % 2 == 0 { 1 } else { 3 };
        let data: Vec<f64> = (0..w * h * channels)
            .map(|_| rng.random_range(-1e3f32..1e3f32) as f64)
            .collect();
        let grid = ImageGrid::new(w, h, channels, data).unwrap();
        let bytes = io::encode_pfm(&grid).map_err(|e| e.to_string())?;
        let back = io::decode_pfm(&bytes).map_err(|e| e.to_string())?;
        if back != grid || io::encode_pfm(&back).unwrap() != bytes {
            return Err(format!("PFM case {case} ({w}x{h}x{channels})"));
        }
        let flow = FlowField::from_fn(w, h, |_, _| {
            (rng.random_range(-50f32..50f32) as f64, rng.random_range(-50f32..50f32) as f64)
        })
        .unwrap();
        let bytes = io::encode_flo(&flow);
        let back = io::decode_flo(&bytes).map_err(|e| e.to_string())?;
        if back != flow || io::encode_flo(&back) != bytes {
            return Err(format!("FLO case {case} ({w}x{h})"));
        }
    }
    Ok(100)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let reference = pool(1).install(fingerprint);
    let repeat = pool(1).install(fingerprint);
    let parallel = pool(4).install(fingerprint);
    let library = reference == repeat && reference == parallel;

    let root = tempfile::tempdir().unwrap();
    let cli = match (cli_outputs(1, root.path()), cli_outputs(3, root.path())) {
        (Ok(a), Ok(b)) => {
            if a == b {
                Ok(a.len())
            } else {
                let diff: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.clone()).collect();
                Err(format!("differing outputs {diff:?}"))
            }
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    let io_result = round_trips();
    let t = start.elapsed();
    outcome(
        library && cli.is_ok() && io_result.is_ok(),
        format!(
            "library bits equal across repeats and 1/4 threads: {library}; CLI --threads 1 vs 3: {}; round trips: {}; {t:.1?}",
            match &cli {
                Ok(n) => format!("{n} outputs identical"),
                Err(e) => e.clone(),
            },
            match &io_result {
                Ok(n) => format!("{n} PFM and {n} FLO grids exact"),
                Err(e) => format!("failed at {e}"),
            }
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        (1, "occlusion oracle", criterion_1),
        (2, "occlusion vs z-buffer", criterion_2),
        (3, "gradient suite", criterion_3),
        (4, "zero at truth", criterion_4),
        (5, "direction weights", criterion_5),
        (6, "task gating", criterion_6),
        (7, "moving-object gating", criterion_7),
        (8, "pose recovery", criterion_8),
        (9, "determinism and I/O", criterion_9),
    ];
    let mut failures = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        let o = f();
        if !o.pass {
            failures += 1;
        }
        println!("criterion {n} ({name}): {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
