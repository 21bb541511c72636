//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! `DEPTHHEAD_ACCEPTANCE=1,4,9` restricts the run to the listed criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use depthhead::annotations::AnnotatedFrame;
use depthhead::candidates::{grid_size, head_box_at};
use depthhead::depth::denoise_zeros;
use depthhead::eval::{bench_table, iou_paper, iou_standard, IouMode, PaperIou};
use depthhead::nn::{cross_entropy, LayerSpec, Network, NetworkSpec, Tensor};
use depthhead::synth::{generate_frames, CorpusConfig};
use depthhead::trainer::{augment_flip, build_dataset, train_with, Label, TrainConfig};
use depthhead::{extract_candidates, BoundingBox, CameraIntrinsics, DepthFrame, DetectorConfig, ExtractionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box sizes are a single division; allow a few ulps.
const BOX_REL_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const GRAD_SEEDS: u64 = 5;
const IOU_TOL: f64 = 1e-9;
const IOU_PAIRS: usize = 1000;

const TRAIN_FRAMES: usize = 200;
const HELD_OUT_FRAMES: usize = 50;
const TRAIN_SEED: u64 = 1;
const HELD_OUT_SEED: u64 = 2;
const MAX_EPOCHS: usize = 30;
const MIN_TP_RATE: f64 = 0.90;
const MAX_FP: usize = 5;
const TAU: f64 = 0.5;
const BENCH_KS: [usize; 4] = [3, 9, 21, 45];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn box_from_distance() -> Outcome {
    let intr = CameraIntrinsics::new(500.0, 500.0, 256.0, 212.0).unwrap();
    let (w, h) = head_box_at(&intr, 1000.0, 200.0).map_err(|e| e.to_string())?;
    check((w, h) == (100.0, 100.0), format!("got ({w}, {h}) at 1000 mm"))?;
    let mut worst: f64 = 0.0;
    for d in (500..=5000).step_by(10) {
        let d = d as f64;
        let (w, h) = head_box_at(&intr, d, 200.0).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(w * d, 500.0 * 200.0)).max(rel_err(h * d, 500.0 * 200.0));
    }
    check(worst <= BOX_REL_TOL, format!("w*D deviates by {worst:e}"))?;
    Ok(format!("(100, 100) at 1000 mm; w*D constant to {worst:.1e} over 500..5000 mm"))
}

fn grid_count() -> Outcome {
    let intr = CameraIntrinsics::new(500.0, 500.0, 256.0, 212.0).unwrap();
    let frame = DepthFrame::filled(512, 424, 1000, intr).unwrap();
    let cfg = ExtractionConfig::default();
    let n = extract_candidates(&frame, &cfg).map_err(|e| e.to_string())?.len();
    let approx = 512.0 * 424.0 / 81.0;
    check(n == 2736 && grid_size(512, 424, 9) == 2736, format!("{n} candidates"))?;
    Ok(format!(
        "{n} = 57 x 48 candidates; the continuous estimate w*h/K^2 = {approx:.1} undercounts the partial last row and column"
    ))
}

/// Central differences of the mean cross-entropy against every parameter.
fn gradient_error(spec: &NetworkSpec, seed: u64) -> f64 {
    let mut net: Network<f64> = Network::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = 3;
    let per: usize = spec.input.iter().product();
    let data: Vec<f64> = (0..n * per).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input);
    let batch = Tensor::new(shape, data).unwrap();
    let classes = net.num_classes();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();

    net.forward_train(&batch).unwrap();
    let grads = net.backward(&labels).unwrap();
    let loss = |net: &Network<f64>| cross_entropy(&net.forward(&batch).unwrap(), &labels).unwrap();

    let mut worst: f64 = 0.0;
    for (t, analytic) in grads.tensors.iter().enumerate() {
        for (j, &g) in analytic.iter().enumerate() {
            let orig = net.params()[t][j];
            net.params_mut()[t][j] = orig + GRAD_STEP;
            let up = loss(&net);
            net.params_mut()[t][j] = orig - GRAD_STEP;
            let down = loss(&net);
            net.params_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_STEP);
            // Both sides below the finite-difference noise floor agree.
            if g.abs().max(numeric.abs()) < 1e-8 {
                continue;
            }
            worst = worst.max(rel_err(g, numeric));
        }
    }
    worst
}

fn gradient_oracle() -> Outcome {
    use LayerSpec::*;
    let nets = [
        ("conv", [2, 6, 6], vec![Conv { filters: 3, kernel: 3 }, Flatten, Dense { units: 2 }, Softmax]),
        (
            "maxpool",
            [1, 8, 8],
            vec![Conv { filters: 2, kernel: 3 }, MaxPool { size: 2 }, Flatten, Dense { units: 2 }, Softmax],
        ),
        ("tanh", [1, 5, 5], vec![Conv { filters: 2, kernel: 2 }, Tanh, Flatten, Dense { units: 3 }, Softmax]),
        ("dense", [1, 4, 4], vec![Flatten, Dense { units: 5 }, Tanh, Dense { units: 2 }, Softmax]),
    ];
    let mut parts = Vec::new();
    for (name, input, layers) in nets {
        let spec = NetworkSpec { input, layers };
        let worst = (0..GRAD_SEEDS).map(|s| gradient_error(&spec, s)).fold(0.0, f64::max);
        check(worst < GRAD_REL_TOL, format!("{name}: relative error {worst:e}"))?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!(
        "worst relative error over {GRAD_SEEDS} seeds (flatten and softmax in every net): {}",
        parts.join(", ")
    ))
}

fn iou_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < IOU_PAIRS {
        let mut bx = || {
            BoundingBox::new(
                rng.gen_range(0.0..100.0),
                rng.gen_range(0.0..100.0),
                rng.gen_range(1.0..60.0),
                rng.gen_range(1.0..60.0),
            )
        };
        let (a, b) = (bx(), bx());
        let s = iou_standard(&a, &b);
        if s <= 0.0 {
            continue;
        }
        let PaperIou::Ratio(p) = iou_paper(&a, &b) else {
            return Err(format!("{a:?} {b:?} reported as exact"));
        };
        worst = worst.max((p - s / (1.0 - s)).abs());
        checked += 1;
    }
    check(worst <= IOU_TOL, format!("identity off by {worst:e}"))?;

    let a = BoundingBox::new(1.0, 1.0, 2.0, 2.0);
    let half = BoundingBox::new(2.0, 1.0, 2.0, 2.0);
    let far = BoundingBox::new(10.0, 10.0, 2.0, 2.0);
    check(iou_paper(&a, &far) == PaperIou::Ratio(0.0) && iou_standard(&a, &far) == 0.0, "disjoint")?;
    check(iou_paper(&a, &half) == PaperIou::Ratio(0.5), "half overlap paper value")?;
    check((iou_standard(&a, &half) - 1.0 / 3.0).abs() < IOU_TOL, "half overlap standard value")?;
    check(iou_paper(&a, &a) == PaperIou::MatchExact && iou_standard(&a, &a) == 1.0, "identical")?;
    Ok(format!(
        "s/(1-s) identity on {IOU_PAIRS} overlapping pairs, max error {worst:.1e}; hand cases 0 / 0.5 & 1/3 / exact & 1"
    ))
}

/// Frames, model and timings shared by the closed-loop criteria.
struct ClosedLoop {
    train: Vec<AnnotatedFrame>,
    held_out: Vec<AnnotatedFrame>,
    model: Network<f32>,
    dataset_len: usize,
    epochs: usize,
    train_secs: f64,
}

fn corpus(count: usize, seed: u64) -> CorpusConfig {
    CorpusConfig {
        count,
        seed,
        ..CorpusConfig::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: MAX_EPOCHS,
        batch_size: 32,
        seed: 7,
        negatives_per_frame: 24,
        jitter_copies: 3,
        jitter_px: 4.5,
        exclusion_overlap: 0.25,
        ..TrainConfig::default()
    }
}

fn detector_config() -> DetectorConfig {
    DetectorConfig::default()
}

fn closed_loop_setup() -> ClosedLoop {
    let intr = CameraIntrinsics::default();
    let train = generate_frames(&corpus(TRAIN_FRAMES, TRAIN_SEED), &intr).unwrap();
    let held_out = generate_frames(&corpus(HELD_OUT_FRAMES, HELD_OUT_SEED), &intr).unwrap();
    let cfg = train_config();
    let dataset = augment_flip(&build_dataset(&train, &detector_config().extraction, &cfg).unwrap());
    let started = Instant::now();
    let spec = NetworkSpec::head_classifier(detector_config().extraction.patch_side);
    let outcome = train_with(&dataset, &cfg, &spec, |e| {
        eprintln!("  epoch {:>2}  loss {:.4}  accuracy {:.4}", e.epoch, e.loss, e.accuracy);
    })
    .unwrap();
    ClosedLoop {
        train,
        held_out,
        model: outcome.model,
        dataset_len: dataset.len(),
        epochs: outcome.history.len(),
        train_secs: started.elapsed().as_secs_f64(),
    }
}

fn closed_loop(cl: &ClosedLoop) -> Outcome {
    let started = Instant::now();
    let rows = bench_table(&cl.held_out, &cl.model, &[9], &detector_config(), TAU, IouMode::Paper)
        .map_err(|e| e.to_string())?;
    let report = &rows[0].1;
    let msg = format!(
        "tp_rate {:.3} (>= {MIN_TP_RATE}), fp {} (<= {MAX_FP}), fn {} at K=9 on {} held-out heads; \
         {} patches, {} epochs, training {:.0} s, detection {:.0} s",
        report.tp_rate,
        report.fp,
        report.fn_,
        report.ground_truth,
        cl.dataset_len,
        cl.epochs,
        cl.train_secs,
        started.elapsed().as_secs_f64()
    );
    check(cl.epochs <= MAX_EPOCHS, format!("{} epochs", cl.epochs))?;
    check(report.tp_rate >= MIN_TP_RATE && report.fp <= MAX_FP, msg.clone())?;
    Ok(msg)
}

fn stride_trend(cl: &ClosedLoop) -> Outcome {
    let rows = bench_table(&cl.held_out, &cl.model, &BENCH_KS, &detector_config(), TAU, IouMode::Paper)
        .map_err(|e| e.to_string())?;
    let table: Vec<String> = rows
        .iter()
        .map(|(r, _)| format!("K={} tp {:.3} fps {:.2}", r.k, r.tp_rate, r.fps))
        .collect();
    let msg = table.join("; ");
    for w in rows.windows(2) {
        let (a, b) = (&w[0].0, &w[1].0);
        check(b.fps > a.fps, format!("fps not increasing: {msg}"))?;
        check(b.tp_rate <= a.tp_rate, format!("tp_rate increases: {msg}"))?;
    }
    Ok(msg)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_depthhead"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let config = serde_json::json!({
        "intrinsics": {"fx": 365.0, "fy": 365.0, "cx": 96.0, "cy": 80.0},
        "train": {"epochs": 2, "batch_size": 16, "negatives_per_frame": 6, "seed": 5},
        "synth": {"width": 192, "height": 160, "count": 8, "seed": 5, "min_heads": 1,
                  "head_depth_mm": {"min": 1500.0, "max": 2500.0}}
    });
    fs::write(p("config.json"), config.to_string()).map_err(|e| e.to_string())?;
    let cfg = p("config.json");
    run_cli(&["--config", &cfg, "--out", &p("data"), "gen-synth"])?;
    run_cli(&["--config", &cfg, "--out", &p("a.bin"), "train", &p("data")])?;
    run_cli(&["--config", &cfg, "--out", &p("b.bin"), "train", &p("data")])?;
    let (a, b) = (read(Path::new(&p("a.bin")))?, read(Path::new(&p("b.bin")))?);
    check(a == b, "model files differ")?;
    run_cli(&["--config", &cfg, "--out", &p("a.json"), "detect", "--model", &p("a.bin"), &p("data")])?;
    run_cli(&["--config", &cfg, "--out", &p("b.json"), "detect", "--model", &p("b.bin"), &p("data")])?;
    let (da, db) = (read(Path::new(&p("a.json")))?, read(Path::new(&p("b.json")))?);
    check(da == db, "detection files differ")?;
    Ok(format!(
        "two trainings give identical {}-byte models; two detection runs give identical {}-byte JSON",
        a.len(),
        da.len()
    ))
}

fn augmentation(cl: &ClosedLoop) -> Outcome {
    let data = build_dataset(&cl.train, &detector_config().extraction, &train_config()).map_err(|e| e.to_string())?;
    let flipped = augment_flip(&data);
    check(flipped.len() == 2 * data.len(), "size not doubled")?;
    check(flipped[..data.len()] == data[..], "originals not kept in order")?;
    for (orig, mirror) in data.iter().zip(&flipped[data.len()..]) {
        check(mirror.label == orig.label, "label changed")?;
        let back = mirror.patch.flipped_horizontally();
        let same = back.values().iter().zip(orig.patch.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, "double flip is not the identity")?;
    }
    let twice = augment_flip(&flipped);
    let second_mirrors = &twice[flipped.len()..];
    let identity = second_mirrors[data.len()..]
        .iter()
        .zip(&data)
        .all(|(a, b)| a.label == b.label && a.patch.values().iter().zip(b.patch.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(identity, "mirror of a mirror differs from the original")?;
    let heads = data.iter().filter(|s| s.label == Label::Head).count();
    Ok(format!(
        "{} -> {} samples ({heads} heads before mirroring); every double flip bitwise identical",
        data.len(),
        flipped.len()
    ))
}

fn preprocessing(cl: &ClosedLoop) -> Outcome {
    // Isolated zeros: every pixel with odd coordinates in both axes.
    let intr = CameraIntrinsics::new(365.0, 365.0, 32.0, 24.0).unwrap();
    let (w, h) = (64, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let px: Vec<u16> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if x % 2 == 1 && y % 2 == 1 {
                0
            } else {
                rng.gen_range(600..7000)
            }
        })
        .collect();
    let frame = DepthFrame::new(w, h, px, intr).unwrap();
    let clean = denoise_zeros(&frame);
    let zeros = frame.pixels().iter().filter(|&&v| v == 0).count();
    let filled = frame.pixels().iter().zip(clean.pixels()).filter(|&(&a, &b)| a == 0 && b != 0).count();
    let untouched = frame.pixels().iter().zip(clean.pixels()).all(|(&a, &b)| a == 0 || a == b);
    check(filled == zeros, format!("{filled} of {zeros} isolated zeros filled"))?;
    check(untouched, "a nonzero pixel changed")?;

    let cfg = detector_config().extraction;
    let mut patches = 0usize;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for f in cl.train.iter().chain(&cl.held_out) {
        for c in extract_candidates(&denoise_zeros(&f.frame), &cfg).map_err(|e| e.to_string())? {
            for &v in c.patch.values() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            patches += 1;
        }
    }
    check((-1.0..=1.0).contains(&lo) && (-1.0..=1.0).contains(&hi), format!("values span [{lo}, {hi}]"))?;
    Ok(format!(
        "{filled}/{zeros} isolated zeros filled, no nonzero pixel changed; {patches} patches from {} frames within [{lo}, {hi}]",
        cl.train.len() + cl.held_out.len()
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("DEPTHHEAD_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));

    let needs_loop = [5, 6, 8, 9].iter().any(|&n| wanted(n));
    let mut shared: Option<ClosedLoop> = None;
    let mut failures = 0;
    let mut report = |n: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {n}. {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {n}. {name} ({secs:.1} s): {detail}");
            }
        }
    };

    type Plain = (usize, &'static str, fn() -> Outcome);
    let plain: [Plain; 5] = [
        (1, "box size from distance", box_from_distance),
        (2, "grid candidate count", grid_count),
        (3, "gradient oracle", gradient_oracle),
        (4, "overlap algebra", iou_algebra),
        (7, "determinism", determinism),
    ];
    for (n, name, f) in plain.iter().take(4) {
        if wanted(*n) {
            let t = Instant::now();
            report(*n, name, t, guarded(f));
        }
    }

    if needs_loop {
        let t = Instant::now();
        match guarded(|| {
            shared = Some(closed_loop_setup());
            Ok(String::new())
        }) {
            Ok(_) => eprintln!("closed-loop model trained in {:.0} s", t.elapsed().as_secs_f64()),
            Err(e) => eprintln!("closed-loop setup failed: {e}"),
        }
    }
    type Looped = (usize, &'static str, fn(&ClosedLoop) -> Outcome);
    let looped: [Looped; 2] = [(5, "closed-loop synthetic detection", closed_loop), (6, "stride trend", stride_trend)];
    for (n, name, f) in looped {
        if wanted(n) {
            let t = Instant::now();
            let outcome = match &shared {
                Some(cl) => guarded(|| f(cl)),
                None => Err("closed-loop setup failed".into()),
            };
            report(n, name, t, outcome);
        }
    }
    let (n, name, f) = plain[4];
    if wanted(n) {
        let t = Instant::now();
        report(n, name, t, guarded(f));
    }
    let tail: [Looped; 2] = [(8, "flip augmentation", augmentation), (9, "preprocessing", preprocessing)];
    for (n, name, f) in tail {
        if wanted(n) {
            let t = Instant::now();
            let outcome = match &shared {
                Some(cl) => guarded(|| f(cl)),
                None => Err("closed-loop setup failed".into()),
            };
            report(n, name, t, outcome);
        }
    }

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
