use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use depthhead::annotations::{load_annotated, AnnotationSet};
use depthhead::depth::to_display8;
use depthhead::detector::Timing;
use depthhead::eval::{bench_csv, bench_table, match_and_score, BenchRow, FrameBoxes};
use depthhead::nn::{load_model_expecting, save_model, Network, NetworkSpec};
use depthhead::pgm::{read_depth_frame, write_gray8};
use depthhead::synth::generate_corpus;
use depthhead::trainer::{augment_flip, build_dataset, history_csv, train_with, Label};
use depthhead::{detect as detect_frame, BoundingBox, Detection};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const ANNOTATIONS_FILE: &str = "annotations.json";

/// Contents of the file written by `detect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    /// Grid stride the detections were produced with.
    pub k: usize,
    pub frames: Vec<FrameDetections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub file: String,
    pub detections: Vec<Detection>,
}

/// Timing sidecar of a detections file. Kept apart so that the detections
/// themselves are reproducible byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingFile {
    pub frames: usize,
    pub total_ms: f64,
    pub fps: f64,
    pub per_frame: Vec<FrameTiming>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameTiming {
    pub file: String,
    #[serde(flatten)]
    pub timing: Timing,
}

pub fn timing_path(detections: &Path) -> PathBuf {
    sibling(detections, "timing.json")
}

/// `dir/stem.suffix` for `dir/stem.ext`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn annotations_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(ANNOTATIONS_FILE)
    } else {
        data.to_path_buf()
    }
}

fn required<'a>(explicit: Option<&'a Path>, fallback: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    explicit
        .or(fallback.as_deref())
        .with_context(|| format!("no {what} given on the command line or in paths of the config"))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    let side = cfg.detector.extraction.patch_side;
    load_model_expecting(&bytes, [1, side, side])
        .with_context(|| format!("loading model {}", path.display()))
}

pub fn gen_synth(cfg: &RunConfig, out: Option<&Path>, count: Option<usize>) -> Result<()> {
    let dir = out
        .or(cfg.paths.data.as_deref())
        .unwrap_or_else(|| Path::new("synth"));
    let mut corpus = cfg.synth;
    if let Some(n) = count {
        corpus.count = n;
    }
    let set = generate_corpus(&corpus, &cfg.intrinsics, dir)
        .with_context(|| format!("writing corpus to {}", dir.display()))?;
    let heads: usize = set.frames.iter().map(|f| f.heads.len()).sum();
    println!(
        "wrote {} frames with {heads} heads to {} (seed {})",
        set.frames.len(),
        dir.display(),
        corpus.seed
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let data = required(data, &cfg.paths.data, "training data")?;
    let model_path = out
        .or(cfg.paths.model.as_deref())
        .unwrap_or_else(|| Path::new("model.bin"));
    let frames = load_annotated(&annotations_path(data), cfg.intrinsics)?;
    let dataset = build_dataset(&frames, &cfg.detector.extraction, &cfg.train)?;
    let dataset = augment_flip(&dataset);
    let heads = dataset.iter().filter(|s| s.label == Label::Head).count();
    println!(
        "{} frames, {} patches ({heads} head, {} non-head) after mirroring",
        frames.len(),
        dataset.len(),
        dataset.len() - heads
    );
    let spec = NetworkSpec::head_classifier(cfg.detector.extraction.patch_side);
    let outcome = train_with(&dataset, &cfg.train, &spec, |e| {
        println!("epoch {:>3}  loss {:.6}  accuracy {:.4}", e.epoch, e.loss, e.accuracy);
    })?;
    write_file(model_path, save_model(&outcome.model))?;
    let history = sibling(model_path, "history.csv");
    write_file(&history, history_csv(&outcome.history))?;
    println!("model written to {}, history to {}", model_path.display(), history.display());
    Ok(())
}

/// The PGM files named by `input`: the file itself, or a directory's `*.pgm`
/// entries in name order.
fn frame_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", input.display()))?;
    paths.retain(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")));
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm files in {}", input.display());
    }
    Ok(paths)
}

pub fn detect(
    cfg: &RunConfig,
    model: Option<&Path>,
    input: &Path,
    out: Option<&Path>,
    viz: bool,
) -> Result<()> {
    let model = load_model(cfg, required(model, &cfg.paths.model, "model")?)?;
    let out = out.unwrap_or_else(|| Path::new("detections.json"));
    let viz_dir = sibling(out, "viz");
    let mut file = DetectionFile {
        k: cfg.detector.extraction.k,
        frames: Vec::new(),
    };
    let mut per_frame = Vec::new();
    for path in frame_paths(input)? {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let frame = read_depth_frame(&path, cfg.intrinsics)
            .with_context(|| format!("reading frame {}", path.display()))?;
        let (detections, timing) = detect_frame(&frame, &model, &cfg.detector)
            .with_context(|| format!("detecting in {}", path.display()))?;
        log::info!("{name}: {} detections, {:.1} ms", detections.len(), timing.total_ms());
        if viz {
            let mut img = to_display8(&frame);
            for d in &detections {
                img.draw_rect(&d.bbox, 255);
            }
            fs::create_dir_all(&viz_dir).with_context(|| format!("creating {}", viz_dir.display()))?;
            let target = viz_dir.join(&name);
            write_gray8(&target, &img).with_context(|| format!("writing {}", target.display()))?;
        }
        per_frame.push(FrameTiming {
            file: name.clone(),
            timing,
        });
        file.frames.push(FrameDetections {
            file: name,
            detections,
        });
    }
    let total_ms: f64 = per_frame.iter().map(|f| f.timing.total_ms()).sum();
    let frames = per_frame.len();
    let fps = if total_ms > 0.0 {
        frames as f64 * 1000.0 / total_ms
    } else {
        0.0
    };
    let timing = TimingFile {
        frames,
        total_ms,
        fps,
        per_frame,
    };
    write_file(out, serde_json::to_string_pretty(&file)?)?;
    write_file(&timing_path(out), serde_json::to_string_pretty(&timing)?)?;
    let found: usize = file.frames.iter().map(|f| f.detections.len()).sum();
    println!("{frames} frames, {found} detections, {fps:.3} fps; written to {}", out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, detections: &Path, annotations: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(detections)
        .with_context(|| format!("reading detections {}", detections.display()))?;
    let dets: DetectionFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing detections {}", detections.display()))?;
    let truth = AnnotationSet::load(&annotations_path(annotations))?;

    let det_ids: BTreeSet<&str> = dets.frames.iter().map(|f| f.file.as_str()).collect();
    let truth_ids: BTreeSet<&str> = truth.frames.iter().map(|f| f.file.as_str()).collect();
    if det_ids != truth_ids {
        let only_det: Vec<&str> = det_ids.difference(&truth_ids).copied().collect();
        let only_truth: Vec<&str> = truth_ids.difference(&det_ids).copied().collect();
        bail!(
            "frame ids differ; only in detections: [{}]; only in annotations: [{}]",
            only_det.join(", "),
            only_truth.join(", ")
        );
    }

    let boxes: Vec<Vec<BoundingBox>> = truth
        .frames
        .iter()
        .map(|t| {
            let f = dets.frames.iter().find(|f| f.file == t.file).expect("ids checked above");
            f.detections.iter().map(|d| d.bbox).collect()
        })
        .collect();
    let inputs: Vec<FrameBoxes<'_>> = truth
        .frames
        .iter()
        .zip(&boxes)
        .map(|(t, b)| FrameBoxes {
            frame: &t.file,
            detections: b,
            truths: &t.heads,
        })
        .collect();
    let mut report = match_and_score(&inputs, cfg.eval.tau, cfg.eval.iou_mode);

    let timing_file = timing_path(detections);
    if timing_file.exists() {
        let timing: TimingFile = serde_json::from_str(
            &fs::read_to_string(&timing_file)
                .with_context(|| format!("reading {}", timing_file.display()))?,
        )
        .with_context(|| format!("parsing {}", timing_file.display()))?;
        report.fps = Some(timing.fps);
    } else {
        log::warn!("no {} next to the detections; fps left empty", timing_file.display());
    }

    println!("TP {}  FP {}  FN {}", report.tp, report.fp, report.fn_);
    println!(
        "tp_rate {:.4}  fp_rate {:.4}  mean paper IoU {:.4}  exact matches {}  (tau {}, {:?})",
        report.tp_rate,
        report.fp_rate,
        report.mean_paper_iou,
        report.exact_matches,
        report.tau,
        report.iou_mode
    );
    let out = out.unwrap_or_else(|| Path::new("eval_report.json"));
    write_file(out, serde_json::to_string_pretty(&report)?)?;
    let row = BenchRow {
        k: dets.k,
        tp_rate: report.tp_rate,
        mean_iou: report.mean_paper_iou,
        fps: report.fps.unwrap_or(f64::NAN),
    };
    write_file(&out.with_extension("csv"), bench_csv(&[row]))?;
    Ok(())
}

pub fn bench(
    cfg: &RunConfig,
    model: Option<&Path>,
    data: Option<&Path>,
    ks: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(cfg, required(model, &cfg.paths.model, "model")?)?;
    let data = required(data, &cfg.paths.data, "benchmark data")?;
    let frames = load_annotated(&annotations_path(data), cfg.intrinsics)?;
    let ks = if ks.is_empty() { &cfg.eval.bench_ks[..] } else { ks };
    let started = Instant::now();
    let table = bench_table(&frames, &model, ks, &cfg.detector, cfg.eval.tau, cfg.eval.iou_mode)?;
    log::info!("bench took {:.1} s", started.elapsed().as_secs_f64());
    let rows: Vec<BenchRow> = table.iter().map(|(row, _)| *row).collect();
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(out) = out {
        write_file(out, &csv)?;
    }
    Ok(())
}
