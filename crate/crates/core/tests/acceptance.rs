//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dtpn::config::RunConfig;
use dtpn::eval::{average_precision, evaluate, oracle_evaluate, ClassDetection, ClassGroundTruth, ACTIVITYNET_THRESHOLDS};
use dtpn::io_formats::{
    decode_features, detections_to_document, encode_features, read_detection_document, read_features,
    write_detections, write_features, Corpus, GroundTruthSegment, VideoEntry, VideoMeta,
};
use dtpn::model::{encode_checkpoint, layout_anchors, load_checkpoint, save_checkpoint, Anchor, Dtpn, ModelConfig};
use dtpn::postprocess::{decode_unclipped, detect_video, encode_offsets, temporal_nms, tiou, Detection, Interval};
use dtpn::sampling::PyramidFeature;
use dtpn::train::{make_synthetic_corpus, train, SynthConfig, SyntheticData, TrainReport};
use dtpn::verify::{run_suite, SuiteOptions, SuiteSize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1. shapes

fn shape_suite() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        scales: 5,
        base_segments: 16,
        feature_dim: 32,
        branch_filters: 64,
        head_kernel: 3,
        num_classes: 5,
        branches: dtpn::model::Branches::Both,
    };
    let model = Dtpn::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels = (0..5)
        .map(|s| (0..(16usize << s) * 32).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let pyramid = PyramidFeature::new(32, 16, levels).map_err(|e| e.to_string())?;
    let pass = model.forward(&pyramid).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let dims: Vec<usize> = pass.fused.iter().map(|m| m.t()).collect();
    ensure!(dims == [16, 8, 4, 2, 1], "hierarchy dims {dims:?}");
    for maps in [&pass.conv_levels, &pass.pool_levels, &pass.enhanced] {
        let d: Vec<usize> = maps.iter().map(|m| m.t()).collect();
        ensure!(d == dims, "branch dims {d:?}");
    }
    let anchors = pass.predictions().len();
    ensure!(anchors == 31 && cfg.num_anchors() == 31, "{anchors} anchors");
    let heads: Vec<(usize, usize)> = pass.heads.iter().map(|h| h.shape()).collect();
    ensure!(
        heads == [(16, 8), (8, 8), (4, 8), (2, 8), (1, 8)],
        "head shapes {heads:?}"
    );
    ensure!(elapsed < Duration::from_secs(1), "forward took {elapsed:?}");
    Ok(format!("dims {dims:?}, 31 anchors, heads L_i x 8, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. gradients

fn gradient_suite() -> Outcome {
    let report = run_suite(&SuiteOptions { size: SuiteSize::Tiny, ..Default::default() }).map_err(|e| e.to_string())?;
    let worst = report
        .outcomes
        .iter()
        .map(|o| o.report.max_rel_error)
        .fold(0.0f64, f64::max);
    ensure!(report.all_passed(), "failing checks: {:?}", report.failures());
    ensure!(report.elapsed < Duration::from_secs(60), "took {:?}", report.elapsed);
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}, {:.2?}",
        report.outcomes.len(),
        report.elapsed
    ))
}

// ---------------------------------------------------------------------------
// 3. oracles

/// Quadratic reference: rank everything, then keep a detection iff no kept
/// detection of its class ranked above it overlaps it at `threshold` or more.
fn reference_nms(dets: &[Detection], threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.start.partial_cmp(&b.start).unwrap())
            .then(a.label.cmp(&b.label))
            .then(a.end.partial_cmp(&b.end).unwrap())
    });
    let mut keep = vec![false; ranked.len()];
    for i in 0..ranked.len() {
        keep[i] = (0..i).all(|j| {
            !keep[j] || ranked[j].label != ranked[i].label || tiou(&ranked[j].interval(), &ranked[i].interval()) < threshold
        });
    }
    ranked
        .into_iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(d))
        .take(top_k)
        .collect()
}

fn random_detection(rng: &mut ChaCha8Rng, labels: usize) -> Detection {
    // Coarse grids so that score and boundary ties actually occur.
    let start = rng.random_range(0..40) as f64 / 50.0;
    let end = start + rng.random_range(1..=10) as f64 / 50.0;
    Detection {
        start,
        end,
        label: rng.random_range(0..labels),
        score: rng.random_range(0..20) as f64 / 20.0,
    }
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let labels = rng.random_range(1..=4);
    let videos = (0..rng.random_range(1..=4))
        .map(|v| {
            let segments = (0..rng.random_range(0..=5))
                .map(|_| {
                    let start = rng.random_range(0.0..0.9);
                    GroundTruthSegment {
                        label_index: rng.random_range(0..labels),
                        start,
                        end: rng.random_range(start + 0.02..=1.0),
                    }
                })
                .collect();
            VideoEntry {
                meta: VideoMeta { id: format!("v{v}"), duration_s: 10.0, fps: 30.0, num_frames: 300 },
                segments,
            }
        })
        .collect();
    Corpus { labels: (0..labels).map(|l| format!("c{l}")).collect(), videos }
}

fn random_results(rng: &mut ChaCha8Rng, corpus: &Corpus) -> BTreeMap<String, Vec<Detection>> {
    let mut out = BTreeMap::new();
    for v in &corpus.videos {
        let mut dets: Vec<Detection> = (0..rng.random_range(0..=12))
            .map(|_| random_detection(rng, corpus.num_classes()))
            .collect();
        // Near copies of ground truth so that high thresholds see matches.
        for g in &v.segments {
            if rng.random_bool(0.7) {
                let jitter = rng.random_range(-0.03..0.03);
                dets.push(Detection {
                    start: (g.start + jitter).max(0.0),
                    end: (g.end + jitter).min(1.0),
                    label: g.label_index,
                    score: rng.random_range(0..20) as f64 / 20.0,
                });
            }
        }
        out.insert(v.meta.id.clone(), dets);
    }
    out
}

fn oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.random_range(0..=200);
        let labels = rng.random_range(1..=4);
        let dets: Vec<Detection> = (0..n).map(|_| random_detection(&mut rng, labels)).collect();
        let threshold = rng.random_range(0.05..=1.0);
        let top_k = rng.random_range(1..=250);
        let got = temporal_nms(dets.clone(), threshold, top_k);
        let want = reference_nms(&dets, threshold, top_k);
        ensure!(got == want, "NMS instance {case} (n={n}, thr={threshold}, k={top_k}) differs");
    }

    let mut worst = 0.0f64;
    for case in 0..500 {
        let corpus = random_corpus(&mut rng);
        let results = random_results(&mut rng, &corpus);
        let a = evaluate(&results, &corpus, &ACTIVITYNET_THRESHOLDS).map_err(|e| e.to_string())?;
        let b = oracle_evaluate(&results, &corpus, &ACTIVITYNET_THRESHOLDS).map_err(|e| e.to_string())?;
        ensure!(a.classes.len() == b.classes.len(), "mAP instance {case}: class count");
        let pairs = a
            .map
            .iter()
            .zip(&b.map)
            .chain(std::iter::once((&a.average_map, &b.average_map)))
            .chain(a.classes.iter().zip(&b.classes).flat_map(|(x, y)| x.ap.iter().zip(&y.ap)));
        for (x, y) in pairs {
            worst = worst.max((x - y).abs());
        }
        ensure!(worst <= 1e-9, "mAP instance {case}: deviation {worst:e}");
    }

    let gts: Vec<ClassGroundTruth> = (0..2)
        .map(|i| ClassGroundTruth { video: "v".into(), interval: Interval::new(0.1 + 0.5 * i as f64, 0.3 + 0.5 * i as f64) })
        .collect();
    let det = |s: f64, e: f64, score: f64| ClassDetection { video: "v".into(), interval: Interval::new(s, e), score };
    let dets = [det(0.1, 0.3, 0.9), det(0.35, 0.45, 0.8), det(0.6, 0.8, 0.7)];
    let ap = average_precision(&dets, &gts, 0.5).ap;
    // Precision at the two hits is 1/1 and 2/3.
    let hand = (1.0 + 2.0 / 3.0) / 2.0;
    ensure!(ap == hand && (ap - 5.0 / 6.0).abs() <= f64::EPSILON, "hand case AP {ap} != 5/6");
    Ok(format!("NMS exact on 1000 instances, mAP max deviation {worst:.1e} on 500, hand case AP = 5/6"))
}

// ---------------------------------------------------------------------------
// 4. geometry

fn best_anchor_tiou(anchors: &[Anchor], gt: &Interval) -> f64 {
    anchors.iter().map(|a| tiou(&a.interval(), gt)).fold(0.0, f64::max)
}

fn geometry_suite() -> Outcome {
    let anchors = layout_anchors(16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a = &anchors[rng.random_range(0..anchors.len())];
        let start = rng.random_range(-0.2..0.9);
        let gt = Interval::new(start, start + rng.random_range(0.01..0.8));
        let (dc, dl) = encode_offsets(a, &gt).map_err(|e| e.to_string())?;
        let back = decode_unclipped(a, dc, dl);
        worst = worst.max((back.start - gt.start).abs()).max((back.end - gt.end).abs());
    }
    ensure!(worst <= 1e-6, "decode(encode) error {worst:e}");

    for level in 0..5 {
        let cells = 16usize >> level;
        let row: Vec<&Anchor> = anchors.iter().filter(|a| a.level == level).collect();
        ensure!(row.len() == cells, "level {level} has {} anchors", row.len());
        for (i, a) in row.iter().enumerate() {
            let iv = a.interval();
            ensure!(
                iv.start == i as f64 / cells as f64 && iv.end == (i + 1) as f64 / cells as f64,
                "level {level} cell {i} spans [{}, {}]",
                iv.start,
                iv.end
            );
        }
    }

    let mut min_random = f64::INFINITY;
    for _ in 0..10_000 {
        let len = rng.random_range(1.0 / 16.0..=1.0);
        let start = rng.random_range(0.0..=1.0 - len);
        min_random = min_random.min(best_anchor_tiou(&anchors, &Interval::new(start, start + len)));
    }
    // Dense sweep over lengths and positions, including the exact worst case.
    let mut min_grid = f64::INFINITY;
    for li in 0..=240 {
        let len = 1.0 / 16.0 + li as f64 * (15.0 / 16.0) / 240.0;
        for pi in 0..=400 {
            let start = (1.0 - len) * pi as f64 / 400.0;
            min_grid = min_grid.min(best_anchor_tiou(&anchors, &Interval::new(start, start + len)));
        }
    }
    let bound = min_random.min(min_grid);
    ensure!(bound >= 0.30, "best-anchor tIoU fell to {bound}");
    Ok(format!(
        "codec error {worst:.1e}, tiling exact, min best-anchor tIoU {min_random:.4} (random) / {min_grid:.4} (grid)"
    ))
}

// ---------------------------------------------------------------------------
// 5 and 6. training experiments

struct RunOutcome {
    map50: f64,
    report: TrainReport,
    elapsed: Duration,
}

fn experiment(data: &SyntheticData, cfg: &RunConfig) -> Result<RunOutcome, String> {
    let start = Instant::now();
    let samples = data.samples(&cfg.sampling, &cfg.backbone()).map_err(|e| e.to_string())?;
    let mut model = Dtpn::new(cfg.model_config(data.corpus.num_classes()).map_err(|e| e.to_string())?, cfg.train.seed)
        .map_err(|e| e.to_string())?;
    let report = train(&samples, &mut model, &cfg.train, |_| {}).map_err(|e| e.to_string())?;
    let mut results = BTreeMap::new();
    for s in &samples {
        results.insert(s.id.clone(), detect_video(&s.pyramid, &model, &cfg.detect).map_err(|e| e.to_string())?);
    }
    let eval = evaluate(&results, &data.corpus, &[0.5]).map_err(|e| e.to_string())?;
    Ok(RunOutcome { map50: eval.map[0], report, elapsed: start.elapsed() })
}

fn seeded(seed: u64, extra: &str) -> Result<(SyntheticData, RunConfig), String> {
    let cfg = RunConfig::from_overrides(&format!("train.seed = {seed}\nbackbone.seed = {seed}\n{extra}"))
        .map_err(|e| e.to_string())?;
    let data = make_synthetic_corpus(&SynthConfig { seed, ..Default::default() });
    Ok((data, cfg))
}

fn overfit_experiment() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let (data, cfg) = seeded(0, "")?;
    ensure!(cfg.model.feature_dim == 32 && cfg.train.epochs() == 20, "unexpected default config");
    let run = pool.install(|| experiment(&data, &cfg))?;
    let losses = &run.report.epoch_losses;
    let ratio = losses[9] / losses[0];
    ensure!(run.map50 >= 0.9, "train mAP@0.5 = {:.4}", run.map50);
    ensure!(ratio < 0.5, "epoch-10/epoch-1 loss ratio {ratio:.3}");
    ensure!(run.elapsed < Duration::from_secs(300), "took {:.1?}", run.elapsed);
    Ok(format!(
        "mAP@0.5 {:.4}, loss {:.3} -> {:.3} (ratio {ratio:.3}), {:.1?} on one thread",
        run.map50, losses[0], losses[9], run.elapsed
    ))
}

fn ablation_experiment() -> Outcome {
    let variants = [
        ("full", ""),
        ("S=1", "sampling.scales = 1"),
        ("conv", "model.branches = \"conv\""),
        ("pool", "model.branches = \"pool\""),
    ];
    let mut holding = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut m = Vec::new();
        for (_, extra) in variants {
            let (data, cfg) = seeded(seed, extra)?;
            m.push(experiment(&data, &cfg)?.map50);
        }
        let ok = m[0] >= m[1] && m[0] >= m[2] && m[0] >= m[3];
        holding += ok as usize;
        lines.push(format!(
            "seed {seed}: full {:.4} S=1 {:.4} conv {:.4} pool {:.4}{}",
            m[0],
            m[1],
            m[2],
            m[3],
            if ok { "" } else { " (violated)" }
        ));
    }
    let detail = format!("{holding}/5 seeds hold [{}]", lines.join("; "));
    ensure!(holding >= 3, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. round trips

fn round_trip_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: dtpn::Error| e.to_string();
    let (data, cfg) = seeded(5, "train.epochs_hi = 2\ntrain.epochs_lo = 1")?;
    let data = SyntheticData {
        corpus: Corpus { labels: data.corpus.labels.clone(), videos: data.corpus.videos[..6].to_vec() },
        frames: data.frames[..6].to_vec(),
    };

    let pyramids = data.pyramids(&cfg.sampling, &cfg.backbone()).map_err(err)?;
    for (i, p) in pyramids.iter().enumerate() {
        let path = dir.path().join(format!("{i}.dtpf"));
        write_features(&path, p).map_err(err)?;
        let back = read_features(&path).map_err(err)?;
        let bits = |q: &PyramidFeature| q.levels().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&back) == bits(p) && back == *p, "feature file {i} changed");
        ensure!(
            encode_features(&decode_features(&encode_features(p), &path).map_err(err)?) == encode_features(p),
            "feature encoding {i} not stable"
        );
    }

    let run = || -> Result<(Dtpn<f32>, String, String), String> {
        let samples = data.samples(&cfg.sampling, &cfg.backbone()).map_err(err)?;
        let mut model = Dtpn::new(cfg.model_config(data.corpus.num_classes()).map_err(err)?, cfg.train.seed).map_err(err)?;
        train(&samples, &mut model, &cfg.train, |_| {}).map_err(err)?;
        let mut results = BTreeMap::new();
        for s in &samples {
            results.insert(s.id.clone(), detect_video(&s.pyramid, &model, &cfg.detect).map_err(err)?);
        }
        let doc = detections_to_document(&results, &data.corpus).map_err(err)?;
        let json = serde_json::to_string(&doc).map_err(|e| e.to_string())?;
        let report = evaluate(&results, &data.corpus, &ACTIVITYNET_THRESHOLDS).map_err(err)?;
        let path = dir.path().join("det.json");
        write_detections(&path, &results, &data.corpus).map_err(err)?;
        let back = read_detection_document(&path).map_err(err)?;
        ensure!(back == doc, "detection document changed on disk");
        let bits = |d: &dtpn::io_formats::DetectionDocument| {
            d.results
                .values()
                .flatten()
                .flat_map(|r| [r.score.to_bits(), r.segment[0].to_bits(), r.segment[1].to_bits()])
                .collect::<Vec<_>>()
        };
        ensure!(bits(&back) == bits(&doc), "detection values not bit-exact");
        Ok((model, json, report.to_json() + &report.to_table()))
    };
    let (m1, json1, rep1) = run()?;
    let (m2, json2, rep2) = run()?;
    let (c1, c2) = (encode_checkpoint(&m1), encode_checkpoint(&m2));
    ensure!(c1 == c2, "same seed gave different checkpoints");
    ensure!(json1 == json2 && rep1 == rep2, "same seed gave different reports");

    let path = dir.path().join("m.dtpm");
    save_checkpoint(&path, &m1).map_err(err)?;
    let loaded = load_checkpoint(&path).map_err(err)?;
    ensure!(encode_checkpoint(&loaded) == c1, "checkpoint changed on disk");
    ensure!(std::fs::read(&path).map_err(|e| e.to_string())? == c1, "checkpoint file differs from encoding");
    let probe = &pyramids[0];
    let f1 = detect_video(probe, &m1, &cfg.detect).map_err(err)?;
    let f2 = detect_video(probe, &loaded, &cfg.detect).map_err(err)?;
    ensure!(f1 == f2, "reloaded model predicts differently");
    Ok(format!(
        "{} feature files, checkpoint ({} bytes) and detection JSON bit-exact; repeated seed identical",
        pyramids.len(),
        c1.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("shape suite", shape_suite),
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_suite),
        ("geometry suite", geometry_suite),
        ("overfit experiment", overfit_experiment),
        ("ablation direction", ablation_experiment),
        ("round trip and determinism", round_trip_suite),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
