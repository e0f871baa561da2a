//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release -p movad-cli --test acceptance`
//! or a subset with `... -- 3 5`.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use movad::ablation::{run_ablation, AblationAxis, AblationGrid};
use movad::config::{HeadConfig, ModelConfig, RunConfig, StmmConfig, TrainConfig};
use movad::data::{generate_synthetic, parse_annotations, Dataset, Frame, SignalKind, SyntheticSpec};
use movad::engine::score_video;
use movad::eval::{bucket_videos, evaluate, frame_auc, EvalOptions, VideoScores};
use movad::head::score;
use movad::model::{clip_indices, Movad};
use movad::params::ParamStore;
use movad::stmm::{FrameClip, PatchEmbed3d};
use movad::train::{class_weights, init_rng, weighted_ce, Trainer};
use movad_tensor::gradcheck::{central_difference, max_relative_error};
use movad_tensor::{concat_rows, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(limit: Duration, start: Instant) -> std::result::Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.0}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

// ---------------------------------------------------------------- 1

fn shape_law() -> Outcome {
    let start = Instant::now();
    let mut store = ParamStore::new();
    let embed = PatchEmbed3d::new(&mut store, "embed", 128, true);
    store.initialize(&mut rng(0));
    let shapes = [
        (4, 320, 240),
        (2, 4, 4),
        (2, 8, 16),
        (4, 16, 16),
        (6, 32, 24),
        (8, 12, 20),
        (2, 64, 48),
        (10, 8, 8),
        (4, 40, 4),
        (6, 4, 36),
        (12, 16, 8),
    ];
    let mut r = rng(1);
    for (nf, h, w) in shapes {
        let clip = FrameClip::new(Tensor::from_fn([nf, h, w, 3], |_| r.gen_range(-1.0..1.0))).map_err(|e| e.to_string())?;
        let grid = embed.embed(&clip, &store);
        let expected = (nf / 2) * (h / 4) * (w / 4);
        if grid.len() != expected || grid.dims() != [nf / 2, h / 4, w / 4] {
            return Err(format!("({nf}, {h}, {w}) gave {:?}", grid.dims()));
        }
        if !grid.tokens.is_finite() {
            return Err(format!("({nf}, {h}, {w}) produced non-finite tokens"));
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{} shapes, (4, 320, 240) -> (2, 80, 60)", shapes.len()))
}

// ---------------------------------------------------------------- 2

fn gradient_model(cells: usize, seed: u64) -> Movad {
    let stmm = StmmConfig {
        nf: 4,
        input_h: 16,
        input_w: 16,
        embed_dim: 8,
        depths: vec![2, 2],
        num_heads: vec![2, 2],
        window: [2, 2, 2],
        ..StmmConfig::toy()
    };
    let head = HeadConfig {
        input_dim: stmm.feature_dim(),
        lstm_cells: cells,
        lstm_width: 6,
        ..HeadConfig::toy()
    };
    let mut m = Movad::new(&ModelConfig { stmm, head }).unwrap();
    let mut r = rng(seed);
    m.init_params(&mut r);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    m
}

/// The worst relative error over sampled entries of every parameter tensor
/// and of the input.
fn worst_gradient_error(
    model: &Movad,
    input: &Tensor,
    loss: impl Fn(&ParamStore, &Tensor, bool) -> (f64, Vec<Tensor>, Tensor),
) -> f64 {
    let mut r = rng(99);
    let mut sample = |len: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = if len <= 6 { (0..len).collect() } else { (0..6).map(|_| r.gen_range(0..len)).collect() };
        idx.sort_unstable();
        idx.dedup();
        idx
    };
    let (_, grads, input_grad) = loss(&model.params, input, true);
    let mut worst = 0.0f64;
    for (i, id) in model.params.ids().enumerate() {
        let value = model.params.get(id);
        let idx = sample(value.numel());
        let numeric = central_difference(
            |x| {
                let mut store = model.params.clone();
                store.set(id, x.clone()).unwrap();
                loss(&store, input, false).0
            },
            value,
            &idx,
            1e-5,
        );
        let analytic: Vec<f64> = idx.iter().map(|&k| grads[i].data()[k]).collect();
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-4));
    }
    let idx = sample(input.numel());
    let numeric = central_difference(|x| loss(&model.params, x, false).0, input, &idx, 1e-5);
    let analytic: Vec<f64> = idx.iter().map(|&k| input_grad.data()[k]).collect();
    worst.max(max_relative_error(&analytic, &numeric, 1e-4))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let backbone = gradient_model(0, 1);
    let mut r = rng(2);
    let clips = Tensor::from_fn([2, 4, 16, 16, 3], |_| r.gen_range(-1.5..1.5));
    let probe = Tensor::from_fn([2, backbone.stmm.feature_dim()], |_| r.gen_range(-1.0..1.0));
    let stmm_err = worst_gradient_error(&backbone, &clips, |store, input, grad| {
        let tape = Tape::new();
        let p = store.bind(&tape, grad);
        let x = if grad { tape.leaf(input.clone()) } else { tape.constant(input.clone()) };
        let out = backbone.stmm.forward_pooled(x, &p).mul(tape.constant(probe.clone())).sum();
        let value = out.value().data()[0];
        if !grad {
            return (value, vec![], Tensor::zeros([0]));
        }
        let g = tape.backward(out);
        (value, p.vars().iter().map(|&v| g.get_or_zeros(v)).collect(), g.get_or_zeros(x))
    });

    let head = gradient_model(2, 3);
    let d = head.stmm.feature_dim();
    let features = Tensor::from_fn([5, 2, d], |_| r.gen_range(-2.0..2.0));
    let labels = [0, 1, 1, 0, 1, 0, 0, 1, 1, 1];
    let head_err = worst_gradient_error(&head, &features, |store, input, grad| {
        let tape = Tape::new();
        let p = store.bind(&tape, grad);
        let x = if grad { tape.leaf(input.clone()) } else { tape.constant(input.clone()) };
        let mut state: Vec<_> = head
            .zero_state(2)
            .layers
            .into_iter()
            .map(|(h, c)| (tape.constant(h), tape.constant(c)))
            .collect();
        let mut logits = Vec::new();
        for t in 0..5 {
            let rows: Vec<Option<usize>> = (0..2).map(|b| Some(t * 2 + b)).collect();
            let (out, next) = head.head.forward(x.reshape([10, d]).gather_rows(d, rows.into()), &state, &p, None);
            logits.push(out);
            state = next;
        }
        let loss = concat_rows(&logits).weighted_cross_entropy(&labels, &[0.3, 0.7]);
        let value = loss.value().data()[0];
        if !grad {
            return (value, vec![], Tensor::zeros([0]));
        }
        let g = tape.backward(loss);
        (value, p.vars().iter().map(|&v| g.get_or_zeros(v)).collect(), g.get_or_zeros(x))
    });
    let detail = format!("backbone+reduce {stmm_err:.1e}, 5-step head {head_err:.1e}");
    if stmm_err > 1e-3 || head_err > 1e-3 {
        return Err(detail);
    }
    within(Duration::from_secs(300), start)?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &n) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if a > n { 1.0 } else if a == n { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = r.gen_range(2..=1000);
        let levels = if i % 3 == 0 { 4 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        let fast = frame_auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - pairwise_auc(&scores, &labels)).abs());
    }
    let ties = frame_auc(&[0.25; 50], &(0..50).map(|i| (i % 2) as u8).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let perfect = frame_auc(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[0, 0, 0, 1, 1, 1]).map_err(|e| e.to_string())?;
    let detail = format!("max deviation {worst:.1e}, all ties {ties}, perfect {perfect}");
    if worst > 1e-9 || ties != 0.5 || perfect != 1.0 {
        return Err(detail);
    }
    within(Duration::from_secs(60), start)?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

fn loss_weights() -> Outcome {
    let w = class_weights([7, 3]).map_err(|e| e.to_string())?;
    if w != [0.3, 0.7] {
        return Err(format!("class_weights((7, 3)) = {w:?}"));
    }
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let logits: Vec<f64> = (0..32).map(|_| r.gen_range(-10.0..10.0)).collect();
        let labels: Vec<u8> = (0..16).map(|_| r.gen_range(0..=1)).collect();
        let weights = [r.gen_range(0.05..1.0), r.gen_range(0.05..1.0)];
        let mut oracle = 0.0;
        for i in 0..16 {
            let (a, b) = (logits[2 * i], logits[2 * i + 1]);
            let lse = a.max(b) + ((a - a.max(b)).exp() + (b - a.max(b)).exp()).ln();
            let y = labels[i] as usize;
            oracle += weights[y] * (lse - logits[2 * i + y]);
        }
        oracle /= 16.0;
        let t = Tensor::new([16, 2], logits).unwrap();
        worst = worst.max((weighted_ce(&t, &labels, weights) - oracle).abs());
    }
    if worst > 1e-9 {
        return Err(format!("weighted_ce deviates by {worst:e}"));
    }
    for counts in [[7, 3], [1, 9], [123, 45], [5, 5]] {
        let base = class_weights(counts).map_err(|e| e.to_string())?;
        for k in [1, 2, 10, 100, 1000] {
            let scaled = class_weights([counts[0] * k, counts[1] * k]).map_err(|e| e.to_string())?;
            if scaled != base {
                return Err(format!("counts {counts:?} x {k}: {scaled:?} != {base:?}"));
            }
        }
    }
    Ok(format!("(0.3, 0.7) exact, loop deviation {worst:.1e}, scale invariant"))
}

// ---------------------------------------------------------------- 5, 6

fn random_model(nf: usize, cells: usize, seed: u64) -> Arc<Movad> {
    let mut cfg = ModelConfig::toy();
    cfg.stmm.nf = nf;
    cfg.head.lstm_cells = cells;
    let mut m = Movad::new(&cfg).unwrap();
    let mut r = rng(seed);
    m.init_params(&mut r);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    Arc::new(m)
}

fn replay(model: &Movad, frames: &[Frame]) -> Vec<f64> {
    let [h, w, _] = model.frame_shape();
    let prepared: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let mut px = f.resized(h, w).pixels().to_vec();
            model.standardize(&mut px);
            px
        })
        .collect();
    let mut state = model.zero_state(1);
    (0..frames.len())
        .map(|t| {
            let data: Vec<f64> = clip_indices(t, model.nf()).flat_map(|i| prepared[i].clone()).collect();
            let clip = Tensor::new([1, model.nf(), h, w, 3], data).unwrap();
            let (logits, next) = model.head_step(&model.features_eval(&clip).unwrap(), &state).unwrap();
            state = next;
            score(&logits)[0].value()
        })
        .collect()
}

fn streaming() -> Outcome {
    let model = random_model(3, 2, 5);
    let mut videos = Vec::new();
    for (i, signal) in [SignalKind::AppearanceSwitch, SignalKind::MotionDiscontinuity].into_iter().enumerate() {
        let spec = SyntheticSpec { num_videos: 10, signal, ..SyntheticSpec::toy(50 + i as u64) };
        videos.extend(generate_synthetic(&spec).map_err(|e| e.to_string())?.videos);
    }
    let mut r = rng(6);
    let (mut worst, mut causal_checks) = (0.0f64, 0);
    for v in &videos {
        let streamed = score_video(&model, &v.frames).map_err(|e| e.to_string())?;
        let offline = replay(&model, &v.frames);
        for (a, b) in streamed.iter().zip(&offline) {
            worst = worst.max((a - b).abs());
        }
        let cut = r.gen_range(1..v.frames.len());
        let mut edited = v.frames[..cut].to_vec();
        edited.extend(
            (cut..v.frames.len()).map(|_| Frame::new(Tensor::from_fn([16, 16, 3], |_| r.gen_range(0.0..1.0))).unwrap()),
        );
        let s = score_video(&model, &edited).map_err(|e| e.to_string())?;
        if s[..cut] != streamed[..cut] {
            return Err(format!("video {}: editing frames from {cut} changed earlier scores", v.annotation.video_id));
        }
        causal_checks += 1;
    }
    let detail = format!("{} videos, max |stream - replay| {worst:.1e}, {causal_checks} suffix edits", videos.len());
    if worst > 1e-6 {
        return Err(detail);
    }
    Ok(detail)
}

fn statefulness() -> Outcome {
    let nf = 3;
    let history = |seed: u64| -> (Vec<Frame>, Vec<Frame>) {
        let mut r = rng(seed);
        let mut noise = |n: usize| -> Vec<Frame> {
            (0..n)
                .map(|_| Frame::new(Tensor::from_fn([16, 16, 3], |_| r.gen_range(0.0..1.0))).unwrap())
                .collect()
        };
        let a = noise(10);
        let mut b = noise(10 - nf);
        b.extend_from_slice(&a[10 - nf..]);
        (a, b)
    };
    let last_gap = |model: &Arc<Movad>, seed: u64| -> f64 {
        let (a, b) = history(seed);
        let (sa, sb) = (score_video(model, &a).unwrap(), score_video(model, &b).unwrap());
        (sa[9] - sb[9]).abs()
    };
    let (mut stateless_max, mut stateful_min) = (0.0f64, f64::INFINITY);
    for seed in 0..5 {
        stateless_max = stateless_max.max(last_gap(&random_model(nf, 0, 10 + seed), 20 + seed));
        stateful_min = stateful_min.min(last_gap(&random_model(nf, 2, 30 + seed), 40 + seed));
    }
    let detail = format!("0 cells max gap {stateless_max:.1e}, 2 cells min gap {stateful_min:.1e}");
    if stateless_max > 1e-9 || stateful_min <= 1e-6 {
        return Err(detail);
    }
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(&SyntheticSpec::toy(0)).map_err(|e| e.to_string())?;
    let cfg = RunConfig::toy();
    if cfg.model.stmm.embed_dim != 32 || data.len() != 8 {
        return Err("toy preset is not C = 32 on 8 videos".into());
    }
    let mut model = Movad::new(&cfg.model).map_err(|e| e.to_string())?;
    model.init_params(&mut init_rng(cfg.train.seed));
    let mut trainer = Trainer::new(model, &cfg.train, &data).map_err(|e| e.to_string())?;
    let mut best = 0.0f64;
    for step in 1..=500 {
        trainer.sampled_step(&data).map_err(|e| e.to_string())?;
        if step % 25 == 0 {
            let auc = evaluate(&Arc::new(trainer.model.clone()), &data, EvalOptions::default())
                .map_err(|e| e.to_string())?
                .overall_auc;
            best = best.max(auc);
            if auc >= 0.95 {
                within(Duration::from_secs(900), start)?;
                return Ok(format!("train AUC {auc:.4} after {step} steps"));
            }
        }
    }
    Err(format!("best train AUC {best:.4} in 500 steps"))
}

// ---------------------------------------------------------------- 8

fn memory_ablation() -> Outcome {
    let start = Instant::now();
    let train = generate_synthetic(&SyntheticSpec { num_videos: 16, ..SyntheticSpec::long_range(100) }).map_err(|e| e.to_string())?;
    let eval = generate_synthetic(&SyntheticSpec::long_range(1100)).map_err(|e| e.to_string())?;
    let mut base = RunConfig::toy();
    base.train = TrainConfig {
        vcl: 20,
        learning_rate: 0.05,
        steps_per_epoch: Some(40),
        ..TrainConfig::toy()
    };
    let grid = AblationGrid {
        axis: AblationAxis::MemoryOnoff,
        values: vec![],
        base,
        seeds: vec![0, 1, 2],
        epochs: 15,
        eval: EvalOptions::default(),
    };
    let report = run_ablation(&grid, &train, &eval, |r| {
        eprintln!(
            "  memory ablation: {} seed {} best {:?} curve {:?}",
            r.value,
            r.seed,
            r.best_auc,
            r.curve.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        )
    })
    .map_err(|e| e.to_string())?;
    let mean = |nf, cells| report.summary_row(nf, cells).and_then(|r| r.mean_best_auc);
    let (Some(short_only), Some(none), Some(long_only), Some(both)) = (mean(3, 0), mean(1, 0), mean(1, 2), mean(3, 2)) else {
        return Err(format!("a memory row failed: {:?}", report.summary));
    };
    let detail = format!(
        "mean best AUC nf=3/cells=2 {both:.4}, nf=3/cells=0 {short_only:.4}, nf=1/cells=0 {none:.4} (nf=1/cells=2 {long_only:.4})"
    );
    if both - short_only < 0.05 || both - none < 0.05 {
        return Err(detail);
    }
    within(Duration::from_secs(7200), start)?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn run(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_movad"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("movad {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    // both passes train on the first pass's synthesized data
    let data = s(&tmp.path().join("a/synth"));
    let mut compared = 0;
    for pass in ["a", "b"] {
        let d = s(&tmp.path().join(pass));
        run(&["synth", "--seed", "3", "--videos", "4", "--out", &format!("{d}/synth")])?;
        run(&[
            "train", "--seed", "3", "--config", "toy", "--data", &data, "--eval-data", &data, "--epochs", "2",
            "--steps-per-epoch", "4", "--out", &format!("{d}/train"),
        ])?;
        let ckpt = format!("{d}/train/checkpoint.bin");
        run(&["eval", "--seed", "3", "--checkpoint", &ckpt, "--data", &data, "--out", &format!("{d}/eval.json")])?;
        let first = std::fs::read_dir(format!("{data}/frames")).unwrap().next().unwrap().unwrap().path();
        run(&[
            "score", "--seed", "3", "--checkpoint", &ckpt, "--input", &s(&first.join("images")), "--out",
            &format!("{d}/scores.tsv"), "--dump-state", &format!("{d}/states"), "--every", "5",
        ])?;
        run(&[
            "ablate", "--seed", "3", "--axis", "memory_onoff", "--values", "1,4", "--epochs", "1", "--steps-per-epoch",
            "2", "--data", &data, "--out", &format!("{d}/ablate"),
        ])?;
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    if a.len() != b.len() {
        return Err(format!("{} files vs {} files", a.len(), b.len()));
    }
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        if pa != pb {
            return Err(format!("file sets differ at {} / {}", pa.display(), pb.display()));
        }
        if ba != bb {
            return Err(format!("{} differs between runs", pa.display()));
        }
        compared += 1;
    }
    for must in ["train/metrics.jsonl", "train/checkpoint.bin", "eval.json", "scores.tsv", "ablate/summary.tsv"] {
        if !a.iter().any(|(p, _)| p == Path::new(must)) {
            return Err(format!("{must} was not written"));
        }
    }
    Ok(format!("synth, train, eval, score and ablate outputs identical ({compared} files)"))
}

// ---------------------------------------------------------------- 10

fn dota_ingestion() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/dota");
    let parsed = parse_annotations(&root).map_err(|e| e.to_string())?;
    if parsed.videos.len() != 5 || !parsed.skipped.is_empty() {
        return Err(format!("{} videos parsed, {} skipped", parsed.videos.len(), parsed.skipped.len()));
    }
    for a in &parsed.videos {
        let labels = a.frame_labels();
        let sum: usize = labels.iter().map(|&l| l as usize).sum();
        if labels.len() != a.num_frames || sum != a.anomaly_end - a.anomaly_start + 1 {
            return Err(format!("{}: {sum} anomalous frames of {}", a.video_id, labels.len()));
        }
    }
    let dataset = Dataset::load(&root, 16, 16).map_err(|e| e.to_string())?;
    let scored: Vec<VideoScores> = dataset
        .videos
        .iter()
        .map(|v| VideoScores {
            video_id: v.annotation.video_id.clone(),
            category: v.annotation.category,
            ego_involved: v.annotation.ego_involved,
            scores: (0..v.frames.len()).map(|i| i as f64).collect(),
            labels: v.labels(),
            first_scored: 0,
        })
        .collect();
    let buckets = bucket_videos(&scored);
    let mut seen: Vec<String> = buckets.iter().flat_map(|b| b.videos.clone()).collect();
    seen.sort();
    let mut ids: Vec<String> = parsed.videos.iter().map(|a| a.video_id.clone()).collect();
    ids.sort();
    if seen != ids {
        return Err(format!("buckets cover {seen:?}, fixture has {ids:?}"));
    }
    for b in &buckets {
        if scored.iter().filter(|v| b.videos.contains(&v.video_id)).any(|v| (v.category, v.ego_involved) != (b.category, b.ego_involved)) {
            return Err(format!("bucket {} ego={} holds a foreign video", b.category, b.ego_involved));
        }
    }
    Ok(format!("5 videos, {} frames, {} buckets partition the fixture", dataset.total_frames(), buckets.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "shape law", shape_law),
        (2, "gradients", gradients),
        (3, "auc oracle", auc_oracle),
        (4, "loss and class weights", loss_weights),
        (5, "streaming equivalence", streaming),
        (6, "statefulness separation", statefulness),
        (7, "overfit smoke", overfit),
        (8, "memory ablation", memory_ablation),
        (9, "determinism", determinism),
        (10, "annotation ingestion", dota_ingestion),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
