//! Dataset-level evaluation and the ablation sweep.

use std::sync::Arc;

use movad::ablation::{run_ablation, train_and_evaluate, AblationAxis, AblationGrid};
use movad::config::{ModelConfig, RunConfig, TrainConfig};
use movad::data::{generate_synthetic, Dataset, SyntheticSpec};
use movad::eval::{evaluate, frame_auc, EvalOptions};
use movad::model::Movad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(nf: usize, seed: u64) -> Arc<Movad> {
    let mut cfg = ModelConfig::toy();
    cfg.stmm.nf = nf;
    let mut m = Movad::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.init_params(&mut rng);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Arc::new(m)
}

fn data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::toy(seed)).unwrap()
}

#[test]
fn single_video_auc_is_that_video() {
    let m = random_model(3, 1);
    let mut d = data(2);
    d.videos.truncate(1);
    let r = evaluate(&m, &d, EvalOptions::default()).unwrap();
    let v = &r.videos[0];
    assert_eq!(r.overall_auc, frame_auc(&v.scores, &v.labels).unwrap());
    assert_eq!(r.per_video_mean_auc, Some(r.overall_auc));
    assert_eq!(r.num_frames, d.total_frames());
}

#[test]
fn duplicated_videos_keep_the_auc() {
    let m = random_model(3, 3);
    let d = data(4);
    let base = evaluate(&m, &d, EvalOptions::default()).unwrap();
    let mut doubled = d.clone();
    doubled.videos.extend(d.videos.clone());
    let twice = evaluate(&m, &doubled, EvalOptions::default()).unwrap();
    assert!((base.overall_auc - twice.overall_auc).abs() <= 1e-12);
    assert_eq!(twice.num_frames, 2 * base.num_frames);
}

#[test]
fn buckets_partition_the_videos() {
    let m = random_model(2, 5);
    let d = generate_synthetic(&SyntheticSpec { num_videos: 12, ..SyntheticSpec::toy(6) }).unwrap();
    let r = evaluate(&m, &d, EvalOptions::default()).unwrap();
    let mut seen: Vec<&str> = r.buckets.iter().flat_map(|b| b.videos.iter().map(String::as_str)).collect();
    seen.sort_unstable();
    let mut ids: Vec<&str> = d.videos.iter().map(|v| v.annotation.video_id.as_str()).collect();
    ids.sort_unstable();
    assert_eq!(seen, ids);
    for b in &r.buckets {
        for id in &b.videos {
            let v = d.videos.iter().find(|v| &v.annotation.video_id == id).unwrap();
            assert_eq!((v.annotation.category, v.annotation.ego_involved), (b.category, b.ego_involved));
        }
        let class = &r.per_class[&b.category];
        assert_eq!(if b.ego_involved { class.ego } else { class.non_ego }, b.auc);
        assert!(b.auc.is_none_or(|a| (0.0..=1.0).contains(&a)));
    }
}

#[test]
fn warmup_exclusion_only_filters_frames() {
    let m = random_model(4, 7);
    let d = data(8);
    let all = evaluate(&m, &d, EvalOptions { exclude_warmup: false }).unwrap();
    let cut = evaluate(&m, &d, EvalOptions { exclude_warmup: true }).unwrap();
    assert!(cut.exclude_warmup);
    assert_eq!(cut.num_frames, all.num_frames - 3 * d.len());
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for v in &all.videos {
        assert_eq!(cut.videos.iter().find(|c| c.video_id == v.video_id).unwrap().scores, v.scores);
        s.extend_from_slice(&v.scores[3..]);
        l.extend_from_slice(&v.labels[3..]);
    }
    assert_eq!(cut.overall_auc, frame_auc(&s, &l).unwrap());
}

fn quick_run(nf: usize, cells: usize) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model.stmm.nf = nf;
    cfg.model.head.lstm_cells = cells;
    cfg.train = TrainConfig {
        batch_size: 2,
        vcl: 4,
        epochs: 2,
        steps_per_epoch: Some(3),
        ..TrainConfig::toy()
    };
    cfg
}

#[test]
fn single_value_sweep_equals_one_run() {
    let d = data(9);
    let grid = AblationGrid {
        axis: AblationAxis::LstmCells,
        values: vec![1],
        base: quick_run(3, 2),
        seeds: vec![4],
        epochs: 2,
        eval: EvalOptions::default(),
    };
    let report = run_ablation(&grid, &d, &d, |_| {}).unwrap();
    let cfg = grid.config_for(&grid.points().unwrap()[0], 4);
    let (_, outcome) = train_and_evaluate(&cfg, &d, &d, EvalOptions::default(), |_| {}, |_, _| {}).unwrap();
    assert_eq!(report.runs.len(), 1);
    assert_eq!(report.runs[0].curve, outcome.curve);
    assert_eq!(report.runs[0].best_auc, Some(outcome.best_auc));
    assert_eq!(report.summary[0].mean_best_auc, Some(outcome.best_auc));
    // a second sweep reproduces the table
    let again = run_ablation(&grid, &d, &d, |_| {}).unwrap();
    assert_eq!(again.summary_tsv(), report.summary_tsv());
}

#[test]
fn memory_axis_expands_to_four_rows() {
    let grid = AblationGrid {
        axis: AblationAxis::MemoryOnoff,
        values: vec![],
        base: quick_run(3, 2),
        seeds: vec![0],
        epochs: 1,
        eval: EvalOptions::default(),
    };
    let rows: Vec<(usize, usize)> = grid.points().unwrap().iter().map(|p| (p.nf, p.lstm_cells)).collect();
    assert_eq!(rows, [(1, 0), (3, 0), (1, 2), (3, 2)]);
    let nf = AblationGrid { axis: AblationAxis::Nf, values: (1..=6).collect(), ..grid.clone() };
    assert_eq!(nf.points().unwrap().len(), 6);
    assert!(AblationGrid { axis: AblationAxis::Vcl, values: vec![], ..grid }.validate().is_err());
}

#[test]
fn failed_runs_are_recorded_and_the_sweep_continues() {
    let d = data(10);
    let grid = AblationGrid {
        axis: AblationAxis::Nf,
        values: vec![2, 3],
        base: RunConfig {
            train: TrainConfig { learning_rate: 1e300, ..quick_run(2, 1).train },
            ..quick_run(2, 1)
        },
        seeds: vec![0],
        epochs: 1,
        eval: EvalOptions::default(),
    };
    let report = run_ablation(&grid, &d, &d, |_| {}).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert!(report.runs.iter().all(|r| r.error.is_some()));
    assert!(report.summary.iter().all(|s| s.failures == 1 && s.mean_best_auc.is_none()));
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    for f in ["runs.jsonl", "summary.tsv", "curves.svg"] {
        assert!(dir.path().join(f).is_file());
    }
}
