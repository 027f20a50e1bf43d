use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use modkit::scenegen::{generate_dataset, DatasetSpec};
use modkit::tensorcore::checkpoint;
use modkit::trainer::{
    compare_modes, evaluate, history_csv, parse_history_csv, train_on, Dataset, EvalOptions, LabelSource, Task,
    TaskSampler, TrainConfig, TrainMode, Trainer,
};
use tempfile::TempDir;

/// Small dataset shared by every test in this file: 2 train / 1 val sequences.
fn dataset_dir() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            seed: 5,
            frames: 18,
            seq_len: 6,
            val_fraction: 0.34,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec, dir.path()).unwrap();
        dir
    })
    .path()
}

fn tiny(mode: TrainMode) -> TrainConfig {
    let mut model = BTreeMap::new();
    model.insert("channels_per_stage".to_string(), "4,4,6".to_string());
    model.insert("convs_per_stage".to_string(), "1,1,1".to_string());
    TrainConfig {
        mode,
        lr: 1e-3,
        epochs: 1,
        batch_size: 4,
        seed: 7,
        data: dataset_dir().to_path_buf(),
        model,
        ..TrainConfig::default()
    }
}

fn load(cfg: &TrainConfig, split: &str) -> Dataset {
    let mc = cfg.model_configs().unwrap().remove(0);
    Dataset::load(&cfg.data, split, cfg.labels, &mc).unwrap()
}

fn trainer<'a>(cfg: &TrainConfig, data: &'a Dataset) -> Trainer<'a> {
    let mc = cfg.model_configs().unwrap().remove(0);
    Trainer::new(cfg, mc, cfg.seed, data).unwrap()
}

#[test]
fn config_text_round_trip() {
    let mut cfg = tiny(TrainMode::ImagePairVariant);
    cfg.p_seg = 0.25;
    cfg.labels = LabelSource::Annotated;
    cfg.eval_every = 3;
    let back = TrainConfig::from_kv(&cfg.to_kv(), None).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.l2, c.dropout, c.p_seg), (1e-5, 5e-4, 0.5, 0.5));
    assert_eq!((c.batch_size, c.epochs), (4, 30));
}

#[test]
fn config_rejections() {
    for text in [
        "p_seg = 1.5\n",
        "p_seg = -0.1\n",
        "lr = 0\n",
        "bogus = 1\n",
        "mode = three_task\n",
        "model.seg_head = false\n",
        "model.widgets = 3\n",
        "model.stages = 2\n",
        "batch_size = 0\n",
    ] {
        assert!(TrainConfig::from_kv(text, None).is_err(), "{text}");
    }
}

#[test]
fn relative_data_path_resolves_against_config_dir() {
    let c = TrainConfig::from_kv("data = frames\n", Some(Path::new("/runs/a"))).unwrap();
    assert_eq!(c.data, Path::new("/runs/a/frames"));
    let c = TrainConfig::from_kv("data = /abs\n", Some(Path::new("/runs/a"))).unwrap();
    assert_eq!(c.data, Path::new("/abs"));
}

#[test]
fn every_mode_maps_to_model_configs() {
    for mode in TrainMode::ALL {
        let cfgs = tiny(mode).model_configs().unwrap();
        let heads: Vec<(bool, bool, bool)> = cfgs.iter().map(|c| (c.seg_head, c.det_head, c.motion_stream)).collect();
        let want = match mode {
            TrainMode::SegOnly1Stream => vec![(true, false, false)],
            TrainMode::Seg2Stream => vec![(true, false, true)],
            TrainMode::Joint2Stream | TrainMode::ImagePairVariant => vec![(true, true, true)],
            TrainMode::Separate2Stream => vec![(true, false, true), (false, true, false)],
        };
        assert_eq!(heads, want, "{mode}");
        assert_eq!(mode.as_str().parse::<TrainMode>().unwrap(), mode);
    }
}

#[test]
fn task_frequency_within_two_percent() {
    for p in [0.5, 0.3, 0.9] {
        let mut s = TaskSampler::new(42, p, true, true).unwrap();
        let n = 10_000;
        let seg = (0..n).filter(|_| s.draw() == Task::Seg).count();
        let freq = seg as f64 / n as f64;
        assert!((freq - p).abs() <= 0.02, "p_seg {p}: observed {freq}");
    }
}

#[test]
fn sampler_degenerate_probabilities() {
    let mut s = TaskSampler::new(1, 1.0, true, true).unwrap();
    assert!((0..1000).all(|_| s.draw() == Task::Seg));
    assert_eq!(s.tasks(), vec![Task::Seg]);
    let mut s = TaskSampler::new(1, 0.0, true, true).unwrap();
    assert!((0..1000).all(|_| s.draw() == Task::Det));
    let mut s = TaskSampler::new(1, 0.5, false, true).unwrap();
    assert!((0..100).all(|_| s.draw() == Task::Det));
    assert!(TaskSampler::new(1, 0.5, false, false).is_err());
}

#[test]
fn dataset_shapes_and_normalization() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "train");
    assert_eq!(d.len(), 12);
    let b = d.batch(&[0, 3], true).unwrap();
    assert_eq!(b.rgb.shape(), &[2, 3, 64, 192]);
    assert_eq!(b.motion.shape(), &[2, 3, 64, 192]);
    assert_eq!(b.labels.len(), 2 * 64 * 192);
    assert!(b.rgb.data().iter().all(|v| v.abs() <= 2.0));

    let pair = load(&tiny(TrainMode::ImagePairVariant), "train");
    let first = &pair.samples[0];
    let plane = 3 * 64 * 192;
    // First frame of a sequence is paired with itself, later frames with their predecessor.
    assert_eq!(first.motion[..plane], first.rgb[..]);
    assert_eq!(first.motion[plane..], first.rgb[..]);
    assert_eq!(pair.samples[1].motion[plane..], pair.samples[0].rgb[..]);
}

#[test]
fn empty_dataset_rejected_at_startup() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let mut d = load(&cfg, "val");
    d.samples.clear();
    let mc = cfg.model_configs().unwrap().remove(0);
    assert!(Trainer::new(&cfg, mc, 0, &d).is_err());
}

#[test]
fn fixed_seed_is_bit_identical() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "train");
    let a = train_on(&cfg, &d, None, |_, _| Ok(())).unwrap();
    let b = train_on(&cfg, &d, None, |_, _| Ok(())).unwrap();
    assert_eq!(a.runs, b.runs);
    assert_eq!(a.models, b.models);
    let tasks: Vec<Task> = a.runs[0].history.iter().map(|r| r.task).collect();
    assert_eq!(tasks.len(), 6);
    assert!(tasks.contains(&Task::Seg) && tasks.contains(&Task::Det));
}

#[test]
fn p_seg_one_trains_segmentation_only() {
    let mut cfg = tiny(TrainMode::Joint2Stream);
    cfg.p_seg = 1.0;
    let d = load(&cfg, "train");
    let mut t = trainer(&cfg, &d);
    let det_before: Vec<_> = t
        .model
        .params
        .iter()
        .filter(|p| p.name.starts_with("det."))
        .cloned()
        .collect();
    t.run_epoch().unwrap();
    assert_eq!(t.state.history.len(), 3);
    assert!(t.state.history.iter().all(|r| r.task == Task::Seg));
    let det_after: Vec<_> = t
        .model
        .params
        .iter()
        .filter(|p| p.name.starts_with("det."))
        .cloned()
        .collect();
    assert_eq!(det_before, det_after);
}

#[test]
fn detection_steps_never_touch_motion_weights() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "train");
    let mut t = trainer(&cfg, &d);
    let motion = |t: &Trainer| -> Vec<Vec<f32>> {
        t.model
            .params
            .iter()
            .filter(|p| p.name.starts_with("mot."))
            .map(|p| p.tensor.data().to_vec())
            .collect()
    };
    let (mut det_steps, mut seg_moved) = (0, false);
    for _ in 0..12 {
        let before = motion(&t);
        let row = t.step().unwrap();
        let after = motion(&t);
        match row.task {
            Task::Det => {
                det_steps += 1;
                assert_eq!(before, after, "step {}", row.step);
            }
            Task::Seg => seg_moved |= before != after,
        }
    }
    assert!(det_steps > 0 && seg_moved);
}

#[test]
fn batches_recycle_when_data_runs_out() {
    let mut cfg = tiny(TrainMode::Seg2Stream);
    cfg.batch_size = 4;
    let mut d = load(&cfg, "val");
    d.samples.truncate(3);
    let mut t = trainer(&cfg, &d);
    assert_eq!(t.steps_per_epoch(), 1);
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    assert_eq!(t.state.cursors[0].pass, 2);
    assert_eq!(t.state.cursors[0].pos, 2);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let mut cfg = tiny(TrainMode::Joint2Stream);
    cfg.epochs = 2;
    let d = load(&cfg, "train");
    let mut straight = trainer(&cfg, &d);
    straight.run_epoch().unwrap();
    straight.run_epoch().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.modw");
    let mut first = trainer(&cfg, &d);
    first.run_epoch().unwrap();
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::load(&path, 2, &d).unwrap();
    resumed.run_epoch().unwrap();

    assert_eq!(resumed.state, straight.state);
    assert_eq!(
        checkpoint::encode(&resumed.to_arrays()).unwrap(),
        checkpoint::encode(&straight.to_arrays()).unwrap()
    );
}

#[test]
fn training_checkpoint_load_save_is_byte_identical() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "train");
    let mut t = trainer(&cfg, &d);
    t.run_epoch().unwrap();
    let bytes = checkpoint::encode(&t.to_arrays()).unwrap();
    let arrays = checkpoint::decode(&bytes).unwrap();
    let back = Trainer::from_arrays(&arrays, cfg.epochs, &d).unwrap();
    assert_eq!(checkpoint::encode(&back.to_arrays()).unwrap(), bytes);
    // The weights alone load as a plain model.
    let m = modkit::model::Model::<f32>::from_arrays(&arrays).unwrap();
    assert_eq!(m, t.model);
}

#[test]
fn truncated_training_checkpoint_rejected() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "train");
    let t = trainer(&cfg, &d);
    let mut arrays = t.to_arrays();
    arrays.pop();
    assert!(Trainer::from_arrays(&arrays, 1, &d).is_err());
    let weights_only = t.model.to_arrays();
    assert!(Trainer::from_arrays(&weights_only, 1, &d).is_err());
}

#[test]
fn history_csv_round_trip() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "train");
    let out = train_on(&cfg, &d, None, |_, _| Ok(())).unwrap();
    let rows = &out.runs[0].history;
    let text = history_csv(rows);
    assert!(text.starts_with("step,epoch,task,loss,smoothed\n"));
    assert_eq!(&parse_history_csv(&text).unwrap(), rows);
    assert!(parse_history_csv("step,loss\n1,2\n").is_err());
}

#[test]
fn evaluation_is_repeatable_and_sections_follow_heads() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let d = load(&cfg, "val");
    let mc = cfg.model_configs().unwrap();
    let joint = modkit::model::Model::<f32>::build(mc[0].clone(), 3).unwrap();
    let opts = EvalOptions::default();
    let a = evaluate(&[&joint], &d, &opts).unwrap();
    assert_eq!(a, evaluate(&[&joint], &d, &opts).unwrap());
    assert!(a.pixel.is_some() && a.detection.is_some());
    assert_eq!(a.vehicle_ap.len(), 3);

    let sep = tiny(TrainMode::Separate2Stream).model_configs().unwrap();
    let seg = modkit::model::Model::<f32>::build(sep[0].clone(), 3).unwrap();
    let det = modkit::model::Model::<f32>::build(sep[1].clone(), 3).unwrap();
    let r = evaluate(&[&seg], &d, &opts).unwrap();
    assert!(r.pixel.is_some() && r.detection.is_none() && r.vehicle_ap.is_empty());
    let r = evaluate(&[&det], &d, &opts).unwrap();
    assert!(r.pixel.is_none() && r.detection.is_some());
    let r = evaluate(&[&seg, &det], &d, &opts).unwrap();
    assert!(r.pixel.is_some() && r.detection.is_some());
}

#[test]
fn evaluate_rejects_mismatched_motion_input() {
    let flow = load(&tiny(TrainMode::Joint2Stream), "val");
    let mc = tiny(TrainMode::ImagePairVariant).model_configs().unwrap().remove(0);
    let m = modkit::model::Model::<f32>::build(mc, 0).unwrap();
    assert!(evaluate(&[&m], &flow, &EvalOptions::default()).is_err());
}

#[test]
fn compare_identical_configs_gives_zero_deltas() {
    let cfg = tiny(TrainMode::Joint2Stream);
    let r = compare_modes(&[cfg.clone(), cfg], &EvalOptions::default()).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.rows[0].report, r.rows[1].report);
    for d in r.deltas() {
        for v in d {
            assert_eq!(v, Some(0.0));
        }
    }
    assert_eq!(r.joint_minus_separate_f_score, None);
    let table = r.to_table();
    for col in ["Precision", "Recall", "F-Score", "IoU", "mAP"] {
        assert!(table.contains(col), "{col}");
    }
}

#[test]
fn compare_reports_joint_minus_separate() {
    let r = compare_modes(
        &[tiny(TrainMode::Separate2Stream), tiny(TrainMode::Joint2Stream)],
        &EvalOptions::default(),
    )
    .unwrap();
    let f = |i: usize| r.rows[i].report.pixel.as_ref().unwrap().f_score;
    assert_eq!(r.joint_minus_separate_f_score, Some(f(1) - f(0)));
    assert_eq!(r.rows[0].final_loss.len(), 2);
    assert!(r.to_table().contains("joint - separate F-score"));
}
