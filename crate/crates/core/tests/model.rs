use modkit::flowio::Mask;
use modkit::model::{
    classify_static_moving, decode_cells, encode_targets, joint_gradcheck, mask_coverage, nms, ForwardOptions,
    ForwardVars, GridOutput, GridTargets, Heads, Model, ModelConfig, MotionInput,
};
use modkit::tensorcore::{AdamState, Bindings, Graph, Tensor, Var};
use modkit::{BBox, Detection, MotionClass};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        input_h: 16,
        input_w: 48,
        channels_per_stage: vec![4, 6, 8],
        grid_h: 2,
        grid_w: 6,
        ..ModelConfig::default()
    }
}

fn rand_input<T: modkit::tensorcore::Element>(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    cfg: &ModelConfig,
) -> Tensor<T> {
    Tensor::from_fn(vec![n, c, cfg.input_h, cfg.input_w], |_| {
        T::from_f64(rng.random_range(-1.0..1.0))
    })
}

/// Closed-form weight count: 3x3 convs in both streams, 1x1 score and skip
/// projections, bilinear upsamplers, and the detection head.
fn expected_params(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let stream = |cin0: usize| {
        let mut total = 0;
        let mut cin = cin0;
        for (s, &cout) in cfg.channels_per_stage.iter().enumerate() {
            for _ in 0..cfg.convs_per_stage[s] {
                total += conv(cin, cout, 3);
                cin = cout;
            }
        }
        total
    };
    let deep = *cfg.channels_per_stage.last().unwrap();
    let skips: usize = cfg.channels_per_stage[..cfg.stages - 1]
        .iter()
        .map(|&c| conv(c, 2, 1))
        .sum();
    let seg = conv(deep, 2, 1) + skips + cfg.stages * 2 * 2 * 4 * 4;
    let det = conv(deep, deep, 1) + conv(deep, 6, 1) + conv(cfg.channels_per_stage[0] * 9, 4, 1);
    stream(3) + stream(cfg.motion_input.channels()) + seg + det
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let m: Model = Model::build(cfg.clone(), 0).unwrap();
    assert_eq!(m.num_params(), expected_params(&cfg));
    // streams 2 * (448+2320+4640+9248+18496+36928), seg 130+34+66+192, det 4160+390+580
    assert_eq!(m.num_params(), 149_712);
    let pair = ModelConfig {
        motion_input: MotionInput::ImagePair,
        ..cfg
    };
    assert_eq!(
        Model::<f32>::build(pair.clone(), 0).unwrap().num_params(),
        expected_params(&pair)
    );
}

#[test]
fn inconsistent_config_is_rejected() {
    let bad = ModelConfig {
        channels_per_stage: vec![16, 32],
        ..ModelConfig::default()
    };
    assert!(Model::<f32>::build(bad, 0).is_err());
    let bad = ModelConfig {
        grid_w: 12,
        ..ModelConfig::default()
    };
    assert!(Model::<f32>::build(bad, 0).is_err());
}

#[test]
fn default_shapes() {
    let cfg = ModelConfig::default();
    let m: Model = Model::build(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rgb = rand_input(&mut rng, 2, 3, &cfg);
    let mot = rand_input(&mut rng, 2, 3, &cfg);
    let p = m.predict(&rgb, Some(&mot), Heads::BOTH).unwrap();
    let seg = p.seg.unwrap();
    assert_eq!(
        (seg.n, seg.height, seg.width, seg.logits.len()),
        (2, 64, 192, 2 * 2 * 64 * 192)
    );
    let grid = p.grid.unwrap();
    assert_eq!((grid.n, grid.grid_h, grid.grid_w, grid.channels), (2, 8, 24, 10));

    let plain = ModelConfig {
        rezoom_enabled: false,
        ..cfg
    };
    let m2: Model = Model::build(plain, 1).unwrap();
    let g2 = m2.predict(&rgb, None, Heads::DET).unwrap().grid.unwrap();
    assert_eq!((g2.n, g2.grid_h, g2.grid_w, g2.channels), (2, 8, 24, 6));
    // Rezoom parameters are created last, so all shared weights coincide and
    // the two grids differ only by the residual channels.
    for b in 0..2 {
        for i in 0..8 {
            for j in 0..24 {
                assert_eq!(&grid.cell(b, i, j)[..6], g2.cell(b, i, j));
            }
        }
    }
    assert!(grid.data.chunks(10).any(|c| c[6..].iter().any(|&r| r != 0.0)));
}

#[test]
fn one_stage_and_image_pair_configs_run() {
    let cfg = ModelConfig {
        input_h: 8,
        input_w: 24,
        stages: 1,
        channels_per_stage: vec![4],
        convs_per_stage: vec![1],
        grid_h: 4,
        grid_w: 12,
        ..ModelConfig::default()
    };
    let m: Model = Model::build(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rgb = rand_input(&mut rng, 1, 3, &cfg);
    let p = m
        .predict(&rgb, Some(&rand_input(&mut rng, 1, 3, &cfg)), Heads::BOTH)
        .unwrap();
    assert_eq!(p.seg.unwrap().logits.len(), 2 * 8 * 24);
    assert_eq!(p.grid.unwrap().data.len(), 4 * 12 * 10);

    let pair = ModelConfig {
        motion_input: MotionInput::ImagePair,
        ..small_config()
    };
    let m: Model = Model::build(pair.clone(), 3).unwrap();
    let rgb = rand_input(&mut rng, 1, 3, &pair);
    assert!(m
        .predict(&rgb, Some(&rand_input(&mut rng, 1, 6, &pair)), Heads::SEG)
        .is_ok());
    assert!(m
        .predict(&rgb, Some(&rand_input(&mut rng, 1, 3, &pair)), Heads::SEG)
        .is_err());
    let wrong_res = Tensor::<f32>::zeros(vec![1, 3, 16, 40]);
    assert!(m.predict(&wrong_res, None, Heads::DET).is_err());
}

#[test]
fn zero_weights_give_uniform_losses() {
    let cfg = small_config();
    let mut m: Model<f64> = Model::build(cfg.clone(), 4).unwrap();
    for p in m.params.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let mut b = Bindings::default();
    let x = g.leaf(&rand_input(&mut rng, 2, 3, &cfg));
    let y = g.leaf(&rand_input(&mut rng, 2, 3, &cfg));
    let fwd = m
        .forward(&mut g, &mut b, x, Some(y), &ForwardOptions::training(Heads::BOTH, 0))
        .unwrap();
    let labels: Vec<usize> = (0..2 * 16 * 48).map(|_| rng.random_range(0..2)).collect();
    let empty = vec![encode_targets(&[], &cfg); 2];
    let l = m.loss_total(&mut g, &fwd, Some(&labels), Some(&empty)).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((g.item(l.seg.unwrap()) - ln2).abs() < 1e-12);
    assert!((g.item(l.det.unwrap()) - ln2).abs() < 1e-12);
    assert!((g.item(l.total) - 2.0 * ln2).abs() < 1e-12);
}

fn grads_by_stream(m: &Model<f64>, g: &Graph<f64>, b: &Bindings) -> (f64, f64) {
    let (mut app, mut mot) = (0.0, 0.0);
    for (i, p) in m.params.iter().enumerate() {
        let s: f64 = b
            .var(modkit::tensorcore::ParamId(i))
            .and_then(|v| g.grad(v))
            .map(|gr| gr.iter().map(|x| x.abs()).sum())
            .unwrap_or(0.0);
        if p.name.starts_with("app.") {
            app += s;
        } else if p.name.starts_with("mot.") {
            mot += s;
        }
    }
    (app, mot)
}

#[test]
fn detection_loss_never_reaches_motion_stream() {
    let cfg = small_config();
    let m: Model<f64> = Model::build(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for batch in 0..10u64 {
        let mut g = Graph::new();
        let mut b = Bindings::default();
        let x = g.leaf(&rand_input(&mut rng, 2, 3, &cfg));
        let y = g.leaf(&rand_input(&mut rng, 2, 3, &cfg));
        let fwd = m
            .forward(
                &mut g,
                &mut b,
                x,
                Some(y),
                &ForwardOptions::training(Heads::BOTH, batch),
            )
            .unwrap();
        let gts = [BBox::new(
            rng.random_range(4.0..44.0),
            rng.random_range(3.0..13.0),
            9.0,
            6.0,
        )];
        let t = vec![encode_targets(&gts, &cfg); 2];
        let det = m.det_loss(&mut g, &fwd, &t).unwrap();
        g.backward(det).unwrap();
        let (app, _) = grads_by_stream(&m, &g, &b);
        assert!(app > 0.0);
        for (i, p) in m.params.iter().enumerate().filter(|(_, p)| p.name.starts_with("mot.")) {
            let v = b.var(modkit::tensorcore::ParamId(i)).unwrap();
            assert!(g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)), "{}", p.name);
        }
    }
}

#[test]
fn segmentation_loss_reaches_both_streams() {
    let cfg = small_config();
    let m: Model<f64> = Model::build(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let mut b = Bindings::default();
    let x = g.leaf(&rand_input(&mut rng, 1, 3, &cfg));
    let y = g.leaf(&rand_input(&mut rng, 1, 3, &cfg));
    let fwd = m
        .forward(&mut g, &mut b, x, Some(y), &ForwardOptions::inference(Heads::SEG))
        .unwrap();
    let labels: Vec<usize> = (0..16 * 48).map(|_| rng.random_range(0..2)).collect();
    let l = m.seg_loss(&mut g, &fwd, &labels).unwrap();
    g.backward(l).unwrap();
    let (app, mot) = grads_by_stream(&m, &g, &b);
    assert!(app > 0.0 && mot > 0.0, "{app} {mot}");
}

#[test]
fn joint_graph_passes_finite_differences() {
    for seed in 0..4 {
        let r = joint_gradcheck(seed, 16, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        assert!(r.coordinates > 300);
    }
}

#[test]
fn one_small_step_decreases_total_loss() {
    let cfg = small_config();
    let mut m: Model<f64> = Model::build(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rgb = rand_input::<f64>(&mut rng, 2, 3, &cfg);
    let mot = rand_input::<f64>(&mut rng, 2, 3, &cfg);
    let labels: Vec<usize> = (0..2 * 16 * 48).map(|_| rng.random_range(0..2)).collect();
    let t = vec![encode_targets(&[BBox::new(20.0, 7.0, 12.0, 8.0)], &cfg); 2];
    let eval = |m: &Model<f64>, grads: bool| {
        let mut g = Graph::new();
        let mut b = Bindings::default();
        let (x, y) = (g.leaf(&rgb), g.leaf(&mot));
        let fwd = m
            .forward(&mut g, &mut b, x, Some(y), &ForwardOptions::training(Heads::BOTH, 11))
            .unwrap();
        let l = m.loss_total(&mut g, &fwd, Some(&labels), Some(&t)).unwrap().total;
        if grads {
            g.backward(l).unwrap();
        }
        (g.item(l), g, b)
    };
    let (before, g, b) = eval(&m, true);
    m.params.accumulate_grads(&g, &b).unwrap();
    let mut adam = AdamState::new(&m.params, 1e-6, 0.0);
    adam.step(&mut m.params).unwrap();
    let (after, _, _) = eval(&m, false);
    assert!(after < before, "{before} -> {after}");
}

/// Direct f64 evaluation of the joint loss on explicit head outputs.
#[allow(clippy::too_many_arguments)]
fn loss_oracle(
    seg: &[f64],
    labels: &[usize],
    n: usize,
    plane: usize,
    det: &[f64],
    boxes: &[f64],
    refined: &[f64],
    t: &[GridTargets],
) -> f64 {
    let ce = |a: f64, b: f64, target: usize| {
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        lse - if target == 0 { a } else { b }
    };
    let mut seg_sum = 0.0;
    for bi in 0..n {
        for p in 0..plane {
            seg_sum += ce(
                seg[(bi * 2) * plane + p],
                seg[(bi * 2 + 1) * plane + p],
                labels[bi * plane + p],
            );
        }
    }
    let cells = t[0].obj.len();
    let mut conf = 0.0;
    let mut l1 = 0.0;
    for bi in 0..n {
        for c in 0..cells {
            let obj = t[bi].obj[c];
            conf += ce(det[(bi * 2) * cells + c], det[(bi * 2 + 1) * cells + c], obj as usize);
            if obj {
                for k in 0..4 {
                    let target = t[bi].boxes[c][k];
                    l1 += (boxes[(bi * 4 + k) * cells + c] - target).abs();
                    l1 += (refined[(bi * 4 + k) * cells + c] - target).abs();
                }
            }
        }
    }
    let s = (n * cells) as f64;
    seg_sum / (n * plane) as f64 + conf / s + l1 / s
}

fn explicit_forward(
    g: &mut Graph<f64>,
    seg: &[f64],
    det: &[f64],
    boxes: &[f64],
    refined: &[f64],
    n: usize,
    cfg: &ModelConfig,
) -> ForwardVars {
    let (h, w, gh, gw) = (cfg.input_h, cfg.input_w, cfg.grid_h, cfg.grid_w);
    let mut leaf = |shape: Vec<usize>, v: &[f64]| -> Var { g.leaf(&Tensor::new(shape, v.to_vec()).unwrap()) };
    ForwardVars {
        seg_logits: Some(leaf(vec![n, 2, h, w], seg)),
        det_logits: Some(leaf(vec![n, 2, gh, gw], det)),
        det_box: Some(leaf(vec![n, 4, gh, gw], boxes)),
        det_refined: Some(leaf(vec![n, 4, gh, gw], refined)),
        rezoom_rois: Vec::new(),
    }
}

#[test]
fn loss_matches_direct_summation_and_vanishes_when_perfect() {
    let cfg = small_config();
    let m: Model<f64> = Model::build(cfg.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 2;
    let (plane, cells) = (16 * 48, 12);
    for _ in 0..5 {
        let r =
            |rng: &mut ChaCha8Rng, len: usize, s: f64| (0..len).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        let seg = r(&mut rng, n * 2 * plane, 3.0);
        let det = r(&mut rng, n * 2 * cells, 3.0);
        let boxes = r(&mut rng, n * 4 * cells, 10.0);
        let refined = r(&mut rng, n * 4 * cells, 10.0);
        let labels: Vec<usize> = (0..n * plane).map(|_| rng.random_range(0..2)).collect();
        let t: Vec<GridTargets> = (0..n)
            .map(|_| {
                let gts: Vec<BBox> = (0..3)
                    .map(|_| BBox::new(rng.random_range(0.0..48.0), rng.random_range(0.0..16.0), 8.0, 5.0))
                    .collect();
                encode_targets(&gts, &cfg)
            })
            .collect();
        let mut g = Graph::new();
        let fwd = explicit_forward(&mut g, &seg, &det, &boxes, &refined, n, &cfg);
        let l = m.loss_total(&mut g, &fwd, Some(&labels), Some(&t)).unwrap().total;
        let got = g.item(l);
        let want = loss_oracle(&seg, &labels, n, plane, &det, &boxes, &refined, &t);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");

        // Perfect outputs: confident correct logits and exact boxes.
        let seg_p: Vec<f64> = (0..n * 2 * plane)
            .map(|i| {
                let (bi, ch, p) = (i / (2 * plane), (i / plane) % 2, i % plane);
                if ch == labels[bi * plane + p] {
                    40.0
                } else {
                    -40.0
                }
            })
            .collect();
        let det_p: Vec<f64> = (0..n * 2 * cells)
            .map(|i| {
                let (bi, ch, c) = (i / (2 * cells), (i / cells) % 2, i % cells);
                if ch == t[bi].obj[c] as usize {
                    40.0
                } else {
                    -40.0
                }
            })
            .collect();
        let box_p: Vec<f64> = (0..n * 4 * cells)
            .map(|i| {
                let (bi, k, c) = (i / (4 * cells), (i / cells) % 4, i % cells);
                t[bi].boxes[c][k]
            })
            .collect();
        let mut g = Graph::new();
        let fwd = explicit_forward(&mut g, &seg_p, &det_p, &box_p, &box_p, n, &cfg);
        let l = m.loss_total(&mut g, &fwd, Some(&labels), Some(&t)).unwrap().total;
        let perfect = g.item(l);
        assert!(perfect < 1e-30, "{perfect}");
    }
}

#[test]
fn encode_targets_cases() {
    let cfg = ModelConfig::default();
    let empty = encode_targets(&[], &cfg);
    assert_eq!(empty.positives(), 0);
    let one = encode_targets(&[BBox::new(100.0, 30.0, 20.0, 10.0)], &cfg);
    assert_eq!(one.positives(), 1);
    let cell = 3 * 24 + 12;
    assert!(one.obj[cell]);
    assert_eq!(one.boxes[cell], [100.0 - 100.0, 30.0 - 28.0, 20.0, 10.0]);

    // Both centers fall in cell (3, 12); the larger box is encoded.
    let small = BBox::new(97.0, 25.0, 10.0, 10.0);
    let large = BBox::new(102.0, 30.0, 30.0, 12.0);
    for order in [[small, large], [large, small]] {
        let t = encode_targets(&order, &cfg);
        assert_eq!(t.positives(), 1);
        assert_eq!(t.boxes[cell], [2.0, 2.0, 30.0, 12.0]);
    }
}

fn grid_from_targets(t: &GridTargets, rezoom: bool) -> GridOutput {
    let c = if rezoom { 10 } else { 6 };
    let mut data = Vec::new();
    for (k, &obj) in t.obj.iter().enumerate() {
        let (l0, l1) = if obj { (-8.0, 8.0) } else { (8.0, -8.0) };
        let b = t.boxes[k];
        data.extend([l0, l1, b[0] as f32, b[1] as f32, b[2] as f32, b[3] as f32]);
        if rezoom {
            data.extend([0.0f32; 4]);
        }
    }
    GridOutput {
        n: 1,
        grid_h: t.grid_h,
        grid_w: t.grid_w,
        channels: c,
        data,
    }
}

#[test]
fn decode_inverts_encode_on_cell_interior_boxes() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let mut cells: Vec<usize> = (0..8 * 24).collect();
        let mut gts = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let cell = cells.swap_remove(rng.random_range(0..cells.len()));
            let (i, j) = (cell / 24, cell % 24);
            let cx = j as f64 * 8.0 + rng.random_range(0.5..7.5);
            let cy = i as f64 * 8.0 + rng.random_range(0.5..7.5);
            // Integer-ish sizes that keep the box inside the image.
            let w = (2.0 * cx.min(192.0 - cx)).min(40.0).floor().max(1.0);
            let h = (2.0 * cy.min(64.0 - cy)).min(20.0).floor().max(1.0);
            gts.push(BBox::new(cx as f32 as f64, cy as f32 as f64, w, h));
        }
        let t = encode_targets(&gts, &cfg);
        for rezoom in [false, true] {
            let dets = decode_cells(&grid_from_targets(&t, rezoom), 0, &cfg, 0.5).unwrap();
            assert_eq!(dets.len(), gts.len());
            for gt in &gts {
                let d = dets.iter().find(|d| (d.bbox.cx - gt.cx).abs() < 1e-4).expect("decoded");
                assert!((d.bbox.cy - gt.cy).abs() < 1e-4);
                assert!((d.bbox.w - gt.w).abs() < 1e-4 && (d.bbox.h - gt.h).abs() < 1e-4);
                assert!(d.confidence > 0.99);
            }
        }
    }
}

#[test]
fn decode_centers_and_clips() {
    let cfg = ModelConfig::default();
    let mut data = vec![0.0f32; 8 * 24 * 6];
    for cell in 0..8 * 24 {
        data[cell * 6..cell * 6 + 6].copy_from_slice(&[0.0, 1.0, 0.0, 0.0, 8.0, 8.0]);
    }
    // Cell (0, 0) pushed off the top-left corner.
    data[..6].copy_from_slice(&[0.0, 1.0, -10.0, -10.0, 8.0, 8.0]);
    let grid = GridOutput {
        n: 1,
        grid_h: 8,
        grid_w: 24,
        channels: 6,
        data,
    };
    let dets = decode_cells(&grid, 0, &cfg, 0.0).unwrap();
    assert_eq!(dets.len(), 8 * 24 - 1);
    let d = dets.iter().find(|d| d.cell == 5 * 24 + 7).unwrap();
    assert_eq!((d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h), (60.0, 44.0, 8.0, 8.0));
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((d.confidence - sig).abs() < 1e-12);
    let mut grid2 = grid.clone();
    grid2.data[..6].copy_from_slice(&[0.0, 1.0, -3.0, 2.0, 8.0, 8.0]);
    let d = decode_cells(&grid2, 0, &cfg, 0.0).unwrap()[0];
    assert_eq!(
        (d.bbox.x0(), d.bbox.y0(), d.bbox.x1(), d.bbox.y1()),
        (0.0, 2.0, 5.0, 10.0)
    );
    assert!(decode_cells(&grid, 1, &cfg, 0.0).is_err());
}

/// Reference NMS: repeatedly take the best remaining box and discard
/// everything that overlaps it too much.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut rest: Vec<Detection> = dets.to_vec();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            let (a, b) = (&rest[i], &rest[best]);
            if a.confidence > b.confidence || (a.confidence == b.confidence && a.cell < b.cell) {
                best = i;
            }
        }
        let keep = rest.remove(best);
        rest.retain(|d| d.bbox.iou(&keep.bbox) <= thr);
        out.push(keep);
    }
    out
}

fn det(cx: f64, cy: f64, w: f64, h: f64, conf: f64, cell: usize) -> Detection {
    Detection {
        bbox: BBox::new(cx, cy, w, h),
        confidence: conf,
        motion_class: None,
        cell,
    }
}

#[test]
fn nms_cases() {
    let disjoint = vec![det(10.0, 10.0, 5.0, 5.0, 0.9, 0), det(50.0, 10.0, 5.0, 5.0, 0.8, 1)];
    assert_eq!(nms(&disjoint, 0.5).len(), 2);
    let same = vec![det(10.0, 10.0, 5.0, 5.0, 0.7, 3), det(10.0, 10.0, 5.0, 5.0, 0.7, 1)];
    let kept = nms(&same, 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].cell, 1);
}

proptest! {
    #[test]
    fn nms_matches_oracle(raw in prop::collection::vec((0.0..60.0f64, 0.0..30.0f64, 2.0..20.0f64, 2.0..20.0f64, 0..4u8), 0..12), thr in 0.1..0.9f64) {
        let dets: Vec<Detection> = raw
            .iter()
            .enumerate()
            .map(|(i, &(x, y, w, h, c))| det(x, y, w, h, c as f64 / 4.0, (i * 7) % 13))
            .collect();
        prop_assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
    }
}

#[test]
fn coverage_boundary_is_strict() {
    let b = BBox::from_corners(0.0, 0.0, 4.0, 2.0);
    let full = Mask {
        width: 4,
        height: 2,
        data: vec![1; 8],
    };
    let empty = Mask {
        width: 4,
        height: 2,
        data: vec![0; 8],
    };
    let half = Mask {
        width: 4,
        height: 2,
        data: vec![1, 1, 0, 0, 1, 1, 0, 0],
    };
    let d = [det(2.0, 1.0, 4.0, 2.0, 0.9, 0)];
    assert_eq!(mask_coverage(&b, &half), 0.5);
    assert_eq!(
        classify_static_moving(&d, &full)[0].motion_class,
        Some(MotionClass::Moving)
    );
    assert_eq!(
        classify_static_moving(&d, &empty)[0].motion_class,
        Some(MotionClass::Static)
    );
    assert_eq!(
        classify_static_moving(&d, &half)[0].motion_class,
        Some(MotionClass::Static)
    );
    let mut five = half.clone();
    five.data[2] = 1;
    assert_eq!(
        classify_static_moving(&d, &five)[0].motion_class,
        Some(MotionClass::Moving)
    );
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        motion_input: MotionInput::ImagePair,
        ..small_config()
    };
    let m: Model = Model::build(cfg, 10).unwrap();
    let a = dir.path().join("a.modw");
    let b = dir.path().join("b.modw");
    m.save(&a).unwrap();
    let loaded = Model::<f32>::load(&a).unwrap();
    assert_eq!(loaded, m);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut arrays = m.to_arrays();
    arrays.pop();
    assert!(Model::<f32>::from_arrays(&arrays).is_err());
    let mut arrays = m.to_arrays();
    arrays[3].dims = vec![1];
    arrays[3].data = vec![0.0];
    assert!(Model::<f32>::from_arrays(&arrays).is_err());
    assert!(Model::<f32>::from_arrays(&m.to_arrays()[1..]).is_err());
}

#[test]
fn inference_is_deterministic() {
    let cfg = small_config();
    let m: Model = Model::build(cfg.clone(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rgb = rand_input(&mut rng, 1, 3, &cfg);
    let mot = rand_input(&mut rng, 1, 3, &cfg);
    let a = m.predict(&rgb, Some(&mot), Heads::BOTH).unwrap();
    let b = m.predict(&rgb, Some(&mot), Heads::BOTH).unwrap();
    assert_eq!(a, b);
}
