use cloudseg::net::{ArchitectureConfig, Network};
use cloudseg::raster::{scene_to_tensor, RasterScene, Samples};
use cloudseg::segment::*;
use cloudseg::synth::{generate_scene, SynthConfig};
use cloudseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Network {
    Network::build(ArchitectureConfig::tiny(), 21).unwrap()
}

fn scene(w: usize, h: usize, seed: u64) -> RasterScene {
    let cfg = SynthConfig::for_size(seed, w, h);
    generate_scene(&cfg, 0).unwrap().0
}

fn opts(window: usize, overlap: usize) -> SegmentOptions {
    SegmentOptions {
        window,
        overlap,
        threshold: 0.5,
    }
}

/// Reference per-axis offsets: walk with the stride, then clamp a final window.
fn oracle_axis(dim: usize, window: usize, overlap: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut o = 0;
    while o + window <= dim {
        v.push(o);
        o += window - overlap;
    }
    if *v.last().unwrap() + window < dim {
        v.push(dim - window);
    }
    v
}

#[test]
fn offsets_match_oracle_and_cover_every_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..300 {
        let window = rng.random_range(1..600);
        let overlap = rng.random_range(0..window);
        let dim = rng.random_range(window..13_000);
        let offs = axis_offsets(dim, window, overlap).unwrap();
        assert_eq!(offs, oracle_axis(dim, window, overlap));
        assert!(offs.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(*offs.last().unwrap(), dim - window);
        let mut covered = vec![false; dim];
        for &o in &offs {
            covered[o..o + window].iter_mut().for_each(|c| *c = true);
        }
        assert!(covered.iter().all(|&c| c));
    }
}

#[test]
fn plan_is_row_major_cartesian_product() {
    let p = plan_windows(974, 1100, 512, 50).unwrap();
    assert_eq!(p.x_offsets, vec![0, 462]);
    assert_eq!(p.y_offsets, vec![0, 462, 588]);
    let offs = p.offsets();
    assert_eq!(offs.len(), 6);
    assert_eq!(offs[..3], [(0, 0), (462, 0), (0, 462)]);
    assert!(matches!(plan_windows(511, 600, 512, 50), Err(Error::Config(_))));
    // 6012 - 512 = 5500 = 11 * 462 + 418, so the height needs 12 + 1 windows
    let scene = plan_windows(6176, 6012, 512, 50).unwrap();
    assert_eq!((scene.x_offsets.len(), scene.y_offsets.len()), (14, 13));
    assert_eq!(scene.y_offsets.last(), Some(&5500));
    assert_eq!(scene.len(), 182);
}

#[test]
fn canvas_merge_is_idempotent_and_order_free() {
    let mut a = ProbabilityCanvas::new(4, 4);
    let w1: Vec<f32> = (0..9).map(|i| i as f32 / 10.0).collect();
    let w2: Vec<f32> = (0..9).map(|i| 0.8 - i as f32 / 20.0).collect();
    a.merge_window(&w1, 3, 3, 0, 0).unwrap();
    a.merge_window(&w2, 3, 3, 1, 1).unwrap();
    let mut b = ProbabilityCanvas::new(4, 4);
    b.merge_window(&w2, 3, 3, 1, 1).unwrap();
    b.merge_window(&w1, 3, 3, 0, 0).unwrap();
    assert_eq!(a, b);
    let values = a.values.clone();
    a.merge_window(&w1, 3, 3, 0, 0).unwrap();
    assert_eq!(a.values, values);
    let mut fresh = ProbabilityCanvas::new(3, 3);
    fresh.merge_window(&w1, 3, 3, 0, 0).unwrap();
    assert_eq!(fresh.values, w1);
}

#[test]
fn zero_head_network_marks_everything_cloud() {
    let mut net = tiny();
    for (name, t) in net.params_mut().trainable.iter_mut() {
        if name.contains(".head.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let s = scene(80, 72, 1);
    let out = segment_scene(&s, &net, &opts(40, 8)).unwrap();
    assert!(out.canvas.values.iter().all(|&p| p == 0.5));
    assert_eq!(out.mask.data, Samples::U8(vec![255; 80 * 72]));
}

#[test]
fn window_order_does_not_change_the_mask() {
    let net = tiny();
    let s = scene(150, 110, 2);
    let o = opts(48, 12);
    let plan = plan_windows(150, 110, 48, 12).unwrap();
    let forward = segment_windows(&s, &net, &o, &plan.offsets()).unwrap();
    let mut rev = plan.offsets();
    rev.reverse();
    let backward = segment_windows(&s, &net, &o, &rev).unwrap();
    let mut shuffled = plan.offsets();
    shuffled.swap(0, 5);
    shuffled.swap(2, 9);
    let mixed = segment_windows(&s, &net, &o, &shuffled).unwrap();
    assert_eq!(forward, backward);
    assert_eq!(forward, mixed);
    assert_eq!(forward, segment_scene(&s, &net, &o).unwrap());
    assert!(forward.canvas.min_coverage() >= 1);
}

#[test]
fn single_window_equals_thresholded_forward() {
    let net = tiny();
    let s = scene(64, 64, 3);
    let out = segment_scene(&s, &net, &opts(64, 50)).unwrap();
    let probs = net.infer(&scene_to_tensor(&s).unwrap()).unwrap();
    assert_eq!(out.canvas.values, probs.data());
    let expected: Vec<u8> = probs.data().iter().map(|&p| if p >= 0.5 { 255 } else { 0 }).collect();
    assert_eq!(out.mask.data, Samples::U8(expected));
}

#[test]
fn raising_the_threshold_never_adds_cloud() {
    let net = tiny();
    let s = scene(64, 64, 4);
    let canvas = segment_scene(&s, &net, &opts(64, 0)).unwrap().canvas;
    let mut prev: Option<Vec<u8>> = None;
    for t in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
        let Samples::U8(m) = canvas.threshold(t, "m").unwrap().data else { panic!() };
        if let Some(p) = &prev {
            assert!(m.iter().zip(p).all(|(&now, &before)| now <= before));
        }
        prev = Some(m);
    }
}

#[test]
fn rejects_wrong_band_count_and_reports_failing_window() {
    let net = tiny();
    let three = RasterScene::new(64, 64, 3, Samples::U16(vec![0; 64 * 64 * 3]), "rgb").unwrap();
    assert!(matches!(segment_scene(&three, &net, &opts(64, 8)), Err(Error::Config(_))));
    // 60 is not a multiple of the encoder stride, so every window fails
    let s = scene(100, 100, 5);
    let err = segment_scene(&s, &net, &opts(60, 10)).unwrap_err();
    assert!(err.to_string().contains("window at (0, 0)"), "{err}");
}
