mod common;

use std::collections::BTreeMap;

use bolddecode::evalkit::*;
use bolddecode::prep::{build_split_time_resolved, WindowSpec, TIME_RESOLVED_FRACTION};
use bolddecode::substrate::Rng;
use bolddecode::synthcortex::{render_mask, render_scene, sample_scene, Palette, SceneConfig, TR};

#[test]
fn segmenter_inverts_rendering() {
    let palette = Palette::default();
    let mut rng = Rng::new(21);
    for _ in 0..300 {
        let scene = sample_scene(&mut rng, &SceneConfig::default(), &palette);
        let img = render_scene(&scene, &palette, 32);
        assert_eq!(segment_by_palette(&img, &palette), render_mask(&scene, 32));
    }
}

#[test]
fn perfect_decoder_hits_every_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(dir.path(), &common::small_config(), 3);
    let window = WindowSpec::default();
    let rep = evaluate_split(&PerfectDecoder(&f.dataset), &f.dataset, &f.prepared, &f.split, &[0, 1], 5, window, 0.0)
        .unwrap();
    assert!((rep.mean("pixcorr") - 1.0).abs() < 1e-9);
    assert!((rep.mean("ssim") - 1.0).abs() < 1e-9);
    assert_eq!(rep.mean("miou"), 1.0);
    assert_eq!(rep.mean("id_low"), 100.0);
    assert_eq!(rep.mean("id_high"), 100.0);
    assert_eq!(rep.subjects.len(), 2);
    assert_eq!(rep.summary["miou"].sem, Some(0.0));
    assert_eq!(rep.subjects[0].n_trials, 12);
}

#[test]
fn constant_decoder_scores_background_only() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(dir.path(), &common::small_config(), 4);
    let window = WindowSpec::default();
    let dec = ConstantDecoder::background(&f.dataset);
    let rep = evaluate_split(&dec, &f.dataset, &f.prepared, &f.split, &[0], 5, window, 0.0).unwrap();
    let s = &rep.subjects[0];
    assert_eq!(rep.mean("pixcorr"), 0.0);
    assert_eq!(s.pixcorr_degenerate, s.n_trials);
    // identical reconstructions: every pair is won once in each direction,
    // or everything is excluded when the features are flat as well
    for key in ["id_low", "id_high"] {
        assert!(s.id_excluded[key] == 0 || s.id_excluded[key] == s.n_trials);
        assert!((rep.mean(key) - 50.0).abs() < 1e-9, "{key}: {}", rep.mean(key));
    }
    // mIoU: only the background class can overlap
    let mut expected = 0.0;
    for (stim, _, _) in rep.repetitions.trials(0) {
        let mask = f.dataset.mask(stim).unwrap();
        let bg = mask.iter().filter(|&&c| c == 0).count() as f64 / mask.len() as f64;
        let mut classes: Vec<u8> = mask.clone();
        classes.sort();
        classes.dedup();
        let n = classes.len() + usize::from(!classes.contains(&0));
        expected += bg / n as f64;
    }
    expected /= s.n_trials as f64;
    assert!((rep.mean("miou") - expected).abs() < 1e-12, "{} vs {expected}", rep.mean("miou"));
}

#[test]
fn reports_round_trip_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(&dir.path().join("data"), &common::small_config(), 6);
    let window = WindowSpec::default();
    let dec = ConstantDecoder { color: [0.2, 0.4, 0.6], resolution: 16 };
    let a = evaluate_split(&dec, &f.dataset, &f.prepared, &f.split, &[0, 1], 9, window, 0.0).unwrap();
    let b = evaluate_split(&dec, &f.dataset, &f.prepared, &f.split, &[0, 1], 9, window, 0.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.repetitions.seed, 9);
    let files = emit_report(&a, &dir.path().join("out")).unwrap();
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(back, a);
    let csv = std::fs::read_to_string(&files[1]).unwrap();
    assert!(csv.starts_with("subject,metric,value\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * METRICS.len() + 2 * METRICS.len());
}

#[test]
fn sem_is_sample_std_over_root_n() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    let std = (5.0f64 / 3.0).sqrt();
    assert!((s.sem.unwrap() - std / 2.0).abs() < 1e-15);
    assert_eq!(summarize(&[3.0]).sem, None);
}

#[test]
fn time_sweep_tables_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(&dir.path().join("data"), &common::small_config(), 8);
    let split = build_split_time_resolved(&f.dataset.manifest, TIME_RESOLVED_FRACTION, 1, true).unwrap();
    let window = WindowSpec::default();
    let general = PerfectDecoder(&f.dataset);
    let spec = ConstantDecoder { color: [0.3, 0.3, 0.3], resolution: 16 };
    let specialized: BTreeMap<i32, &dyn Decoder> =
        BTreeMap::from([(-3, &spec as &dyn Decoder), (3, &spec as &dyn Decoder)]);
    let deltas: Vec<i32> = (-6..=9).collect();
    let sweep = time_sweep(&general, &specialized, &f.dataset, &f.prepared, &split, &[0], 2, window, &deltas).unwrap();
    assert_eq!(sweep.points.len(), 16);
    assert!(sweep.points.windows(2).all(|w| w[1].window_end > w[0].window_end));
    let zero = sweep.point_at_delta(0.0).unwrap();
    assert_eq!(sweep.value(zero, "general", "id_low"), Some(100.0));
    assert!((sweep.points[sweep.point_at_delta(-6.0 * TR).unwrap()].window_end - (11.0 - 7.8)).abs() < 1e-9);
    // a perfect decoder always shows the current stimulus, never its neighbours
    assert_eq!(sweep.neighbor(zero, "general", Target::Current), Some(100.0));
    assert!(sweep.neighbor(zero, "general", Target::Previous).unwrap() < 80.0);

    let files = emit_sweep(&sweep, &dir.path().join("out")).unwrap();
    let csv = std::fs::read_to_string(&files[1]).unwrap();
    for metric in METRICS {
        let general_rows = csv.lines().filter(|l| l.starts_with(&format!("general,{metric},"))).count();
        let spec_rows = csv.lines().filter(|l| l.starts_with(&format!("specialized,{metric},"))).count();
        assert_eq!((general_rows, spec_rows), (16, 2), "{metric}");
    }
    let svg = std::fs::read_to_string(&files[2]).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<g class=\"panel\"").count(), METRICS.len() + 1);
    // two series (general, specialized) per metric panel, three targets in the last
    assert_eq!(svg.matches("<polyline").count(), 2 * METRICS.len() + 3);
    assert_eq!(svg.matches("class=\"stimulus\"").count(), METRICS.len() + 1);
}

#[test]
fn duration_sweep_orders_by_duration() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::fixture(dir.path(), &common::small_config(), 10);
    let dec = PerfectDecoder(&f.dataset);
    let models: Vec<(WindowSpec, &dyn Decoder)> =
        [6, 1, 3].iter().map(|&k| (WindowSpec { t: 3.0, d: k as f64 * TR }, &dec as &dyn Decoder)).collect();
    let sweep = duration_sweep(&models, &f.dataset, &f.prepared, &f.split, &[0], 1).unwrap();
    let ts: Vec<usize> = sweep.points.iter().map(|p| p.window.n_samples(TR)).collect();
    assert_eq!(ts, vec![1, 3, 6]);
}
