use bolddecode::synthcortex::TR;
use bolddecode_web::{hrf_curve, Demo};

#[test]
fn simulation_is_seeded_and_shaped() {
    let a = Demo::new(7, 12, 1.0, 16).unwrap();
    let b = Demo::new(7, 12, 1.0, 16).unwrap();
    assert_eq!(a.voxel(3, false).unwrap(), b.voxel(3, false).unwrap());
    assert_ne!(a.voxel(3, false).unwrap(), Demo::new(8, 12, 1.0, 16).unwrap().voxel(3, false).unwrap());
    assert_eq!(a.n_trials(), 12);
    assert_eq!(a.onsets()[1] - a.onsets()[0], 4.0);
    assert_eq!(a.image(0).unwrap().len(), 16 * 16 * 3);
    assert_eq!(a.mask(0).unwrap().len(), 16 * 16);
    let z = a.voxel(a.responsive_voxel(), true).unwrap();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    assert!(mean.abs() < 1e-9, "preprocessed trace is z-scored");
}

#[test]
fn bad_arguments_are_errors() {
    assert!(Demo::new(1, 0, 1.0, 16).is_err());
    assert!(Demo::new(1, 5, 1.0, 4).is_err());
    let d = Demo::new(1, 5, 1.0, 16).unwrap();
    assert!(d.image(5).is_err());
    assert!(d.voxel(d.n_voxels(), false).is_err());
    assert!(d.noised(0, 1000, 0.1).is_err());
    assert!(d.window(0, 3.0, 8.0, -30.0).is_err(), "window before the run start");
}

#[test]
fn window_matches_epoch_and_shifts_by_whole_volumes() {
    let d = Demo::new(3, 20, 1.0, 16).unwrap();
    let w = d.window(8, 3.0, 8.0, 0.0).unwrap();
    assert_eq!(w[1], 6.0);
    assert_eq!(d.epoch(8, 3.0, 8.0, 0.0).unwrap().len(), d.n_voxels() * 6);
    let shifted = d.window(8, 3.0, 8.0, 3.0 * TR).unwrap();
    assert!((shifted[0] - w[0] - 3.0).abs() <= 1.0);
}

#[test]
fn current_trial_dominates_the_default_window() {
    let d = Demo::new(3, 20, 0.0, 16).unwrap();
    let rows = d.window_content(8, 3.0, 8.0, 0.0).unwrap();
    let share = |k: f64| rows.chunks(2).find(|r| r[0] == k).map(|r| r[1]).unwrap();
    assert!(share(0.0) > share(-2.0) && share(0.0) > share(2.0));
    // shifting back three volumes brings the previous trial forward
    let back = d.window_content(8, 3.0, 8.0, -3.0 * TR).unwrap();
    let back_share = |k: f64| back.chunks(2).find(|r| r[0] == k).map(|r| r[1]).unwrap();
    assert!(back_share(-1.0) > share(-1.0));
}

#[test]
fn forward_noise_goes_from_image_to_noise() {
    let d = Demo::new(5, 4, 1.0, 16).unwrap();
    let img = d.image(1).unwrap();
    let at = |t| d.noised(1, t, 0.1).unwrap();
    let dist = |x: &[f32]| x.iter().zip(&img).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / img.len() as f64;
    assert!(dist(&at(0)) < 0.02);
    assert!(dist(&at(999)) > 0.2);
    assert_eq!(at(500), at(500));
    assert!(d.signal_level(0) > 0.99 && d.signal_level(999) < 0.01);
}

#[test]
fn hrf_peaks_near_five_seconds() {
    let h = hrf_curve(30.0, 0.1);
    let peak = h.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as f64 * 0.1;
    assert!((4.5..=5.5).contains(&peak), "{peak}");
}
