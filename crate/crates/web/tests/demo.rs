use dehaze_web::{Demo, MAX_SIZE, MIN_SIZE};

#[test]
fn size_is_clamped_and_buffers_match_it() {
    assert_eq!(Demo::new(0, 4).size(), MIN_SIZE);
    assert_eq!(Demo::new(0, 10_000).size(), MAX_SIZE);
    let mut d = Demo::new(3, 48);
    let n = 48 * 48 * 4;
    for buf in [d.clean_rgba(), d.depth_rgba(), d.hazy_rgba(), d.transmission_rgba(), d.dehazed_rgba()] {
        assert_eq!(buf.len(), n);
        assert!(buf.chunks(4).all(|p| p[3] == 255));
    }
    assert_eq!(d.synthesize(0.7, 0.9).len(), n);
    assert_eq!(d.recover(0.9, 0.05, 1.0).len(), n);
    assert_eq!(d.edges(1, 1).len(), 2 * n);
}

#[test]
fn exact_estimates_recover_the_scene() {
    let mut d = Demo::new(5, 64);
    d.synthesize(1.2, 0.75);
    d.recover(0.75, 0.01, 1.0);
    assert!(d.dehazed_ssim() > 0.999_999, "{}", d.dehazed_ssim());
    assert!(d.hazy_ssim() < d.dehazed_ssim());
    d.recover(0.45, 0.01, 1.0);
    assert!(d.dehazed_ssim() < 0.99);
}

#[test]
fn thicker_haze_lowers_input_similarity() {
    let mut d = Demo::new(2, 64);
    d.synthesize(0.4, 0.9);
    let light = d.hazy_ssim();
    d.synthesize(1.6, 0.9);
    assert!(d.hazy_ssim() < light);
}

#[test]
fn edge_terms_vanish_only_without_corruption() {
    let mut d = Demo::new(1, 32);
    d.edges(0, 0);
    assert_eq!(d.edge_terms(), vec![0.0; 4]);
    d.edges(2, 0);
    let shifted = d.edge_terms();
    assert!(shifted[0] > 0.0 && shifted[1] > 0.0 && shifted[3] > 0.0);
}

#[test]
fn non_finite_controls_fall_back_to_defaults() {
    let mut d = Demo::new(0, 32);
    d.synthesize(f64::NAN, f64::INFINITY);
    d.recover(f64::NAN, f64::NAN, f64::NAN);
    assert!(d.dehazed_ssim().is_finite());
}
