use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textrec_augment::{
    augment_image, displace, make_fiducials, sample_theta, theta_from_mu, tps_solve, AugmentOptions, Mode, Point,
};
use textrec_core::io::GrayImage;

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..128.0), rng.random_range(0.0..32.0)))
        .collect()
}

#[test]
fn random_twenty_point_fit_interpolates() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..50 {
        let src = random_points(&mut rng, 20);
        let dst: Vec<Point> = src
            .iter()
            .map(|p| Point::new(p.x + rng.random_range(-6.0..6.0), p.y + rng.random_range(-6.0..6.0)))
            .collect();
        let t = tps_solve(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let m = t.map(*s);
            assert!((m.x - d.x).abs() < 1e-8 && (m.y - d.y).abs() < 1e-8, "residual at {s:?}");
        }
        // side conditions: kernel weights carry no constant or linear part
        for c in 0..2 {
            let s0: f64 = t.weights.iter().map(|w| w[c]).sum();
            let sx: f64 = t.weights.iter().zip(&src).map(|(w, p)| w[c] * p.x).sum();
            let sy: f64 = t.weights.iter().zip(&src).map(|(w, p)| w[c] * p.y).sum();
            assert!(s0.abs() < 1e-9 && sx.abs() < 1e-7 && sy.abs() < 1e-7);
        }
    }
}

#[test]
fn translation_is_pure_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = random_points(&mut rng, 12);
    let dst: Vec<Point> = src.iter().map(|p| Point::new(p.x + 3.5, p.y - 1.25)).collect();
    let t = tps_solve(&src, &dst).unwrap();
    assert!(t.weights.iter().flatten().all(|w| w.abs() < 1e-9));
    let want = [[3.5, 1.0, 0.0], [-1.25, 0.0, 1.0]];
    for r in 0..2 {
        for c in 0..3 {
            assert!((t.affine[r][c] - want[r][c]).abs() < 1e-9);
        }
    }
}

#[test]
fn one_pixel_translation_moves_a_delta() {
    let mut data = vec![0u8; 16 * 8];
    data[3 * 16 + 5] = 200;
    let img = GrayImage::new(16, 8, data).unwrap();
    let f = make_fiducials(15.0, 7.0, 3).unwrap();
    let src = f.points();
    let dst: Vec<Point> = src.iter().map(|p| Point::new(p.x + 1.0, p.y)).collect();
    // backward map: output position -> input position
    let back = tps_solve(&dst, &src).unwrap();
    let out = textrec_augment::tps_warp(&img, &back, 16, 8).unwrap();
    assert_eq!(out.get(6, 3), 200);
    assert_eq!(out.data.iter().filter(|&&v| v != 0).count(), 1);
}

fn test_image() -> GrayImage {
    GrayImage::new(48, 12, (0..48 * 12).map(|i| ((i * 37) % 251) as u8).collect()).unwrap()
}

proptest! {
    #[test]
    fn theta_never_positive(seed in any::<u64>(), s in 1u32..=6, n in 1usize..16, w in 8.0f64..256.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(sample_theta(w, n, s, &mut rng).unwrap() <= 0.0);
    }

    #[test]
    fn theta_magnitude_monotone(mu_frac in 0.0f64..=1.0, n in 1usize..16, w in 8.0f64..256.0) {
        let mu = mu_frac * w / (4 * n) as f64;
        let mags: Vec<f64> = (1..=6).map(|s| theta_from_mu(mu, w, n, s).unwrap().abs()).collect();
        prop_assert!(mags.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn modes_move_points_as_specified(x in -50.0f64..200.0, y in -50.0f64..50.0, theta in -20.0f64..=0.0) {
        let p = Point::new(x, y);
        let ha = displace(p, theta, Mode::Ha).unwrap();
        prop_assert_eq!(ha.y, y);
        prop_assert_eq!(ha.x, x + theta);
        let ca = displace(p, theta, Mode::Ca).unwrap();
        prop_assert!(((ca.x - x).abs() - (ca.y - y).abs()).abs() < 1e-12);
        prop_assert!(ca.x <= x);
    }

    #[test]
    fn augmentation_deterministic(seed in any::<u64>(), s in 1u32..=6, ca in any::<bool>()) {
        let opts = AugmentOptions { mode: if ca { Mode::Ca } else { Mode::Ha }, intensity: s, n: 9, seed: 0 };
        let a = augment_image(&test_image(), &opts, seed).unwrap();
        let b = augment_image(&test_image(), &opts, seed).unwrap();
        prop_assert_eq!(a.image.encode(), b.image.encode());
        for (src, dst) in a.source.iter().zip(&a.moved) {
            let fit = tps_solve(&a.moved, &a.source).unwrap().map(*dst);
            prop_assert!((fit.x - src.x).abs() < 1e-6 && (fit.y - src.y).abs() < 1e-6);
        }
    }

    #[test]
    fn ladder_displacement_grows(seed in any::<u64>()) {
        let img = test_image();
        let mut prev: Option<Vec<f64>> = None;
        for s in 1..=6 {
            let opts = AugmentOptions { mode: Mode::Ha, intensity: s, n: 9, seed: 0 };
            let mags: Vec<f64> = augment_image(&img, &opts, seed).unwrap().thetas.iter().map(|t| t.abs()).collect();
            if let Some(p) = &prev {
                prop_assert!(p.iter().zip(&mags).all(|(a, b)| a <= b));
            }
            prev = Some(mags);
        }
    }
}
