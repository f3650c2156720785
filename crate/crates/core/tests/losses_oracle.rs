mod common;

use conquer::losses::{pinball, smoothed_grad, smoothed_loss};
use conquer::{KernelKind, LossSpec, Rng};

fn random_case(rng: &mut Rng) -> (f64, f64, KernelKind, f64) {
    let kernel = KernelKind::ALL[(rng.uniform() * 3.0) as usize % 3];
    let tau = 0.01 + 0.98 * rng.uniform();
    let h = 10f64.powf(-3.0 + 3.0 * rng.uniform());
    let u = if rng.uniform() < 0.8 {
        h * (6.0 * rng.uniform() - 3.0)
    } else {
        20.0 * rng.uniform() - 10.0
    };
    (u, tau, kernel, h)
}

#[test]
fn closed_form_matches_quadrature() {
    let mut rng = Rng::new(101);
    for _ in 0..300 {
        let (u, tau, kernel, h) = random_case(&mut rng);
        let spec = LossSpec::smoothed(tau, kernel, h).unwrap();
        let exact = common::smoothed_loss_quadrature(u, tau, kernel, h);
        let got = smoothed_loss(u, &spec).unwrap();
        assert!(
            (got - exact).abs() <= 1e-8 * u.abs().max(1.0),
            "{kernel:?} u={u} tau={tau} h={h}: {got} vs {exact}"
        );
    }
}

#[test]
fn gradient_matches_differences_and_quadrature() {
    let mut rng = Rng::new(202);
    for _ in 0..300 {
        let (u, tau, kernel, h) = random_case(&mut rng);
        let spec = LossSpec::smoothed(tau, kernel, h).unwrap();
        let g = smoothed_grad(u, &spec).unwrap();
        let fd = common::central_diff(|v| smoothed_loss(v, &spec).unwrap(), u, 1e-5 * h);
        assert!((g - fd).abs() <= 1e-6, "{kernel:?} u={u} h={h}: {g} vs {fd}");
        // ℓ′(u) = τ − P(Z < −u/h)
        let r = if kernel == KernelKind::Gaussian { 40.0 } else { 1.0 };
        let t = (-u / h).clamp(-r, r);
        let mass = common::integrate_pieces(|z| common::density(kernel, z), &[-r, t.min(-1.0).max(-r), t], 1e-14);
        assert!((g - (tau - mass)).abs() <= 1e-8, "{kernel:?} u={u} h={h}");
    }
}

#[test]
fn smoothing_never_undercuts_check_loss() {
    // ρ_τ is convex and the kernels are centered, so ℓ_h ≥ ρ_τ.
    let mut rng = Rng::new(303);
    for _ in 0..2000 {
        let (u, tau, kernel, h) = random_case(&mut rng);
        let spec = LossSpec::smoothed(tau, kernel, h).unwrap();
        assert!(smoothed_loss(u, &spec).unwrap() >= pinball(u, tau) - 1e-15);
    }
}

#[test]
fn smaller_bandwidth_tracks_check_loss_closer() {
    for kernel in KernelKind::ALL {
        let gap = |h: f64| {
            let spec = LossSpec::smoothed(0.5, kernel, h).unwrap();
            (0..=4000)
                .map(|i| -1.0 + i as f64 / 2000.0)
                .map(|u| smoothed_loss(u, &spec).unwrap() - pinball(u, 0.5))
                .fold(0.0f64, f64::max)
        };
        let (g4, g2, g1) = (gap(0.4), gap(0.2), gap(0.1));
        assert!(g4 > g2 && g2 > g1, "{kernel:?}: {g4} {g2} {g1}");
        // The largest gap sits at u = 0 and equals h·E|Z|/2.
        let r = if kernel == KernelKind::Gaussian { 40.0 } else { 1.0 };
        let half_mean_abs =
            common::integrate_pieces(|z| z.abs() * common::density(kernel, z), &[-r, 0.0, r], 1e-14) / 2.0;
        assert!((g2 - 0.2 * half_mean_abs).abs() < 1e-12, "{kernel:?} {g2} {}", 0.2 * half_mean_abs);
    }
}

#[test]
fn compact_kernels_agree_with_check_loss_outside_support() {
    for kernel in [KernelKind::Uniform, KernelKind::Epanechnikov] {
        for &h in &[0.4, 0.2, 0.1] {
            let spec = LossSpec::smoothed(0.5, kernel, h).unwrap();
            for i in 0..=2000 {
                let u = -1.0 + i as f64 / 1000.0;
                if u.abs() > h {
                    assert_eq!(smoothed_loss(u, &spec).unwrap(), pinball(u, 0.5));
                }
            }
        }
    }
}
