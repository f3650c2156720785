//! Reference computations shared by the integration tests. The oracles never
//! call the library's own loss, CDF or forward-pass code; `gradcheck` only
//! calls the library for the analytic gradients it is checking.
#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

use conquer::{KernelKind, MlpModel};

fn simpson_rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `eps`. Starts from 16
/// panels so a narrow peak cannot hide between the first samples.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, eps: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    const PANELS: usize = 16;
    let w = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let lo = a + i as f64 * w;
            let hi = if i + 1 == PANELS { b } else { lo + w };
            let (fa, fb, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson_rec(&f, lo, hi, fa, fm, fb, whole, eps / PANELS as f64, 50)
        })
        .sum()
}

/// Integrates over consecutive breakpoints with the tolerance split evenly.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, points: &[f64], eps: f64) -> f64 {
    let k = (points.len() - 1) as f64;
    points.windows(2).map(|w| integrate(&f, w[0], w[1], eps / k)).sum()
}

pub fn check(u: f64, tau: f64) -> f64 {
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

pub fn density(kernel: KernelKind, z: f64) -> f64 {
    match kernel {
        KernelKind::Gaussian => (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        KernelKind::Uniform => {
            if z.abs() <= 1.0 {
                0.5
            } else {
                0.0
            }
        }
        KernelKind::Epanechnikov => {
            if z.abs() <= 1.0 {
                0.75 * (1.0 - z * z)
            } else {
                0.0
            }
        }
    }
}

/// `∫ ρ_τ(u + h·z) K(z) dz` by quadrature, split at the kink `z = −u/h`.
/// The Gaussian is truncated at ±40, far below double precision.
pub fn smoothed_loss_quadrature(u: f64, tau: f64, kernel: KernelKind, h: f64) -> f64 {
    let r = if kernel == KernelKind::Gaussian { 40.0 } else { 1.0 };
    let mut pts = vec![-r, r];
    if kernel == KernelKind::Gaussian {
        pts.extend([-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0]);
    }
    let kink = -u / h;
    if kink > -r && kink < r {
        pts.push(kink);
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let scale = 1.0 + u.abs();
    integrate_pieces(|z| check(u + h * z, tau) * density(kernel, z), &pts, 1e-13 * scale)
}

pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Standard normal CDF by quadrature of the density.
pub fn normal_cdf(t: f64) -> f64 {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let m = integrate(phi, 0.0, t.abs(), 1e-15);
    if t >= 0.0 {
        0.5 + m
    } else {
        0.5 - m
    }
}

pub fn bisect<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn normal_quantile(p: f64) -> f64 {
    bisect(normal_cdf, p, -40.0, 40.0)
}

/// Student t CDF by quadrature of the density, for ν = 2 or 3.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    let c = if nu == 2.0 {
        1.0 / (2.0 * 2f64.sqrt())
    } else if nu == 3.0 {
        2.0 / (std::f64::consts::PI * 3f64.sqrt())
    } else {
        panic!("oracle covers ν = 2, 3")
    };
    let pdf = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let a = t.abs();
    let mut pts = vec![0.0];
    let mut e = 0.5;
    while e < a {
        pts.push(e);
        e *= 2.0;
    }
    pts.push(a);
    let m = integrate_pieces(pdf, &pts, 1e-14);
    if t >= 0.0 {
        0.5 + m
    } else {
        0.5 - m
    }
}

pub fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

/// Naive forward pass over the model's parameters with explicit loops.
/// Returns the outputs (row-major, `n × outputs`) and every hidden
/// pre-activation, so callers can detect ReLU kinks.
pub fn naive_forward(model: &MlpModel, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let arch = model.architecture();
    let layers = &model.params().layers;
    let mut pre_all = Vec::new();
    let out = x
        .iter()
        .map(|row| {
            let mut h = row.clone();
            for (i, layer) in layers.iter().enumerate() {
                let (n_out, n_in) = layer.weights.dim();
                let mut z = vec![0.0; n_out];
                for (o, zo) in z.iter_mut().enumerate() {
                    let mut s = layer.bias[o];
                    for k in 0..n_in {
                        s += layer.weights[[o, k]] * h[k];
                    }
                    *zo = s;
                }
                if i + 1 == layers.len() {
                    return z;
                }
                pre_all.extend(&z);
                let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                h = if arch.residual && i >= 1 {
                    a.iter().zip(&h).map(|(a, h)| a + h).collect()
                } else {
                    a
                };
            }
            unreachable!()
        })
        .collect();
    (out, pre_all)
}

/// Same sign pattern, treating exact zeros as their own class.
pub fn same_signs(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.partial_cmp(&0.0) == y.partial_cmp(&0.0))
}

pub mod gradcheck {
    //! Finite-difference checks of backpropagated parameter gradients.

    use conquer::trainer::objective_and_grad;
    use conquer::{Architecture, KernelKind, LossSpec, MlpModel, Rng};
    use ndarray::Array2;

    pub const STEP: f64 = 1e-6;
    /// Rows are kept only if every pre-activation and residual is at least
    /// this far from its kink, so a ±STEP perturbation stays on one piece.
    const MARGIN: f64 = 1e-3;

    /// |a − b| / max(|a|, |b|, 1e-4); the floor keeps rounding noise on
    /// near-zero gradients from dominating.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    fn softplus(x: f64) -> f64 {
        if x > 30.0 {
            x
        } else {
            x.exp().ln_1p()
        }
    }

    /// Objective through the naive forward pass, plus every pre-activation
    /// and residual.
    pub fn objective(model: &MlpModel, x: &[Vec<f64>], y: &[f64], losses: &[LossSpec], joint: bool) -> (f64, Vec<f64>) {
        let (out, mut kinks) = super::naive_forward(model, x);
        let mut total = 0.0;
        for (row, &yi) in out.iter().zip(y) {
            let mut acc = 0.0;
            for (j, loss) in losses.iter().enumerate() {
                let f = if joint {
                    acc = if j == 0 { row[0] } else { acc + softplus(row[j]) };
                    acc
                } else {
                    row[j]
                };
                let r = yi - f;
                total += if loss.is_smoothed() { loss.value(r) } else { super::check(r, loss.tau) };
                kinks.push(r);
            }
        }
        (total / y.len() as f64, kinks)
    }

    pub fn analytic(model: &MlpModel, x: &Array2<f64>, y: &[f64], losses: &[LossSpec], joint: bool) -> Vec<f64> {
        let (out, cache) = model.forward(x.view()).unwrap();
        let (_, d_out) = objective_and_grad(&out, y, losses, joint);
        model.backward(&cache, d_out.view()).unwrap().iter().collect()
    }

    pub struct Report {
        pub worst: f64,
        pub compared: usize,
    }

    /// Draws `n` rows clear of every kink, then compares each parameter's
    /// analytic gradient with a central difference.
    pub fn check_model(model: &MlpModel, n: usize, losses: &[LossSpec], joint: bool, rng: &mut Rng) -> Report {
        let d = model.architecture().input_dim;
        let (mut rows, mut y) = (Vec::new(), Vec::new());
        let mut attempts = 0;
        while rows.len() < n {
            attempts += 1;
            assert!(attempts < 10_000 * n, "could not draw kink-free rows");
            let row: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let yi = rng.normal();
            let (_, k) = objective(model, std::slice::from_ref(&row), &[yi], losses, joint);
            if k.iter().all(|v| v.abs() > MARGIN) {
                rows.push(row);
                y.push(yi);
            }
        }
        let x = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
        let grad = analytic(model, &x, &y, losses, joint);
        let (_, k0) = objective(model, &rows, &y, losses, joint);
        let mut worst = 0.0f64;
        for (k, &g) in grad.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                *m.params_mut().iter_mut().nth(k).unwrap() += delta;
                objective(&m, &rows, &y, losses, joint)
            };
            let ((fp, kp), (fm, km)) = (shifted(STEP), shifted(-STEP));
            assert!(super::same_signs(&kp, &k0) && super::same_signs(&km, &k0), "stencil crossed a kink");
            worst = worst.max(rel_err(g, (fp - fm) / (2.0 * STEP)));
        }
        Report { worst, compared: grad.len() }
    }

    pub fn random_model(rng: &mut Rng, residual: bool, outputs: usize) -> MlpModel {
        let d = 1 + (rng.uniform() * 4.0) as usize;
        let depth = 1 + (rng.uniform() * 3.0) as usize;
        let widths: Vec<usize> = if residual {
            vec![2 + (rng.uniform() * 6.0) as usize; depth + 1]
        } else {
            (0..depth).map(|_| 2 + (rng.uniform() * 6.0) as usize).collect()
        };
        let arch = Architecture::new(d, widths, outputs).with_residual(residual);
        let mut m = MlpModel::init(&arch, rng).unwrap();
        // Non-zero biases so their gradients are exercised.
        for p in m.params_mut().iter_mut() {
            *p += 0.1 * rng.normal();
        }
        m
    }

    pub fn losses(outputs: usize, smoothed: bool) -> Vec<LossSpec> {
        let taus: &[f64] = if outputs == 1 { &[0.3] } else { &[0.2, 0.5, 0.8] };
        let kernels = [KernelKind::Gaussian, KernelKind::Uniform, KernelKind::Epanechnikov];
        taus.iter()
            .enumerate()
            .map(|(j, &t)| {
                if smoothed {
                    LossSpec::smoothed(t, kernels[j % 3], 0.5).unwrap()
                } else {
                    LossSpec::pinball(t).unwrap()
                }
            })
            .collect()
    }
}
