//! Independent oracles for gradients, Gram matrices, Hessians, closed forms
//! and the population-loss kernel, plus frozen reference values.

mod common;

use common::*;
use nalgebra::DMatrix;
use relu_dynamics::certificates::{self as cert, BudgetRegime};
use relu_dynamics::linalg;
use relu_dynamics::losses::{self, BaseLoss, LossFamily};
use relu_dynamics::models::{self, Network, TrainedLayers, Variant};
use relu_dynamics::prm::{self, TeacherStudentConfig};
use relu_dynamics::rng::Rng;
use relu_dynamics::training;

const VARIANTS: [Variant; 2] = [Variant::BinaryNoBias, Variant::MultiBias];

fn draw(variant: Variant, loss: &LossFamily, rng: &mut Rng, n: usize, d: usize, m: usize) -> (Network, relu_dynamics::datasets::LabeledDataset) {
    loop {
        let ds = random_dataset(variant, n, d, 3, rng);
        let net = random_net(variant, m, d, 3, rng);
        if kink_free(&net, &ds, loss, 1e-3) {
            return (net, ds);
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    for variant in VARIANTS {
        for key in LOSS_KEYS {
            let loss = family(key);
            let mut rng = Rng::new(11);
            let mut worst = 0.0f64;
            for _ in 0..50 {
                let (net, ds) = draw(variant, &loss, &mut rng, 6, 5, 8);
                let g = analytic_gradient(&net, &ds, &loss);
                let fd = fd_gradient(&net, &ds, &loss, 1e-6);
                worst = worst.max(rel_err(&g, &fd));
            }
            assert!(worst <= 1e-5, "{variant:?}/{key}: relative error {worst:e}");
        }
    }
}

#[test]
fn frozen_layers_get_zero_gradient() {
    let mut rng = Rng::new(3);
    for variant in VARIANTS {
        let loss = family("logistic");
        let (net, ds) = draw(variant, &loss, &mut rng, 6, 4, 5);
        let full = analytic_gradient(&net, &ds, &loss);
        let inner = models::evaluate(&net, &ds, &loss, None, TrainedLayers::InputOnly).unwrap().grad;
        let off = net.b_offset();
        // The input layer is B plus the bias c of the multi-output net.
        for q in 0..full.len() {
            if q >= off {
                assert_eq!(inner[q], full[q]);
            } else {
                assert_eq!(inner[q], 0.0, "parameter {q} should be frozen");
            }
        }
    }
}

#[test]
fn gram_matrix_matches_fd_jacobian() {
    let mut rng = Rng::new(5);
    for variant in VARIANTS {
        let loss = family("quadratic");
        for _ in 0..5 {
            let (net, ds) = draw(variant, &loss, &mut rng, 6, 4, 7);
            let jac = fd_output_jacobian(&net, &ds, 1e-6);
            let want = &jac * jac.transpose();
            let got = cert::gram_matrix(&net, &ds).unwrap();
            assert_eq!(got.shape(), want.shape());
            let err = (&got - &want).abs().max();
            assert!(err < 1e-7 * want.abs().max().max(1.0), "{variant:?}: gram error {err:e}");
        }
    }
}

#[test]
fn hessian_matches_fd_of_gradient() {
    let mut rng = Rng::new(9);
    for variant in VARIANTS {
        for key in LOSS_KEYS {
            let loss = family(key);
            let (net, ds) = draw(variant, &loss, &mut rng, 6, 4, 5);
            let h = models::hessian_loss(&net, &ds, &loss, TrainedLayers::All).unwrap();
            let p0 = net.params();
            let np = p0.len();
            let mut fd = DMatrix::zeros(np, np);
            let step = 1e-6;
            let mut p = p0.clone();
            for q in 0..np {
                p[q] = p0[q] + step;
                let up = analytic_gradient(&net.with_params(&p).unwrap(), &ds, &loss);
                p[q] = p0[q] - step;
                let dn = analytic_gradient(&net.with_params(&p).unwrap(), &ds, &loss);
                p[q] = p0[q];
                for r in 0..np {
                    fd[(r, q)] = (up[r] - dn[r]) / (2.0 * step);
                }
            }
            let scale = fd.abs().max().max(1.0);
            let err = (&h - &fd).abs().max();
            assert!(err <= 1e-5 * scale, "{variant:?}/{key}: Hessian error {err:e}");

            let hb = models::hessian_loss(&net, &ds, &loss, TrainedLayers::InputOnly).unwrap();
            let off = net.b_offset();
            let nb = net.m() * net.d();
            let block = h.view((off, off), (nb, nb)).into_owned();
            assert!((hb - block).abs().max() < 1e-12, "{variant:?}/{key}: input-layer block");
        }
    }
}

#[test]
fn input_only_reduction_matches_dense_norm() {
    let mut rng = Rng::new(21);
    for key in ["quadratic", "exp", "logistic"] {
        let loss = family(key);
        for _ in 0..3 {
            let (net, ds) = draw(Variant::BinaryNoBias, &loss, &mut rng, 8, 5, 6);
            let dense = linalg::spectral_norm_sym(&models::hessian_loss(&net, &ds, &loss, TrainedLayers::InputOnly).unwrap());
            let reduced = cert::input_only_hessian_norm(&net, &ds, &loss).unwrap();
            assert!((dense - reduced).abs() <= 1e-10 * dense.max(1e-12), "{key}: {dense} vs {reduced}");
        }
    }
}

#[test]
fn multi_gram_certificate_agrees_with_dense_gram() {
    let mut rng = Rng::new(17);
    for trial in 0..6 {
        let ds = random_dataset(Variant::MultiBias, 8, 5, 3, &mut rng);
        let Network::Multi(mut mn) = random_net(Variant::MultiBias, 12, 5, 3, &mut rng) else { unreachable!() };
        mn.a.iter_mut().for_each(|v| *v = v.abs());
        let net = Network::Multi(mn);
        let g = cert::gram_matrix(&net, &ds).unwrap();
        let mut entries: Vec<f64> = g.iter().copied().collect();
        entries.sort_by(f64::total_cmp);
        let thr = entries[entries.len() * (trial + 1) / 8];
        let exact = cert::check_gram_entries_at_least(&g, thr);
        let fast = cert::multi_gram_certificate(&net, &ds, thr).unwrap();
        assert_eq!(fast.failures, exact.failures, "threshold {thr}");
        assert_eq!(fast.pass(), exact.pass());
    }
}

#[test]
fn multi_gram_certificate_rejects_negative_output_weights() {
    let mut rng = Rng::new(2);
    let ds = random_dataset(Variant::MultiBias, 4, 3, 3, &mut rng);
    let net = random_net(Variant::MultiBias, 6, 3, 3, &mut rng);
    assert!(cert::multi_gram_certificate(&net, &ds, 1.0).is_err());
}

#[test]
fn tstar_values_are_frozen_and_match_the_oracle() {
    assert_eq!(training::tstar(0.01, Variant::BinaryNoBias), 44);
    let multi: Vec<u64> = [0.01, 0.005, 0.002, 0.001].iter().map(|&e| training::tstar(e, Variant::MultiBias)).collect();
    assert_eq!(multi, vec![34, 69, 173, 346]);
    for k in 1..200 {
        let eta = k as f64 * 1e-4;
        assert_eq!(training::tstar(eta, Variant::BinaryNoBias), tstar_oracle(eta, 6.0), "η = {eta}");
        assert_eq!(training::tstar(eta, Variant::MultiBias), tstar_oracle(eta, 4.0), "η = {eta}");
    }
}

#[test]
fn exp_hitting_time_is_frozen() {
    assert_eq!(training::exp_hitting_time_te(0.01, 40, 4096, 0.01, Variant::BinaryNoBias), Some(46));
}

#[test]
fn lemma_a9_closed_form() {
    let v = cert::lemma_a9_sum(0.01, 44);
    assert!((v - 0.19659127915806962).abs() <= 1e-14, "{v:.17}");
    assert!((v - a9_oracle(0.01, 44)).abs() <= 1e-14);
    assert!((v - cert::lemma_a9_sum_brute(0.01, 44)).abs() <= 1e-14);
    for (eta, t) in [(0.005, 89), (0.002, 223), (0.02, 22), (0.01, 2), (0.01, 10)] {
        let c = cert::lemma_a9_sum(eta, t);
        let o = a9_oracle(eta, t);
        assert!((c - o).abs() <= 1e-13 * o.abs().max(1.0), "η={eta} T={t}: {c} vs {o}");
    }
    assert_eq!(cert::lemma_a9_sum(0.01, 1), 0.0);
}

#[test]
fn scalar_constants() {
    assert_eq!(cert::descent_bound_theorem2(), 0.262533);
    assert_eq!(cert::STOCHASTIC_INNER_BOUND, 0.9801);
    assert_eq!(cert::kappa_theorem2(0.01, 64), 0.01 / 192.0);
    assert_eq!(cert::kappa_theorem1(0.01, 40, 1.0), 0.01 / 2000.0);
    let b = cert::probability_budget(BudgetRegime::Binary, 0.01, 4096, 30, None);
    assert!((b.exponential_terms() - 8192.0 * (-60.0f64).exp()).abs() < 1e-40);
    assert!(!b.vacuous);
    let mb = cert::probability_budget(BudgetRegime::MultiClass, 0.01, 200, 784, Some(64));
    assert!((mb.batch_term - 200.0 * 0.17f64.powi(64)).abs() < 1e-60);
}

#[test]
fn loss_constants_hold_on_a_grid() {
    for base in [BaseLoss::Exp, BaseLoss::Logistic, BaseLoss::Hinge] {
        let c = losses::verify_general_constants(&LossFamily::general(base), 20_001).unwrap();
        assert!(c.pass, "{base:?}: {:?}", c.slacks);
    }
    for base in [BaseLoss::Exp, BaseLoss::Logistic] {
        let c = losses::verify_exptype_constants(&LossFamily::exp_type(base).unwrap(), 20.0, 20_001).unwrap();
        assert!(c.pass, "{base:?}: {:?}", c.slacks);
    }
    assert!(LossFamily::exp_type(BaseLoss::Hinge).is_err());
    let loose = LossFamily::ExpType { g_a: 0.6, g_b: 1.0, h: 1.0, base: BaseLoss::Logistic };
    assert!(losses::verify_exptype_constants(&loose, 20.0, 20_001).unwrap().pass);
    let tight = LossFamily::ExpType { g_a: 0.75, g_b: 1.0, h: 1.0, base: BaseLoss::Logistic };
    assert!(!losses::verify_exptype_constants(&tight, 20.0, 20_001).unwrap().pass);
}

#[test]
fn loss_derivatives_match_differences() {
    let mut rng = Rng::new(4);
    for base in [BaseLoss::Exp, BaseLoss::Logistic, BaseLoss::Hinge] {
        for _ in 0..200 {
            let z = 6.0 * rng.uniform() - 3.0;
            if (z - 1.0).abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            let d1 = (base.eval(z + h) - base.eval(z - h)) / (2.0 * h);
            let d2 = (base.deriv(z + h) - base.deriv(z - h)) / (2.0 * h);
            assert!((d1 - base.deriv(z)).abs() < 1e-8, "{base:?} ℓ′({z})");
            assert!((d2 - base.second_deriv(z)).abs() < 1e-6, "{base:?} ℓ″({z})");
        }
    }
}

fn prm_cfg(seed: u64) -> TeacherStudentConfig {
    TeacherStudentConfig { d: 10, m: 10, big_m: 10, kappa: 0.1, eta: prm::eta_bound(10, 10, 10, 0.1), seed, steps: 6 }
}

#[test]
fn prm_reference_values() {
    let cfg = prm_cfg(0);
    assert!((cfg.eta - 0.004021801828985618).abs() < 1e-17);
    assert_eq!(prm::tstar_prm(&cfg), Some(5));
    assert!((prm::tstar_prm_closed_form(&cfg) - 6.000449).abs() < 1e-6);
    let te = prm::teacher_energy(&cfg);
    assert!((te - 0.0966197243913530).abs() < 1e-15);
    // Orthogonal teacher rows of norm 1/M.
    let mf = 10.0;
    let oracle = 1.0 / (4.0 * mf) + (mf - 1.0) / (4.0 * std::f64::consts::PI * mf);
    assert!((te - oracle).abs() < 1e-15);
    
}

fn random_student(rng: &mut Rng, m: usize, d: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, d, |_, _| scale * rng.normal())
}

#[test]
fn arccos_kernel_matches_oracle() {
    let mut rng = Rng::new(8);
    for _ in 0..200 {
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let k = prm::arccos_kernel(&w, &v).unwrap();
        assert!((k - kernel_oracle(&w, &v)).abs() < 1e-13);
        assert!((k - prm::arccos_kernel(&v, &w).unwrap()).abs() < 1e-15);
        let g = prm::kernel_grad_w(&w, &v).unwrap();
        for j in 0..6 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += 1e-6;
            wm[j] -= 1e-6;
            let fd = (kernel_oracle(&wp, &v) - kernel_oracle(&wm, &v)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7, "∂k/∂w_{j}: {} vs {fd}", g[j]);
        }
    }
    let w = [0.3, -0.4, 1.2];
    let self_g = prm::kernel_self_grad(&w);
    for j in 0..3 {
        assert!((self_g[j] - w[j]).abs() < 1e-15);
    }
    assert!((prm::arccos_kernel(&w, &w).unwrap() - 0.5 * (0.09 + 0.16 + 1.44)).abs() < 1e-15);
}

#[test]
fn population_loss_and_gradient_match_oracles() {
    let cfg = prm_cfg(1);
    let v = prm::teacher(&cfg);
    let mut rng = Rng::new(12);
    for _ in 0..10 {
        let w = random_student(&mut rng, 10, 10, 0.1);
        let rows = |a: &DMatrix<f64>, i: usize| a.row(i).iter().copied().collect::<Vec<f64>>();
        let mut oracle = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                oracle += 0.5 * kernel_oracle(&rows(&w, i), &rows(&w, j)) - kernel_oracle(&rows(&w, i), &rows(&v, j))
                    + 0.5 * kernel_oracle(&rows(&v, i), &rows(&v, j));
            }
        }
        let l = prm::population_loss(&w, &cfg).unwrap();
        assert!((l - oracle).abs() < 1e-13, "{l} vs {oracle}");

        let g = prm::population_grad(&w, &cfg).unwrap();
        let mut wp = w.clone();
        for k in 0..10 {
            for j in 0..10 {
                let x0 = w[(k, j)];
                wp[(k, j)] = x0 + 1e-6;
                let up = prm::population_loss(&wp, &cfg).unwrap();
                wp[(k, j)] = x0 - 1e-6;
                let dn = prm::population_loss(&wp, &cfg).unwrap();
                wp[(k, j)] = x0;
                let fd = (up - dn) / 2e-6;
                assert!((fd - g[(k, j)]).abs() < 1e-7 * g.abs().max().max(1e-3));
            }
        }
        let lhs: f64 = w.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs = prm::homogeneity_rhs(&w, &cfg).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300), "{lhs} vs {rhs}");
    }
}

#[test]
fn monte_carlo_agrees_with_closed_form() {
    let cfg = prm_cfg(2);
    let mut rng = Rng::new(13);
    for s in 0..3 {
        let w = random_student(&mut rng, 10, 10, 0.2);
        let exact = prm::population_loss(&w, &cfg).unwrap();
        let mc = prm::monte_carlo_loss(&w, &cfg, 200_000, s).unwrap();
        assert!((mc.mean - exact).abs() <= 4.0 * mc.std_error, "{} ± {} vs {exact}", mc.mean, mc.std_error);
        assert_eq!(mc.samples, 200_000);
    }
}

#[test]
fn prm_descent_bound_is_frozen() {
    let b = prm::prm_descent_bound(10, 10, 0.1);
    // Two-term bound written out for d = M = 10, κ = 0.1.
    let pi = std::f64::consts::PI;
    let s2 = 0.9f64;
    let q = 1.0 - 0.1 * pi;
    let want = 0.1 * q / (4.0 * pi) * s2 + q.powi(3) / (8.0 * (pi + 1.0) * pi * pi * (1.0 + 1.0 / (pi * s2.sqrt()))) * s2.powf(1.5);
    assert!((b - want).abs() < 1e-16, "{b} vs {want}");
}
