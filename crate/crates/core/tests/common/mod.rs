//! Helpers shared by the oracle tests and the acceptance suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use relu_dynamics::datasets::{LabeledDataset, Labels};
use relu_dynamics::losses::{BaseLoss, LossFamily};
use relu_dynamics::models::{self, BinaryNet, MultiNet, Network, TrainedLayers, Variant};
use relu_dynamics::rng::Rng;

pub const LOSS_KEYS: [&str; 4] = ["quadratic", "exp", "logistic", "hinge"];

pub fn family(key: &str) -> LossFamily {
    LossFamily::from_key(key).unwrap()
}

/// Unit-norm rows; binary labels are +1 for the first half.
pub fn random_dataset(variant: Variant, n: usize, d: usize, classes: usize, rng: &mut Rng) -> LabeledDataset {
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let u = rng.unit_sphere(d);
        for j in 0..d {
            x[(i, j)] = u[j];
        }
    }
    let labels = match variant {
        Variant::BinaryNoBias => Labels::Binary((0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect()),
        Variant::MultiBias => Labels::OneHot { classes, index: (0..n).map(|i| i % classes).collect() },
    };
    LabeledDataset::new(x, labels, "test").unwrap()
}

/// Net with O(1) preactivations and outputs of order one.
pub fn random_net(variant: Variant, m: usize, d: usize, classes: usize, rng: &mut Rng) -> Network {
    let b = DMatrix::from_fn(m, d, |_, _| rng.normal());
    match variant {
        Variant::BinaryNoBias => {
            let a = DVector::from_fn(m, |_, _| rng.normal() / (m as f64).sqrt());
            Network::Binary(BinaryNet { a, b })
        }
        Variant::MultiBias => {
            let a = DMatrix::from_fn(m, classes, |_, _| rng.normal() / (m as f64).sqrt());
            let c = DVector::from_fn(m, |_, _| 0.5 * rng.normal());
            Network::Multi(MultiNet { a, b, c })
        }
    }
}

/// True when every preactivation and (for the hinge) every margin is at
/// least `tol` away from its kink.
pub fn kink_free(net: &Network, ds: &LabeledDataset, loss: &LossFamily, tol: f64) -> bool {
    let pass = net.forward_dataset(ds).unwrap();
    if pass.pre.iter().any(|z| z.abs() < tol) {
        return false;
    }
    if loss.base() == Some(BaseLoss::Hinge) {
        let z = models::margins_from_outputs(&pass.out, &ds.targets());
        if z.iter().any(|z| (z - 1.0).abs() < tol) {
            return false;
        }
    }
    true
}

pub fn loss_at(net: &Network, p: &[f64], ds: &LabeledDataset, loss: &LossFamily) -> f64 {
    models::loss_value(&net.with_params(p).unwrap(), ds, loss).unwrap()
}

/// Central differences of the average loss.
pub fn fd_gradient(net: &Network, ds: &LabeledDataset, loss: &LossFamily, h: f64) -> Vec<f64> {
    let p0 = net.params();
    let mut g = vec![0.0; p0.len()];
    let mut p = p0.clone();
    for q in 0..p0.len() {
        p[q] = p0[q] + h;
        let up = loss_at(net, &p, ds, loss);
        p[q] = p0[q] - h;
        let dn = loss_at(net, &p, ds, loss);
        p[q] = p0[q];
        g[q] = (up - dn) / (2.0 * h);
    }
    g
}

pub fn analytic_gradient(net: &Network, ds: &LabeledDataset, loss: &LossFamily) -> Vec<f64> {
    models::evaluate(net, ds, loss, None, TrainedLayers::All).unwrap().grad
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Jacobian of the outputs with respect to the parameters by central
/// differences; row iC + α is ∇f_α(x_i).
pub fn fd_output_jacobian(net: &Network, ds: &LabeledDataset, h: f64) -> DMatrix<f64> {
    let p0 = net.params();
    let (n, c) = (ds.n(), net.outputs());
    let mut jac = DMatrix::zeros(n * c, p0.len());
    let mut p = p0.clone();
    for q in 0..p0.len() {
        p[q] = p0[q] + h;
        let up = net.with_params(&p).unwrap().forward_dataset(ds).unwrap().out;
        p[q] = p0[q] - h;
        let dn = net.with_params(&p).unwrap().forward_dataset(ds).unwrap().out;
        p[q] = p0[q];
        for i in 0..n {
            for a in 0..c {
                jac[(i * c + a, q)] = (up[(i, a)] - dn[(i, a)]) / (2.0 * h);
            }
        }
    }
    jac
}

/// E[σ(wᵀx)σ(vᵀx)] for x ~ N(0, I), written out from the angle between w and v.
pub fn kernel_oracle(w: &[f64], v: &[f64]) -> f64 {
    let nw = norm(w);
    let nv = norm(v);
    if nw == 0.0 || nv == 0.0 {
        return 0.0;
    }
    let cos = (w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nw * nv)).clamp(-1.0, 1.0);
    let th = cos.acos();
    nw * nv * (th.sin() + (std::f64::consts::PI - th) * cos) / (2.0 * std::f64::consts::PI)
}

/// ⌊ln k/(4η)⌋ computed independently of the library.
pub fn tstar_oracle(eta: f64, k: f64) -> u64 {
    (k.ln() / (4.0 * eta)).floor() as u64
}

/// Σ_{t=1}^{T−1} η(1 − φ(t))² term by term in extended form.
pub fn a9_oracle(eta: f64, t_star: u64) -> f64 {
    let mut s = 0.0f64;
    let mut comp = 0.0f64;
    for t in 1..t_star {
        let t2 = 2.0 * t as f64;
        let phi = 251001.0 / 1.5e6 * ((1.0 + 2.0 * eta).powf(t2) - (1.0 - 2.0 * eta).powf(t2));
        let term = eta * (1.0 - phi) * (1.0 - phi);
        let y = term - comp;
        let tmp = s + y;
        comp = (tmp - s) - y;
        s = tmp;
    }
    s
}
