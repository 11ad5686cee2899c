//! Teacher-student population risk with Gaussian inputs, evaluated in closed
//! form through the arc-cosine kernel k(w;v) = E[σ(wᵀx)σ(vᵀx)].

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::CertificateReport;
use crate::error::{Error, Result};
use crate::linalg::{self, Kahan};
use crate::rng::{streams, Rng};
use crate::training::HittingTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStudentConfig {
    pub d: usize,
    /// Student width.
    pub m: usize,
    /// Teacher width.
    pub big_m: usize,
    pub kappa: f64,
    pub eta: f64,
    pub seed: u64,
    pub steps: usize,
}

impl TeacherStudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.m == 0 || self.big_m == 0 {
            return Err(Error::InvalidArgument("need d ≥ 2, m ≥ 1, M ≥ 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidArgument(format!("κ must lie in (0, 1], got {}", self.kappa)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("η must be positive, got {}", self.eta)));
        }
        Ok(())
    }

    /// √((d−1)/d)
    fn root(&self) -> f64 {
        ((self.d as f64 - 1.0) / self.d as f64).sqrt()
    }

    /// (d/(πM))√((d−1)/d), the hitting-time threshold on Σ‖w_j‖.
    pub fn norm_threshold(&self) -> f64 {
        self.d as f64 / (PI * self.big_m as f64) * self.root()
    }

    /// True when the teacher has more neurons than basis directions; the
    /// extra teacher rows are then random points on the (1/M)-sphere.
    pub fn is_extension(&self) -> bool {
        self.big_m > self.d
    }
}

/// Teacher rows v_i = e_i/M for i ≤ min(M, d); when M > d the remaining rows
/// are uniform on the sphere of radius 1/M.
pub fn teacher(cfg: &TeacherStudentConfig) -> DMatrix<f64> {
    let (d, mm) = (cfg.d, cfg.big_m);
    let r = 1.0 / mm as f64;
    let mut v = DMatrix::zeros(mm, d);
    for i in 0..mm.min(d) {
        v[(i, i)] = r;
    }
    if mm > d {
        let mut rng = Rng::stream(cfg.seed, streams::PRM_TEACHER);
        for i in d..mm {
            let u = rng.unit_sphere(d);
            for j in 0..d {
                v[(i, j)] = r * u[j];
            }
        }
    }
    v
}

fn angle(w: &[f64], v: &[f64], nw: f64, nv: f64) -> f64 {
    (linalg::dot(w, v) / (nw * nv)).clamp(-1.0, 1.0).acos()
}

/// k(w;v) = ‖w‖‖v‖(sin θ + (π − θ)cos θ)/(2π).
pub fn arccos_kernel(w: &[f64], v: &[f64]) -> Result<f64> {
    let (nw, nv) = (linalg::norm(w), linalg::norm(v));
    if nw == 0.0 || nv == 0.0 {
        return Err(Error::ZeroKernelArgument);
    }
    let th = angle(w, v, nw, nv);
    Ok(nw * nv * (th.sin() + (PI - th) * th.cos()) / (2.0 * PI))
}

/// ∂k(w;v)/∂w = ‖v‖(sin θ·w̄ + (π − θ)v̄)/(2π) for a second argument that is
/// a different vector (collinear ones included).
pub fn kernel_grad_w(w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let (nw, nv) = (linalg::norm(w), linalg::norm(v));
    if nw == 0.0 || nv == 0.0 {
        return Err(Error::ZeroKernelArgument);
    }
    let th = angle(w, v, nw, nv);
    let (s, p) = (th.sin(), PI - th);
    Ok(w.iter().zip(v).map(|(wi, vi)| (s * wi / nw + p * vi / nv) * nv / (2.0 * PI)).collect())
}

/// d/dw of k(w;w) = ‖w‖²/2, i.e. w itself.
pub fn kernel_self_grad(w: &[f64]) -> Vec<f64> {
    w.to_vec()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| linalg::row_vec(m, i)).collect()
}

fn check_rows(w: &DMatrix<f64>, d: usize) -> Result<()> {
    if w.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: w.ncols() });
    }
    Ok(())
}

/// ½ΣΣk(w_i;w_j) − ΣΣk(w_i;v_j) + ½ΣΣk(v_i;v_j).
pub fn population_loss(w: &DMatrix<f64>, cfg: &TeacherStudentConfig) -> Result<f64> {
    check_rows(w, cfg.d)?;
    let v = teacher(cfg);
    let (wr, vr) = (rows(w), rows(&v));
    let mut acc = Kahan::new();
    for i in 0..wr.len() {
        for j in 0..wr.len() {
            acc.add(0.5 * arccos_kernel(&wr[i], &wr[j])?);
        }
        for vj in &vr {
            acc.add(-arccos_kernel(&wr[i], vj)?);
        }
    }
    acc.add(teacher_energy(cfg));
    Ok(acc.value())
}

/// ½ΣΣk(v_i;v_j), the loss at θ = 0.
pub fn teacher_energy(cfg: &TeacherStudentConfig) -> f64 {
    let vr = rows(&teacher(cfg));
    let mut acc = Kahan::new();
    for a in &vr {
        for b in &vr {
            acc.add(0.5 * arccos_kernel(a, b).expect("teacher rows are nonzero"));
        }
    }
    acc.value()
}

/// Row k: ½w_k + Σ_{j≠k} ∂k(w_k;w_j)/∂w − Σ_j ∂k(w_k;v_j)/∂w.
pub fn population_grad(w: &DMatrix<f64>, cfg: &TeacherStudentConfig) -> Result<DMatrix<f64>> {
    check_rows(w, cfg.d)?;
    let v = teacher(cfg);
    let (wr, vr) = (rows(w), rows(&v));
    let m = wr.len();
    let d = cfg.d;
    let grads: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let mut acc: Vec<Kahan> = (0..d).map(|_| Kahan::new()).collect();
            for (q, x) in kernel_self_grad(&wr[k]).iter().enumerate() {
                acc[q].add(0.5 * x);
            }
            for (j, wj) in wr.iter().enumerate() {
                if j == k {
                    continue;
                }
                for (q, x) in kernel_grad_w(&wr[k], wj)?.iter().enumerate() {
                    acc[q].add(*x);
                }
            }
            for vj in &vr {
                for (q, x) in kernel_grad_w(&wr[k], vj)?.iter().enumerate() {
                    acc[q].add(-x);
                }
            }
            Ok(acc.iter().map(Kahan::value).collect())
        })
        .collect::<Result<_>>()?;
    let mut g = DMatrix::zeros(m, d);
    for k in 0..m {
        for q in 0..d {
            g[(k, q)] = grads[k][q];
        }
    }
    Ok(g)
}

/// ΣΣk(w_i;w_j) − ΣΣk(w_i;v_j), which equals ⟨θ, ∇L(θ)⟩.
pub fn homogeneity_rhs(w: &DMatrix<f64>, cfg: &TeacherStudentConfig) -> Result<f64> {
    let v = teacher(cfg);
    let (wr, vr) = (rows(w), rows(&v));
    let mut acc = Kahan::new();
    for wi in &wr {
        for wj in &wr {
            acc.add(arccos_kernel(wi, wj)?);
        }
        for vj in &vr {
            acc.add(-arccos_kernel(wi, vj)?);
        }
    }
    Ok(acc.value())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    /// m×d, row k is w_k.
    pub w: DMatrix<f64>,
    pub step: usize,
    pub loss: f64,
    pub norms: Vec<f64>,
}

fn row_norms(w: &DMatrix<f64>) -> Vec<f64> {
    (0..w.nrows()).map(|k| w.row(k).norm()).collect()
}

/// (dκ/(mM))√((d−1)/d)
pub fn init_norm(cfg: &TeacherStudentConfig) -> f64 {
    cfg.d as f64 * cfg.kappa / (cfg.m * cfg.big_m) as f64 * cfg.root()
}

/// Rows uniform on the sphere of radius [`init_norm`].
pub fn init_prm(cfg: &TeacherStudentConfig) -> Result<StudentState> {
    cfg.validate()?;
    let r = init_norm(cfg);
    let mut rng = Rng::stream(cfg.seed, streams::PRM_INIT);
    let mut w = DMatrix::zeros(cfg.m, cfg.d);
    for k in 0..cfg.m {
        let u = rng.unit_sphere(cfg.d);
        for j in 0..cfg.d {
            w[(k, j)] = r * u[j];
        }
    }
    let loss = population_loss(&w, cfg)?;
    Ok(StudentState { norms: row_norms(&w), w, step: 0, loss })
}

/// Largest learning rate allowed by the theory for this configuration.
pub fn eta_bound(d: usize, m: usize, big_m: usize, kappa: f64) -> f64 {
    let (df, mf, bm) = (d as f64, m as f64, big_m as f64);
    let s = ((df - 1.0) / df).sqrt();
    let first = 2.0 * PI * df * kappa * s / ((PI + 1.0) * mf * bm * (1.0 + df / (PI * bm) * s));
    let inner = (kappa + (1.0 / PI - kappa) * s) / (2.0 * PI * kappa) + 0.5;
    let second = 1.0 / (0.5 + mf * (mf - 1.0) * inner + mf * mf * bm / (2.0 * PI * df * kappa));
    first.min(second)
}

/// T* + 1 = 2d√((d−1)/d)(1−πκ) / ((π+1)ηmM(1 + (d/(πM))√((d−1)/d))).
pub fn tstar_prm_closed_form(cfg: &TeacherStudentConfig) -> f64 {
    let (df, mf, bm) = (cfg.d as f64, cfg.m as f64, cfg.big_m as f64);
    let s = cfg.root();
    2.0 * df * s * (1.0 - PI * cfg.kappa) / ((PI + 1.0) * cfg.eta * mf * bm * (1.0 + df / (PI * bm) * s))
}

/// Largest t ≥ 0 with dκ/M·s + η(t+1)(π+1)m/(2π)(1 + (d/(πM))s) ≤ (d/(πM))s,
/// s = √((d−1)/d); None if t = 0 already fails.
pub fn tstar_prm(cfg: &TeacherStudentConfig) -> Option<u64> {
    let (df, mf, bm) = (cfg.d as f64, cfg.m as f64, cfg.big_m as f64);
    let s = cfg.root();
    let thr = df / (PI * bm) * s;
    let holds = |t: u64| df * cfg.kappa / bm * s + cfg.eta * (t + 1) as f64 * (PI + 1.0) * mf / (2.0 * PI) * (1.0 + thr) <= thr;
    if !holds(0) {
        return None;
    }
    let mut t = 0;
    while holds(t + 1) {
        t += 1;
    }
    Some(t)
}

/// (d/(2πM))√((d−1)/d) − ½Σ‖w_j‖, lower bound on every ‖∂L/∂w_k‖ below the threshold.
pub fn gradient_lower_bound_prm(cfg: &TeacherStudentConfig, sum_norms: f64) -> f64 {
    cfg.d as f64 / (2.0 * PI * cfg.big_m as f64) * cfg.root() - 0.5 * sum_norms
}

/// ((π+1)/(2π))(1 + Σ‖w_j‖), upper bound on every ‖∂L/∂w_k‖.
pub fn gradient_upper_bound_prm(sum_norms: f64) -> f64 {
    (PI + 1.0) / (2.0 * PI) * (1.0 + sum_norms)
}

/// (d/(2πM))√((d−1)/d)‖w‖, lower bound on Σ_j k(w;v_j).
pub fn cross_term_lower_bound(cfg: &TeacherStudentConfig, w_norm: f64) -> f64 {
    cfg.d as f64 / (2.0 * PI * cfg.big_m as f64) * cfg.root() * w_norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmStep {
    pub t: usize,
    pub loss: f64,
    pub sum_norms: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    pub grad_norm: f64,
    /// min_k ‖∂L/∂w_k‖
    pub min_row_grad: f64,
    pub max_row_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmRunRecord {
    pub config: TeacherStudentConfig,
    pub eta_bound: f64,
    pub eta_compliant: bool,
    pub extension_teacher: bool,
    pub steps: Vec<PrmStep>,
    /// Per-step per-neuron norms, norms[t][k] = ‖w_k(t)‖.
    pub norms: Vec<Vec<f64>>,
    pub measured_t: HittingTime,
    pub t_star: Option<u64>,
    pub t_star_closed_form: f64,
    /// Steps t ≤ T at which ‖w_k(t)‖ < ‖w_k(t+1)‖ < 2‖w_k(t)‖ failed for some k.
    pub norm_growth_failures: Vec<usize>,
}

impl PrmRunRecord {
    pub fn loss_at(&self, t: usize) -> Option<f64> {
        self.steps.get(t).map(|s| s.loss)
    }
}

/// Plain GD on the closed-form population loss.
pub fn run_prm_gd(cfg: &TeacherStudentConfig) -> Result<PrmRunRecord> {
    let state = init_prm(cfg)?;
    let bound = eta_bound(cfg.d, cfg.m, cfg.big_m, cfg.kappa);
    let mut w = state.w;
    let mut steps = Vec::with_capacity(cfg.steps + 1);
    let mut norms = Vec::with_capacity(cfg.steps + 1);
    for t in 0..=cfg.steps {
        let loss = population_loss(&w, cfg)?;
        let g = population_grad(&w, cfg)?;
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: t, what: "population loss or gradient".into() });
        }
        let ns = row_norms(&w);
        let rg = row_norms(&g);
        steps.push(PrmStep {
            t,
            loss,
            sum_norms: ns.iter().sum(),
            min_norm: ns.iter().copied().fold(f64::INFINITY, f64::min),
            max_norm: ns.iter().copied().fold(0.0, f64::max),
            grad_norm: g.norm(),
            min_row_grad: rg.iter().copied().fold(f64::INFINITY, f64::min),
            max_row_grad: rg.iter().copied().fold(0.0, f64::max),
        });
        norms.push(ns);
        if t < cfg.steps {
            w -= cfg.eta * g;
        }
    }
    let thr = cfg.norm_threshold();
    // T = sup{t : Σ‖w_j(s+1)‖ < threshold for all s ≤ t}
    let first_bad = (1..steps.len()).find(|&s| !(steps[s].sum_norms < thr)).map(|s| s - 1);
    let measured_t = match first_bad {
        Some(0) => HittingTime::Empty,
        Some(t) => HittingTime::Hit { t: t - 1 },
        None if steps.len() >= 2 => HittingTime::NotHit { lower_bound: steps.len() - 2 },
        None => HittingTime::Empty,
    };
    let horizon = match measured_t {
        HittingTime::Hit { t } => t,
        HittingTime::NotHit { lower_bound } => lower_bound,
        HittingTime::Empty => 0,
    };
    let mut growth = Vec::new();
    if !matches!(measured_t, HittingTime::Empty) {
        for t in 0..=horizon.min(norms.len().saturating_sub(2)) {
            let ok = norms[t].iter().zip(&norms[t + 1]).all(|(a, b)| a < b && *b < 2.0 * a);
            if !ok {
                growth.push(t);
            }
        }
    }
    Ok(PrmRunRecord {
        config: cfg.clone(),
        eta_bound: bound,
        eta_compliant: cfg.eta <= bound,
        extension_teacher: cfg.is_extension(),
        steps,
        norms,
        measured_t,
        t_star: tstar_prm(cfg),
        t_star_closed_form: tstar_prm_closed_form(cfg),
        norm_growth_failures: growth,
    })
}

/// κ(1−πκ)/(4π)·((d−1)/d)(d/M)² +
/// (1−πκ)³/(8(π+1)π²(1 + d/(πM√((d−1)/d))))·((d−1)/d)^{3/2}(d/M)³.
pub fn prm_descent_bound(d: usize, big_m: usize, kappa: f64) -> f64 {
    let (df, bm) = (d as f64, big_m as f64);
    let s = ((df - 1.0) / df).sqrt();
    let q = 1.0 - PI * kappa;
    let first = kappa * q / (4.0 * PI) * s * s * (df / bm).powi(2);
    let second = q.powi(3) / (8.0 * (PI + 1.0) * PI * PI * (1.0 + df / (PI * bm * s))) * s.powi(3) * (df / bm).powi(3);
    first + second
}

/// Compares L(0) − L(θ(T*+1)) with [`prm_descent_bound`], L(0) being the loss
/// at θ = 0.
pub fn prm_descent_certificate(cfg: &TeacherStudentConfig, record: &PrmRunRecord) -> CertificateReport {
    let bound = prm_descent_bound(cfg.d, cfg.big_m, cfg.kappa);
    let l0 = teacher_energy(cfg);
    match record.t_star.and_then(|ts| record.loss_at(ts as usize + 1).map(|l| (ts, l))) {
        Some((ts, l)) => {
            let mut r = CertificateReport::at_least("prm_descent", bound, l0 - l, format!("L(0) = {l0}, T* = {ts}"));
            r.step = Some(ts as usize + 1);
            if !record.eta_compliant {
                r.context.push_str(", η above the admissible bound");
            }
            r
        }
        None => {
            let mut r = CertificateReport::at_least("prm_descent", bound, f64::NAN, "horizon shorter than T*+1");
            r.verdict = crate::certificates::Verdict::Inconclusive;
            r
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub seed: u64,
}

const MC_SHARDS: usize = 16;

/// Monte-Carlo estimate of the population loss with antithetic pairs (x, −x);
/// `samples` counts individual Gaussian points.
pub fn monte_carlo_loss(w: &DMatrix<f64>, cfg: &TeacherStudentConfig, samples: usize, seed: u64) -> Result<MonteCarloEstimate> {
    check_rows(w, cfg.d)?;
    let v = teacher(cfg);
    let pairs = samples / 2;
    if pairs < 2 {
        return Err(Error::InvalidArgument("need at least 4 samples".into()));
    }
    let mut master = Rng::stream(seed, streams::MONTE_CARLO);
    let shard_seeds: Vec<u64> = (0..MC_SHARDS).map(|_| master.next_u64()).collect();
    let d = cfg.d;
    let per: Vec<(f64, f64, usize)> = shard_seeds
        .par_iter()
        .enumerate()
        .map(|(s, &sd)| {
            let count = pairs / MC_SHARDS + usize::from(s < pairs % MC_SHARDS);
            let mut rng = Rng::new(sd);
            let mut x = vec![0.0; d];
            let (mut sum, mut sq) = (Kahan::new(), Kahan::new());
            let eval = |x: &[f64], sign: f64| {
                let mut f = 0.0;
                for k in 0..w.nrows() {
                    let z: f64 = (0..d).map(|j| w[(k, j)] * x[j]).sum::<f64>() * sign;
                    f += z.max(0.0);
                }
                for k in 0..v.nrows() {
                    let z: f64 = (0..d).map(|j| v[(k, j)] * x[j]).sum::<f64>() * sign;
                    f -= z.max(0.0);
                }
                0.5 * f * f
            };
            for _ in 0..count {
                for xi in x.iter_mut() {
                    *xi = rng.normal();
                }
                let y = 0.5 * (eval(&x, 1.0) + eval(&x, -1.0));
                sum.add(y);
                sq.add(y * y);
            }
            (sum.value(), sq.value(), count)
        })
        .collect();
    let (mut s, mut q, mut c) = (Kahan::new(), Kahan::new(), 0);
    for (a, b, n) in per {
        s.add(a);
        q.add(b);
        c += n;
    }
    let nf = c as f64;
    let mean = s.value() / nf;
    let var = (q.value() / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok(MonteCarloEstimate { mean, std_error: (var / nf).sqrt(), samples: 2 * c, seed })
}

pub const PRM_CSV_HEADER: &str = "t,loss,sum_norms,min_norm,max_norm,grad_norm";

pub fn prm_csv(record: &PrmRunRecord) -> String {
    let mut s = String::from(PRM_CSV_HEADER);
    s.push('\n');
    for r in &record.steps {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.t, r.loss, r.sum_norms, r.min_norm, r.max_norm, r.grad_norm);
    }
    s
}
