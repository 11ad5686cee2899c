//! Closed-form bounds and the checks that compare them with measured
//! quantities: Gram matrices, gradient and Hessian norms, loss descent,
//! convergence envelopes and failure-probability budgets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{width_deficit, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{self, Kahan};
use crate::losses::LossFamily;
use crate::models::{self, Network, TrainedLayers};
use crate::training::StepRecord;

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Failed, but the bound only holds on an event whose budget is vacuous.
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// measured ≥ theoretical
    AtLeast,
    /// measured ≤ theoretical
    AtMost,
    /// |measured − theoretical| ≤ tol
    Within { tol: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub id: String,
    pub theoretical: f64,
    pub measured: f64,
    pub direction: Direction,
    pub pass: bool,
    pub verdict: Verdict,
    /// Non-negative iff the inequality holds.
    pub slack: f64,
    pub step: Option<usize>,
    pub context: String,
}

impl CertificateReport {
    fn new(id: &str, theoretical: f64, measured: f64, direction: Direction, context: impl Into<String>) -> Self {
        let slack = match direction {
            Direction::AtLeast => measured - theoretical,
            Direction::AtMost => theoretical - measured,
            Direction::Within { tol } => tol - (measured - theoretical).abs(),
        };
        // NaN slack fails.
        let pass = slack >= 0.0;
        CertificateReport {
            id: id.to_string(),
            theoretical,
            measured,
            direction,
            pass,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            slack,
            step: None,
            context: context.into(),
        }
    }

    pub fn at_least(id: &str, bound: f64, measured: f64, context: impl Into<String>) -> Self {
        Self::new(id, bound, measured, Direction::AtLeast, context)
    }

    pub fn at_most(id: &str, bound: f64, measured: f64, context: impl Into<String>) -> Self {
        Self::new(id, bound, measured, Direction::AtMost, context)
    }

    pub fn within(id: &str, expected: f64, measured: f64, tol: f64, context: impl Into<String>) -> Self {
        Self::new(id, expected, measured, Direction::Within { tol }, context)
    }

    pub fn at_step(mut self, t: usize) -> Self {
        self.step = Some(t);
        self
    }

    /// Downgrades a failure to inconclusive when the probability budget is vacuous.
    pub fn with_budget(self, vacuous: bool) -> Self {
        self.downgrade_if(vacuous)
    }

    /// Downgrades a failure to inconclusive when `cond` holds, e.g. when the
    /// run is outside the hypotheses of the bound.
    pub fn downgrade_if(mut self, cond: bool) -> Self {
        if cond && !self.pass {
            self.verdict = Verdict::Inconclusive;
        }
        self
    }
}

/// Reports grouped by certificate id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateSet {
    pub reports: BTreeMap<String, Vec<CertificateReport>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub id: String,
    pub checks: usize,
    pub passed: usize,
    pub failed: usize,
    pub inconclusive: usize,
    pub worst_slack: f64,
}

impl CertificateSet {
    pub fn push(&mut self, report: CertificateReport) {
        self.reports.entry(report.id.clone()).or_default().push(report);
    }

    pub fn extend(&mut self, reports: impl IntoIterator<Item = CertificateReport>) {
        for r in reports {
            self.push(r);
        }
    }

    pub fn any_failed(&self) -> bool {
        self.reports.values().flatten().any(|r| r.verdict == Verdict::Fail)
    }

    pub fn summaries(&self) -> Vec<CertificateSummary> {
        self.reports
            .iter()
            .map(|(id, rs)| CertificateSummary {
                id: id.clone(),
                checks: rs.len(),
                passed: rs.iter().filter(|r| r.verdict == Verdict::Pass).count(),
                failed: rs.iter().filter(|r| r.verdict == Verdict::Fail).count(),
                inconclusive: rs.iter().filter(|r| r.verdict == Verdict::Inconclusive).count(),
                worst_slack: rs.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.reports)?)
    }

    /// Inverse of [`to_json`](Self::to_json).
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(CertificateSet { reports: serde_json::from_str(text)? })
    }

    /// Plain-text table: id, checks, pass/fail/inconclusive counts, worst slack.
    pub fn summary_table(&self) -> String {
        let rows = self.summaries();
        let w = rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(11);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>12}", "certificate", "checks", "pass", "fail", "inconc", "worst slack");
        for r in rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>12.4e}",
                r.id, r.checks, r.passed, r.failed, r.inconclusive, r.worst_slack
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Theory constants

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub delta: f64,
    pub kappa: f64,
    pub eta: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub batch: Option<usize>,
    pub classes: usize,
    pub mu0: Option<f64>,
    pub s: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub v: Option<f64>,
    pub loss: Option<LossFamily>,
    pub c: Option<f64>,
    pub c_prime: Option<f64>,
    pub r: Option<f64>,
    pub t0: Option<u64>,
}

/// κ for the binary early-stage setting: min{1/1000, η/2000, η/(3n), ημ0/(3n)}.
pub fn kappa_theorem1(eta: f64, n: usize, mu0: f64) -> f64 {
    let nf = n as f64;
    (1e-3f64).min(eta / 2000.0).min(eta / (3.0 * nf)).min(eta * mu0 / (3.0 * nf))
}

/// κ for the multi-class SGD setting: min{η/10, η/(3B)}.
pub fn kappa_theorem2(eta: f64, batch: usize) -> f64 {
    (eta / 10.0).min(eta / (3.0 * batch as f64))
}

/// Width required by the binary early-stage setting: max{144 log(2n²/δ), 4}.
pub fn min_width_theorem1(n: usize, delta: f64) -> f64 {
    (144.0 * (2.0 * (n * n) as f64 / delta).ln()).max(4.0)
}

/// Width for which V is positive: 32 log(n²/δ).
pub fn min_width_global(n: usize, delta: f64) -> f64 {
    32.0 * ((n * n) as f64 / delta).ln()
}

// ---------------------------------------------------------------------------
// Gram matrices

/// G_ij = ∇f(x_i)ᵀ∇f(x_j). For the multi-output net the (Cn)×(Cn) matrix
/// indexed by (i, α) ↦ iC + α.
pub fn gram_matrix(net: &Network, ds: &LabeledDataset) -> Result<DMatrix<f64>> {
    if net.d() != ds.d() {
        return Err(Error::DimensionMismatch { expected: net.d(), got: ds.d() });
    }
    let pass = net.forward_dataset(ds)?;
    let xx = linalg::row_gram(&ds.x);
    let a = net.output_weights();
    let (n, m, cc) = (ds.n(), net.m(), net.outputs());
    let bias = matches!(net, Network::Multi(_));
    let h = pass.pre.map(models::relu);
    let size = n * cc;
    let rows: Vec<Vec<f64>> = (0..size)
        .into_par_iter()
        .map(|p| {
            let (i, al) = (p / cc, p % cc);
            let mut row = vec![0.0; size];
            for (q, slot) in row.iter_mut().enumerate().skip(p) {
                let (j, be) = (q / cc, q % cc);
                let g = xx[(i, j)] + if bias { 1.0 } else { 0.0 };
                let mut acc = Kahan::new();
                for k in 0..m {
                    let mut term = if al == be { h[(i, k)] * h[(j, k)] } else { 0.0 };
                    if pass.pre[(i, k)] > 0.0 && pass.pre[(j, k)] > 0.0 {
                        term += a[(k, al)] * a[(k, be)] * g;
                    }
                    acc.add(term);
                }
                *slot = acc.value();
            }
            row
        })
        .collect();
    let mut gm = DMatrix::zeros(size, size);
    for (p, row) in rows.iter().enumerate() {
        for q in p..size {
            gm[(p, q)] = row[q];
            gm[(q, p)] = row[q];
        }
    }
    Ok(gm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub pass: bool,
    pub nonzero_count: usize,
    /// Up to 20 offending (i, j, G_ij).
    pub examples: Vec<(usize, usize, f64)>,
}

/// Every cross-class entry of the binary Gram matrix must be exactly 0.0.
pub fn check_block_structure(g: &DMatrix<f64>, ds: &LabeledDataset) -> Result<BlockReport> {
    let y = ds.binary_labels()?;
    let n = ds.n();
    if g.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: g.nrows() });
    }
    let mut count = 0;
    let mut examples = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if y[i] != y[j] && g[(i, j)] != 0.0 {
                count += 1;
                if examples.len() < 20 {
                    examples.push((i, j, g[(i, j)]));
                }
            }
        }
    }
    Ok(BlockReport { pass: count == 0, nonzero_count: count, examples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramBoundSummary {
    pub checked: usize,
    pub failures: usize,
    pub worst_slack: f64,
    pub worst_pair: (usize, usize),
    /// Up to 20 failing (i, j, value, bound).
    pub failing: Vec<(usize, usize, f64, f64)>,
}

impl GramBoundSummary {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }

    pub fn to_report(&self, id: &str, t: usize) -> CertificateReport {
        let mut r = CertificateReport::at_least(id, 0.0, self.worst_slack, format!(
            "{} entries, {} failures, worst at {:?}",
            self.checked, self.failures, self.worst_pair
        ));
        r.step = Some(t);
        r
    }
}

/// (999/1000) x_iᵀx_j ((π − arccos x_iᵀx_j)/π − √(8 log(n²/δ)/m)).
pub fn gram_pair_bound(inner: f64, n: usize, m: usize, delta: f64) -> f64 {
    let z = inner.clamp(-1.0, 1.0);
    0.999 * inner * ((PI - z.acos()) / PI - width_deficit(n, m as f64, delta))
}

/// Same-class entries of the binary Gram matrix against [`gram_pair_bound`].
pub fn check_gram_lower_bound(g: &DMatrix<f64>, ds: &LabeledDataset, m: usize, delta: f64) -> Result<GramBoundSummary> {
    let y = ds.binary_labels()?;
    let n = ds.n();
    let xx = linalg::row_gram(&ds.x);
    let mut s = GramBoundSummary { checked: 0, failures: 0, worst_slack: f64::INFINITY, worst_pair: (0, 0), failing: vec![] };
    for i in 0..n {
        for j in i..n {
            if y[i] != y[j] {
                continue;
            }
            let bound = gram_pair_bound(xx[(i, j)], n, m, delta);
            let slack = g[(i, j)] - bound;
            s.checked += 1;
            if slack < s.worst_slack {
                s.worst_slack = slack;
                s.worst_pair = (i, j);
            }
            if !(slack >= 0.0) {
                s.failures += 1;
                if s.failing.len() < 20 {
                    s.failing.push((i, j, g[(i, j)], bound));
                }
            }
        }
    }
    Ok(s)
}

/// Every entry of a Gram matrix is at least `threshold`.
pub fn check_gram_entries_at_least(g: &DMatrix<f64>, threshold: f64) -> GramBoundSummary {
    let mut s = GramBoundSummary { checked: 0, failures: 0, worst_slack: f64::INFINITY, worst_pair: (0, 0), failing: vec![] };
    for i in 0..g.nrows() {
        for j in i..g.ncols() {
            let slack = g[(i, j)] - threshold;
            s.checked += 1;
            if slack < s.worst_slack {
                s.worst_slack = slack;
                s.worst_pair = (i, j);
            }
            if !(slack >= 0.0) {
                s.failures += 1;
                if s.failing.len() < 20 {
                    s.failing.push((i, j, g[(i, j)], threshold));
                }
            }
        }
    }
    s
}

/// Checks that every entry of the multi-class Gram matrix is at least
/// `threshold` without forming it. With A ≥ 0 entrywise and x_iᵀx_j ≥ −1,
///   G_{(i,α),(j,β)} ≥ (1 + x_iᵀx_j)(S_αβ − D^i_αβ − D^j_αβ),
/// where S = AᵀA and D^i sums a_k a_kᵀ over neurons dead for sample i. Entries
/// whose lower bound falls short are evaluated exactly. Pair indices in the
/// summary are flattened as iC + α.
pub fn multi_gram_certificate(net: &Network, ds: &LabeledDataset, threshold: f64) -> Result<GramBoundSummary> {
    let Network::Multi(mn) = net else {
        return Err(Error::InvalidArgument("multi_gram_certificate needs the multi-output net".into()));
    };
    if mn.a.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("output weights must be entrywise non-negative".into()));
    }
    let pass = net.forward_dataset(ds)?;
    let (n, m, cc) = (ds.n(), net.m(), net.outputs());
    let a = &mn.a;
    let s_full = a.transpose() * a;
    let xx = linalg::row_gram(&ds.x);
    let h = pass.pre.map(models::relu);
    let dead: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let mut d = DMatrix::zeros(cc, cc);
            for k in 0..m {
                if !(pass.pre[(i, k)] > 0.0) {
                    for al in 0..cc {
                        for be in 0..cc {
                            d[(al, be)] += a[(k, al)] * a[(k, be)];
                        }
                    }
                }
            }
            d
        })
        .collect();
    let exact = |i: usize, al: usize, j: usize, be: usize| {
        let g = xx[(i, j)] + 1.0;
        let mut acc = Kahan::new();
        for k in 0..m {
            let mut term = if al == be { h[(i, k)] * h[(j, k)] } else { 0.0 };
            if pass.pre[(i, k)] > 0.0 && pass.pre[(j, k)] > 0.0 {
                term += a[(k, al)] * a[(k, be)] * g;
            }
            acc.add(term);
        }
        acc.value()
    };
    let per_row: Vec<GramBoundSummary> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = GramBoundSummary { checked: 0, failures: 0, worst_slack: f64::INFINITY, worst_pair: (0, 0), failing: vec![] };
            for j in i..n {
                let g1 = 1.0 + xx[(i, j)];
                for al in 0..cc {
                    let be_start = if i == j { al } else { 0 };
                    for be in be_start..cc {
                        let lb = g1.max(0.0) * (s_full[(al, be)] - dead[i][(al, be)] - dead[j][(al, be)]);
                        let value = if lb >= threshold { lb } else { exact(i, al, j, be) };
                        let slack = value - threshold;
                        let pair = (i * cc + al, j * cc + be);
                        s.checked += 1;
                        if slack < s.worst_slack {
                            s.worst_slack = slack;
                            s.worst_pair = pair;
                        }
                        if !(slack >= 0.0) {
                            s.failures += 1;
                            if s.failing.len() < 20 {
                                s.failing.push((pair.0, pair.1, value, threshold));
                            }
                        }
                    }
                }
            }
            s
        })
        .collect();
    let mut total = GramBoundSummary { checked: 0, failures: 0, worst_slack: f64::INFINITY, worst_pair: (0, 0), failing: vec![] };
    for s in per_row {
        total.checked += s.checked;
        total.failures += s.failures;
        if s.worst_slack < total.worst_slack {
            total.worst_slack = s.worst_slack;
            total.worst_pair = s.worst_pair;
        }
        for f in s.failing {
            if total.failing.len() < 20 {
                total.failing.push(f);
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Early-stage closed forms

const A9_NUM: f64 = 251001.0;

/// φ(t) = 251001((1+2η)^{2t} − (1−2η)^{2t})/1500000 (loss-descent sum).
pub fn phi_a9(eta: f64, t: f64) -> f64 {
    A9_NUM * ((1.0 + 2.0 * eta).powf(2.0 * t) - (1.0 - 2.0 * eta).powf(2.0 * t)) / 1.5e6
}

/// varphi(t) = (1/2 + 2√(log(2n²/δ)/m))·251001((1+2η)^{2t} − (1−2η)^{2t})/10⁶
/// (gradient lower bound).
pub fn varphi(eta: f64, t: f64, n: usize, m: usize, delta: f64) -> f64 {
    let pref = 0.5 + 2.0 * ((2.0 * (n * n) as f64 / delta).ln() / m as f64).sqrt();
    pref * A9_NUM * ((1.0 + 2.0 * eta).powf(2.0 * t) - (1.0 - 2.0 * eta).powf(2.0 * t)) / 1e6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub value: f64,
    /// The bound says nothing (non-positive, or outside its hypotheses).
    pub vacuous: bool,
}

/// (999/1000)(1 − varphi(t))²(γ1 − γ2√(8 log(n²/δ)/m)) for ‖∇L(θ(t))‖².
pub fn gradient_lower_bound_early(t: usize, eta: f64, n: usize, m: usize, delta: f64, gamma1: f64, gamma2: f64) -> Bound {
    let vp = varphi(eta, t as f64, n, m, delta);
    let gap = gamma1 - gamma2 * width_deficit(n, m as f64, delta);
    let value = 0.999 * (1.0 - vp).powi(2) * gap;
    Bound { value, vacuous: vp >= 1.0 || gap <= 0.0 }
}

/// V·L² for ‖∇L(θ(t))‖², t ≥ 1.
pub fn gradient_lower_bound_global(loss: f64, v: f64) -> Bound {
    Bound { value: v * loss * loss, vacuous: v <= 0.0 }
}

/// ⟨∇L, ∇L_B⟩ lower bound for the multi-class SGD run, 1 ≤ t ≤ T.
pub const STOCHASTIC_INNER_BOUND: f64 = 9801.0 / 10000.0;

/// 0.193(γ1 − γ2√(8 log(n²/δ)/m)) − 0.0111.
pub fn descent_bound_theorem1(gamma1: f64, gamma2: f64, n: usize, m: f64, delta: f64) -> f64 {
    0.193 * (gamma1 - gamma2 * width_deficit(n, m, delta)) - 0.0111
}

pub fn descent_bound_theorem2() -> f64 {
    0.262533
}

/// Σ_{t=1}^{T−1} e^{klt} = e^{kl}(e^{kl(T−1)} − 1)/(e^{kl} − 1).
fn geo(l: f64, k: f64, tt: f64) -> f64 {
    let x = k * l;
    x.exp() * (x * (tt - 1.0)).exp_m1() / x.exp_m1()
}

/// Σ_{t=1}^{T*−1} η(1 − φ(t))² in closed form (expanded square, geometric sums).
pub fn lemma_a9_sum(eta: f64, t_star: u64) -> f64 {
    if t_star < 2 {
        return 0.0;
    }
    let tt = t_star as f64;
    let a = A9_NUM / 1.5e6;
    let lp = (2.0 * eta).ln_1p();
    let lq = (-2.0 * eta).ln_1p();
    let lr = (-4.0 * eta * eta).ln_1p();
    eta * ((tt - 1.0) - 2.0 * a * geo(lp, 2.0, tt) + 2.0 * a * geo(lq, 2.0, tt)
        + a * a * (geo(lp, 4.0, tt) + geo(lq, 4.0, tt))
        - 2.0 * a * a * geo(lr, 2.0, tt))
}

/// Term-by-term version of [`lemma_a9_sum`].
pub fn lemma_a9_sum_brute(eta: f64, t_star: u64) -> f64 {
    let mut acc = Kahan::new();
    for t in 1..t_star {
        acc.add(eta * (1.0 - phi_a9(eta, t as f64)).powi(2));
    }
    acc.value()
}

// ---------------------------------------------------------------------------
// Hessian

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianRegime {
    /// Binary net, quadratic loss, t ≤ T: 7/(2m) + 2.
    EarlyBinary,
    /// Multi-class net: 25/(4m) + 2√2.
    MultiClass,
    /// All layers, exponential-type loss: (‖θ‖² + 1) L(θ).
    GlobalAllLayers,
    /// Input layer only, exponential-type loss: L(θ).
    InputOnly,
}

pub fn hessian_bound(regime: HessianRegime, m: usize, param_norm: f64, loss: f64) -> f64 {
    let mf = m as f64;
    match regime {
        HessianRegime::EarlyBinary => 7.0 / (2.0 * mf) + 2.0,
        HessianRegime::MultiClass => 25.0 / (4.0 * mf) + 2.0 * 2f64.sqrt(),
        HessianRegime::GlobalAllLayers => (param_norm * param_norm + 1.0) * loss,
        HessianRegime::InputOnly => loss,
    }
}

/// ‖∇²_B L‖ for input-only training via the n×n matrix
/// W^{1/2} J Jᵀ W^{1/2}/n, where J holds the input-layer gradients of f and
/// W = diag(ℓ̃″(y_i f_i)) (1 for the quadratic loss). Exact for any width.
pub fn input_only_hessian_norm(net: &Network, ds: &LabeledDataset, loss: &LossFamily) -> Result<f64> {
    let Network::Binary(bn) = net else {
        return Err(Error::InvalidArgument("input-only Hessian is defined for the binary net".into()));
    };
    let y = ds.binary_labels()?;
    let pass = net.forward_dataset(ds)?;
    let (n, m) = (ds.n(), net.m());
    let w: Vec<f64> = (0..n)
        .map(|i| match loss.base() {
            None => 1.0,
            Some(b) => b.second_deriv(y[i] * pass.out[(i, 0)]),
        })
        .collect();
    let xx = linalg::row_gram(&ds.x);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = Kahan::new();
            for q in 0..m {
                if pass.pre[(i, q)] > 0.0 && pass.pre[(j, q)] > 0.0 {
                    acc.add(bn.a[q] * bn.a[q]);
                }
            }
            let v = (w[i] * w[j]).sqrt() * acc.value() * xx[(i, j)] / n as f64;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(linalg::spectral_norm_sym(&k))
}

/// Largest parameter count for which sampled checks build and diagonalize the
/// dense Hessian.
pub const DENSE_EIGEN_LIMIT: usize = 2_500;

/// Spectral norm of the loss Hessian at `net` against the regime's bound.
/// The input-only regime falls back to [`input_only_hessian_norm`] above
/// [`DENSE_EIGEN_LIMIT`] parameters.
pub fn check_hessian_bound(net: &Network, ds: &LabeledDataset, loss: &LossFamily, regime: HessianRegime) -> Result<CertificateReport> {
    let lval = models::loss_value(net, ds, loss)?;
    let bound = hessian_bound(regime, net.m(), net.param_norm(), lval);
    let (norm, how) = match regime {
        HessianRegime::InputOnly => {
            let pb = net.m() * net.d();
            if pb <= DENSE_EIGEN_LIMIT {
                let h = models::hessian_loss(net, ds, loss, TrainedLayers::InputOnly)?;
                (linalg::spectral_norm_sym(&h), "dense")
            } else {
                (input_only_hessian_norm(net, ds, loss)?, "n×n reduction")
            }
        }
        _ => {
            let h = models::hessian_loss(net, ds, loss, TrainedLayers::All)?;
            (linalg::spectral_norm_sym(&h), "dense")
        }
    };
    Ok(CertificateReport::at_most(
        &format!("hessian_{}", regime_key(regime)),
        bound,
        norm,
        format!("{how}, {} parameters, L = {lval:e}", net.num_params()),
    ))
}

fn regime_key(r: HessianRegime) -> &'static str {
    match r {
        HessianRegime::EarlyBinary => "early_binary",
        HessianRegime::MultiClass => "multiclass",
        HessianRegime::GlobalAllLayers => "global_all_layers",
        HessianRegime::InputOnly => "input_only",
    }
}

// ---------------------------------------------------------------------------
// Convergence envelopes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateKind {
    /// L(t) ≤ L(1)/t^{Vc/2}
    PolyStage1 { v: f64, c: f64 },
    /// L(t) ≤ (1 − Vc/2)^{t−1} L(1)
    Exponential { v: f64, c: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub report: CertificateReport,
    pub checked: usize,
    pub violations: usize,
    pub first_violation: Option<usize>,
    /// Least-squares slope of log L against t (exponential) or log t (poly).
    pub fitted: f64,
    /// The same slope implied by the envelope.
    pub envelope_slope: f64,
}

pub fn envelope(kind: RateKind, l1: f64, t: usize) -> f64 {
    match kind {
        RateKind::PolyStage1 { v, c } => l1 / (t as f64).powf(v * c / 2.0),
        RateKind::Exponential { v, c } => (1.0 - v * c / 2.0).powf(t as f64 - 1.0) * l1,
    }
}

/// Checks the envelope at every recorded t ≥ 1 (needs the t = 1 record).
pub fn fit_convergence_rate(steps: &[StepRecord], kind: RateKind) -> Result<RateReport> {
    let l1 = steps
        .iter()
        .find(|s| s.t == 1)
        .map(|s| s.loss)
        .ok_or_else(|| Error::InvalidArgument("record has no t = 1 entry".into()))?;
    let mut checked = 0;
    let mut violations = 0;
    let mut first = None;
    let mut worst = f64::INFINITY;
    let mut worst_t = 1;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in steps.iter().filter(|s| s.t >= 1) {
        let env = envelope(kind, l1, s.t);
        checked += 1;
        // relative slack; the envelope is positive
        let slack = (env - s.loss) / env;
        if slack < worst {
            worst = slack;
            worst_t = s.t;
        }
        if !(s.loss <= env) {
            violations += 1;
            first.get_or_insert(s.t);
        }
        if s.loss > 0.0 {
            xs.push(match kind {
                RateKind::PolyStage1 { .. } => (s.t as f64).ln(),
                RateKind::Exponential { .. } => s.t as f64,
            });
            ys.push(s.loss.ln());
        }
    }
    let fitted = slope(&xs, &ys);
    let envelope_slope = match kind {
        RateKind::PolyStage1 { v, c } => -v * c / 2.0,
        RateKind::Exponential { v, c } => (1.0 - v * c / 2.0).ln(),
    };
    let id = match kind {
        RateKind::PolyStage1 { .. } => "rate_poly_stage1",
        RateKind::Exponential { .. } => "rate_exponential",
    };
    let mut report = CertificateReport::at_least(id, 0.0, worst, format!("{checked} steps, {violations} violations, worst relative slack at t={worst_t}"));
    if violations > 0 {
        report.pass = false;
        report.verdict = Verdict::Fail;
    }
    report.step = Some(worst_t);
    Ok(RateReport { report, checked, violations, first_violation: first, fitted, envelope_slope })
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// Probability budgets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRegime {
    /// δ + 2m e^{−2d}
    Binary,
    /// δ + 4m e^{−(d+1)/2} + m·0.17^B
    MultiClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityBudget {
    pub delta: f64,
    /// Initialization-norm event: 2me^{−2d} or 4me^{−(d+1)/2}.
    pub norm_term: f64,
    /// Batch term m·0.17^B (multi-class SGD only).
    pub batch_term: f64,
    pub total: f64,
    pub vacuous: bool,
}

impl ProbabilityBudget {
    /// Failure probability of the events that do not involve δ.
    pub fn exponential_terms(&self) -> f64 {
        self.norm_term + self.batch_term
    }
}

pub fn probability_budget(regime: BudgetRegime, delta: f64, m: usize, d: usize, batch: Option<usize>) -> ProbabilityBudget {
    let mf = m as f64;
    let df = d as f64;
    let (norm_term, batch_term) = match regime {
        BudgetRegime::Binary => (2.0 * mf * (-2.0 * df).exp(), 0.0),
        BudgetRegime::MultiClass => (
            4.0 * mf * (-(df + 1.0) / 2.0).exp(),
            batch.map_or(0.0, |b| mf * 0.17f64.powf(b as f64)),
        ),
    };
    let total = delta + norm_term + batch_term;
    ProbabilityBudget { delta, norm_term, batch_term, total, vacuous: total >= 1.0 }
}
