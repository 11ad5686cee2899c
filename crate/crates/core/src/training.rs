//! GD and mini-batch SGD with constant and loss-adaptive learning rates,
//! per-step monitoring and hitting-time measurement.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::LossFamily;
use crate::models::{evaluate, Evaluation, Network, TrainedLayers, Variant};
use crate::rng::{streams, Rng};

/// Runs stop once the loss drops below this value.
pub const EARLY_STOP_LOSS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        eta: f64,
    },
    /// η_0 at t = 0, then c/(t L) up to T0, then c′/L^{1−1/(2r)}.
    TwoStagePoly {
        eta0: f64,
        c: f64,
        /// None when ⌈(n log 2)^{2/(Vc)}⌉ does not fit in u64.
        t0: Option<u64>,
        c_prime: f64,
        r: f64,
        /// Exploratory override of the stage switch; not covered by the theory.
        force_stage2_at: Option<u64>,
    },
    /// η_0 at t = 0, then c/L.
    LossInverse {
        eta0: f64,
        c: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub within_theorem_range: bool,
    /// Reasons the schedule is outside the theorem's range.
    pub notes: Vec<String>,
    /// Remarks that do not affect compliance.
    pub info: Vec<String>,
}

/// Largest admissible c for the polynomial schedule.
pub fn poly_c_max(eta0: f64) -> f64 {
    1.0 / (6.0 * (1.0 + 2.0 * eta0).powi(2) + 2.0)
}

/// ⌈(n log 2)^{2/(Vc)}⌉, or None if it overflows u64 (or V ≤ 0).
pub fn poly_stage_switch(n: usize, v: f64, c: f64) -> Option<u64> {
    if !(v > 0.0 && c > 0.0) {
        return None;
    }
    let log_t0 = (2.0 / (v * c)) * (n as f64 * std::f64::consts::LN_2).ln();
    if log_t0 >= (u64::MAX as f64).ln() {
        return None;
    }
    Some(log_t0.exp().ceil() as u64)
}

impl LrSchedule {
    pub fn two_stage_poly(eta0: f64, c: f64, c_prime: f64, r: f64, n: usize, v: f64) -> Self {
        LrSchedule::TwoStagePoly { eta0, c, t0: poly_stage_switch(n, v, c), c_prime, r, force_stage2_at: None }
    }

    /// Rejects values for which the schedule is meaningless; out-of-theory
    /// values are only flagged by [`check`](Self::check).
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match *self {
            LrSchedule::Constant { eta } => positive("η", eta),
            LrSchedule::LossInverse { eta0, c } => {
                positive("η0", eta0)?;
                positive("c", c)
            }
            LrSchedule::TwoStagePoly { eta0, c, c_prime, r, .. } => {
                positive("η0", eta0)?;
                positive("c", c)?;
                positive("c′", c_prime)?;
                positive("r", r)
            }
        }
    }

    pub fn check(&self) -> ScheduleCheck {
        let mut notes = Vec::new();
        let mut info = Vec::new();
        let eta0_max = 1.0 / (2.0 * 2f64.sqrt());
        match *self {
            LrSchedule::Constant { eta } => {
                if eta > 0.01 {
                    notes.push(format!("η = {eta} exceeds 0.01"));
                }
            }
            LrSchedule::LossInverse { eta0, c } => {
                if c > 0.5 {
                    notes.push(format!("c = {c} exceeds 1/2"));
                }
                if eta0 > eta0_max {
                    notes.push(format!("η0 = {eta0} exceeds 1/(2√2)"));
                }
            }
            LrSchedule::TwoStagePoly { eta0, c, t0, r, force_stage2_at, .. } => {
                if c > poly_c_max(eta0) {
                    notes.push(format!("c = {c} exceeds 1/(6(1+2η0)²+2) = {}", poly_c_max(eta0)));
                }
                if r < 1.0 {
                    notes.push(format!("r = {r} is below 1"));
                }
                if eta0 > eta0_max {
                    notes.push(format!("η0 = {eta0} exceeds 1/(2√2)"));
                }
                if t0.is_none() {
                    info.push("stage switch T0 is beyond any reachable step".into());
                }
                if force_stage2_at.is_some() {
                    notes.push("stage 2 forced early; not theorem-compliant".into());
                }
            }
        }
        ScheduleCheck { within_theorem_range: notes.is_empty(), notes, info }
    }

    /// η_t given the current loss L(θ(t)). Returns a non-finite value when the
    /// loss is exactly zero for adaptive schedules.
    pub fn eta_at(&self, t: usize, loss: f64) -> f64 {
        match *self {
            LrSchedule::Constant { eta } => eta,
            LrSchedule::LossInverse { eta0, c } => {
                if t == 0 {
                    eta0
                } else {
                    c / loss
                }
            }
            LrSchedule::TwoStagePoly { eta0, c, t0, c_prime, r, force_stage2_at } => {
                if t == 0 {
                    return eta0;
                }
                let switch = force_stage2_at.or(t0);
                match switch {
                    Some(s) if t as u64 >= s => c_prime / loss.powf(1.0 - 1.0 / (2.0 * r)),
                    _ => c / (t as f64 * loss),
                }
            }
        }
    }

    pub fn is_adaptive(&self) -> bool {
        !matches!(self, LrSchedule::Constant { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Batching {
    Full,
    Stochastic {
        batch: usize,
        seed: u64,
        /// i.i.d. uniform draws when true; the false mode is exploratory only.
        #[serde(default = "default_true")]
        replacement: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batching: Batching,
    pub trained_layers: TrainedLayers,
    pub record_every: usize,
}

impl TrainConfig {
    pub fn full(steps: usize) -> Self {
        TrainConfig { steps, batching: Batching::Full, trained_layers: TrainedLayers::All, record_every: 1 }
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        if let Batching::Stochastic { batch, .. } = self.batching {
            if batch == 0 {
                return Err(Error::InvalidArgument("batch size must be at least 1".into()));
            }
        }
        if self.trained_layers == TrainedLayers::InputOnly && net.variant() != Variant::BinaryNoBias {
            return Err(Error::InvalidArgument("input-layer-only training is defined for the binary net".into()));
        }
        Ok(())
    }
}

/// Draws mini-batch index multisets.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: Rng,
    n: usize,
    batch: usize,
    replacement: bool,
    identity: bool,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64, replacement: bool) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::InvalidArgument("need n ≥ 1 and batch ≥ 1".into()));
        }
        if !replacement && batch > n {
            return Err(Error::InvalidArgument(format!("batch {batch} exceeds n = {n} without replacement")));
        }
        Ok(Self { rng: Rng::stream(seed, streams::BATCH), n, batch, replacement, identity: false })
    }

    /// Always returns 0..n; an SGD step with it equals a GD step.
    pub fn identity(n: usize) -> Self {
        Self { rng: Rng::new(0), n, batch: n, replacement: false, identity: true }
    }

    pub fn sample(&mut self) -> Vec<usize> {
        if self.identity {
            return (0..self.n).collect();
        }
        if self.replacement {
            return (0..self.batch).map(|_| self.rng.index(self.n)).collect();
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        for q in 0..self.batch {
            let j = q + self.rng.index(self.n - q);
            idx.swap(q, j);
        }
        idx.truncate(self.batch);
        idx
    }
}

fn apply(net: &Network, grad: &[f64], eta: f64) -> Result<Network> {
    let p: Vec<f64> = net.params().iter().zip(grad).map(|(w, g)| w - eta * g).collect();
    net.with_params(&p)
}

fn check_finite(step: usize, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: what.into() })
    }
}

/// θ − η∇L(θ) with the full-batch gradient.
pub fn gd_step(net: &Network, ds: &LabeledDataset, loss: &LossFamily, eta: f64) -> Result<Network> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("η must be positive, got {eta}")));
    }
    let ev = evaluate(net, ds, loss, None, TrainedLayers::All)?;
    check_finite(0, "gradient", &ev.grad)?;
    apply(net, &ev.grad, eta)
}

/// θ − η∇L_B(θ) with a batch drawn from `sampler`.
pub fn sgd_step(net: &Network, ds: &LabeledDataset, loss: &LossFamily, eta: f64, sampler: &mut BatchSampler) -> Result<Network> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("η must be positive, got {eta}")));
    }
    let batch = sampler.sample();
    let ev = evaluate(net, ds, loss, Some(&batch), TrainedLayers::All)?;
    check_finite(0, "gradient", &ev.grad)?;
    apply(net, &ev.grad, eta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub loss: f64,
    /// Learning rate used for the update out of θ(t).
    pub eta: f64,
    /// Norm of the full-batch gradient at θ(t).
    pub grad_norm: f64,
    pub min_margin: f64,
    pub argmin_margin: usize,
    pub max_margin: f64,
    pub param_norm: f64,
    /// max_i |f(x_i)| over all output channels.
    pub max_abs_pred: f64,
    /// max_{i,α} f_α(x_i), signed.
    pub max_pred: f64,
    /// Every output weight has kept the sign it had at t = 0.
    pub a_sign_ok: bool,
    /// ⟨∇L, ∇L_B⟩ for the batch used at this step (stochastic runs only).
    pub batch_inner: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// An adaptive schedule hit L = 0 exactly.
    ConvergedExactly { step: usize },
    /// L dropped below [`EARLY_STOP_LOSS`].
    EarlyStopped { step: usize },
    Aborted { step: usize, what: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HittingTime {
    Hit { t: usize },
    /// The conditions already fail at s = 0 or s = 1.
    Empty,
    /// No violation within the horizon; T is at least `lower_bound`.
    NotHit { lower_bound: usize },
}

impl HittingTime {
    /// Whether T ≥ k is established.
    pub fn at_least(&self, k: usize) -> bool {
        match *self {
            HittingTime::Hit { t } => t >= k,
            HittingTime::NotHit { lower_bound } => lower_bound >= k,
            HittingTime::Empty => false,
        }
    }

    /// Hitting time from the first violating step s (None when there is none)
    /// and the last step checked.
    pub fn from_first_violation(first_bad: Option<usize>, last_checked: usize) -> Self {
        match first_bad {
            Some(s) if s >= 2 => HittingTime::Hit { t: s - 2 },
            Some(_) => HittingTime::Empty,
            None if last_checked >= 1 => HittingTime::NotHit { lower_bound: last_checked - 1 },
            None => HittingTime::Empty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub loss: String,
    pub schedule: LrSchedule,
    pub schedule_check: ScheduleCheck,
    pub config: TrainConfig,
    pub variant: Variant,
    pub dataset_digest: String,
    pub steps: Vec<StepRecord>,
    pub status: RunStatus,
    /// Last step reached.
    pub final_step: usize,
    pub measured_t: HittingTime,
    pub t_e: Option<u64>,
    pub t_star: Option<u64>,
}

impl RunRecord {
    pub fn aborted(&self) -> bool {
        matches!(self.status, RunStatus::Aborted { .. })
    }

    pub fn step(&self, t: usize) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.t == t)
    }

    pub fn loss_at(&self, t: usize) -> Option<f64> {
        self.step(t).map(|s| s.loss)
    }
}

/// Everything an observer sees at step t, before the update out of θ(t).
pub struct StepContext<'a> {
    pub t: usize,
    pub net: &'a Network,
    pub full: &'a Evaluation,
    /// Batch indices and batch gradient used for the update (stochastic runs,
    /// absent at the final step).
    pub batch: Option<(&'a [usize], &'a [f64])>,
    pub eta: f64,
}

fn ok_for_hitting(variant: Variant, rec: &StepRecord) -> bool {
    let pred = match variant {
        Variant::BinaryNoBias => rec.max_abs_pred,
        Variant::MultiBias => rec.max_pred,
    };
    pred <= 1.0 && rec.a_sign_ok
}

/// T = sup{t : the prediction and sign conditions hold for all s ≤ t+1}.
/// The records must start at t = 0 and be consecutive.
pub fn hitting_time_t(steps: &[StepRecord], variant: Variant) -> Result<HittingTime> {
    for (q, s) in steps.iter().enumerate() {
        if s.t != q {
            return Err(Error::InvalidArgument(format!("records must be consecutive from 0; found t={} at position {q}", s.t)));
        }
    }
    let Some(last) = steps.last() else {
        return Ok(HittingTime::Empty);
    };
    let first_bad = steps.iter().find(|s| !ok_for_hitting(variant, s)).map(|s| s.t);
    Ok(HittingTime::from_first_violation(first_bad, last.t))
}

/// ⌊log 6/(4η)⌋ for the binary net, ⌊log 4/(4η)⌋ for the multi-class net.
pub fn tstar(eta: f64, variant: Variant) -> u64 {
    let num = match variant {
        Variant::BinaryNoBias => 6f64.ln(),
        Variant::MultiBias => 4f64.ln(),
    };
    (num / (4.0 * eta)).floor() as u64
}

/// Largest t for which both closed-form exponential conditions hold, or None
/// if they already fail at t = 0.
pub fn exp_hitting_time_te(eta: f64, n: usize, m: usize, delta: f64, variant: Variant) -> Option<u64> {
    let (pref, cap) = match variant {
        Variant::BinaryNoBias => {
            let nn = (n * n) as f64;
            (0.5 + 2.0 * ((2.0 * nn / delta).ln() / m as f64).sqrt(), 2.0 * 2f64.sqrt())
        }
        Variant::MultiBias => (1.0, 2.0),
    };
    let holds = |t: u64| {
        let e = (t + 1) as f64;
        let up = (1.0 + 2.0 * eta).powf(2.0 * e);
        let down = (1.0 - 2.0 * eta).powf(2.0 * e);
        pref * 251001.0 * (up - down) / 1e6 <= 1.0 && (1.0 + 2.0 * eta).powf(e) <= cap
    };
    if !holds(0) {
        return None;
    }
    let mut t = 0;
    while holds(t + 1) {
        t += 1;
    }
    Some(t)
}

fn signs_ok(a0: &nalgebra::DMatrix<f64>, a: &nalgebra::DMatrix<f64>) -> bool {
    a0.iter().zip(a.iter()).all(|(x, y)| x * y > 0.0)
}

fn step_record(t: usize, net: &Network, ds: &LabeledDataset, full: &Evaluation, eta: f64, a0: &nalgebra::DMatrix<f64>) -> StepRecord {
    let margins = crate::models::margins_from_outputs(&full.pass.out, &ds.targets());
    let (mut lo, mut arg, mut hi) = (f64::INFINITY, 0, f64::NEG_INFINITY);
    for (i, &z) in margins.iter().enumerate() {
        if z < lo {
            lo = z;
            arg = i;
        }
        hi = hi.max(z);
    }
    let out = &full.pass.out;
    StepRecord {
        t,
        loss: full.loss,
        eta,
        grad_norm: linalg::norm(&full.grad),
        min_margin: lo,
        argmin_margin: arg,
        max_margin: hi,
        param_norm: net.param_norm(),
        max_abs_pred: out.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())),
        max_pred: out.iter().fold(f64::NEG_INFINITY, |acc: f64, &v| acc.max(v)),
        a_sign_ok: signs_ok(a0, &net.output_weights()),
        batch_inner: None,
    }
}

/// Runs the configured optimizer from `net0`.
pub fn run(
    net0: &Network,
    ds: &LabeledDataset,
    loss: &LossFamily,
    schedule: &LrSchedule,
    config: &TrainConfig,
) -> Result<(RunRecord, Network)> {
    run_with(net0, ds, loss, schedule, config, |_| Ok(()))
}

/// [`run`] with a callback invoked at every step t = 0, …, final step.
pub fn run_with<F>(
    net0: &Network,
    ds: &LabeledDataset,
    loss: &LossFamily,
    schedule: &LrSchedule,
    config: &TrainConfig,
    mut observer: F,
) -> Result<(RunRecord, Network)>
where
    F: FnMut(&StepContext<'_>) -> Result<()>,
{
    schedule.validate()?;
    config.validate(net0)?;
    let variant = net0.variant();
    let a0 = net0.output_weights();
    let mut sampler = match config.batching {
        Batching::Full => None,
        Batching::Stochastic { batch, seed, replacement } => Some(BatchSampler::new(ds.n(), batch, seed, replacement)?),
    };

    let mut net = net0.clone();
    let mut steps = Vec::new();
    let mut status = RunStatus::Completed;
    let mut first_bad = None;
    let mut t = 0;
    loop {
        let full = evaluate(&net, ds, loss, None, config.trained_layers)?;
        if !full.loss.is_finite() || full.grad.iter().any(|g| !g.is_finite()) {
            status = RunStatus::Aborted { step: t, what: "non-finite loss or gradient".into() };
            break;
        }
        let last = t == config.steps || full.loss < EARLY_STOP_LOSS;
        let eta = schedule.eta_at(t, full.loss);
        let mut rec = step_record(t, &net, ds, &full, eta, &a0);
        if first_bad.is_none() && !ok_for_hitting(variant, &rec) {
            first_bad = Some(t);
        }

        if last {
            observer(&StepContext { t, net: &net, full: &full, batch: None, eta })?;
            if full.loss < EARLY_STOP_LOSS && t < config.steps {
                status = RunStatus::EarlyStopped { step: t };
            }
            if t % config.record_every == 0 || t == config.steps || status != RunStatus::Completed {
                steps.push(rec);
            }
            break;
        }
        if !eta.is_finite() || !(eta > 0.0) {
            status = RunStatus::ConvergedExactly { step: t };
            steps.push(rec);
            break;
        }

        let next = match sampler.as_mut() {
            None => {
                observer(&StepContext { t, net: &net, full: &full, batch: None, eta })?;
                apply(&net, &full.grad, eta)?
            }
            Some(s) => {
                let idx = s.sample();
                let be = evaluate(&net, ds, loss, Some(&idx), config.trained_layers)?;
                if be.grad.iter().any(|g| !g.is_finite()) {
                    status = RunStatus::Aborted { step: t, what: "non-finite batch gradient".into() };
                    steps.push(rec);
                    break;
                }
                rec.batch_inner = Some(linalg::dot(&full.grad, &be.grad));
                observer(&StepContext { t, net: &net, full: &full, batch: Some((&idx, &be.grad)), eta })?;
                apply(&net, &be.grad, eta)?
            }
        };
        if t % config.record_every == 0 {
            steps.push(rec);
        }
        net = next;
        t += 1;
    }

    let measured_t = HittingTime::from_first_violation(first_bad, t);
    let record = RunRecord {
        loss: loss.key().to_string(),
        schedule: *schedule,
        schedule_check: schedule.check(),
        config: *config,
        variant,
        dataset_digest: ds.digest(),
        steps,
        status,
        final_step: t,
        measured_t,
        t_e: None,
        t_star: match schedule {
            LrSchedule::Constant { eta } => Some(tstar(*eta, variant)),
            _ => None,
        },
    };
    Ok((record, net))
}

pub const STEPS_CSV_HEADER: &str = "t,loss,eta,grad_norm,min_margin,max_margin,param_norm,max_abs_pred,a_sign_ok";

/// The step records as CSV text (shortest round-trip float formatting).
pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut s = String::with_capacity(64 * (steps.len() + 1));
    s.push_str(STEPS_CSV_HEADER);
    s.push('\n');
    for r in steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.t, r.loss, r.eta, r.grad_norm, r.min_margin, r.max_margin, r.param_norm, r.max_abs_pred, r.a_sign_ok
        );
    }
    s
}

pub fn write_steps_csv(steps: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, steps_csv(steps))?;
    Ok(())
}

/// sha256 of the steps CSV; identical runs give identical digests.
pub fn record_digest(record: &RunRecord) -> String {
    hex::encode(Sha256::digest(steps_csv(&record.steps).as_bytes()))
}
