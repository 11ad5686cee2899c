//! One experiment end to end: build the data and model, train with the
//! certificates attached, write the run directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BatchSpec, DatasetSpec, ExperimentConfig, ExperimentKind, KappaSpec, ScheduleSpec};
use crate::certificates::{
    self as cert, BudgetRegime, CertificateReport, CertificateSet, CertificateSummary, HessianRegime, ProbabilityBudget,
    RateKind, TheoryConstants, Verdict, DENSE_EIGEN_LIMIT,
};
use crate::datasets::{self, DataConstants, LabeledDataset, SeparabilityReport, SIGN_TOL};
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{self, LossFamily};
use crate::models::{self, InitSpec, Network, TrainedLayers, Variant};
use crate::partition::{self, DynamicsChecker, DynamicsReport, PartitionFrame};
use crate::prm::{self, PrmRunRecord, TeacherStudentConfig};
use crate::training::{self, Batching, HittingTime, LrSchedule, RunRecord, RunStatus, StepContext, TrainConfig};

pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CERTIFICATES_FILE: &str = "certificates.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Grid size for the loss-constant checks of `certify-only` runs.
const CONSTANT_GRID: usize = 10_001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub dataset: Option<String>,
    pub dataset_digest: Option<String>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub m: Option<usize>,
    pub kappa: Option<f64>,
    pub loss: Option<String>,
    pub status: Option<RunStatus>,
    pub final_step: Option<usize>,
    pub measured_t: Option<HittingTime>,
    pub t_star: Option<u64>,
    pub t_e: Option<u64>,
    pub loss_initial: Option<f64>,
    pub loss_final: Option<f64>,
    /// L(0) − L(T*) for the early kinds and PRM, L(0) − L(final) otherwise.
    pub descent: Option<f64>,
    pub descent_bound: Option<f64>,
    pub budget: Option<ProbabilityBudget>,
    /// False when some hypothesis of the certified bounds does not hold; the
    /// failures of such a run are reported as inconclusive.
    pub within_hypotheses: bool,
    pub constants: Option<TheoryConstants>,
    pub notes: Vec<String>,
    pub certificates: Vec<CertificateSummary>,
    pub certificates_failed: usize,
    pub aborted: bool,
    pub failed: bool,
    pub steps_digest: String,
    pub certificates_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub dataset_digest: Option<String>,
    pub steps_digest: String,
    pub certificates_digest: String,
    pub files: Vec<String>,
    pub interpretation: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub summary: RunSummary,
    pub certificates: CertificateSet,
    pub steps_csv: String,
    pub certificates_json: String,
    pub record: Option<RunRecord>,
    pub prm_record: Option<PrmRunRecord>,
}

impl ExperimentOutcome {
    pub fn failed(&self) -> bool {
        self.summary.failed
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn build_dataset(spec: &DatasetSpec, default_seed: u64) -> Result<LabeledDataset> {
    match spec {
        DatasetSpec::SyntheticOrthant { n, d, seed, include_antipodal } => {
            datasets::gen_orthant_separable(*n, *d, seed.unwrap_or(default_seed), *include_antipodal)
        }
        DatasetSpec::SyntheticMulticlass { n, d, classes, seed } => {
            datasets::gen_nonnegative_multiclass(*n, *d, *classes, seed.unwrap_or(default_seed))
        }
        DatasetSpec::Mnist { images, labels, count, normalize } => datasets::load_mnist(images, labels, *count, *normalize),
        DatasetSpec::Cifar10 { path, count, normalize } => datasets::load_cifar10(path, *count, *normalize),
        DatasetSpec::Csv { path, classes } => datasets::read_csv(path, *classes),
    }
}

/// Runs `cfg` and, when `out` is given, writes steps.csv, summary.json,
/// certificates.json and manifest.json there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut outcome = match cfg.kind {
        ExperimentKind::Prm => run_prm(cfg)?,
        ExperimentKind::CertifyOnly => run_certify_only(cfg)?,
        _ => run_network(cfg)?,
    };
    outcome.certificates_json = outcome.certificates.to_json()?;
    let s = &mut outcome.summary;
    s.certificates = outcome.certificates.summaries();
    s.certificates_failed = outcome.certificates.reports.values().flatten().filter(|r| r.verdict == Verdict::Fail).count();
    s.failed = s.certificates_failed > 0 || s.aborted;
    s.steps_digest = sha256_hex(&outcome.steps_csv);
    s.certificates_digest = sha256_hex(&outcome.certificates_json);
    if let Some(dir) = out {
        write_run(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, o: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(STEPS_FILE), &o.steps_csv)?;
    fs::write(dir.join(CERTIFICATES_FILE), &o.certificates_json)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&o.summary)?)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        dataset_digest: o.summary.dataset_digest.clone(),
        steps_digest: o.summary.steps_digest.clone(),
        certificates_digest: o.summary.certificates_digest.clone(),
        files: [STEPS_FILE, SUMMARY_FILE, CERTIFICATES_FILE].iter().map(|s| s.to_string()).collect(),
        interpretation: vec![
            "iterations are optimizer steps; one step uses one mini-batch (or the full batch)".into(),
            "L(0) − L(T*) is measured between the initial parameters and those after T* updates".into(),
        ],
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn empty_summary(cfg: &ExperimentConfig) -> RunSummary {
    RunSummary {
        kind: cfg.kind,
        seed: cfg.seed,
        dataset: None,
        dataset_digest: None,
        n: None,
        d: None,
        m: None,
        kappa: None,
        loss: None,
        status: None,
        final_step: None,
        measured_t: None,
        t_star: None,
        t_e: None,
        loss_initial: None,
        loss_final: None,
        descent: None,
        descent_bound: None,
        budget: None,
        within_hypotheses: true,
        constants: None,
        notes: Vec::new(),
        certificates: Vec::new(),
        certificates_failed: 0,
        aborted: false,
        failed: false,
        steps_digest: String::new(),
        certificates_digest: String::new(),
    }
}

/// T as a number for reports: the hit value, the established lower bound, or
/// −1 when empty.
pub fn hitting_value(h: HittingTime) -> f64 {
    match h {
        HittingTime::Hit { t } => t as f64,
        HittingTime::NotHit { lower_bound } => lower_bound as f64,
        HittingTime::Empty => -1.0,
    }
}

pub fn hitting_label(h: HittingTime) -> String {
    match h {
        HittingTime::Hit { t } => t.to_string(),
        HittingTime::NotHit { lower_bound } => format!(">={lower_bound}"),
        HittingTime::Empty => "empty".into(),
    }
}

/// Up to `k` distinct integers spread evenly over [lo, hi].
fn sample_points(lo: usize, hi: usize, k: usize) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    if k == 0 || hi < lo {
        return s;
    }
    if k == 1 {
        s.insert(lo);
        return s;
    }
    for q in 0..k {
        s.insert(lo + ((hi - lo) as f64 * q as f64 / (k - 1) as f64).round() as usize);
    }
    s
}

fn dynamics_report(id: &str, rep: &DynamicsReport) -> CertificateReport {
    let detail = match rep.violations.first() {
        Some(v) => format!(
            "{} transitions, first violation {} at t={} (sample {}, neuron {}): {}",
            rep.transitions_checked, v.rule, v.step, v.sample, v.neuron, v.detail
        ),
        None => format!("{} transitions, {:?}", rep.transitions_checked, rep.status),
    };
    let mut r = CertificateReport::at_most(id, 0.0, rep.violations.len() as f64, detail);
    if rep.status != partition::CheckStatus::Checked {
        r.verdict = Verdict::Inconclusive;
        r.pass = false;
    }
    r
}

fn hitting_report(id: &str, bound: u64, measured: HittingTime) -> CertificateReport {
    let mut r = CertificateReport::at_least(id, bound as f64, hitting_value(measured), format!("measured T {}", hitting_label(measured)));
    if let HittingTime::NotHit { lower_bound } = measured {
        if (lower_bound as u64) < bound {
            // The horizon was too short to establish T ≥ bound either way.
            r.verdict = Verdict::Inconclusive;
        }
    }
    r
}

struct Setup {
    variant: Variant,
    family: LossFamily,
    schedule: LrSchedule,
    train: TrainConfig,
    kappa: f64,
    /// η for the early kinds, η0 for the global ones.
    eta: f64,
    batch: usize,
    report: SeparabilityReport,
    data_constants: Option<DataConstants>,
    budget: ProbabilityBudget,
    notes: Vec<String>,
    hyp_ok: bool,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn setup(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<Setup> {
    let kind = cfg.kind;
    let model = cfg.model.as_ref().expect("validated");
    let train = cfg.train.as_ref().expect("validated");
    let sched = cfg.schedule.as_ref().expect("validated");
    let loss_key = cfg.loss.as_deref().expect("validated");
    let global = matches!(kind, ExperimentKind::GlobalPoly | ExperimentKind::GlobalExp);
    let mut notes = Vec::new();
    let mut hyp_ok = true;
    let mut flag = |ok: bool, note: String, notes: &mut Vec<String>| {
        if !ok {
            hyp_ok = false;
            notes.push(note);
        }
    };

    let variant = match kind {
        ExperimentKind::EarlyMulticlass => {
            if ds.is_binary() {
                return Err(config_err("early-multiclass needs a dataset with class labels"));
            }
            Variant::MultiBias
        }
        _ => {
            if !ds.is_binary() {
                return Err(config_err(format!("{kind:?} needs a dataset with binary labels")));
            }
            Variant::BinaryNoBias
        }
    };

    let family = if global {
        let base = LossFamily::from_key(loss_key)?
            .base()
            .ok_or_else(|| config_err("global kinds need an exponential-type loss (exp or logistic)"))?;
        LossFamily::exp_type(base).map_err(|e| config_err(e.to_string()))?
    } else {
        LossFamily::from_key(loss_key)?
    };
    match kind {
        ExperimentKind::EarlyBinary => flag(loss_key == "quadratic", format!("loss `{loss_key}` is not the quadratic loss"), &mut notes),
        ExperimentKind::EarlyMulticlass => {
            if let LossFamily::General { g_min, g_max, h_max, .. } = family {
                let ok = g_min >= 0.5 && g_max <= 1.0 && h_max <= 1.0;
                flag(ok, format!("loss `{loss_key}` has g_min={g_min}, g_max={g_max}, h_max={h_max}; need g_min ≥ 1/2, g_max ≤ 1, h_max ≤ 1"), &mut notes);
            } else {
                flag(false, "the quadratic loss is not covered for the multi-class net".into(), &mut notes);
            }
        }
        _ => {}
    }

    let (batching, batch) = match &train.batch {
        None => (Batching::Full, ds.n()),
        Some(BatchSpec { size, seed, replacement }) => {
            (Batching::Stochastic { batch: *size, seed: *seed, replacement: *replacement }, *size)
        }
    };
    let train_cfg = TrainConfig { steps: train.steps, batching, trained_layers: train.trained_layers, record_every: train.record_every };
    if !global && train.record_every != 1 {
        return Err(config_err("early kinds need train.record_every = 1"));
    }
    if global && train.trained_layers == TrainedLayers::All && kind == ExperimentKind::GlobalExp {
        flag(false, "the loss-inverse schedule is analysed for input-layer-only training".into(), &mut notes);
    }

    let report = if ds.is_binary() { datasets::validate_separable(ds)? } else { datasets::validate_concentrated(ds) };
    let data_constants = if ds.is_binary() { Some(datasets::compute_v(ds, model.m as f64, cfg.delta)?) } else { None };

    let (n, m) = (ds.n(), model.m);
    let schedule = match (kind, sched) {
        (ExperimentKind::EarlyBinary | ExperimentKind::EarlyMulticlass, ScheduleSpec::Constant { eta }) => LrSchedule::Constant { eta: *eta },
        (ExperimentKind::GlobalExp, ScheduleSpec::LossInverse { eta0, c }) => LrSchedule::LossInverse { eta0: *eta0, c: *c },
        (ExperimentKind::GlobalPoly, ScheduleSpec::TwoStagePoly { eta0, c, c_prime, r, force_stage2_at }) => {
            let v = data_constants.as_ref().map_or(0.0, |k| k.v);
            let c = c.unwrap_or_else(|| training::poly_c_max(*eta0));
            let mut s = LrSchedule::two_stage_poly(*eta0, c, *c_prime, *r, n, v);
            if let LrSchedule::TwoStagePoly { force_stage2_at: f, .. } = &mut s {
                *f = *force_stage2_at;
            }
            s
        }
        (k, s) => return Err(config_err(format!("schedule {s:?} does not fit kind {k:?}"))),
    };
    schedule.validate().map_err(|e| config_err(e.to_string()))?;
    let check = schedule.check();
    for note in &check.notes {
        flag(false, note.clone(), &mut notes);
    }
    notes.extend(check.info.iter().cloned());
    let eta = match schedule {
        LrSchedule::Constant { eta } => eta,
        LrSchedule::LossInverse { eta0, .. } | LrSchedule::TwoStagePoly { eta0, .. } => eta0,
    };

    let auto = match kind {
        ExperimentKind::EarlyMulticlass => Some(cert::kappa_theorem2(eta, batch)),
        _ => report.mu0.map(|mu0| cert::kappa_theorem1(eta, n, mu0)),
    };
    let kappa = match &model.kappa {
        KappaSpec::Value(k) => {
            if let Some(a) = auto {
                flag(*k <= a, format!("κ = {k} exceeds the theorem setting {a}"), &mut notes);
            }
            *k
        }
        KappaSpec::Keyword(_) => auto.ok_or_else(|| config_err("model.kappa = \"auto\" needs orthogonally separable data (μ0 undefined)"))?,
    };

    match kind {
        ExperimentKind::EarlyMulticlass => {
            flag(m >= 6, format!("m = {m} is below 6"), &mut notes);
            flag(report.s >= -SIGN_TOL, format!("minimum pairwise inner product {} is negative", report.s), &mut notes);
        }
        _ => {
            flag(report.satisfies_4_1_i, "data are not orthogonally separable".into(), &mut notes);
            if kind == ExperimentKind::EarlyBinary {
                let need = cert::min_width_theorem1(n, cfg.delta);
                flag(m as f64 >= need, format!("m = {m} is below max{{144 log(2n²/δ), 4}} = {need:.1}"), &mut notes);
            } else if let Some(k) = &data_constants {
                flag(!k.v_vacuous, format!("V = {} is not positive at this width", k.v), &mut notes);
            }
        }
    }

    let budget = match variant {
        Variant::BinaryNoBias => cert::probability_budget(BudgetRegime::Binary, cfg.delta, m, ds.d(), None),
        Variant::MultiBias => {
            let b = matches!(batching, Batching::Stochastic { .. }).then_some(batch);
            cert::probability_budget(BudgetRegime::MultiClass, cfg.delta, m, ds.d(), b)
        }
    };
    if budget.vacuous {
        notes.push(format!("probability budget {} is vacuous", budget.total));
    }

    Ok(Setup { variant, family, schedule, train: train_cfg, kappa, eta, batch, report, data_constants, budget, notes, hyp_ok })
}

fn init_network(m: usize, ds: &LabeledDataset, kappa: f64, seed: u64, variant: Variant) -> Result<Network> {
    let spec = InitSpec { kappa, seed, variant };
    Ok(match variant {
        Variant::BinaryNoBias => Network::Binary(models::init_binary(m, ds.d(), &spec)?),
        Variant::MultiBias => Network::Multi(models::init_multi(m, ds.d(), ds.classes(), &spec)?),
    })
}

fn run_network(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let kind = cfg.kind;
    let ds = build_dataset(cfg.dataset.as_ref().expect("validated"), cfg.seed)?;
    let st = setup(cfg, &ds)?;
    let m = cfg.model.as_ref().expect("validated").m;
    let net0 = init_network(m, &ds, st.kappa, cfg.seed, st.variant)?;
    let (n, delta) = (ds.n(), cfg.delta);
    let early = matches!(kind, ExperimentKind::EarlyBinary | ExperimentKind::EarlyMulticlass);
    let t_star = early.then(|| training::tstar(st.eta, st.variant));
    let horizon = t_star.map_or(cfg.train.as_ref().expect("validated").steps, |t| t as usize);

    let hessian_regime = match kind {
        ExperimentKind::EarlyBinary => (st.family == LossFamily::Quadratic).then_some(HessianRegime::EarlyBinary),
        ExperimentKind::EarlyMulticlass => Some(HessianRegime::MultiClass),
        _ => Some(match st.train.trained_layers {
            TrainedLayers::InputOnly => HessianRegime::InputOnly,
            TrainedLayers::All => HessianRegime::GlobalAllLayers,
        }),
    };
    let mut notes = st.notes.clone();
    let dense_ok = match hessian_regime {
        Some(HessianRegime::InputOnly) => true,
        Some(_) => net0.num_params() <= DENSE_EIGEN_LIMIT,
        None => false,
    };
    if hessian_regime.is_some() && !dense_ok {
        notes.push(format!("Hessian checks skipped: {} parameters exceed {DENSE_EIGEN_LIMIT}", net0.num_params()));
    }
    let hessian_at = if cfg.certify && dense_ok {
        let lo = usize::from(!early);
        sample_points(lo, horizon.min(st.train.steps), cfg.hessian_points)
    } else {
        BTreeSet::new()
    };

    let mut certs = CertificateSet::default();
    let mut checker = match kind {
        ExperimentKind::EarlyBinary | ExperimentKind::EarlyMulticlass => DynamicsChecker::early(st.variant),
        _ => DynamicsChecker::global(),
    };
    let (gamma1, gamma2) = match &st.data_constants {
        Some(k) => (k.gamma1, k.gamma2),
        None => (f64::NAN, f64::NAN),
    };

    let observer = |ctx: &StepContext<'_>| -> Result<()> {
        if !cfg.certify {
            return Ok(());
        }
        let t = ctx.t;
        if !early || t <= horizon {
            checker.observe(PartitionFrame::capture(ctx.net, &ds, t)?)?;
        }
        if early && t <= horizon {
            match kind {
                ExperimentKind::EarlyBinary if t >= 1 => {
                    let g = cert::gram_matrix(ctx.net, &ds)?;
                    let block = cert::check_block_structure(&g, &ds)?;
                    certs.push(
                        CertificateReport::at_most("gram_cross_class_zero", 0.0, block.nonzero_count as f64, format!("{} nonzero cross-class entries", block.nonzero_count))
                            .at_step(t),
                    );
                    certs.push(cert::check_gram_lower_bound(&g, &ds, m, delta)?.to_report("gram_lower_bound", t));
                }
                ExperimentKind::EarlyMulticlass => {
                    if t >= 1 {
                        certs.push(cert::multi_gram_certificate(ctx.net, &ds, 1.0)?.to_report("gram_multiclass", t));
                    }
                    let (inner, how) = match ctx.batch {
                        Some((_, bg)) => (linalg::dot(&ctx.full.grad, bg), "⟨∇L, ∇L_B⟩"),
                        None => (linalg::dot(&ctx.full.grad, &ctx.full.grad), "‖∇L‖² (full batch)"),
                    };
                    if t < horizon || ctx.batch.is_none() {
                        certs.push(CertificateReport::at_least("stochastic_inner", cert::STOCHASTIC_INNER_BOUND, inner, how).at_step(t));
                    }
                }
                _ => {}
            }
        }
        if let (true, Some(regime)) = (hessian_at.contains(&t), hessian_regime) {
            certs.push(cert::check_hessian_bound(ctx.net, &ds, &st.family, regime)?.at_step(t));
        }
        Ok(())
    };
    let (mut record, _net) = training::run_with(&net0, &ds, &st.family, &st.schedule, &st.train, observer)?;
    record.t_e = early.then(|| training::exp_hitting_time_te(st.eta, n, m, delta, st.variant)).flatten();

    let l0 = record.loss_at(0);
    let lfinal = record.steps.last().map(|s| s.loss);
    let mut descent = None;
    let mut descent_bound = None;
    if cfg.certify {
        let dyn_rep = checker.finish();
        match kind {
            ExperimentKind::EarlyBinary | ExperimentKind::EarlyMulticlass => {
                let ts = t_star.expect("early");
                certs.push(dynamics_report("partition_dynamics_early", &dyn_rep));
                certs.push(hitting_report("hitting_time_tstar", ts, record.measured_t));
                match record.t_e {
                    Some(te) => certs.push(hitting_report("hitting_time_te", te, record.measured_t)),
                    None => notes.push("T_e is empty for this η".into()),
                }
                let bound = if kind == ExperimentKind::EarlyBinary {
                    cert::descent_bound_theorem1(gamma1, gamma2, n, m as f64, delta)
                } else {
                    cert::descent_bound_theorem2()
                };
                descent_bound = Some(bound);
                match (l0, record.loss_at(ts as usize)) {
                    (Some(a), Some(b)) => {
                        descent = Some(a - b);
                        certs.push(CertificateReport::at_least("loss_descent", bound, a - b, format!("L(0) = {a}, L(T*) = {b}")).at_step(ts as usize));
                    }
                    _ => {
                        let mut r = CertificateReport::at_least("loss_descent", bound, f64::NAN, "run ended before T*");
                        r.verdict = Verdict::Inconclusive;
                        certs.push(r);
                    }
                }
                if kind == ExperimentKind::EarlyBinary {
                    let scope = (ts as usize).min(hitting_value(record.measured_t).max(0.0) as usize);
                    for s in record.steps.iter().filter(|s| s.t <= scope) {
                        let b = cert::gradient_lower_bound_early(s.t, st.eta, n, m, delta, gamma1, gamma2);
                        let r = CertificateReport::at_least("gradient_lower_bound_early", b.value, s.grad_norm * s.grad_norm, "‖∇L‖²").at_step(s.t);
                        certs.push(r.downgrade_if(b.vacuous));
                    }
                    let stats = partition::initial_partition_stats(&net0, &ds, delta)?;
                    certs.push(CertificateReport::at_most(
                        "initial_partition",
                        stats.bound,
                        stats.max_deviation,
                        format!("{} same-class pairs", stats.pairs.len()),
                    ));
                }
            }
            _ => {
                let k = st.data_constants.as_ref().expect("binary data");
                certs.push(dynamics_report("partition_dynamics_global", &dyn_rep));
                let cc = match partition::check_correct_classification(&record.steps) {
                    None => CertificateReport::at_most("correct_classification", 0.0, 0.0, "all margins positive for t ≥ 1"),
                    Some((t, i)) => CertificateReport::at_most("correct_classification", 0.0, 1.0, format!("sample {i} misclassified")).at_step(t),
                };
                certs.push(cc);
                for s in record.steps.iter().filter(|s| s.t >= 1) {
                    let b = cert::gradient_lower_bound_global(s.loss, k.v);
                    let r = CertificateReport::at_least("gradient_lower_bound_global", b.value, s.grad_norm * s.grad_norm, "‖∇L‖² vs V·L²").at_step(s.t);
                    certs.push(r.downgrade_if(b.vacuous));
                }
                let rate = match st.schedule {
                    LrSchedule::LossInverse { c, .. } => Some((RateKind::Exponential { v: k.v, c }, usize::MAX)),
                    LrSchedule::TwoStagePoly { c, t0, force_stage2_at, .. } => {
                        let switch = force_stage2_at.or(t0).map_or(usize::MAX, |s| s.min(usize::MAX as u64) as usize);
                        if switch <= st.train.steps {
                            notes.push(format!("stage 2 starts at t = {switch}; only stage 1 is certified"));
                        }
                        Some((RateKind::PolyStage1 { v: k.v, c }, switch))
                    }
                    LrSchedule::Constant { .. } => None,
                };
                if let Some((kind, until)) = rate {
                    let stage: Vec<_> = record.steps.iter().filter(|s| s.t < until).cloned().collect();
                    match cert::fit_convergence_rate(&stage, kind) {
                        Ok(rep) => certs.push(rep.report),
                        Err(e) => notes.push(format!("rate check skipped: {e}")),
                    }
                }
                if let (Some(a), Some(b)) = (l0, lfinal) {
                    descent = Some(a - b);
                }
            }
        }
    }

    let vacuous = st.budget.vacuous;
    let hyp_ok = st.hyp_ok;
    let downgraded: Vec<CertificateReport> = certs.reports.into_values().flatten().map(|r| r.with_budget(vacuous).downgrade_if(!hyp_ok)).collect();
    let mut certs = CertificateSet::default();
    certs.extend(downgraded);

    let constants = TheoryConstants {
        delta,
        kappa: st.kappa,
        eta: Some(st.eta),
        m,
        n,
        d: ds.d(),
        batch: matches!(st.train.batching, Batching::Stochastic { .. }).then_some(st.batch),
        classes: if ds.is_binary() { 2 } else { ds.classes() },
        mu0: st.report.mu0,
        s: Some(st.report.s),
        gamma: Some(st.report.gamma),
        gamma1: st.data_constants.as_ref().map(|k| k.gamma1),
        gamma2: st.data_constants.as_ref().map(|k| k.gamma2),
        v: st.data_constants.as_ref().map(|k| k.v),
        loss: Some(st.family),
        c: match st.schedule {
            LrSchedule::LossInverse { c, .. } | LrSchedule::TwoStagePoly { c, .. } => Some(c),
            LrSchedule::Constant { .. } => None,
        },
        c_prime: match st.schedule {
            LrSchedule::TwoStagePoly { c_prime, .. } => Some(c_prime),
            _ => None,
        },
        r: match st.schedule {
            LrSchedule::TwoStagePoly { r, .. } => Some(r),
            _ => None,
        },
        t0: match st.schedule {
            LrSchedule::TwoStagePoly { t0, .. } => t0,
            _ => None,
        },
    };
    let mut summary = empty_summary(cfg);
    summary.dataset = Some(ds.source.clone());
    summary.dataset_digest = Some(ds.digest());
    summary.n = Some(n);
    summary.d = Some(ds.d());
    summary.m = Some(m);
    summary.kappa = Some(st.kappa);
    summary.loss = Some(st.family.key().to_string());
    summary.status = Some(record.status.clone());
    summary.final_step = Some(record.final_step);
    summary.measured_t = Some(record.measured_t);
    summary.t_star = t_star;
    summary.t_e = record.t_e;
    summary.loss_initial = l0;
    summary.loss_final = lfinal;
    summary.descent = descent;
    summary.descent_bound = descent_bound;
    summary.budget = Some(st.budget);
    summary.within_hypotheses = hyp_ok;
    summary.constants = Some(constants);
    summary.notes = notes;
    summary.aborted = record.aborted();
    Ok(ExperimentOutcome {
        summary,
        certificates: certs,
        steps_csv: training::steps_csv(&record.steps),
        certificates_json: String::new(),
        record: Some(record),
        prm_record: None,
    })
}

/// Resolves the PRM section into a full teacher-student configuration.
pub fn prm_config(cfg: &ExperimentConfig) -> Result<TeacherStudentConfig> {
    let p = cfg.prm.as_ref().ok_or_else(|| config_err("`prm` section is required"))?;
    let eta = p.eta.unwrap_or_else(|| prm::eta_bound(p.d, p.m, p.big_m, p.kappa));
    let mut tc = TeacherStudentConfig { d: p.d, m: p.m, big_m: p.big_m, kappa: p.kappa, eta, seed: cfg.seed, steps: 0 };
    tc.validate().map_err(|e| config_err(e.to_string()))?;
    tc.steps = match p.steps {
        Some(s) => s,
        None => prm::tstar_prm(&tc)
            .map(|t| t as usize + 1)
            .ok_or_else(|| config_err("T* is empty for this configuration; set prm.steps"))?,
    };
    Ok(tc)
}

fn run_prm(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let tc = prm_config(cfg)?;
    let rec = prm::run_prm_gd(&tc)?;
    let mut notes = Vec::new();
    let mut hyp_ok = true;
    if !rec.eta_compliant {
        hyp_ok = false;
        notes.push(format!("η = {} exceeds the admissible {}", tc.eta, rec.eta_bound));
    }
    if tc.big_m < tc.d {
        hyp_ok = false;
        notes.push(format!("M = {} is below d = {}", tc.big_m, tc.d));
    }
    if rec.extension_teacher {
        notes.push("M > d: teacher rows beyond the basis are random points on the 1/M sphere".into());
    }
    let mut certs = CertificateSet::default();
    if cfg.certify {
        certs.push(prm::prm_descent_certificate(&tc, &rec));
        match rec.t_star {
            Some(ts) => certs.push(hitting_report("prm_hitting_time", ts, rec.measured_t)),
            None => notes.push("T* is empty".into()),
        }
        let scope = hitting_value(rec.measured_t);
        if scope >= 0.0 {
            certs.push(CertificateReport::at_most(
                "prm_norm_growth",
                0.0,
                rec.norm_growth_failures.len() as f64,
                format!("steps failing ‖w(t)‖ < ‖w(t+1)‖ < 2‖w(t)‖: {:?}", rec.norm_growth_failures),
            ));
            for s in rec.steps.iter().filter(|s| s.t as f64 <= scope) {
                let lo = prm::gradient_lower_bound_prm(&tc, s.sum_norms);
                let hi = prm::gradient_upper_bound_prm(s.sum_norms);
                certs.push(CertificateReport::at_least("prm_gradient_lower", lo, s.min_row_grad, "min_k ‖∂L/∂w_k‖").at_step(s.t));
                certs.push(CertificateReport::at_most("prm_gradient_upper", hi, s.max_row_grad, "max_k ‖∂L/∂w_k‖").at_step(s.t));
            }
        }
    }
    let downgraded: Vec<_> = certs.reports.into_values().flatten().map(|r| r.downgrade_if(!hyp_ok)).collect();
    let mut certs = CertificateSet::default();
    certs.extend(downgraded);

    let l0 = prm::teacher_energy(&tc);
    let mut summary = empty_summary(cfg);
    summary.d = Some(tc.d);
    summary.m = Some(tc.m);
    summary.kappa = Some(tc.kappa);
    summary.loss = Some("population".into());
    summary.status = Some(RunStatus::Completed);
    summary.final_step = Some(tc.steps);
    summary.measured_t = Some(rec.measured_t);
    summary.t_star = rec.t_star;
    summary.loss_initial = rec.loss_at(0);
    summary.loss_final = rec.steps.last().map(|s| s.loss);
    summary.descent = rec.t_star.and_then(|ts| rec.loss_at(ts as usize + 1)).map(|l| l0 - l);
    summary.descent_bound = Some(prm::prm_descent_bound(tc.d, tc.big_m, tc.kappa));
    summary.within_hypotheses = hyp_ok;
    notes.push(format!("loss at θ = 0: {l0}"));
    summary.notes = notes;
    Ok(ExperimentOutcome {
        summary,
        certificates: certs,
        steps_csv: prm::prm_csv(&rec),
        certificates_json: String::new(),
        record: None,
        prm_record: Some(rec),
    })
}

fn run_certify_only(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let ds = build_dataset(cfg.dataset.as_ref().expect("validated"), cfg.seed)?;
    let mut certs = CertificateSet::default();
    let mut summary = empty_summary(cfg);
    if ds.is_binary() {
        let r = datasets::validate_separable(&ds)?;
        let indicator = if r.satisfies_4_1_i { 1.0 } else { 0.0 };
        certs.push(CertificateReport::at_least("orthogonal_separability", 1.0, indicator, format!("μ0 = {:?}", r.mu0)));
    } else {
        // Concentration is a hypothesis of the multi-class results only.
        let r = datasets::validate_concentrated(&ds);
        let mut c = CertificateReport::at_least("data_concentration", -1.0, r.s, "minimum pairwise inner product");
        if !r.satisfies_4_3 {
            c.pass = false;
            c.verdict = Verdict::Fail;
        }
        certs.push(c);
    }
    if let Some(key) = &cfg.loss {
        let general = LossFamily::from_key(key)?;
        if let LossFamily::General { .. } = general {
            let chk = losses::verify_general_constants(&general, CONSTANT_GRID)?;
            certs.push(constants_report("loss_constants_general", &chk));
            if let Some(base) = general.base() {
                if let Ok(exp) = LossFamily::exp_type(base) {
                    let chk = losses::verify_exptype_constants(&exp, 20.0, CONSTANT_GRID)?;
                    certs.push(constants_report("loss_constants_exp_type", &chk));
                }
            }
        }
    }
    if let (Some(model), true) = (&cfg.model, ds.is_binary()) {
        let k = datasets::compute_v(&ds, model.m as f64, cfg.delta)?;
        certs.push(CertificateReport::at_least("v_positive", 0.0, k.v, format!("V at m = {}", model.m)));
        summary.m = Some(model.m);
    }
    summary.dataset = Some(ds.source.clone());
    summary.dataset_digest = Some(ds.digest());
    summary.n = Some(ds.n());
    summary.d = Some(ds.d());
    summary.loss = cfg.loss.clone();
    Ok(ExperimentOutcome {
        summary,
        certificates: certs,
        steps_csv: format!("{}\n", training::STEPS_CSV_HEADER),
        certificates_json: String::new(),
        record: None,
        prm_record: None,
    })
}

fn constants_report(id: &str, chk: &losses::ConstantsCheck) -> CertificateReport {
    let (name, worst, z) = chk
        .slacks
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_else(|| ("none".into(), 0.0, 0.0));
    let mut r = CertificateReport::at_least(id, 0.0, worst, format!("tightest: {name} at z = {z}"));
    if !chk.pass {
        r.pass = false;
        r.verdict = Verdict::Fail;
    }
    r
}
