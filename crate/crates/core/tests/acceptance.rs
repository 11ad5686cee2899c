//! Acceptance suite: one line per criterion, `PASS`, `FAIL`, `XFAIL` (a known,
//! documented shortfall), `XPASS` (a known shortfall that no longer shows up)
//! or `SKIP` (input data absent). Exits non-zero on FAIL or XPASS.
//!
//! MNIST is read from `$RELUDYN_MNIST_DIR` or `<repo>/data/mnist`.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use relu_dynamics::certificates::{self as cert, CertificateReport, Verdict};
use relu_dynamics::cli::runner::{self, ExperimentOutcome};
use relu_dynamics::cli::ExperimentConfig;
use relu_dynamics::datasets;
use relu_dynamics::losses::LossFamily;
use relu_dynamics::models::{self, InitSpec, Network, Variant};
use relu_dynamics::partition::{self, PartitionFrame};
use relu_dynamics::prm::{self, TeacherStudentConfig};
use relu_dynamics::rng::Rng;
use relu_dynamics::training::{self, LrSchedule, TrainConfig};
use serde_json::{json, Value};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Pass,
    Fail,
    XFail,
    XPass,
    Skip,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::XFail => "XFAIL",
            Status::XPass => "XPASS",
            Status::Skip => "SKIP",
        }
    }
}

struct Suite {
    lines: Vec<(String, Status, String)>,
    /// (label, config, steps digest, certificates digest) of every run, for
    /// the determinism re-run.
    runs: Vec<(String, ExperimentConfig, String, String)>,
}

impl Suite {
    fn emit(&mut self, id: &str, status: Status, detail: String) {
        println!("{id:<5} {:<5}  {detail}", status.label());
        self.lines.push((id.to_string(), status, detail));
    }

    fn check(&mut self, id: &str, ok: bool, detail: String) {
        self.emit(id, if ok { Status::Pass } else { Status::Fail }, detail);
    }

    /// A sub-check that is expected to fail for a documented reason.
    fn xfail(&mut self, id: &str, ok: bool, detail: String) {
        self.emit(id, if ok { Status::XPass } else { Status::XFail }, detail);
    }

    fn skip(&mut self, id: &str, detail: &str) {
        self.emit(id, Status::Skip, detail.to_string());
    }

    fn run(&mut self, label: &str, cfg: &ExperimentConfig) -> ExperimentOutcome {
        let o = runner::run_experiment(cfg, None).unwrap_or_else(|e| panic!("{label}: {e}"));
        self.runs.push((label.to_string(), cfg.clone(), o.summary.steps_digest.clone(), o.summary.certificates_digest.clone()));
        o
    }

    fn timed(&mut self, id: &str, start: Instant, limit_s: f64) {
        let el = start.elapsed().as_secs_f64();
        self.check(id, el < limit_s, format!("runtime {el:.1} s (limit {limit_s} s)"));
    }
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config_value(name: &str) -> Value {
    let text = std::fs::read_to_string(repo().join("configs").join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn parse(v: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("RELUDYN_MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| repo().join("data/mnist"));
    (dir.join("train-images-idx3-ubyte").exists() && dir.join("train-labels-idx1-ubyte").exists()).then_some(dir)
}

fn reports<'a>(o: &'a ExperimentOutcome, id: &str) -> &'a [CertificateReport] {
    o.certificates.reports.get(id).map_or(&[], Vec::as_slice)
}

fn all_pass(rs: &[CertificateReport]) -> bool {
    !rs.is_empty() && rs.iter().all(|r| r.verdict == Verdict::Pass)
}

fn worst_slack(rs: &[CertificateReport]) -> f64 {
    rs.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
}

fn count_failed(rs: &[CertificateReport]) -> usize {
    rs.iter().filter(|r| !r.pass).count()
}

// ---------------------------------------------------------------------------

fn c1(s: &mut Suite) {
    let b = training::tstar(0.01, Variant::BinaryNoBias);
    let m: Vec<u64> = [0.01, 0.005, 0.002, 0.001].iter().map(|&e| training::tstar(e, Variant::MultiBias)).collect();
    s.check("C1", b == 44 && m == [34, 69, 173, 346], format!("binary {b}, multi {m:?}"));
}

fn c2(s: &mut Suite) {
    let v = cert::lemma_a9_sum(0.01, 44);
    let brute = cert::lemma_a9_sum_brute(0.01, 44);
    let ok = (v - 0.19659127915806962).abs() <= 1e-14 && (v - brute).abs() <= 1e-14;
    s.check("C2", ok, format!("closed form {v:.17}, summation {brute:.17}"));
}

/// Criterion 3 runs, reused by 6 and 7.
fn c3(s: &mut Suite) -> Vec<(usize, ExperimentOutcome)> {
    let Some(dir) = mnist_dir() else {
        s.skip("C3", "MNIST not found; run scripts/fetch_mnist.sh");
        return vec![];
    };
    let start = Instant::now();
    let mut base = config_value("mnist_multiclass.json");
    base["dataset"]["images"] = json!(dir.join("train-images-idx3-ubyte"));
    base["dataset"]["labels"] = json!(dir.join("train-labels-idx1-ubyte"));
    let bound = cert::descent_bound_theorem2();
    let mut out = vec![];
    for m in [100, 200, 500, 1000] {
        let mut v = base.clone();
        v["model"]["m"] = json!(m);
        let o = s.run(&format!("mnist m={m}"), &parse(&v));
        out.push((m, o));
    }
    let descents: Vec<String> = out.iter().map(|(m, o)| format!("m={m}: {:.4}", o.summary.descent.unwrap_or(f64::NAN))).collect();
    let all = out.iter().all(|(_, o)| o.summary.descent.is_some_and(|d| d >= bound));
    s.xfail("C3a", all, format!("L(0) − L(34) ≥ {bound} in every cell; {}", descents.join(", ")));
    let d200 = out.iter().find(|(m, _)| *m == 200).and_then(|(_, o)| o.summary.descent).unwrap_or(f64::NAN);
    s.xfail("C3b", (0.35..=0.60).contains(&d200), format!("m=200 descent {d200:.4} in [0.35, 0.60]"));
    let t_ok = out.iter().all(|(_, o)| o.summary.measured_t.is_some_and(|t| t.at_least(34)));
    s.check("C3c", t_ok, "hitting time T ≥ T* = 34 in every cell".into());
    s.timed("C3t", start, 120.0);
    out
}

fn c4(s: &mut Suite) -> Vec<ExperimentOutcome> {
    let start = Instant::now();
    let mut out = vec![];
    for seed in 1..=10u64 {
        let mut v = config_value("early_binary.json");
        v["seed"] = json!(seed);
        out.push(s.run(&format!("early_binary seed={seed}"), &parse(&v)));
    }
    let ok = out.iter().all(|o| match (o.summary.descent, o.summary.descent_bound) {
        (Some(d), Some(b)) => d >= b,
        _ => false,
    });
    let min_gap = out
        .iter()
        .map(|o| o.summary.descent.unwrap_or(f64::NAN) - o.summary.descent_bound.unwrap_or(f64::NAN))
        .fold(f64::INFINITY, f64::min);
    s.check("C4", ok, format!("L(0) − L(44) ≥ bound in all 10 seeds, smallest margin {min_gap:.4}"));
    let hyp = out.iter().all(|o| o.summary.within_hypotheses && o.summary.measured_t.is_some_and(|t| t.at_least(44)));
    s.check("C4h", hyp, "all runs within hypotheses with T ≥ 44".into());
    s.timed("C4t", start, 60.0);
    out
}

fn global_cfg(seed: u64, m: usize, steps: usize) -> ExperimentConfig {
    let mut v = config_value("global_exp.json");
    v["seed"] = json!(seed);
    v["model"]["m"] = json!(m);
    v["train"]["steps"] = json!(steps);
    parse(&v)
}

fn c5(s: &mut Suite, early: &[ExperimentOutcome]) {
    let start = Instant::now();
    let early_ok = early.iter().all(|o| all_pass(reports(o, "partition_dynamics_early")));
    let early_budget = early.iter().all(|o| o.summary.budget.is_some_and(|b| b.exponential_terms() < 1e-9));
    s.check("C5a", early_ok && early_budget, format!("early rules S1–S5: no violations in {} runs, budget < 1e-9", early.len()));

    let mut glob = vec![];
    for seed in 1..=10u64 {
        glob.push(s.run(&format!("global seed={seed}"), &global_cfg(seed, 512, 300)));
    }
    let g_ok = glob.iter().all(|o| all_pass(reports(o, "partition_dynamics_global")));
    let g_hyp = glob.iter().all(|o| o.summary.within_hypotheses && o.summary.budget.is_some_and(|b| b.exponential_terms() < 1e-9));
    s.check("C5b", g_ok && g_hyp, "global Stage-I/II rules: no violations in 10 compliant runs (m=512, d=20)".into());

    // η = 10 negative control, every step tracked.
    let ds = datasets::gen_orthant_separable(40, 30, 1, true).unwrap();
    let net0 = Network::Binary(models::init_binary(512, 30, &InitSpec { kappa: 1e-5, seed: 1, variant: Variant::BinaryNoBias }).unwrap());
    let mut frames = vec![];
    let _ = training::run_with(&net0, &ds, &LossFamily::Quadratic, &LrSchedule::Constant { eta: 10.0 }, &TrainConfig::full(10), |ctx| {
        frames.push(PartitionFrame::capture(ctx.net, &ds, ctx.t)?);
        Ok(())
    })
    .unwrap();
    let rep = partition::check_dynamics_early(&frames, Variant::BinaryNoBias).unwrap();
    s.check("C5c", !rep.violations.is_empty(), format!("η = 10 control: {} violations", rep.violations.len()));
    s.timed("C5t", start, 120.0);
}

fn c6(s: &mut Suite, early: &[ExperimentOutcome], mnist: &[(usize, ExperimentOutcome)]) {
    let zero: Vec<&CertificateReport> = early.iter().flat_map(|o| reports(o, "gram_cross_class_zero")).collect();
    let steps_ok = early.iter().all(|o| {
        let ts: Vec<usize> = reports(o, "gram_cross_class_zero").iter().filter_map(|r| r.step).collect();
        (1..=44).all(|t| ts.contains(&t))
    });
    let ok = steps_ok && zero.iter().all(|r| r.verdict == Verdict::Pass);
    s.check("C6a", ok, format!("cross-class block exactly 0 at t ∈ [1, 44], {} checks", zero.len()));

    if mnist.is_empty() {
        s.skip("C6b", "needs the criterion-3 runs");
    } else {
        let rs: Vec<CertificateReport> = mnist.iter().flat_map(|(_, o)| reports(o, "gram_multiclass").to_vec()).collect();
        s.check("C6b", all_pass(&rs), format!("multi-class Gram entries ≥ 1 at {} recorded steps, worst slack {:.4}", rs.len(), worst_slack(&rs)));
    }

    let rs: Vec<CertificateReport> = early.iter().flat_map(|o| reports(o, "gram_lower_bound").to_vec()).collect();
    s.xfail(
        "C6c",
        all_pass(&rs),
        format!("binary same-class lower bound: {} of {} steps fail, worst slack {:.4}", count_failed(&rs), rs.len(), worst_slack(&rs)),
    );
}

fn c7(s: &mut Suite, mnist: &[(usize, ExperimentOutcome)]) {
    let start = Instant::now();
    // Hinge loss meets the loss constants of the multi-class SGD theorem.
    let mut inner = vec![];
    for seed in 1..=3u64 {
        let v = json!({
            "kind": "early-multiclass",
            "dataset": {"type": "synthetic_multiclass", "n": 60, "d": 64, "classes": 3},
            "model": {"m": 200, "kappa": "auto"},
            "loss": "hinge",
            "schedule": {"kind": "constant", "eta": 0.01},
            "train": {"steps": 36, "batch": {"size": 16, "seed": seed}},
            "seed": seed,
            "hessian_points": 0
        });
        let o = s.run(&format!("hinge multiclass seed={seed}"), &parse(&v));
        inner.extend(reports(&o, "stochastic_inner").to_vec());
        assert!(o.summary.within_hypotheses, "hinge run outside hypotheses: {:?}", o.summary.notes);
    }
    s.check("C7a", all_pass(&inner), format!("⟨∇L, ∇L_B⟩ ≥ 0.9801 at {} hinge SGD steps, worst slack {:.4}", inner.len(), worst_slack(&inner)));
    if !mnist.is_empty() {
        let rs: Vec<CertificateReport> = mnist.iter().flat_map(|(_, o)| reports(o, "stochastic_inner").to_vec()).collect();
        s.xfail("C7a'", rs.iter().all(|r| r.pass), format!("same on the logistic MNIST runs: {} of {} steps below", count_failed(&rs), rs.len()));
    }

    let bin = parse(&json!({
        "kind": "early-binary",
        "dataset": {"type": "synthetic_orthant", "n": 8, "d": 20},
        "model": {"m": 64, "kappa": "auto"},
        "loss": "quadratic",
        "schedule": {"kind": "constant", "eta": 0.01},
        "train": {"steps": 44},
        "seed": 2
    }));
    let o = s.run("hessian binary", &bin);
    let rs = reports(&o, "hessian_early_binary");
    let max = rs.iter().map(|r| r.measured).fold(0.0, f64::max);
    s.check("C7b", rs.len() == 10 && max <= 3.0, format!("binary early Hessian norm ≤ 3 at {} points, max {max:.4}", rs.len()));

    let multi = parse(&json!({
        "kind": "early-multiclass",
        "dataset": {"type": "synthetic_multiclass", "n": 30, "d": 20, "classes": 3},
        "model": {"m": 40, "kappa": "auto"},
        "loss": "logistic",
        "schedule": {"kind": "constant", "eta": 0.01},
        "train": {"steps": 34},
        "seed": 2
    }));
    let o = s.run("hessian multiclass", &multi);
    let rs = reports(&o, "hessian_multiclass");
    let max = rs.iter().map(|r| r.measured).fold(0.0, f64::max);
    s.check("C7c", rs.len() == 10 && max <= 4.0, format!("multi-class Hessian norm ≤ 4 at {} points, max {max:.4}", rs.len()));

    let o = s.run("hessian input-only", &global_cfg(2, 100, 200));
    let rs = reports(&o, "hessian_input_only");
    s.check("C7d", rs.len() == 10 && rs.iter().all(|r| r.pass), format!("input-only Hessian norm ≤ L(θ) at {} points, worst slack {:.3e}", rs.len(), worst_slack(rs)));
    s.timed("C7t", start, 180.0);
}

fn c8(s: &mut Suite) {
    let start = Instant::now();
    let o = s.run("global_exp", &parse(&config_value("global_exp.json")));
    let r = reports(&o, "rate_exponential");
    let v = o.summary.constants.as_ref().and_then(|c| c.v).unwrap_or(f64::NAN);
    s.check(
        "C8",
        all_pass(r) && o.summary.within_hypotheses,
        format!("L(t) ≤ (1 − Vc/2)^(t−1) L(1), V = {v:.4e}, {}; {}", r.first().map_or("", |r| r.context.as_str()), status(&o)),
    );
    s.timed("C8t", start, 60.0);
}

fn status(o: &ExperimentOutcome) -> String {
    format!("final step {:?}, L = {:.3e}", o.summary.final_step, o.summary.loss_final.unwrap_or(f64::NAN))
}

fn c9(s: &mut Suite) {
    let o = s.run("global_poly", &parse(&config_value("global_poly.json")));
    let r = reports(&o, "rate_poly_stage1");
    s.check(
        "C9",
        all_pass(r) && o.summary.within_hypotheses,
        format!("L(t) ≤ L(1)/t^(Vc/2), {}; stage 2 not certified", r.first().map_or("", |r| r.context.as_str())),
    );
}

fn c10(s: &mut Suite) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = Rng::new(10);
    for variant in [Variant::BinaryNoBias, Variant::MultiBias] {
        for key in LOSS_KEYS {
            let loss = family(key);
            let mut done = 0;
            while done < 50 {
                let ds = random_dataset(variant, 6, 5, 3, &mut rng);
                let net = random_net(variant, 8, 5, 3, &mut rng);
                if !kink_free(&net, &ds, &loss, 1e-3) {
                    continue;
                }
                worst = worst.max(rel_err(&analytic_gradient(&net, &ds, &loss), &fd_gradient(&net, &ds, &loss, 1e-6)));
                done += 1;
            }
        }
    }
    s.check("C10a", worst <= 1e-5, format!("gradient vs central differences, 8 × 50 points, worst relative error {worst:.2e}"));

    let cfg = TeacherStudentConfig { d: 10, m: 10, big_m: 10, kappa: 0.1, eta: 0.004, seed: 0, steps: 1 };
    let mut worst_z = 0.0f64;
    for q in 0..20u64 {
        let scale = 0.05 * (1 + q % 4) as f64;
        let w = nalgebra::DMatrix::from_fn(10, 10, |_, _| scale * rng.normal());
        let exact = prm::population_loss(&w, &cfg).unwrap();
        let mc = prm::monte_carlo_loss(&w, &cfg, 1_000_000, 100 + q).unwrap();
        worst_z = worst_z.max((mc.mean - exact).abs() / mc.std_error);
    }
    s.check("C10b", worst_z <= 4.0, format!("kernel loss vs 10^6-sample Monte Carlo at 20 states, worst |z| {worst_z:.2}"));

    let mut worst_h = 0.0f64;
    for q in 0..100 {
        let w = nalgebra::DMatrix::from_fn(10, 10, |_, _| 0.01 * (1 + q % 10) as f64 * rng.normal());
        let g = prm::population_grad(&w, &cfg).unwrap();
        let lhs: f64 = w.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs = prm::homogeneity_rhs(&w, &cfg).unwrap();
        worst_h = worst_h.max((lhs - rhs).abs() / rhs.abs());
    }
    s.check("C10c", worst_h <= 1e-10, format!("homogeneity identity at 100 states, worst relative error {worst_h:.2e}"));
    s.timed("C10t", start, 180.0);
}

fn c11(s: &mut Suite) {
    let start = Instant::now();
    let o = s.run("prm", &parse(&config_value("prm.json")));
    let r = reports(&o, "prm_descent");
    let detail = r.first().map_or(String::from("no report"), |r| format!("L(0) − L(T*+1) = {:.6} ≥ {:.6}", r.measured, r.theoretical));
    s.check("C11a", all_pass(r) && o.summary.within_hypotheses, detail);
    let pc = runner::prm_config(&o_cfg("prm.json")).unwrap();
    let l0 = prm::teacher_energy(&pc);
    s.xfail("C11b", (l0 - 0.5).abs() <= 1e-12, format!("L(0) = {l0:.16}, expected 1/2"));
    s.timed("C11t", start, 60.0);
}

fn o_cfg(name: &str) -> ExperimentConfig {
    parse(&config_value(name))
}

fn c12(s: &mut Suite) {
    let runs = s.runs.clone();
    let mut differ = vec![];
    for (label, cfg, sd, cd) in &runs {
        let o = runner::run_experiment(cfg, None).unwrap();
        if &o.summary.steps_digest != sd || &o.summary.certificates_digest != cd {
            differ.push(label.clone());
        }
    }
    s.check("C12", differ.is_empty(), format!("{} runs repeated, digests differ for {:?}", runs.len(), differ));
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut s = Suite { lines: vec![], runs: vec![] };
    c1(&mut s);
    c2(&mut s);
    let mnist = c3(&mut s);
    let early = c4(&mut s);
    c5(&mut s, &early);
    c6(&mut s, &early, &mnist);
    c7(&mut s, &mnist);
    c8(&mut s);
    c9(&mut s);
    c10(&mut s);
    c11(&mut s);
    c12(&mut s);

    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, st, _) in &s.lines {
        *tally.entry(st.label()).or_default() += 1;
    }
    println!("summary: {tally:?} in {:.0} s", t0.elapsed().as_secs_f64());
    if s.lines.iter().any(|(_, st, _)| matches!(st, Status::Fail | Status::XPass)) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
