//! Per-sample neuron partitions (true/false × living/dead) and checkers for
//! how they evolve along a training run.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{Network, Variant};
use crate::training::StepRecord;

/// Number of evenly spaced points (endpoints included) used on each segment
/// b_k(t) → b_k(t+1) when checking sign constancy.
pub const SEGMENT_POINTS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Cell {
    TL = 0,
    TD = 1,
    FL = 2,
    FD = 3,
}

impl Cell {
    pub fn is_true(self) -> bool {
        matches!(self, Cell::TL | Cell::TD)
    }

    pub fn is_living(self) -> bool {
        matches!(self, Cell::TL | Cell::FL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSnapshot {
    pub step: usize,
    pub n: usize,
    pub m: usize,
    /// Row-major n×m.
    pub cells: Vec<Cell>,
    /// False for multi-output nets whose output weights all agree with every
    /// label (only TL/TD can occur).
    pub four_way: bool,
}

impl PartitionSnapshot {
    pub fn cell(&self, i: usize, k: usize) -> Cell {
        self.cells[i * self.m + k]
    }

    /// |TL|, |TD|, |FL|, |FD| for sample i.
    pub fn counts(&self, i: usize) -> [usize; 4] {
        let mut c = [0; 4];
        for k in 0..self.m {
            c[self.cell(i, k) as usize] += 1;
        }
        c
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.step as u64).to_le_bytes());
        h.update((self.n as u64).to_le_bytes());
        h.update((self.m as u64).to_le_bytes());
        h.update(self.cells.iter().map(|&c| c as u8).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }
}

/// Sign of y_i a_k (binary) or y_iᵀ a_k (multi), per (sample, neuron).
fn alignment(net: &Network, ds: &LabeledDataset) -> DMatrix<f64> {
    ds.targets() * net.output_weights().transpose()
}

/// Partition of every (sample, neuron) pair. Living uses the strict `> 0`,
/// dead the complementary `≤ 0`.
pub fn compute_partition(net: &Network, ds: &LabeledDataset, step: usize) -> Result<PartitionSnapshot> {
    let pass = net.forward_dataset(ds)?;
    partition_from(net, ds, &pass.pre, step)
}

fn partition_from(net: &Network, ds: &LabeledDataset, pre: &DMatrix<f64>, step: usize) -> Result<PartitionSnapshot> {
    let (n, m) = (ds.n(), net.m());
    let align = alignment(net, ds);
    let mut cells = Vec::with_capacity(n * m);
    let mut any_false = false;
    for i in 0..n {
        for k in 0..m {
            let s = align[(i, k)];
            if s == 0.0 {
                return Err(Error::PartitionUndefined { sample: i, neuron: k });
            }
            let living = pre[(i, k)] > 0.0;
            let cell = match (s > 0.0, living) {
                (true, true) => Cell::TL,
                (true, false) => Cell::TD,
                (false, true) => Cell::FL,
                (false, false) => Cell::FD,
            };
            any_false |= s < 0.0;
            cells.push(cell);
        }
    }
    let four_way = match net.variant() {
        Variant::BinaryNoBias => true,
        Variant::MultiBias => any_false,
    };
    Ok(PartitionSnapshot { step, n, m, cells, four_way })
}

/// A partition together with the preactivations and output weights it came
/// from; needed for the segment and output-weight rules.
#[derive(Clone, Debug)]
pub struct PartitionFrame {
    pub snapshot: PartitionSnapshot,
    /// n×m preactivations b_kᵀx_i (+ c_k).
    pub pre: DMatrix<f64>,
    /// m×C output weights.
    pub a: DMatrix<f64>,
}

impl PartitionFrame {
    pub fn capture(net: &Network, ds: &LabeledDataset, step: usize) -> Result<Self> {
        let pass = net.forward_dataset(ds)?;
        let snapshot = partition_from(net, ds, &pass.pre, step)?;
        Ok(Self { snapshot, pre: pass.pre, a: net.output_weights() })
    }

    pub fn step(&self) -> usize {
        self.snapshot.step
    }
}

// ---------------------------------------------------------------------------
// Violations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleId {
    S1,
    S2,
    S3,
    S4,
    S5,
    StageIS1,
    StageIS2,
    StageIS3,
    StageIS4,
    StageIS5,
    StageIIS1,
    StageIIS2,
    StageIIS3,
    StageIIS4,
    StageIIS5,
    CorrectClassification,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleId::S1 => "S1",
            RuleId::S2 => "S2",
            RuleId::S3 => "S3",
            RuleId::S4 => "S4",
            RuleId::S5 => "S5",
            RuleId::StageIS1 => "StageI-S1",
            RuleId::StageIS2 => "StageI-S2",
            RuleId::StageIS3 => "StageI-S3",
            RuleId::StageIS4 => "StageI-S4",
            RuleId::StageIS5 => "StageI-S5",
            RuleId::StageIIS1 => "StageII-S1",
            RuleId::StageIIS2 => "StageII-S2",
            RuleId::StageIIS3 => "StageII-S3",
            RuleId::StageIIS4 => "StageII-S4",
            RuleId::StageIIS5 => "StageII-S5",
            RuleId::CorrectClassification => "CorrectClassification",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsViolation {
    pub rule: RuleId,
    pub step: usize,
    pub sample: usize,
    pub neuron: usize,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    Checked,
    /// Not enough frames to evaluate the rules.
    InsufficientHorizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub status: CheckStatus,
    pub transitions_checked: usize,
    pub violations: Vec<DynamicsViolation>,
}

impl DynamicsReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Checked && self.violations.is_empty()
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Sign of the preactivation at SEGMENT_POINTS points of the segment between
/// two frames must equal `reference` (and be nonzero). Returns the first
/// offending interpolation weight.
fn segment_violation(p0: f64, p1: f64, reference: i8) -> Option<f64> {
    if reference == 0 {
        return Some(0.0);
    }
    for q in 0..SEGMENT_POINTS {
        let lam = q as f64 / (SEGMENT_POINTS - 1) as f64;
        let p = (1.0 - lam) * p0 + lam * p1;
        if sign(p) != reference {
            return Some(lam);
        }
    }
    None
}

fn push(out: &mut Vec<DynamicsViolation>, rule: RuleId, step: usize, sample: usize, neuron: usize, detail: String) {
    out.push(DynamicsViolation { rule, step, sample, neuron, detail });
}

fn check_frames(frames: &[PartitionFrame]) -> Result<()> {
    for w in frames.windows(2) {
        if w[1].step() != w[0].step() + 1 {
            return Err(Error::InvalidArgument(format!(
                "frames must be consecutive steps, got {} then {}",
                w[0].step(),
                w[1].step()
            )));
        }
        if w[0].snapshot.n != w[1].snapshot.n || w[0].snapshot.m != w[1].snapshot.m {
            return Err(Error::InvalidArgument("frames have different shapes".into()));
        }
    }
    Ok(())
}

/// Early-stage rules for frames t = 0, 1, …, horizon of a run inside its
/// hitting time.
///
/// Binary net: S1 TL persists, S2 FD persists, S3 TD(0) ⊆ TL(1),
/// S4 FL(0) ⊆ FD(1), S5 sign constancy on every segment t → t+1 for t ≥ 1
/// (matching the sign at t = 1).
/// Multi net: S1 TL persists, S2 TD(0) ⊆ TL(1), S3 segment signs stay > 0.
pub fn check_dynamics_early(frames: &[PartitionFrame], variant: Variant) -> Result<DynamicsReport> {
    check_frames(frames)?;
    if frames.len() < 2 || frames[0].step() != 0 {
        return Ok(DynamicsReport { status: CheckStatus::InsufficientHorizon, transitions_checked: 0, violations: vec![] });
    }
    let (n, m) = (frames[0].snapshot.n, frames[0].snapshot.m);
    let first = &frames[1];
    let mut v = Vec::new();
    for w in frames.windows(2) {
        let (f0, f1) = (&w[0], &w[1]);
        let t = f0.step();
        for i in 0..n {
            for k in 0..m {
                let (c0, c1) = (f0.snapshot.cell(i, k), f1.snapshot.cell(i, k));
                match variant {
                    Variant::BinaryNoBias => {
                        if c0 == Cell::TL && c1 != Cell::TL {
                            push(&mut v, RuleId::S1, t, i, k, format!("TL -> {c1:?}"));
                        }
                        if c0 == Cell::FD && c1 != Cell::FD {
                            push(&mut v, RuleId::S2, t, i, k, format!("FD -> {c1:?}"));
                        }
                        if t == 0 && c0 == Cell::TD && c1 != Cell::TL {
                            push(&mut v, RuleId::S3, t, i, k, format!("TD -> {c1:?}"));
                        }
                        if t == 0 && c0 == Cell::FL && c1 != Cell::FD {
                            push(&mut v, RuleId::S4, t, i, k, format!("FL -> {c1:?}"));
                        }
                        if t >= 1 {
                            let reference = sign(first.pre[(i, k)]);
                            if let Some(lam) = segment_violation(f0.pre[(i, k)], f1.pre[(i, k)], reference) {
                                push(&mut v, RuleId::S5, t, i, k, format!("sign change at λ={lam}"));
                            }
                        }
                    }
                    Variant::MultiBias => {
                        if c0 == Cell::TL && c1 != Cell::TL {
                            push(&mut v, RuleId::S1, t, i, k, format!("TL -> {c1:?}"));
                        }
                        if t == 0 && c0 == Cell::TD && c1 != Cell::TL {
                            push(&mut v, RuleId::S2, t, i, k, format!("TD -> {c1:?}"));
                        }
                        if t >= 1 {
                            if let Some(lam) = segment_violation(f0.pre[(i, k)], f1.pre[(i, k)], 1) {
                                push(&mut v, RuleId::S3, t, i, k, format!("preactivation not > 0 at λ={lam}"));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(DynamicsReport { status: CheckStatus::Checked, transitions_checked: frames.len() - 1, violations: v })
}

/// Global-regime rules (binary net). Stage I covers t = 0 → 1; Stage II
/// covers every later transition: output weights grow in magnitude, TL and FD
/// persist, every neuron is TL or FD, and segment signs match t = 1.
pub fn check_dynamics_global(frames: &[PartitionFrame]) -> Result<DynamicsReport> {
    check_frames(frames)?;
    if frames.len() < 2 || frames[0].step() != 0 {
        return Ok(DynamicsReport { status: CheckStatus::InsufficientHorizon, transitions_checked: 0, violations: vec![] });
    }
    let (n, m) = (frames[0].snapshot.n, frames[0].snapshot.m);
    let first = &frames[1];
    let mut v = Vec::new();
    for w in frames.windows(2) {
        let (f0, f1) = (&w[0], &w[1]);
        let t = f0.step();
        if t == 0 {
            for i in 0..n {
                for k in 0..m {
                    let (c0, c1) = (f0.snapshot.cell(i, k), f1.snapshot.cell(i, k));
                    if c0 == Cell::TL && c1 != Cell::TL {
                        push(&mut v, RuleId::StageIS1, 0, i, k, format!("TL -> {c1:?}"));
                    }
                    if c0 == Cell::FD && c1 != Cell::FD {
                        push(&mut v, RuleId::StageIS2, 0, i, k, format!("FD -> {c1:?}"));
                    }
                    if c0 == Cell::TD && c1 != Cell::TL {
                        push(&mut v, RuleId::StageIS3, 0, i, k, format!("TD -> {c1:?}"));
                    }
                    if c0 == Cell::FL && c1 != Cell::FD {
                        push(&mut v, RuleId::StageIS4, 0, i, k, format!("FL -> {c1:?}"));
                    }
                    if !matches!(c1, Cell::TL | Cell::FD) {
                        push(&mut v, RuleId::StageIS5, 0, i, k, format!("cell {c1:?} at t=1"));
                    }
                }
            }
            continue;
        }
        for k in 0..m {
            for al in 0..f0.a.ncols() {
                let a0 = f0.a[(k, al)];
                let a1 = f1.a[(k, al)];
                let s = a0.signum();
                if a1 * s < a0 * s {
                    push(&mut v, RuleId::StageIIS1, t, 0, k, format!("|a| shrank: {a0} -> {a1}"));
                }
            }
        }
        for i in 0..n {
            for k in 0..m {
                let (c0, c1) = (f0.snapshot.cell(i, k), f1.snapshot.cell(i, k));
                if c0 == Cell::TL && c1 != Cell::TL {
                    push(&mut v, RuleId::StageIIS2, t, i, k, format!("TL -> {c1:?}"));
                }
                if c0 == Cell::FD && c1 != Cell::FD {
                    push(&mut v, RuleId::StageIIS3, t, i, k, format!("FD -> {c1:?}"));
                }
                if !matches!(c1, Cell::TL | Cell::FD) {
                    push(&mut v, RuleId::StageIIS4, t, i, k, format!("cell {c1:?} at t={}", t + 1));
                }
                let reference = sign(first.pre[(i, k)]);
                if let Some(lam) = segment_violation(f0.pre[(i, k)], f1.pre[(i, k)], reference) {
                    push(&mut v, RuleId::StageIIS5, t, i, k, format!("sign change at λ={lam}"));
                }
            }
        }
    }
    Ok(DynamicsReport { status: CheckStatus::Checked, transitions_checked: frames.len() - 1, violations: v })
}

/// Streaming version of the dynamics checkers: feed frames one step at a
/// time without keeping the whole trajectory in memory.
#[derive(Debug)]
pub struct DynamicsChecker {
    global: bool,
    variant: Variant,
    frame0: Option<PartitionFrame>,
    frame1: Option<PartitionFrame>,
    prev: Option<PartitionFrame>,
    transitions: usize,
    violations: Vec<DynamicsViolation>,
}

impl DynamicsChecker {
    pub fn early(variant: Variant) -> Self {
        Self { global: false, variant, frame0: None, frame1: None, prev: None, transitions: 0, violations: vec![] }
    }

    pub fn global() -> Self {
        Self { global: true, ..Self::early(Variant::BinaryNoBias) }
    }

    pub fn observe(&mut self, frame: PartitionFrame) -> Result<()> {
        match self.prev.take() {
            None => {
                if frame.step() != 0 {
                    return Err(Error::InvalidArgument("first frame must be step 0".into()));
                }
                self.frame0 = Some(frame.clone());
            }
            Some(prev) => {
                if frame.step() == 1 {
                    self.frame1 = Some(frame.clone());
                }
                // Evaluate the transition prev -> frame with the step-1 frame as
                // the sign reference. Frames 0/1 are only needed for t = 0.
                let mut window = Vec::with_capacity(3);
                if prev.step() == 0 {
                    window.push(prev);
                    window.push(frame.clone());
                    let rep = if self.global { check_dynamics_global(&window)? } else { check_dynamics_early(&window, self.variant)? };
                    self.violations.extend(rep.violations);
                } else {
                    let f0 = self.frame0.clone().expect("frame 0 recorded");
                    let f1 = self.frame1.clone().expect("frame 1 recorded");
                    let rep = transition_only(&f0, &f1, &prev, &frame, self.global, self.variant)?;
                    self.violations.extend(rep);
                }
                self.transitions += 1;
            }
        }
        self.prev = Some(frame);
        Ok(())
    }

    pub fn finish(self) -> DynamicsReport {
        let status = if self.transitions == 0 { CheckStatus::InsufficientHorizon } else { CheckStatus::Checked };
        DynamicsReport { status, transitions_checked: self.transitions, violations: self.violations }
    }
}

/// Rules for a single transition t → t+1 with t ≥ 1.
fn transition_only(
    f0: &PartitionFrame,
    f1: &PartitionFrame,
    prev: &PartitionFrame,
    next: &PartitionFrame,
    global: bool,
    variant: Variant,
) -> Result<Vec<DynamicsViolation>> {
    // Reuse the slice checkers on [frame0, frame1, ...] by checking a short
    // synthetic window and keeping only the violations of the last transition.
    let t = prev.step();
    if t == 1 {
        let window = vec![f0.clone(), f1.clone(), next.clone()];
        let rep = if global { check_dynamics_global(&window)? } else { check_dynamics_early(&window, variant)? };
        return Ok(rep.violations.into_iter().filter(|v| v.step == 1).collect());
    }
    // Renumber frames so they look consecutive: 0, 1, 2 where 1 is the real
    // step-1 frame (the sign reference) and the last transition is prev -> next.
    let mut a = f0.clone();
    a.snapshot.step = 0;
    let mut b = f1.clone();
    b.snapshot.step = 1;
    let mut c = prev.clone();
    c.snapshot.step = 2;
    let mut d = next.clone();
    d.snapshot.step = 3;
    // The 1 -> 2 pseudo-transition is not a real one; drop it.
    let window = vec![a, b, c, d];
    let rep = if global { check_dynamics_global(&window)? } else { check_dynamics_early(&window, variant)? };
    Ok(rep
        .violations
        .into_iter()
        .filter(|v| v.step == 2)
        .map(|mut v| {
            v.step = t;
            v
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Initial partition statistics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub i: usize,
    pub j: usize,
    /// Observed fractions for TL∩TL, TL∩TD, TD∩TL, TD∩TD.
    pub observed: [f64; 4],
    /// Expected fractions for the same four sets.
    pub expected: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialPartitionStats {
    pub bound: f64,
    pub pairs: Vec<PairStat>,
    pub max_deviation: f64,
    pub within_bound: bool,
}

/// Compares intersections of the initial partitions of same-class pairs with
/// their expectations (π−θ)/(4π) for TL∩TL and TD∩TD, θ/(4π) for the mixed
/// intersections, where θ = arccos(x_iᵀx_j).
pub fn initial_partition_stats(net0: &Network, ds: &LabeledDataset, delta: f64) -> Result<InitialPartitionStats> {
    let y = ds.binary_labels()?;
    let snap = compute_partition(net0, ds, 0)?;
    let (n, m) = (ds.n(), net0.m());
    let bound = (((n * n) as f64 / delta).ln() / (2.0 * m as f64)).sqrt();
    let gram = crate::linalg::row_gram(&ds.x);
    let mut pairs = Vec::new();
    let mut maxdev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            if y[i] != y[j] {
                continue;
            }
            let theta = gram[(i, j)].clamp(-1.0, 1.0).acos();
            let same = (PI - theta) / (4.0 * PI);
            let mixed = theta / (4.0 * PI);
            let mut cnt = [0usize; 4];
            for k in 0..m {
                let (ci, cj) = (snap.cell(i, k), snap.cell(j, k));
                match (ci, cj) {
                    (Cell::TL, Cell::TL) => cnt[0] += 1,
                    (Cell::TL, Cell::TD) => cnt[1] += 1,
                    (Cell::TD, Cell::TL) => cnt[2] += 1,
                    (Cell::TD, Cell::TD) => cnt[3] += 1,
                    _ => {}
                }
            }
            let observed = cnt.map(|c| c as f64 / m as f64);
            let expected = [same, mixed, mixed, same];
            for q in 0..4 {
                maxdev = maxdev.max((observed[q] - expected[q]).abs());
            }
            pairs.push(PairStat { i, j, observed, expected });
        }
    }
    Ok(InitialPartitionStats { bound, pairs, max_deviation: maxdev, within_bound: maxdev <= bound })
}

/// First recorded (t, sample) with t ≥ 1 whose margin is not positive, or
/// None if every sample is correctly classified from t = 1 on.
pub fn check_correct_classification(steps: &[StepRecord]) -> Option<(usize, usize)> {
    steps.iter().filter(|s| s.t >= 1).find(|s| !(s.min_margin > 0.0)).map(|s| (s.t, s.argmin_margin))
}

// ---------------------------------------------------------------------------
// Export

/// Per-step, per-sample partition counts as CSV rows `t,sample,|TL|,|TD|,|FL|,|FD|`.
pub fn write_counts_csv(snapshots: &[PartitionSnapshot], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "sample", "|TL|", "|TD|", "|FL|", "|FD|"])?;
    for s in snapshots {
        for i in 0..s.n {
            let c = s.counts(i);
            w.write_record([s.step.to_string(), i.to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string(), c[3].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub step: usize,
    pub n: usize,
    pub m: usize,
    pub four_way: bool,
    pub encoding: String,
}

/// Packs a snapshot at 2 bits per cell (row-major, low bits first) and writes
/// `<stem>.bin` plus a `<stem>.json` header.
pub fn write_dump(snapshot: &PartitionSnapshot, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.bin")), pack_cells(&snapshot.cells))?;
    let header = DumpHeader {
        step: snapshot.step,
        n: snapshot.n,
        m: snapshot.m,
        four_way: snapshot.four_way,
        encoding: "2-bit row-major, TL=0 TD=1 FL=2 FD=3, low bits first".into(),
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_dump(dir: impl AsRef<Path>, stem: &str) -> Result<PartitionSnapshot> {
    let dir = dir.as_ref();
    let header: DumpHeader = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let total = header.n * header.m;
    if bytes.len() != total.div_ceil(4) {
        return Err(Error::Truncated { file: stem.into(), detail: format!("expected {} bytes", total.div_ceil(4)) });
    }
    Ok(PartitionSnapshot { step: header.step, n: header.n, m: header.m, cells: unpack_cells(&bytes, total), four_way: header.four_way })
}

pub fn pack_cells(cells: &[Cell]) -> Vec<u8> {
    let mut out = vec![0u8; cells.len().div_ceil(4)];
    for (q, &c) in cells.iter().enumerate() {
        out[q / 4] |= (c as u8) << (2 * (q % 4));
    }
    out
}

pub fn unpack_cells(bytes: &[u8], total: usize) -> Vec<Cell> {
    (0..total)
        .map(|q| match (bytes[q / 4] >> (2 * (q % 4))) & 3 {
            0 => Cell::TL,
            1 => Cell::TD,
            2 => Cell::FL,
            _ => Cell::FD,
        })
        .collect()
}
