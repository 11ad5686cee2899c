//! Labeled datasets: synthetic generators, MNIST/CIFAR-10 loaders, assumption
//! checks and the data-dependent constants (γ1, γ2, μ0, s, V).

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, Kahan};
use crate::rng::{streams, Rng};

/// Slack used when checking sign patterns and norms of stored data.
pub const SIGN_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// ±1 per sample; the first half is +1 and the second half −1.
    Binary(Vec<f64>),
    /// Class index per sample; the one-hot vector is implied.
    OneHot { classes: usize, index: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// n×d, one sample per row.
    pub x: DMatrix<f64>,
    pub labels: Labels,
    /// Provenance: generator seed or file digest.
    pub source: String,
}

impl LabeledDataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(x: DMatrix<f64>, labels: Labels, source: impl Into<String>) -> Result<Self> {
        let n = x.nrows();
        for i in 0..n {
            let nrm = x.row(i).norm();
            if !(nrm <= 1.0 + SIGN_TOL) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has norm {nrm} > 1"
                )));
            }
        }
        match &labels {
            Labels::Binary(y) => {
                if y.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: y.len() });
                }
                if n % 2 != 0 {
                    return Err(Error::InvalidArgument(format!("binary n must be even, got {n}")));
                }
                for (i, &yi) in y.iter().enumerate() {
                    let want = if i < n / 2 { 1.0 } else { -1.0 };
                    if yi != want {
                        return Err(Error::InvalidArgument(format!(
                            "binary labels must be +1 for the first half and -1 after; sample {i} has {yi}"
                        )));
                    }
                }
            }
            Labels::OneHot { classes, index } => {
                if index.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: index.len() });
                }
                if *classes == 0 {
                    return Err(Error::InvalidArgument("zero classes".into()));
                }
                if let Some(bad) = index.iter().find(|&&c| c >= *classes) {
                    return Err(Error::InvalidArgument(format!(
                        "class index {bad} out of range for {classes} classes"
                    )));
                }
            }
        }
        Ok(Self { x, labels, source: source.into() })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Number of output channels: 1 for binary, C for one-hot.
    pub fn classes(&self) -> usize {
        match &self.labels {
            Labels::Binary(_) => 1,
            Labels::OneHot { classes, .. } => *classes,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.labels, Labels::Binary(_))
    }

    pub fn binary_labels(&self) -> Result<&[f64]> {
        match &self.labels {
            Labels::Binary(y) => Ok(y),
            _ => Err(Error::WrongVariant { expected: "binary labels" }),
        }
    }

    /// Targets as an n×C matrix (n×1 holding ±1 for binary data).
    pub fn targets(&self) -> DMatrix<f64> {
        match &self.labels {
            Labels::Binary(y) => DMatrix::from_column_slice(y.len(), 1, y),
            Labels::OneHot { classes, index } => {
                let mut t = DMatrix::zeros(index.len(), *classes);
                for (i, &c) in index.iter().enumerate() {
                    t[(i, c)] = 1.0;
                }
                t
            }
        }
    }

    /// Class index of sample `i` (binary: 0 for +1, 1 for −1).
    pub fn class_of(&self, i: usize) -> usize {
        match &self.labels {
            Labels::Binary(y) => usize::from(y[i] < 0.0),
            Labels::OneHot { index, .. } => index[i],
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        linalg::row_vec(&self.x, i)
    }

    /// Row-major copy of the inputs.
    pub fn rows_flat(&self) -> Vec<f64> {
        let (n, d) = (self.n(), self.d());
        let mut out = vec![0.0; n * d];
        for j in 0..d {
            for i in 0..n {
                out[i * d + j] = self.x[(i, j)];
            }
        }
        out
    }

    /// SHA-256 over shape, input bytes and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        h.update((self.d() as u64).to_le_bytes());
        for v in self.rows_flat() {
            h.update(v.to_le_bytes());
        }
        match &self.labels {
            Labels::Binary(y) => {
                h.update(b"binary");
                for v in y {
                    h.update(v.to_le_bytes());
                }
            }
            Labels::OneHot { classes, index } => {
                h.update(b"onehot");
                h.update((*classes as u64).to_le_bytes());
                for &c in index {
                    h.update((c as u64).to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Dataset made of the first `count` samples.
    pub fn head(&self, count: usize) -> Result<Self> {
        if count > self.n() {
            return Err(Error::CountExceeds { requested: count, available: self.n() });
        }
        let x = self.x.rows(0, count).into_owned();
        let labels = match &self.labels {
            Labels::Binary(_) => {
                return Err(Error::InvalidArgument(
                    "head() would break the canonical binary ordering".into(),
                ))
            }
            Labels::OneHot { classes, index } => {
                Labels::OneHot { classes: *classes, index: index[..count].to_vec() }
            }
        };
        Self::new(x, labels, format!("{}[..{count}]", self.source))
    }
}

// ---------------------------------------------------------------------------
// Generators

/// Orthogonally separable binary data. Class + is drawn uniformly from the
/// unit sphere restricted to the nonnegative orthant; class − is either the
/// exact negation of class + (`include_antipodal`) or an independent draw
/// negated.
pub fn gen_orthant_separable(
    n: usize,
    d: usize,
    seed: u64,
    include_antipodal: bool,
) -> Result<LabeledDataset> {
    if n % 2 != 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("n must be even and positive, got {n}")));
    }
    if d < 2 {
        return Err(Error::InvalidArgument(format!("d must be at least 2, got {d}")));
    }
    let half = n / 2;
    let mut rng = Rng::stream(seed, streams::DATA);
    let mut x = DMatrix::zeros(n, d);
    let draw = |rng: &mut Rng| -> Vec<f64> {
        rng.unit_sphere(d).into_iter().map(f64::abs).collect()
    };
    for i in 0..half {
        let v = draw(&mut rng);
        for j in 0..d {
            x[(i, j)] = v[j];
        }
    }
    for i in 0..half {
        let v = if include_antipodal { linalg::row_vec(&x, i) } else { draw(&mut rng) };
        for j in 0..d {
            x[(half + i, j)] = -v[j];
        }
    }
    let y = (0..n).map(|i| if i < half { 1.0 } else { -1.0 }).collect();
    LabeledDataset::new(
        x,
        Labels::Binary(y),
        format!("orthant(n={n},d={d},seed={seed},antipodal={include_antipodal})"),
    )
}

/// Multi-class data with nonnegative unit-norm inputs (all pairwise inner
/// products are ≥ 0, so the concentration assumption holds with s = 0).
/// Sample i gets class `i mod C`.
pub fn gen_nonnegative_multiclass(n: usize, d: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::InvalidArgument("n, d and classes must be positive".into()));
    }
    let mut rng = Rng::stream(seed, streams::DATA);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let v = rng.unit_sphere(d);
        for j in 0..d {
            x[(i, j)] = v[j].abs();
        }
    }
    let index = (0..n).map(|i| i % classes).collect();
    LabeledDataset::new(
        x,
        Labels::OneHot { classes, index },
        format!("nonneg(n={n},d={d},C={classes},seed={seed})"),
    )
}

// ---------------------------------------------------------------------------
// Data checks

/// Where a reported μ0 comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mu0Source {
    /// Min-max over the finite witness family of half-space normals.
    WitnessFamily,
    /// The dataset contains a labeled antipodal pair (x, +1), (−x, −1).
    AntipodalPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub satisfies_4_1_i: bool,
    pub mu0: Option<f64>,
    pub mu0_source: Option<Mu0Source>,
    /// Witness-family value even when the antipodal shortcut applies.
    pub mu0_witness: Option<f64>,
    pub satisfies_4_3: bool,
    /// Minimum pairwise inner product.
    pub s: f64,
    /// Minimum same-class inner product.
    pub gamma: f64,
}

fn inner_products(ds: &LabeledDataset) -> DMatrix<f64> {
    linalg::row_gram(&ds.x)
}

fn min_pairwise(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n == 1 {
        return g[(0, 0)];
    }
    let mut s = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            s = s.min(g[(i, j)]);
        }
    }
    s
}

fn min_same_class(ds: &LabeledDataset, g: &DMatrix<f64>) -> f64 {
    let n = ds.n();
    let mut gamma = f64::INFINITY;
    for i in 0..n {
        for j in i..n {
            if ds.class_of(i) == ds.class_of(j) {
                gamma = gamma.min(g[(i, j)]);
            }
        }
    }
    gamma
}

/// Finds a labeled antipodal pair (i in class +, j in class − with x_j = −x_i).
pub fn find_antipodal_pair(ds: &LabeledDataset) -> Option<(usize, usize)> {
    let y = ds.binary_labels().ok()?;
    let n = ds.n();
    let d = ds.d();
    let rows = ds.rows_flat();
    for i in 0..n {
        if y[i] <= 0.0 {
            continue;
        }
        for j in 0..n {
            if y[j] >= 0.0 {
                continue;
            }
            let ri = &rows[i * d..(i + 1) * d];
            let rj = &rows[j * d..(j + 1) * d];
            if ri.iter().zip(rj).all(|(a, b)| (a + b).abs() <= SIGN_TOL) && linalg::norm(ri) > 0.0 {
                return Some((i, j));
            }
        }
    }
    None
}

/// Witness-family value of min_i min_{v: vᵀx_i ≤ 0} max_{j: vᵀx_j > 0} y_i x_iᵀx_j y_j.
/// Returns `None` when some witness leaves the inner max empty.
fn mu0_witness(ds: &LabeledDataset, g: &DMatrix<f64>) -> Option<f64> {
    let y = ds.binary_labels().ok()?;
    let n = ds.n();
    let d = ds.d();
    let rows = ds.rows_flat();
    let mut witnesses: Vec<Vec<f64>> = Vec::with_capacity(2 * n + n * (n - 1) / 2);
    for i in 0..n {
        let r = &rows[i * d..(i + 1) * d];
        witnesses.push(r.to_vec());
        witnesses.push(r.iter().map(|v| -v).collect());
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let diff: Vec<f64> = (0..d).map(|c| rows[j * d + c] - rows[k * d + c]).collect();
            let nrm = linalg::norm(&diff);
            if nrm > 0.0 {
                witnesses.push(diff.into_iter().map(|v| v / nrm).collect());
            }
        }
    }
    // signed[i][j] = y_i x_iᵀ x_j y_j
    let signed: Vec<f64> = (0..n * n).map(|ij| y[ij / n] * g[(ij / n, ij % n)] * y[ij % n]).collect();
    let per_witness: Vec<Option<f64>> = witnesses
        .par_iter()
        .map(|v| {
            let proj: Vec<f64> = (0..n).map(|i| linalg::dot(v, &rows[i * d..(i + 1) * d])).collect();
            let mut worst = f64::INFINITY;
            for i in 0..n {
                if proj[i] > 0.0 {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for j in 0..n {
                    if proj[j] > 0.0 {
                        best = best.max(signed[i * n + j]);
                    }
                }
                if best == f64::NEG_INFINITY {
                    return None;
                }
                worst = worst.min(best);
            }
            Some(worst)
        })
        .collect();
    let mut mu = f64::INFINITY;
    for w in per_witness {
        mu = mu.min(w?);
    }
    Some(mu)
}

/// Checks the orthogonal-separability assumption (sign pattern and μ0).
pub fn validate_separable(ds: &LabeledDataset) -> Result<SeparabilityReport> {
    let y = ds.binary_labels()?;
    let n = ds.n();
    let g = inner_products(ds);
    let mut sign_ok = true;
    for i in 0..n {
        for j in 0..n {
            let same = y[i] == y[j];
            if (same && g[(i, j)] < -SIGN_TOL) || (!same && g[(i, j)] > SIGN_TOL) {
                sign_ok = false;
            }
        }
    }
    let s = min_pairwise(&g);
    let gamma = min_same_class(ds, &g);
    let witness = mu0_witness(ds, &g).filter(|&m| m > 0.0).map(|m| m.min(1.0));
    let antipodal = find_antipodal_pair(ds).is_some();
    let (mu0, mu0_source) = if antipodal {
        (Some(1.0), Some(Mu0Source::AntipodalPair))
    } else if let Some(w) = witness {
        (Some(w), Some(Mu0Source::WitnessFamily))
    } else {
        (None, None)
    };
    Ok(SeparabilityReport {
        satisfies_4_1_i: sign_ok,
        mu0: if sign_ok { mu0 } else { None },
        mu0_source: if sign_ok { mu0_source } else { None },
        mu0_witness: witness,
        satisfies_4_3: s > -1.0 + 1e-9,
        s,
        gamma,
    })
}

/// Checks the concentration assumption: s = min pairwise inner product > −1.
/// Works for either label variant; the separability fields are left unset.
pub fn validate_concentrated(ds: &LabeledDataset) -> SeparabilityReport {
    let g = inner_products(ds);
    let s = min_pairwise(&g);
    SeparabilityReport {
        satisfies_4_1_i: false,
        mu0: None,
        mu0_source: None,
        mu0_witness: None,
        satisfies_4_3: s > -1.0 + 1e-9,
        s,
        gamma: min_same_class(ds, &g),
    }
}

// ---------------------------------------------------------------------------
// Constants

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConstants {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda_min_plus: f64,
    pub lambda_min_minus: f64,
    /// Minimum same-class inner product.
    pub gamma: f64,
    pub v: f64,
    /// V ≤ 0, i.e. the width is too small for the global bounds to say anything.
    pub v_vacuous: bool,
}

/// √(8 log(n²/δ)/m), the width-dependent deficit used all over the bounds.
pub fn width_deficit(n: usize, m: f64, delta: f64) -> f64 {
    (8.0 * ((n * n) as f64 / delta).ln() / m).sqrt()
}

#[inline]
fn clamped_acos(z: f64) -> f64 {
    z.clamp(-1.0, 1.0).acos()
}

/// (γ1, γ2) by direct double sums over same-class pairs.
pub fn compute_gamma_constants(ds: &LabeledDataset) -> Result<(f64, f64)> {
    let y = ds.binary_labels()?;
    let n = ds.n();
    let g = inner_products(ds);
    let mut s1 = Kahan::new();
    let mut s2 = Kahan::new();
    for i in 0..n {
        for j in 0..n {
            if y[i] != y[j] {
                continue;
            }
            let z = g[(i, j)];
            s1.add(z * (1.0 - clamped_acos(z) / PI));
            s2.add(z);
        }
    }
    let nn = (n * n) as f64;
    Ok((s1.value() / nn, s2.value() / nn))
}

/// λ_min of the (n/2)×(n/2) Gram matrices of each class.
pub fn class_lambda_min(ds: &LabeledDataset) -> Result<(f64, f64)> {
    ds.binary_labels()?;
    let half = ds.n() / 2;
    let xp = ds.x.rows(0, half).into_owned();
    let xm = ds.x.rows(half, half).into_owned();
    Ok((linalg::lambda_min(&linalg::row_gram(&xp)), linalg::lambda_min(&linalg::row_gram(&xm))))
}

/// The global-rate constant V for width `m` and failure probability `delta`.
pub fn compute_v(ds: &LabeledDataset, m: f64, delta: f64) -> Result<DataConstants> {
    if !(m > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("need m > 0 and δ in (0,1)".into()));
    }
    let (gamma1, gamma2) = compute_gamma_constants(ds)?;
    let (lp, lm) = class_lambda_min(ds)?;
    let n = ds.n();
    let g = inner_products(ds);
    let gamma = min_same_class(ds, &g);
    let nf = n as f64;
    let first = 2.0 / nf + (nf - 2.0) / nf * gamma;
    let second = lp.min(lm);
    let v = (0.5 - width_deficit(n, m, delta)) * first.max(second) / 16.0;
    Ok(DataConstants {
        gamma1,
        gamma2,
        lambda_min_plus: lp,
        lambda_min_minus: lm,
        gamma,
        v,
        v_vacuous: v <= 0.0,
    })
}

// ---------------------------------------------------------------------------
// Loaders

fn read_be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { file: file.into(), detail: format!("header ends before byte {}", at + 4) })
}

/// Turns raw pixel rows into unit-ball vectors. With `normalize` each row is
/// scaled to unit norm; otherwise bytes map to [0,1] and are divided by √d so
/// that every row stays inside the unit ball.
fn pixels_to_rows(pixels: &[u8], count: usize, d: usize, normalize: bool) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(count, d);
    let plain_scale = 1.0 / (255.0 * (d as f64).sqrt());
    for i in 0..count {
        let row = &pixels[i * d..(i + 1) * d];
        if normalize {
            let nrm = row.iter().map(|&p| (p as f64) * (p as f64)).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Err(Error::ZeroVector(i));
            }
            for j in 0..d {
                x[(i, j)] = row[j] as f64 / nrm;
            }
        } else {
            for j in 0..d {
                x[(i, j)] = row[j] as f64 * plain_scale;
            }
        }
    }
    Ok(x)
}

fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads the first `count` images of an IDX image/label file pair.
pub fn load_mnist(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    count: usize,
    normalize: bool,
) -> Result<LabeledDataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let iname = ip.display().to_string();
    let lname = lp.display().to_string();
    let img = fs::read(ip)?;
    let lab = fs::read(lp)?;

    let magic = read_be_u32(&img, 0, &iname)?;
    if magic != 0x0000_0803 {
        return Err(Error::BadMagic { file: iname, expected: 0x0803, found: magic });
    }
    let n_img = read_be_u32(&img, 4, &iname)? as usize;
    let rows = read_be_u32(&img, 8, &iname)? as usize;
    let cols = read_be_u32(&img, 12, &iname)? as usize;
    let lmagic = read_be_u32(&lab, 0, &lname)?;
    if lmagic != 0x0000_0801 {
        return Err(Error::BadMagic { file: lname, expected: 0x0801, found: lmagic });
    }
    let n_lab = read_be_u32(&lab, 4, &lname)? as usize;

    let available = n_img.min(n_lab);
    if count > available {
        return Err(Error::CountExceeds { requested: count, available });
    }
    let d = rows * cols;
    let pix = img.get(16..16 + count * d).ok_or_else(|| Error::Truncated {
        file: iname.clone(),
        detail: format!("need {} pixel bytes, have {}", count * d, img.len().saturating_sub(16)),
    })?;
    let lbl = lab.get(8..8 + count).ok_or_else(|| Error::Truncated {
        file: lname.clone(),
        detail: format!("need {count} label bytes, have {}", lab.len().saturating_sub(8)),
    })?;
    let index: Vec<usize> = lbl.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = index.iter().find(|&&c| c >= 10) {
        return Err(Error::InvalidArgument(format!("MNIST label {bad} out of range")));
    }
    let x = pixels_to_rows(pix, count, d, normalize)?;
    let source = format!(
        "mnist(images={},labels={},count={count},normalize={normalize})",
        &file_digest(&img)[..16],
        &file_digest(&lab)[..16]
    );
    LabeledDataset::new(x, Labels::OneHot { classes: 10, index }, source)
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_DIM: usize = 3072;

/// Reads the first `count` records of a CIFAR-10 binary batch.
pub fn load_cifar10(bin_path: impl AsRef<Path>, count: usize, normalize: bool) -> Result<LabeledDataset> {
    let p = bin_path.as_ref();
    let name = p.display().to_string();
    let bytes = fs::read(p)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated {
            file: name,
            detail: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let available = bytes.len() / CIFAR_RECORD;
    if count > available {
        return Err(Error::CountExceeds { requested: count, available });
    }
    let mut index = Vec::with_capacity(count);
    let mut pix = Vec::with_capacity(count * CIFAR_DIM);
    for r in 0..count {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        if rec[0] >= 10 {
            return Err(Error::InvalidArgument(format!("CIFAR label {} out of range", rec[0])));
        }
        index.push(rec[0] as usize);
        pix.extend_from_slice(&rec[1..]);
    }
    let x = pixels_to_rows(&pix, count, CIFAR_DIM, normalize)?;
    let source = format!("cifar10({},count={count},normalize={normalize})", &file_digest(&bytes)[..16]);
    LabeledDataset::new(x, Labels::OneHot { classes: 10, index }, source)
}

// ---------------------------------------------------------------------------
// Export

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub source: String,
    pub digest: String,
    pub n: usize,
    pub d: usize,
    /// 0 for binary labels.
    pub classes: usize,
    pub report: SeparabilityReport,
    pub constants: Option<DataConstants>,
}

/// Writes `<stem>.csv` (`index,label,x_0,...`) and the `<stem>.json` sidecar.
/// Binary labels are written as ±1, one-hot labels as the class index.
pub fn export(
    ds: &LabeledDataset,
    dir: impl AsRef<Path>,
    stem: &str,
    report: &SeparabilityReport,
    constants: Option<&DataConstants>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..ds.d()).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let label = match &ds.labels {
            Labels::Binary(y) => format!("{}", y[i] as i64),
            Labels::OneHot { index, .. } => index[i].to_string(),
        };
        let mut rec = vec![i.to_string(), label];
        rec.extend((0..ds.d()).map(|j| format!("{}", ds.x[(i, j)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let side = DatasetSidecar {
        source: ds.source.clone(),
        digest: ds.digest(),
        n: ds.n(),
        d: ds.d(),
        classes: if ds.is_binary() { 0 } else { ds.classes() },
        report: report.clone(),
        constants: constants.cloned(),
    };
    let mut f = fs::File::create(dir.join(format!("{stem}.json")))?;
    f.write_all(serde_json::to_string_pretty(&side)?.as_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`export`]. `classes = None` means binary labels.
pub fn read_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabeledDataset> {
    let p = path.as_ref();
    let mut r = csv::Reader::from_path(p)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        };
        labels.push(parse(&rec[1])? as i64);
        rows.push(rec.iter().skip(2).map(parse).collect::<Result<_>>()?);
    }
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut x = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: r.len() });
        }
        for j in 0..d {
            x[(i, j)] = r[j];
        }
    }
    let labels = match classes {
        None => Labels::Binary(labels.iter().map(|&l| l as f64).collect()),
        Some(c) => Labels::OneHot { classes: c, index: labels.iter().map(|&l| l as usize).collect() },
    };
    LabeledDataset::new(x, labels, format!("csv({})", p.display()))
}
