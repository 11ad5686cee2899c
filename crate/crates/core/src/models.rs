//! Two-layer ReLU networks: the bias-free binary model f(x) = Σ a_k σ(b_kᵀx)
//! and the biased multi-output model f(x) = Σ a_k σ(b_kᵀx + c_k).
//!
//! Activation indicators are strict (`> 0`), so σ′(0) = 0.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Kahan};
use crate::losses::LossFamily;
use crate::rng::{streams, Rng};

/// Largest parameter count for which a dense Hessian is assembled.
pub const HESSIAN_PARAM_LIMIT: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    BinaryNoBias,
    MultiBias,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub kappa: f64,
    pub seed: u64,
    pub variant: Variant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedLayers {
    #[default]
    All,
    /// Output weights are frozen; only the input layer moves.
    InputOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryNet {
    pub a: DVector<f64>,
    /// m×d, row k is b_k.
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiNet {
    /// m×C, row k is a_k.
    pub a: DMatrix<f64>,
    /// m×d, row k is b_k.
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Binary(BinaryNet),
    Multi(MultiNet),
}

fn check_spec(spec: &InitSpec, want: Variant) -> Result<()> {
    if !(spec.kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("κ must be positive, got {}", spec.kappa)));
    }
    if spec.variant != want {
        return Err(Error::InvalidArgument(format!("init spec variant {:?} does not match {want:?}", spec.variant)));
    }
    Ok(())
}

/// a_k = ±1/√m (Rademacher), b_k ~ N(0, κ²/(md) I).
pub fn init_binary(m: usize, d: usize, spec: &InitSpec) -> Result<BinaryNet> {
    check_spec(spec, Variant::BinaryNoBias)?;
    if m == 0 || d == 0 {
        return Err(Error::InvalidArgument("m and d must be positive".into()));
    }
    let mut rng = Rng::stream(spec.seed, streams::INIT);
    let scale = 1.0 / (m as f64).sqrt();
    let a = DVector::from_iterator(m, (0..m).map(|_| rng.rademacher() * scale));
    let std = spec.kappa / ((m * d) as f64).sqrt();
    let mut b = DMatrix::zeros(m, d);
    for k in 0..m {
        for j in 0..d {
            b[(k, j)] = std * rng.normal();
        }
    }
    Ok(BinaryNet { a, b })
}

/// A = 1/√m entrywise, c_k = κ/√(m(d+1)), b_k ~ N(0, κ²/(m(d+1)) I).
pub fn init_multi(m: usize, d: usize, classes: usize, spec: &InitSpec) -> Result<MultiNet> {
    check_spec(spec, Variant::MultiBias)?;
    if m == 0 || d == 0 || classes == 0 {
        return Err(Error::InvalidArgument("m, d and C must be positive".into()));
    }
    let mut rng = Rng::stream(spec.seed, streams::INIT);
    let a = DMatrix::from_element(m, classes, 1.0 / (m as f64).sqrt());
    let std = spec.kappa / ((m * (d + 1)) as f64).sqrt();
    let c = DVector::from_element(m, std);
    let mut b = DMatrix::zeros(m, d);
    for k in 0..m {
        for j in 0..d {
            b[(k, j)] = std * rng.normal();
        }
    }
    Ok(MultiNet { a, b, c })
}

/// Preactivations and outputs for a batch of inputs.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// s×m preactivations.
    pub pre: DMatrix<f64>,
    /// s×C outputs.
    pub out: DMatrix<f64>,
}

#[inline]
pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
pub fn relu_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Network {
    pub fn variant(&self) -> Variant {
        match self {
            Network::Binary(_) => Variant::BinaryNoBias,
            Network::Multi(_) => Variant::MultiBias,
        }
    }

    pub fn m(&self) -> usize {
        self.b().nrows()
    }

    pub fn d(&self) -> usize {
        self.b().ncols()
    }

    /// Output channels: 1 for the binary net.
    pub fn outputs(&self) -> usize {
        match self {
            Network::Binary(_) => 1,
            Network::Multi(n) => n.a.ncols(),
        }
    }

    pub fn b(&self) -> &DMatrix<f64> {
        match self {
            Network::Binary(n) => &n.b,
            Network::Multi(n) => &n.b,
        }
    }

    /// Output weights as an m×C matrix.
    pub fn output_weights(&self) -> DMatrix<f64> {
        match self {
            Network::Binary(n) => DMatrix::from_column_slice(n.a.len(), 1, n.a.as_slice()),
            Network::Multi(n) => n.a.clone(),
        }
    }

    fn bias(&self) -> Option<&DVector<f64>> {
        match self {
            Network::Binary(_) => None,
            Network::Multi(n) => Some(&n.c),
        }
    }

    pub fn num_params(&self) -> usize {
        let (m, d, c) = (self.m(), self.d(), self.outputs());
        match self {
            Network::Binary(_) => m + m * d,
            Network::Multi(_) => m * c + m * d + m,
        }
    }

    /// Offset of b_k's first coordinate in the flat parameter vector.
    pub fn b_offset(&self) -> usize {
        self.m() * self.outputs()
    }

    /// Flat parameters: output weights (row-major), then B row-major, then c.
    pub fn params(&self) -> Vec<f64> {
        let (m, d, cc) = (self.m(), self.d(), self.outputs());
        let mut p = Vec::with_capacity(self.num_params());
        let a = self.output_weights();
        for k in 0..m {
            for al in 0..cc {
                p.push(a[(k, al)]);
            }
        }
        let b = self.b();
        for k in 0..m {
            for j in 0..d {
                p.push(b[(k, j)]);
            }
        }
        if let Some(c) = self.bias() {
            p.extend(c.iter());
        }
        p
    }

    /// Network with the same shape and the given flat parameters.
    pub fn with_params(&self, p: &[f64]) -> Result<Network> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: p.len() });
        }
        let (m, d, cc) = (self.m(), self.d(), self.outputs());
        let mut b = DMatrix::zeros(m, d);
        let off = m * cc;
        for k in 0..m {
            for j in 0..d {
                b[(k, j)] = p[off + k * d + j];
            }
        }
        Ok(match self {
            Network::Binary(_) => Network::Binary(BinaryNet { a: DVector::from_column_slice(&p[..m]), b }),
            Network::Multi(_) => {
                let mut a = DMatrix::zeros(m, cc);
                for k in 0..m {
                    for al in 0..cc {
                        a[(k, al)] = p[k * cc + al];
                    }
                }
                let c = DVector::from_column_slice(&p[off + m * d..]);
                Network::Multi(MultiNet { a, b, c })
            }
        })
    }

    /// Forward pass on the rows of `x` (s×d).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: x.ncols() });
        }
        let mut pre = x * self.b().transpose();
        if let Some(c) = self.bias() {
            for k in 0..pre.ncols() {
                let ck = c[k];
                pre.column_mut(k).add_scalar_mut(ck);
            }
        }
        let h = pre.map(relu);
        let out = &h * self.output_weights();
        Ok(ForwardPass { pre, out })
    }

    pub fn forward_dataset(&self, ds: &LabeledDataset) -> Result<ForwardPass> {
        self.forward_batch(&ds.x)
    }

    /// Euclidean norm of all parameters.
    pub fn param_norm(&self) -> f64 {
        linalg::norm(&self.params())
    }
}

/// f(x; θ) for a single input: one value for the binary net, C for the multi net.
pub fn forward(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let pass = net.forward_batch(&xm)?;
    Ok(pass.out.row(0).iter().copied().collect())
}

fn check_compat(net: &Network, ds: &LabeledDataset) -> Result<()> {
    if net.d() != ds.d() {
        return Err(Error::DimensionMismatch { expected: net.d(), got: ds.d() });
    }
    match (net, ds.is_binary()) {
        (Network::Binary(_), true) => Ok(()),
        (Network::Multi(n), false) if n.a.ncols() == ds.classes() => Ok(()),
        (Network::Multi(_), false) => Err(Error::DimensionMismatch { expected: net.outputs(), got: ds.classes() }),
        (Network::Binary(_), false) => Err(Error::WrongVariant { expected: "binary labels for the binary net" }),
        (Network::Multi(_), true) => Err(Error::WrongVariant { expected: "one-hot labels for the multi-output net" }),
    }
}

/// Per-sample losses, output residuals ∂ℓ_i/∂f_i and margin curvatures.
struct Residuals {
    losses: Vec<f64>,
    /// s×C.
    r: DMatrix<f64>,
    /// ℓ̃″(z_i) for margin losses; unused for the quadratic loss.
    curv: Vec<f64>,
}

fn residuals(loss: &LossFamily, targets: &DMatrix<f64>, out: &DMatrix<f64>) -> Residuals {
    let (s, cc) = out.shape();
    let mut losses = Vec::with_capacity(s);
    let mut r = DMatrix::zeros(s, cc);
    let mut curv = vec![0.0; s];
    match loss.base() {
        None => {
            for i in 0..s {
                let mut l = 0.0;
                for al in 0..cc {
                    let e = out[(i, al)] - targets[(i, al)];
                    l += 0.5 * e * e;
                    r[(i, al)] = e;
                }
                losses.push(l);
            }
        }
        Some(base) => {
            for i in 0..s {
                let z: f64 = (0..cc).map(|al| targets[(i, al)] * out[(i, al)]).sum();
                losses.push(base.eval(z));
                let g = base.deriv(z);
                for al in 0..cc {
                    r[(i, al)] = g * targets[(i, al)];
                }
                curv[i] = base.second_deriv(z);
            }
        }
    }
    Residuals { losses, r, curv }
}

/// Loss value, flat gradient and the forward pass behind them.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub pass: ForwardPass,
}

fn gather(ds: &LabeledDataset, subset: Option<&[usize]>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t = ds.targets();
    match subset {
        None => Ok((ds.x.clone(), t)),
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::EmptySubset);
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= ds.n()) {
                return Err(Error::InvalidArgument(format!("sample index {bad} out of range")));
            }
            Ok((ds.x.select_rows(idx.iter()), t.select_rows(idx.iter())))
        }
    }
}

/// Average loss and gradient over `subset` (a multiset of sample indices; all
/// samples when `None`). Frozen layers get a zero gradient.
pub fn evaluate(
    net: &Network,
    ds: &LabeledDataset,
    loss: &LossFamily,
    subset: Option<&[usize]>,
    layers: TrainedLayers,
) -> Result<Evaluation> {
    check_compat(net, ds)?;
    let (x, t) = gather(ds, subset)?;
    let s = x.nrows() as f64;
    let pass = net.forward_batch(&x)?;
    let res = residuals(loss, &t, &pass.out);
    let mut acc = Kahan::new();
    for &l in &res.losses {
        acc.add(l);
    }
    let value = acc.value() / s;

    let (m, d, cc) = (net.m(), net.d(), net.outputs());
    let aw = net.output_weights();
    let h = pass.pre.map(relu);
    // ∂ℓ/∂(preactivation) = (R Aᵀ) ∘ 1{pre > 0}
    let mut gpre = &res.r * aw.transpose();
    gpre.zip_apply(&pass.pre, |g, p| {
        if !(p > 0.0) {
            *g = 0.0;
        }
    });
    let gb = gpre.transpose() * &x;

    let mut grad = Vec::with_capacity(net.num_params());
    if layers == TrainedLayers::All {
        let ga = h.transpose() * &res.r;
        for k in 0..m {
            for al in 0..cc {
                grad.push(ga[(k, al)] / s);
            }
        }
    } else {
        grad.extend(std::iter::repeat(0.0).take(m * cc));
    }
    for k in 0..m {
        for j in 0..d {
            grad.push(gb[(k, j)] / s);
        }
    }
    if let Network::Multi(_) = net {
        for k in 0..m {
            grad.push(gpre.column(k).sum() / s);
        }
    }
    Ok(Evaluation { loss: value, grad, pass })
}

/// Average gradient over `subset` (all samples when `None`).
pub fn grad_loss(net: &Network, ds: &LabeledDataset, loss: &LossFamily, subset: Option<&[usize]>) -> Result<Vec<f64>> {
    Ok(evaluate(net, ds, loss, subset, TrainedLayers::All)?.grad)
}

/// Full-batch loss.
pub fn loss_value(net: &Network, ds: &LabeledDataset, loss: &LossFamily) -> Result<f64> {
    check_compat(net, ds)?;
    let pass = net.forward_dataset(ds)?;
    let res = residuals(loss, &ds.targets(), &pass.out);
    let mut acc = Kahan::new();
    for &l in &res.losses {
        acc.add(l);
    }
    Ok(acc.value() / ds.n() as f64)
}

/// y_i f(x_i) for binary data, y_iᵀ f(x_i) for one-hot data.
pub fn margins(net: &Network, ds: &LabeledDataset) -> Result<Vec<f64>> {
    check_compat(net, ds)?;
    let out = net.forward_dataset(ds)?.out;
    Ok(margins_from_outputs(&out, &ds.targets()))
}

pub fn margins_from_outputs(out: &DMatrix<f64>, targets: &DMatrix<f64>) -> Vec<f64> {
    (0..out.nrows())
        .map(|i| (0..out.ncols()).map(|al| targets[(i, al)] * out[(i, al)]).sum())
        .collect()
}

/// Per-sample gradients of the model output(s), one row per (sample, channel).
/// For margin losses on the multi net the rows are ∇(y_iᵀf) instead.
fn jacobian_rows(net: &Network, ds: &LabeledDataset, pass: &ForwardPass, contract: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let (n, m, d, cc) = (ds.n(), net.m(), net.d(), net.outputs());
    let aw = net.output_weights();
    let p = net.num_params();
    let boff = m * cc;
    let coff = boff + m * d;
    let rows_per = if contract.is_some() { 1 } else { cc };
    let mut j = DMatrix::zeros(n * rows_per, p);
    for i in 0..n {
        for r in 0..rows_per {
            // output-channel coefficients of this row
            let coef: Vec<f64> = match contract {
                Some(t) => (0..cc).map(|al| t[(i, al)]).collect(),
                None => (0..cc).map(|al| if al == r { 1.0 } else { 0.0 }).collect(),
            };
            let row = i * rows_per + r;
            for k in 0..m {
                let pre = pass.pre[(i, k)];
                let h = relu(pre);
                for al in 0..cc {
                    j[(row, k * cc + al)] = coef[al] * h;
                }
                if pre > 0.0 {
                    let w: f64 = (0..cc).map(|al| coef[al] * aw[(k, al)]).sum();
                    for jj in 0..d {
                        j[(row, boff + k * d + jj)] = w * ds.x[(i, jj)];
                    }
                    if matches!(net, Network::Multi(_)) {
                        j[(row, coff + k)] = w;
                    }
                }
            }
        }
    }
    j
}

/// Dense Hessian of the full-batch loss, σ″ taken as 0. With
/// `TrainedLayers::InputOnly` the input-layer block is returned.
pub fn hessian_loss(net: &Network, ds: &LabeledDataset, loss: &LossFamily, layers: TrainedLayers) -> Result<DMatrix<f64>> {
    check_compat(net, ds)?;
    let p = net.num_params();
    if p > HESSIAN_PARAM_LIMIT {
        return Err(Error::HessianTooLarge { params: p, limit: HESSIAN_PARAM_LIMIT });
    }
    let (n, m, d, cc) = (ds.n(), net.m(), net.d(), net.outputs());
    let nf = n as f64;
    let t = ds.targets();
    let pass = net.forward_dataset(ds)?;
    let res = residuals(loss, &t, &pass.out);

    // H_A = (1/n) Σ w ∇g ∇gᵀ
    let (jac, weights): (DMatrix<f64>, Vec<f64>) = match loss.base() {
        None => (jacobian_rows(net, ds, &pass, None), vec![1.0; n * cc]),
        Some(_) => (jacobian_rows(net, ds, &pass, Some(&t)), res.curv.clone()),
    };
    let mut wj = jac.clone();
    for (r, &w) in weights.iter().enumerate() {
        wj.row_mut(r).scale_mut(w / nf);
    }
    let mut hess = jac.transpose() * wj;

    // H_B = (1/n) Σ_i Σ_α R_iα ∇²f_α: only the a_{k,α}–b_k and a_{k,α}–c_k blocks are nonzero.
    let boff = m * cc;
    let coff = boff + m * d;
    for i in 0..n {
        for k in 0..m {
            if !(pass.pre[(i, k)] > 0.0) {
                continue;
            }
            for al in 0..cc {
                let coef = res.r[(i, al)] / nf;
                if coef == 0.0 {
                    continue;
                }
                let ai = k * cc + al;
                for jj in 0..d {
                    let bi = boff + k * d + jj;
                    let v = coef * ds.x[(i, jj)];
                    hess[(ai, bi)] += v;
                    hess[(bi, ai)] += v;
                }
                if matches!(net, Network::Multi(_)) {
                    hess[(ai, coff + k)] += coef;
                    hess[(coff + k, ai)] += coef;
                }
            }
        }
    }
    linalg::symmetrize_upper(&mut hess);
    Ok(match layers {
        TrainedLayers::All => hess,
        TrainedLayers::InputOnly => hess.view((boff, boff), (m * d, m * d)).into_owned(),
    })
}

// ---------------------------------------------------------------------------
// Snapshots

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub variant: Variant,
    pub m: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub kappa: f64,
    pub seed: u64,
    pub step: usize,
}

/// Writes `<stem>.bin` (flat little-endian f64 parameters) and `<stem>.json`.
pub fn save_snapshot(net: &Network, header: &SnapshotHeader, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = net.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(header)?)?;
    Ok(())
}

pub fn load_snapshot(dir: impl AsRef<Path>, stem: &str) -> Result<(Network, SnapshotHeader)> {
    let dir = dir.as_ref();
    let header: SnapshotHeader = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let bin_path = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin_path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Truncated { file: bin_path.display().to_string(), detail: "length not a multiple of 8".into() });
    }
    let p: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (m, d, cc) = (header.m, header.d, header.classes);
    let shape = match header.variant {
        Variant::BinaryNoBias => Network::Binary(BinaryNet { a: DVector::zeros(m), b: DMatrix::zeros(m, d) }),
        Variant::MultiBias => Network::Multi(MultiNet { a: DMatrix::zeros(m, cc), b: DMatrix::zeros(m, d), c: DVector::zeros(m) }),
    };
    let net = shape.with_params(&p)?;
    Ok((net, header))
}
