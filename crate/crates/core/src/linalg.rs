//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

/// Compensated (Kahan–Babuška/Neumaier) accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut k = Kahan::new();
    for x in it {
        k.add(x);
    }
    k.value()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigenvalues(m)[0]
}

/// Spectral norm of a symmetric matrix: largest eigenvalue magnitude.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let ev = sym_eigenvalues(m);
    ev[0].abs().max(ev[ev.len() - 1].abs())
}

/// Gram matrix of the rows of `x` (`x xᵀ`), exactly symmetric.
pub fn row_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = x * x.transpose();
    symmetrize_upper(&mut g);
    g
}

/// Copies the upper triangle onto the lower one.
pub fn symmetrize_upper(g: &mut DMatrix<f64>) {
    let n = g.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            g[(i, j)] = g[(j, i)];
        }
    }
}

/// Row `i` of a column-major matrix as an owned vector.
pub fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}
