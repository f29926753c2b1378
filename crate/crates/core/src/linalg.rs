//! Dense kernels shared by every other module.
//!
//! The symmetric eigensolver and the factorizations are thin contracts over
//! nalgebra (Householder tridiagonalization with implicit QR shifts, and
//! dense Cholesky/LU). The conjugate gradient solver is matrix-free.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues in ascending order with orthonormal eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEigResult {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigResult {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }
}

/// max |A − Aᵀ| / max |A|.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// (A + Aᵀ)/2 in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Flips `v` so that its largest-magnitude entry is positive (first wins on ties).
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Full symmetric eigendecomposition, ascending.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymEigResult> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigensolver needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    Ok(sym_eig_unchecked(sym))
}

pub(crate) fn sym_eig_unchecked(a: DMatrix<f64>) -> SymEigResult {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        fix_sign(&mut col);
        vectors.set_column(dst, &DVector::from_vec(col));
    }
    SymEigResult { values, vectors }
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Lower-triangular L with L Lᵀ = M.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("cholesky needs a square matrix".into()));
    }
    match m.clone().cholesky() {
        Some(c) => Ok(c.unpack()),
        None => Err(failed_pivot(m)),
    }
}

/// Reruns an unblocked factorization to report where it breaks down.
fn failed_pivot(m: &DMatrix<f64>) -> Error {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Error::NotPositiveDefinite { pivot: j, value: d };
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    // nalgebra rejected the matrix but the scalar pass did not; report the last row
    Error::NotPositiveDefinite {
        pivot: n.saturating_sub(1),
        value: l[(n - 1, n - 1)],
    }
}

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// A factorization computed once and reused for many right-hand sides.
///
/// Symmetric positive-definite input is factored by Cholesky; anything else
/// (for example a shifted, indefinite operator) falls back to LU with partial
/// pivoting.
pub struct FactoredSolver {
    n: usize,
    factor: Factor,
}

impl FactoredSolver {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch("factor_solve needs a square matrix".into()));
        }
        let n = a.nrows();
        if let Some(c) = a.clone().cholesky() {
            return Ok(Self {
                n,
                factor: Factor::Cholesky(c),
            });
        }
        let lu = a.clone().lu();
        let u = lu.u();
        let scale = a.amax().max(f64::MIN_POSITIVE);
        let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(min_pivot > scale * f64::EPSILON * n as f64) {
            return Err(Error::Singular);
        }
        Ok(Self {
            n,
            factor: Factor::Lu(lu),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.factor, Factor::Cholesky(_))
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, system has {}",
                b.nrows(),
                self.n
            )));
        }
        match &self.factor {
            Factor::Cholesky(c) => Ok(c.solve(b)),
            Factor::Lu(lu) => lu.solve(b).ok_or(Error::Singular),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
        Ok(x.column(0).into_owned())
    }
}

/// One-shot solve of A X = B.
pub fn factor_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    FactoredSolver::new(a)?.solve(b)
}

#[derive(Clone, Debug)]
pub struct PcgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients for an operator given only through
/// its action `apply(x)`; `precond(r)` applies an approximation of A⁻¹.
pub fn pcg<A, P>(apply: A, precond: P, b: &DVector<f64>, tol: f64, maxit: usize) -> Result<PcgOutcome>
where
    A: Fn(&DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let bnorm = b.norm();
    let mut x = DVector::zeros(n);
    if bnorm == 0.0 {
        return Ok(PcgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut r = b.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut rel = 1.0;
    for it in 1..=maxit {
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if curvature <= 0.0 {
            return Err(Error::CgBreakdown(curvature));
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        rel = r.norm() / bnorm;
        if rel <= tol {
            return Ok(PcgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
                converged: true,
            });
        }
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Ok(PcgOutcome {
        x,
        iterations: maxit,
        relative_residual: rel,
        converged: false,
    })
}
