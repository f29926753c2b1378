//! Stochastic Galerkin operator algebra and stochastic inverse subspace
//! iteration.
//!
//! A stochastic vector u(ξ) = Σ_k u_k ψ_k(ξ) is stored as an M_x × (M_ξ+1)
//! matrix whose k-th column is u_k, so that u(ξ) = U ψ(ξ). Stacking the
//! columns gives the unknown of the global Galerkin system.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pcg, sym_eig, FactoredSolver, SymEigResult};
use crate::models::MatrixExpansion;
use crate::polychaos::{gen_multi_indices, quad_tensor, triple_tensor, GpcBasis, QuadTensor, TripleTensor};
use crate::quadrature::{smolyak, QuadGrid};

/// Pointwise orthonormality tolerance enforced by [`smgs`].
pub const ORTHO_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticVector {
    pub coeffs: DMatrix<f64>,
}

impl StochasticVector {
    pub fn zeros(m_x: usize, n_terms: usize) -> Self {
        Self {
            coeffs: DMatrix::zeros(m_x, n_terms),
        }
    }

    /// Deterministic vector: `u0` in block 0, zeros elsewhere.
    pub fn from_mean(u0: &DVector<f64>, n_terms: usize) -> Self {
        let mut s = Self::zeros(u0.len(), n_terms);
        s.coeffs.set_column(0, u0);
        s
    }

    pub fn from_stacked(x: &[f64], m_x: usize) -> Self {
        Self {
            coeffs: DMatrix::from_column_slice(m_x, x.len() / m_x, x),
        }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn block(&self, k: usize) -> DVector<f64> {
        self.coeffs.column(k).into_owned()
    }

    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_column_slice(self.coeffs.as_slice())
    }

    /// Norm of the stacked coefficients.
    pub fn norm(&self) -> f64 {
        self.coeffs.norm()
    }

    /// u(ξ) given the basis values ψ_k(ξ).
    pub fn eval(&self, psi: &[f64]) -> DVector<f64> {
        &self.coeffs * DVector::from_column_slice(psi)
    }

    pub fn sample(&self, basis: &GpcBasis, xi: &[f64]) -> DVector<f64> {
        self.eval(&basis.eval_all(xi)[..self.n_terms()])
    }
}

/// gPC expansion of one eigenpair.
#[derive(Clone, Debug)]
pub struct EigenExpansion {
    /// 1-based index of the mean-problem eigenpair this mode started from.
    pub mode: usize,
    pub lambda: Vec<f64>,
    pub vector: StochasticVector,
}

impl EigenExpansion {
    pub fn lambda_at(&self, psi: &[f64]) -> f64 {
        self.lambda.iter().zip(psi).map(|(l, p)| l * p).sum()
    }

    /// One row per chaos index: `k,lambda,u_1,...,u_Mx`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let m_x = self.vector.dim();
        let head: Vec<String> = (1..=m_x).map(|i| format!("u_{i}")).collect();
        writeln!(out, "k,lambda,{}", head.join(","))?;
        for k in 0..self.vector.n_terms() {
            let lam = self.lambda.get(k).copied().unwrap_or(0.0);
            let row: Vec<String> = self.vector.coeffs.column(k).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{k},{lam:e},{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Indicators {
    pub eps0: f64,
    pub eps_sigma2: f64,
    pub u_delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mode: usize,
    #[serde(flatten)]
    pub indicators: Indicators,
}

#[derive(Clone, Debug, Default)]
pub struct IterationLog {
    pub records: Vec<IterationRecord>,
    /// Largest pointwise |⟨u^s, u^t⟩ − δ_st| after orthonormalization, per iteration.
    pub orthonormality: Vec<f64>,
    /// Same quantity for the projected expansions evaluated at the grid points.
    pub projected_orthonormality: Vec<f64>,
}

impl IterationLog {
    pub fn for_mode(&self, mode: usize) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(move |r| r.mode == mode)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,mode,eps0,eps_sigma2,u_delta")?;
        for r in &self.records {
            let i = r.indicators;
            writeln!(out, "{},{},{:e},{:e},{:e}", r.iteration, r.mode, i.eps0, i.eps_sigma2, i.u_delta)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Plain,
    Shifted {
        rho: f64,
    },
    /// Deflates the listed mean modes (1-based) with the constant `c_lambda`,
    /// which defaults to the largest eigenvalue of A_0.
    Deflated {
        modes: Vec<usize>,
        #[serde(default)]
        c_lambda: Option<f64>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Direct,
    /// Conjugate gradients preconditioned by the mean block A_0.
    Pcg { tol: f64, max_iter: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SisiConfig {
    /// Number of mean eigenpairs the chosen modes may come from; defaults to
    /// n_s plus the number of deflated modes, raised to the highest chosen mode.
    pub n_e: Option<usize>,
    /// 1-based mean-problem modes to iterate.
    pub modes: Vec<usize>,
    pub max_iter: usize,
    /// Stop when every u_Δ is below `tol` times the vector norm.
    pub tol: f64,
    pub variant: Variant,
    pub backend: Backend,
    /// Consecutive ε_0 increases that flag a shifted run as divergent.
    pub divergence_window: usize,
    /// Growth of ε_0 over its running minimum that also flags divergence.
    pub divergence_growth: f64,
}

impl Default for SisiConfig {
    fn default() -> Self {
        Self {
            n_e: None,
            modes: vec![1],
            max_iter: 20,
            tol: 1e-8,
            variant: Variant::Plain,
            backend: Backend::Direct,
            divergence_window: 10,
            divergence_growth: 1e3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct SisiOutcome {
    pub modes: Vec<EigenExpansion>,
    /// Eigenpair expansions after each iteration.
    pub snapshots: Vec<Vec<EigenExpansion>>,
    pub log: IterationLog,
    pub iterations: usize,
    pub status: RunStatus,
}

/// Bases, expectation tensor and projection grid shared by all Galerkin runs.
#[derive(Clone, Debug)]
pub struct GalerkinContext {
    pub basis_operator: GpcBasis,
    pub basis_solution: GpcBasis,
    pub c3: TripleTensor,
    pub grid: QuadGrid,
    psi: DMatrix<f64>,
}

impl GalerkinContext {
    /// Operator basis of degree 2p, solution basis of degree p, Smolyak grid.
    pub fn new(m_xi: usize, p: u32, grid_level: usize) -> Result<Self> {
        Self::with_grid(
            gen_multi_indices(m_xi, 2 * p)?,
            gen_multi_indices(m_xi, p)?,
            smolyak(m_xi, grid_level)?,
        )
    }

    pub fn with_grid(basis_operator: GpcBasis, basis_solution: GpcBasis, grid: QuadGrid) -> Result<Self> {
        if grid.dim() != basis_solution.m_xi() {
            return Err(Error::DimensionMismatch(format!(
                "grid has dimension {}, basis has {} variables",
                grid.dim(),
                basis_solution.m_xi()
            )));
        }
        let c3 = triple_tensor(&basis_operator, &basis_solution)?;
        let n_s = basis_solution.len();
        let mut psi = DMatrix::zeros(grid.len(), n_s);
        for (q, xi) in grid.points().iter().enumerate() {
            for (k, v) in basis_solution.eval_all(xi).into_iter().enumerate() {
                psi[(q, k)] = v;
            }
        }
        Ok(Self {
            basis_operator,
            basis_solution,
            c3,
            grid,
            psi,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.basis_solution.len()
    }

    /// ψ_k(ξ^q) as an N_q × (M_ξ+1) matrix.
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn quad_tensor(&self) -> Result<QuadTensor> {
        quad_tensor(&self.basis_operator, &self.basis_solution)
    }

    /// Values u(ξ^q) as columns of an M_x × N_q matrix.
    pub fn samples(&self, u: &StochasticVector) -> DMatrix<f64> {
        &u.coeffs * self.psi.transpose()
    }

    /// Discrete projection of grid samples onto the solution basis.
    pub fn project(&self, samples: &DMatrix<f64>) -> StochasticVector {
        let mut weighted = samples.clone();
        for (q, w) in self.grid.weights().iter().enumerate() {
            weighted.column_mut(q).scale_mut(*w);
        }
        StochasticVector {
            coeffs: weighted * &self.psi,
        }
    }
}

fn check_vector(c: &TripleTensor, m_x: usize, u: &StochasticVector) -> Result<()> {
    if u.n_terms() != c.dims().1 {
        return Err(Error::DimensionMismatch(format!(
            "vector has {} chaos terms, tensor expects {}",
            u.n_terms(),
            c.dims().1
        )));
    }
    if u.dim() != m_x {
        return Err(Error::DimensionMismatch(format!(
            "vector has {} entries, operator has {m_x}",
            u.dim()
        )));
    }
    Ok(())
}

/// v_k = Σ_j Σ_ℓ c_ℓjk A_ℓ u_j.
pub fn stoch_matvec(a: &MatrixExpansion, c: &TripleTensor, u: &StochasticVector) -> Result<StochasticVector> {
    check_vector(c, a.dim(), u)?;
    let mut v = DMatrix::zeros(u.dim(), u.n_terms());
    let mut current = usize::MAX;
    let mut au = DMatrix::zeros(0, 0);
    for &(l, j, k, cv) in c.entries() {
        if l >= a.n_terms() {
            break;
        }
        if l != current {
            au = &a.terms[l] * &u.coeffs;
            current = l;
        }
        v.column_mut(k).axpy(cv, &au.column(j), 1.0);
    }
    Ok(StochasticVector { coeffs: v })
}

/// Global Galerkin matrix with block (k, j) = Σ_ℓ c_ℓjk A_ℓ.
pub fn assemble_global(a: &MatrixExpansion, c: &TripleTensor) -> Result<DMatrix<f64>> {
    let n = a.dim();
    let n_s = c.dims().1;
    let mut g = DMatrix::zeros(n * n_s, n * n_s);
    for &(l, j, k, cv) in c.entries() {
        if l >= a.n_terms() {
            break;
        }
        let mut block = g.view_mut((k * n, j * n), (n, n));
        block += &a.terms[l] * cv;
    }
    Ok(g)
}

/// w_k = Σ_i Σ_j c_ijk λ_i u_j: coefficients of the product of a scalar and
/// a vector expansion, truncated to the solution basis.
pub fn scalar_times_vector(lambda: &[f64], c: &TripleTensor, u: &StochasticVector) -> StochasticVector {
    let mut w = DMatrix::zeros(u.dim(), u.n_terms());
    for &(i, j, k, cv) in c.solution_block() {
        if let Some(&li) = lambda.get(i) {
            if li != 0.0 {
                w.column_mut(k).axpy(cv * li, &u.coeffs.column(j), 1.0);
            }
        }
    }
    StochasticVector { coeffs: w }
}

/// λ_k = Σ_i Σ_j c_ijk ⟨u_i, v_j⟩ for k = 0..M_ξ.
pub fn rayleigh_quotient(u: &StochasticVector, v: &StochasticVector, c: &TripleTensor) -> Vec<f64> {
    let gram = u.coeffs.transpose() * &v.coeffs;
    let mut lam = vec![0.0; u.n_terms()];
    for &(i, j, k, cv) in c.solution_block() {
        lam[k] += cv * gram[(i, j)];
    }
    lam
}

/// λ_k = Σ_ℓ Σ_i Σ_j c_ℓijk u_iᵀ A_ℓ u_j for k = 0..M_A.
pub fn rayleigh_quotient_full(u: &StochasticVector, a: &MatrixExpansion, c4: &QuadTensor) -> Vec<f64> {
    let mut lam = vec![0.0; c4.dims().3];
    let mut current = usize::MAX;
    let mut h = DMatrix::zeros(0, 0);
    for &(l, i, j, k, cv) in c4.entries() {
        if l >= a.n_terms() {
            break;
        }
        if l != current {
            h = u.coeffs.transpose() * &a.terms[l] * &u.coeffs;
            current = l;
        }
        lam[k] += cv * h[(i, j)];
    }
    lam
}

fn zero_threshold(norms: &[f64]) -> f64 {
    1e-14 * norms.iter().cloned().fold(0.0, f64::max)
}

/// Pointwise normalization at the grid points followed by discrete projection.
pub fn normalize(v: &StochasticVector, ctx: &GalerkinContext) -> Result<StochasticVector> {
    let mut s = ctx.samples(v);
    let norms: Vec<f64> = s.column_iter().map(|c| c.norm()).collect();
    let floor = zero_threshold(&norms);
    for (q, &n) in norms.iter().enumerate() {
        if !(n > floor) || !n.is_finite() {
            return Err(Error::ZeroNorm(q));
        }
        s.column_mut(q).unscale_mut(n);
    }
    Ok(ctx.project(&s))
}

#[derive(Clone, Debug)]
pub struct SmgsOutcome {
    pub vectors: Vec<StochasticVector>,
    /// Largest |⟨u^s(ξ^q), u^t(ξ^q)⟩ − δ_st| over grid points before projection.
    pub max_defect: f64,
    /// Grid points that needed a second Gram-Schmidt pass.
    pub second_passes: usize,
}

fn mgs_pass(cols: &mut [DVector<f64>], point: usize) -> Result<()> {
    for s in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(s);
        let x = &mut rest[0];
        let before = x.norm();
        for t in done.iter() {
            let r = t.dot(x);
            x.axpy(-r, t, 1.0);
        }
        let n = x.norm();
        if !(n > 1e-10 * before) || !n.is_finite() {
            return Err(Error::RankDeficient { point, vector: s });
        }
        x.unscale_mut(n);
    }
    Ok(())
}

fn gram_defect(cols: &[DVector<f64>]) -> f64 {
    let mut d = 0.0f64;
    for s in 0..cols.len() {
        for t in 0..=s {
            let target = if s == t { 1.0 } else { 0.0 };
            d = d.max((cols[s].dot(&cols[t]) - target).abs());
        }
    }
    d
}

/// Stochastic modified Gram-Schmidt: vectors are orthonormalized at each
/// grid point and the results projected onto the solution basis.
pub fn smgs(vs: &[StochasticVector], ctx: &GalerkinContext) -> Result<SmgsOutcome> {
    let samples: Vec<DMatrix<f64>> = vs.iter().map(|v| ctx.samples(v)).collect();
    let n_q = ctx.grid.len();
    let mut out: Vec<DMatrix<f64>> = samples.iter().map(|s| DMatrix::zeros(s.nrows(), n_q)).collect();
    let mut max_defect = 0.0f64;
    let mut second_passes = 0;
    for q in 0..n_q {
        let mut cols: Vec<DVector<f64>> = samples.iter().map(|s| s.column(q).into_owned()).collect();
        mgs_pass(&mut cols, q)?;
        let mut defect = gram_defect(&cols);
        if defect > ORTHO_TOL {
            mgs_pass(&mut cols, q)?;
            defect = gram_defect(&cols);
            second_passes += 1;
        }
        max_defect = max_defect.max(defect);
        for (o, c) in out.iter_mut().zip(&cols) {
            o.set_column(q, c);
        }
    }
    Ok(SmgsOutcome {
        vectors: out.iter().map(|s| ctx.project(s)).collect(),
        max_defect,
        second_passes,
    })
}

/// Largest |⟨u^s(ξ^q), u^t(ξ^q)⟩ − δ_st| of expansions evaluated on the grid.
pub fn grid_orthonormality(vs: &[StochasticVector], ctx: &GalerkinContext) -> f64 {
    let samples: Vec<DMatrix<f64>> = vs.iter().map(|v| ctx.samples(v)).collect();
    (0..ctx.grid.len())
        .map(|q| {
            let cols: Vec<DVector<f64>> = samples.iter().map(|s| s.column(q).into_owned()).collect();
            gram_defect(&cols)
        })
        .fold(0.0, f64::max)
}

/// Ã_0 = A_0 − ρI.
pub fn apply_shift(a: &MatrixExpansion, rho: f64) -> MatrixExpansion {
    let mut out = a.clone();
    for i in 0..out.dim() {
        out.terms[0][(i, i)] -= rho;
    }
    out
}

/// λ̃_0 = λ_0 − ρ.
pub fn shift_lambda(lambda: &[f64], rho: f64) -> Vec<f64> {
    let mut l = lambda.to_vec();
    if let Some(l0) = l.first_mut() {
        *l0 -= rho;
    }
    l
}

pub fn unshift_lambda(lambda: &[f64], rho: f64) -> Vec<f64> {
    shift_lambda(lambda, -rho)
}

/// Ã_0 = A_0 + Σ_d (C_λ − λ_0^d) u_0^d (u_0^d)ᵀ for the given mean eigenpairs.
pub fn deflate(a: &MatrixExpansion, pairs: &[(f64, DVector<f64>)], c_lambda: f64) -> Result<MatrixExpansion> {
    let mut out = a.clone();
    for (lam, u) in pairs {
        if u.len() != a.dim() {
            return Err(Error::DimensionMismatch(format!(
                "deflation vector has {} entries, operator has {}",
                u.len(),
                a.dim()
            )));
        }
        if c_lambda <= *lam {
            return Err(Error::InvalidArgument(format!(
                "deflation constant {c_lambda:e} must exceed deflated eigenvalue {lam:e}"
            )));
        }
        out.terms[0].ger(c_lambda - lam, u, u, 1.0);
    }
    Ok(out)
}

/// Deflates the given mean modes (1-based) of A_0; C_λ defaults to the
/// largest mean eigenvalue.
pub fn deflate_modes(a: &MatrixExpansion, modes: &[usize], c_lambda: Option<f64>) -> Result<MatrixExpansion> {
    let eig = sym_eig(a.mean())?;
    let pairs = modes
        .iter()
        .map(|&m| {
            let v = mode_vector(&eig, m)?;
            Ok((eig.values[m - 1], v))
        })
        .collect::<Result<Vec<_>>>()?;
    deflate(a, &pairs, c_lambda.unwrap_or(eig.values[eig.len() - 1]))
}

/// r̃_k = (A u)_k − Σ c_ijk λ_i u_j.
pub fn residual_coeffs(
    a: &MatrixExpansion,
    c: &TripleTensor,
    u: &StochasticVector,
    lambda: &[f64],
) -> Result<StochasticVector> {
    let au = stoch_matvec(a, c, u)?;
    let lu = scalar_times_vector(lambda, c, u);
    Ok(StochasticVector {
        coeffs: au.coeffs - lu.coeffs,
    })
}

pub fn indicators(r: &StochasticVector, u: &StochasticVector, u_prev: &StochasticVector) -> Indicators {
    let eps0 = r.coeffs.column(0).norm();
    let mut var = DVector::zeros(r.dim());
    for k in 1..r.n_terms() {
        var += r.coeffs.column(k).component_mul(&r.coeffs.column(k));
    }
    Indicators {
        eps0,
        eps_sigma2: var.norm(),
        u_delta: (&u.coeffs - &u_prev.coeffs).norm(),
    }
}

/// Mean eigenvectors as deterministic expansions with Rayleigh-quotient
/// eigenvalues: no stochastic iteration.
pub fn rayleigh_quotient_mean(a: &MatrixExpansion, ctx: &GalerkinContext, modes: &[usize]) -> Result<Vec<EigenExpansion>> {
    let eig = sym_eig(a.mean())?;
    modes
        .iter()
        .map(|&m| {
            let u = StochasticVector::from_mean(&mode_vector(&eig, m)?, ctx.n_terms());
            let v = stoch_matvec(a, &ctx.c3, &u)?;
            Ok(EigenExpansion {
                mode: m,
                lambda: rayleigh_quotient(&u, &v, &ctx.c3),
                vector: u,
            })
        })
        .collect()
}

fn mode_vector(eig: &SymEigResult, mode: usize) -> Result<DVector<f64>> {
    if mode == 0 || mode > eig.len() {
        return Err(Error::IndexOutOfRange {
            index: mode,
            len: eig.len(),
        });
    }
    Ok(eig.vector(mode - 1))
}

enum Step {
    Direct(FactoredSolver),
    Pcg {
        precond: FactoredSolver,
        tol: f64,
        max_iter: usize,
    },
    MatVec,
}

impl Step {
    fn build(op: &MatrixExpansion, c: &TripleTensor, backend: &Backend) -> Result<Self> {
        Ok(match backend {
            Backend::Direct => Step::Direct(FactoredSolver::new(&assemble_global(op, c)?)?),
            Backend::Pcg { tol, max_iter } => Step::Pcg {
                precond: FactoredSolver::new(op.mean())?,
                tol: *tol,
                max_iter: *max_iter,
            },
        })
    }

    fn apply(&self, op: &MatrixExpansion, c: &TripleTensor, rhs: &[StochasticVector]) -> Result<Vec<StochasticVector>> {
        let m_x = op.dim();
        match self {
            Step::MatVec => rhs.iter().map(|u| stoch_matvec(op, c, u)).collect(),
            Step::Direct(solver) => {
                let n = rhs[0].coeffs.len();
                let mut b = DMatrix::zeros(n, rhs.len());
                for (s, r) in rhs.iter().enumerate() {
                    b.column_mut(s).copy_from_slice(r.coeffs.as_slice());
                }
                let x = solver.solve(&b)?;
                Ok(x.column_iter()
                    .map(|col| StochasticVector::from_stacked(col.as_slice(), m_x))
                    .collect())
            }
            Step::Pcg { precond, tol, max_iter } => rhs
                .iter()
                .map(|r| {
                    let apply = |x: &DVector<f64>| {
                        let u = StochasticVector::from_stacked(x.as_slice(), m_x);
                        stoch_matvec(op, c, &u).expect("dimensions checked").stacked()
                    };
                    let prec = |x: &DVector<f64>| {
                        let b = DMatrix::from_column_slice(m_x, x.len() / m_x, x.as_slice());
                        let y = precond.solve(&b).expect("dimensions checked");
                        DVector::from_column_slice(y.as_slice())
                    };
                    let out = pcg(apply, prec, &r.stacked(), *tol, *max_iter)?;
                    if !out.converged {
                        log::warn!(
                            "pcg stopped after {} iterations at relative residual {:.3e}",
                            out.iterations,
                            out.relative_residual
                        );
                    }
                    Ok(StochasticVector::from_stacked(out.x.as_slice(), m_x))
                })
                .collect(),
        }
    }
}

struct Driver<'a> {
    ctx: &'a GalerkinContext,
    /// Operator on the left side of the solve (or in the product).
    op: &'a MatrixExpansion,
    /// Operator used in the Rayleigh quotient and the residual.
    rq_op: &'a MatrixExpansion,
    shift: Option<f64>,
    step: Step,
    cfg: &'a SisiConfig,
}

impl Driver<'_> {
    fn lambdas(&self, us: &[StochasticVector]) -> Result<Vec<Vec<f64>>> {
        us.iter()
            .map(|u| Ok(rayleigh_quotient(u, &stoch_matvec(self.rq_op, &self.ctx.c3, u)?, &self.ctx.c3)))
            .collect()
    }

    fn run(&self, modes: &[usize], init: Vec<StochasticVector>) -> Result<SisiOutcome> {
        let c = &self.ctx.c3;
        let mut us = init;
        let mut log = IterationLog::default();
        let mut status = RunStatus::MaxIterations;
        let mut iterations = 0;
        let mut increases = 0usize;
        let mut last_eps0 = f64::INFINITY;
        let mut min_eps0 = f64::INFINITY;
        let mut blown_up = false;
        let mut snapshots = Vec::new();
        for it in 0..self.cfg.max_iter {
            let rhs: Vec<StochasticVector> = match self.shift {
                None => us.clone(),
                Some(rho) => self
                    .lambdas(&us)?
                    .iter()
                    .zip(&us)
                    .map(|(lam, u)| scalar_times_vector(&shift_lambda(lam, rho), c, u))
                    .collect(),
            };
            let vs = self.step.apply(self.op, c, &rhs).map_err(Error::at("galerkin solve"))?;
            let next = if vs.len() == 1 {
                let u = normalize(&vs[0], self.ctx).map_err(Error::at("normalization"))?;
                log.orthonormality.push(0.0);
                vec![u]
            } else {
                let o = smgs(&vs, self.ctx).map_err(Error::at("orthogonalization"))?;
                if o.second_passes > 0 {
                    log::debug!("iteration {it}: second Gram-Schmidt pass at {} points", o.second_passes);
                }
                log.orthonormality.push(o.max_defect);
                o.vectors
            };
            log.projected_orthonormality.push(grid_orthonormality(&next, self.ctx));
            let lams = self.lambdas(&next)?;
            let mut worst_delta = 0.0f64;
            let mut worst_norm = 0.0f64;
            for (s, ((u, prev), lam)) in next.iter().zip(&us).zip(&lams).enumerate() {
                let r = residual_coeffs(self.rq_op, c, u, lam)?;
                let ind = indicators(&r, u, prev);
                worst_delta = worst_delta.max(ind.u_delta);
                worst_norm = worst_norm.max(u.norm());
                log.records.push(IterationRecord {
                    iteration: it + 1,
                    mode: modes[s],
                    indicators: ind,
                });
                if s == 0 && self.shift.is_some() {
                    increases = if ind.eps0 > last_eps0 { increases + 1 } else { 0 };
                    last_eps0 = ind.eps0;
                    min_eps0 = min_eps0.min(ind.eps0);
                    blown_up |= ind.eps0 > self.cfg.divergence_growth * min_eps0;
                }
            }
            snapshots.push(
                modes
                    .iter()
                    .zip(&next)
                    .zip(&lams)
                    .map(|((&mode, u), lam)| EigenExpansion {
                        mode,
                        lambda: lam.clone(),
                        vector: u.clone(),
                    })
                    .collect(),
            );
            us = next;
            iterations = it + 1;
            if worst_delta <= self.cfg.tol * worst_norm {
                status = RunStatus::Converged;
                break;
            }
            if self.shift.is_some() && (increases >= self.cfg.divergence_window || blown_up) {
                status = RunStatus::Diverged;
                break;
            }
        }
        let lams = self.lambdas(&us)?;
        let modes = modes
            .iter()
            .zip(us)
            .zip(lams)
            .map(|((&mode, vector), lambda)| EigenExpansion { mode, lambda, vector })
            .collect();
        Ok(SisiOutcome {
            modes,
            snapshots,
            log,
            iterations,
            status,
        })
    }
}

fn validate_modes(cfg: &SisiConfig, n_d: usize, m_x: usize) -> Result<()> {
    if cfg.modes.is_empty() {
        return Err(Error::InvalidArgument("no modes selected".into()));
    }
    let highest = cfg.modes.iter().copied().max().unwrap_or(0);
    let n_e = cfg.n_e.unwrap_or((cfg.modes.len() + n_d).max(highest)).min(m_x);
    for &m in &cfg.modes {
        if m == 0 || m > n_e {
            return Err(Error::InvalidArgument(format!("mode {m} outside 1..={n_e}")));
        }
    }
    Ok(())
}

fn initial_vectors(eig: &SymEigResult, modes: &[usize], n_terms: usize) -> Result<Vec<StochasticVector>> {
    modes
        .iter()
        .map(|&m| Ok(StochasticVector::from_mean(&mode_vector(eig, m)?, n_terms)))
        .collect()
}

/// Stochastic inverse subspace iteration for the modes in `cfg`.
///
/// Handles all three variants; the shifted variant requires a single mode.
pub fn sisi_run(a: &MatrixExpansion, ctx: &GalerkinContext, cfg: &SisiConfig) -> Result<SisiOutcome> {
    let eig = sym_eig(a.mean())?;
    match &cfg.variant {
        Variant::Plain => {
            validate_modes(cfg, 0, a.dim())?;
            let init = initial_vectors(&eig, &cfg.modes, ctx.n_terms())?;
            let driver = Driver {
                ctx,
                op: a,
                rq_op: a,
                shift: None,
                step: Step::build(a, &ctx.c3, &cfg.backend)?,
                cfg,
            };
            driver.run(&cfg.modes, init)
        }
        Variant::Shifted { rho } => sii_shifted_run(a, ctx, *rho, cfg),
        Variant::Deflated { modes, c_lambda } => {
            validate_modes(cfg, modes.len(), a.dim())?;
            let deflated = deflate_modes(a, modes, *c_lambda)?;
            let init = initial_vectors(&eig, &cfg.modes, ctx.n_terms())?;
            let driver = Driver {
                ctx,
                op: &deflated,
                rq_op: &deflated,
                shift: None,
                step: Step::build(&deflated, &ctx.c3, &cfg.backend)?,
                cfg,
            };
            driver.run(&cfg.modes, init)
        }
    }
}

/// Shifted stochastic inverse iteration for a single mode: the left side
/// uses A_0 − ρI and the right side the current eigenvalue expansion with
/// λ_0 − ρ.
pub fn sii_shifted_run(a: &MatrixExpansion, ctx: &GalerkinContext, rho: f64, cfg: &SisiConfig) -> Result<SisiOutcome> {
    if cfg.modes.len() != 1 {
        return Err(Error::InvalidArgument("shifted iteration takes exactly one mode".into()));
    }
    validate_modes(cfg, 0, a.dim())?;
    let eig = sym_eig(a.mean())?;
    let shifted = apply_shift(a, rho);
    let init = initial_vectors(&eig, &cfg.modes, ctx.n_terms())?;
    let driver = Driver {
        ctx,
        op: &shifted,
        rq_op: a,
        shift: Some(rho),
        step: Step::build(&shifted, &ctx.c3, &cfg.backend)?,
        cfg,
    };
    driver.run(&cfg.modes, init)
}

/// Stochastic subspace iteration with the solve replaced by the Galerkin
/// matrix-vector product; converges to the largest eigenvalues.
pub fn subspace_iteration_max(a: &MatrixExpansion, ctx: &GalerkinContext, cfg: &SisiConfig) -> Result<SisiOutcome> {
    let cfg_all = SisiConfig {
        n_e: Some(cfg.n_e.unwrap_or(a.dim())),
        ..cfg.clone()
    };
    validate_modes(&cfg_all, 0, a.dim())?;
    let eig = sym_eig(a.mean())?;
    let init = initial_vectors(&eig, &cfg.modes, ctx.n_terms())?;
    let driver = Driver {
        ctx,
        op: a,
        rq_op: a,
        shift: None,
        step: Step::MatVec,
        cfg,
    };
    driver.run(&cfg.modes, init)
}
