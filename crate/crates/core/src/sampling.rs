//! Sampling reference solutions: Monte Carlo and pseudospectral stochastic
//! collocation, plus evaluation of gPC expansions at given points.
//!
//! Every point solve is an independent deterministic eigenproblem; points are
//! processed in parallel and collected in point order.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::galerkin::{EigenExpansion, StochasticVector};
use crate::linalg::{sym_eig, symmetrize, SymEigResult};
use crate::models::MatrixExpansion;
use crate::polychaos::GpcBasis;
use crate::quadrature::QuadGrid;

/// A(ξ) = Σ_ℓ A_ℓ ψ_ℓ(ξ), symmetrized.
pub fn evaluate_operator(a: &MatrixExpansion, basis: &GpcBasis, xi: &[f64]) -> DMatrix<f64> {
    let psi = basis.eval_all(xi);
    let mut out = DMatrix::zeros(a.dim(), a.dim());
    for (t, p) in a.terms.iter().zip(&psi) {
        if *p != 0.0 {
            out += t * *p;
        }
    }
    symmetrize(&mut out);
    out
}

/// Mode matching at one point: `source[s]` is the 0-based index in the
/// point's ascending spectrum assigned to reference mode s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub source: Vec<usize>,
    pub flipped: Vec<bool>,
}

/// Per-point eigenpairs for a set of modes, aligned with the mean modes.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    /// 1-based mean-problem modes, in output order.
    pub modes: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    /// `values[i][s]`: eigenvalue of mode s at point i.
    pub values: Vec<Vec<f64>>,
    /// `vectors[i][s]`: unit eigenvector of mode s at point i.
    pub vectors: Vec<Vec<DVector<f64>>>,
    pub alignment: Vec<Alignment>,
    /// Points dropped because the eigensolver failed there.
    pub skipped: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Eigenvalues of output mode `s` across all points.
    pub fn mode_values(&self, s: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[s]).collect()
    }

    /// Points at which the matched mode is not the one with the same
    /// position in the ascending spectrum.
    pub fn reordered_points(&self) -> usize {
        self.alignment
            .iter()
            .filter(|a| a.source.iter().zip(&self.modes).any(|(&src, &m)| src + 1 != m))
            .count()
    }

    /// `xi_1,...,xi_m,lambda_<mode>,...` per point.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.points.first().map_or(0, Vec::len);
        let mut head: Vec<String> = (1..=dim).map(|i| format!("xi_{i}")).collect();
        head.extend(self.modes.iter().map(|m| format!("lambda_{m}")));
        writeln!(out, "{}", head.join(","))?;
        for (p, v) in self.points.iter().zip(&self.values) {
            let row: Vec<String> = p.iter().chain(v).map(|x| format!("{x:e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Matches each reference vector to the sample eigenvector with the largest
/// |overlap|, greedily over all (reference, sample) pairs, then fixes signs so
/// the overlap is non-negative. Ties within 1e-12 go to the lower indices.
pub fn align_samples(eig: &SymEigResult, reference: &[DVector<f64>]) -> (Alignment, Vec<f64>, Vec<DVector<f64>>) {
    let n = eig.len();
    let overlaps: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| (0..n).map(|j| eig.vectors.column(j).dot(r)).collect())
        .collect();
    let mut source = vec![usize::MAX; reference.len()];
    let mut taken = vec![false; n];
    for _ in 0..reference.len().min(n) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (t, row) in overlaps.iter().enumerate() {
            if source[t] != usize::MAX {
                continue;
            }
            for (j, o) in row.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = o.abs();
                if best.is_none_or(|(_, _, b)| v > b + 1e-12) {
                    best = Some((t, j, v));
                }
            }
        }
        let (t, j, _) = best.expect("at least one free pair");
        source[t] = j;
        taken[j] = true;
    }
    let mut flipped = Vec::with_capacity(reference.len());
    let mut values = Vec::with_capacity(reference.len());
    let mut vectors = Vec::with_capacity(reference.len());
    for (t, &j) in source.iter().enumerate() {
        let mut v = eig.vector(j);
        let flip = overlaps[t][j] < 0.0;
        if flip {
            v.neg_mut();
        }
        flipped.push(flip);
        values.push(eig.values[j]);
        vectors.push(v);
    }
    (Alignment { source, flipped }, values, vectors)
}

fn reference_vectors(a: &MatrixExpansion, modes: &[usize]) -> Result<Vec<DVector<f64>>> {
    let eig = sym_eig(a.mean())?;
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no modes selected".into()));
    }
    modes
        .iter()
        .map(|&m| {
            if m == 0 || m > eig.len() {
                Err(Error::IndexOutOfRange {
                    index: m,
                    len: eig.len(),
                })
            } else {
                Ok(eig.vector(m - 1))
            }
        })
        .collect()
}

type PointSolution = (Alignment, Vec<f64>, Vec<DVector<f64>>);

fn solve_points(
    a: &MatrixExpansion,
    basis: &GpcBasis,
    points: &[Vec<f64>],
    reference: &[DVector<f64>],
) -> Vec<Option<PointSolution>> {
    points
        .par_iter()
        .map(|xi| {
            let eig = sym_eig(&evaluate_operator(a, basis, xi)).ok()?;
            if eig.values.iter().any(|v| !v.is_finite()) {
                return None;
            }
            Some(align_samples(&eig, reference))
        })
        .collect()
}

fn collect(modes: &[usize], points: Vec<Vec<f64>>, solved: Vec<Option<PointSolution>>) -> SampleSet {
    let mut set = SampleSet {
        modes: modes.to_vec(),
        ..Default::default()
    };
    for (p, s) in points.into_iter().zip(solved) {
        match s {
            Some((al, vals, vecs)) => {
                set.points.push(p);
                set.values.push(vals);
                set.vectors.push(vecs);
                set.alignment.push(al);
            }
            None => set.skipped += 1,
        }
    }
    set
}

/// Standard normal points from a seeded ChaCha8 stream, row by row.
pub fn normal_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Monte Carlo reference: eigenpairs of A(ξ) at seeded random points.
pub fn mc_run(a: &MatrixExpansion, basis: &GpcBasis, n_samples: usize, seed: u64, modes: &[usize]) -> Result<SampleSet> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least one sample".into()));
    }
    let reference = reference_vectors(a, modes)?;
    let points = normal_points(n_samples, basis.m_xi(), seed);
    mc_at_points(a, basis, points, modes, &reference)
}

/// Eigenpairs of A(ξ) at given points, aligned with the mean modes.
pub fn solve_at_points(a: &MatrixExpansion, basis: &GpcBasis, points: Vec<Vec<f64>>, modes: &[usize]) -> Result<SampleSet> {
    let reference = reference_vectors(a, modes)?;
    mc_at_points(a, basis, points, modes, &reference)
}

fn mc_at_points(
    a: &MatrixExpansion,
    basis: &GpcBasis,
    points: Vec<Vec<f64>>,
    modes: &[usize],
    reference: &[DVector<f64>],
) -> Result<SampleSet> {
    let solved = solve_points(a, basis, &points, reference);
    let set = collect(modes, points, solved);
    if set.skipped > 0 {
        log::warn!("{} sample points skipped after eigensolver failure", set.skipped);
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct ScOutcome {
    pub modes: Vec<EigenExpansion>,
    pub samples: SampleSet,
}

/// Pseudospectral collocation: eigenpairs at the grid points, aligned, then
/// projected onto the solution basis by the grid's quadrature rule.
pub fn sc_run(
    a: &MatrixExpansion,
    basis_a: &GpcBasis,
    basis_sol: &GpcBasis,
    grid: &QuadGrid,
    modes: &[usize],
) -> Result<ScOutcome> {
    if grid.dim() != basis_a.m_xi() || basis_sol.m_xi() != basis_a.m_xi() {
        return Err(Error::DimensionMismatch("grid and bases must share the stochastic dimension".into()));
    }
    let reference = reference_vectors(a, modes)?;
    let solved = solve_points(a, basis_a, grid.points(), &reference);
    if let Some(q) = solved.iter().position(Option::is_none) {
        return Err(Error::SampleFailed(q));
    }
    let samples = collect(modes, grid.points().to_vec(), solved);
    let n_s = basis_sol.len();
    let m_x = a.dim();
    let mut out = Vec::with_capacity(modes.len());
    for (s, &mode) in modes.iter().enumerate() {
        let mut lambda = vec![0.0; n_s];
        let mut coeffs = DMatrix::zeros(m_x, n_s);
        for (q, (xi, w)) in grid.iter().enumerate() {
            let psi = basis_sol.eval_all(xi);
            let lam = samples.values[q][s];
            let u = &samples.vectors[q][s];
            for k in 0..n_s {
                lambda[k] += lam * psi[k] * w;
                coeffs.column_mut(k).axpy(psi[k] * w, u, 1.0);
            }
        }
        out.push(EigenExpansion {
            mode,
            lambda,
            vector: StochasticVector { coeffs },
        });
    }
    Ok(ScOutcome { modes: out, samples })
}

/// Values of an eigenpair expansion at the given points.
#[derive(Clone, Debug)]
pub struct ExpansionSamples {
    pub lambda: Vec<f64>,
    pub vectors: Vec<DVector<f64>>,
}

pub fn sample_expansion(exp: &EigenExpansion, basis: &GpcBasis, points: &[Vec<f64>]) -> ExpansionSamples {
    let n = exp.vector.n_terms();
    let (lambda, vectors) = points
        .par_iter()
        .map(|xi| {
            let psi = basis.eval_all(xi);
            (exp.lambda_at(&psi[..n]), exp.vector.eval(&psi[..n]))
        })
        .unzip();
    ExpansionSamples { lambda, vectors }
}
