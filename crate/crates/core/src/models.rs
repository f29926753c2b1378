//! Vibration benchmarks with a random Young's modulus.
//!
//! Both models assemble one stiffness matrix per chaos term of the modulus,
//! K(ξ) = Σ_ℓ K_ℓ ψ_ℓ(ξ), and a deterministic consistent mass matrix. The
//! modulus is constant on each element (its value at the element midpoint).
//! Shear terms use reduced integration to avoid locking.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, cholesky, symmetrize};
use crate::polychaos::{gen_multi_indices, GpcBasis};
use crate::randfield::{
    calibrate_lognormal, kl_1d_exponential, kl_2d_discrete, lognormal_coeffs_with, LognormalField,
    VarianceTerm,
};

/// Generalized problem K(ξ) u = λ M u after boundary conditions.
#[derive(Clone, Debug)]
pub struct GeneralizedProblem {
    pub stiffness: Vec<DMatrix<f64>>,
    pub mass: DMatrix<f64>,
    /// Global indices of the unconstrained DOFs, in matrix order.
    pub free_dofs: Vec<usize>,
    pub total_dofs: usize,
}

impl GeneralizedProblem {
    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }
}

/// A(ξ) = Σ_ℓ A_ℓ ψ_ℓ(ξ) with symmetric coefficient matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixExpansion {
    pub terms: Vec<DMatrix<f64>>,
    pub m_xi: usize,
    /// Chaos degree of the solution; the operator basis has degree 2p.
    pub p: u32,
}

impl MatrixExpansion {
    pub fn new(terms: Vec<DMatrix<f64>>, m_xi: usize, p: u32) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("matrix expansion has no terms".into()))?;
        let n = first.nrows();
        for (l, a) in terms.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "term {l} is {}x{}, expected {n}x{n}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let asym = asymmetry(a);
            if asym > 1e-10 {
                return Err(Error::NotSymmetric(asym));
            }
        }
        Ok(Self { terms, m_xi, p })
    }

    pub fn dim(&self) -> usize {
        self.terms[0].nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.terms[0]
    }

    /// Same expansion with every term multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|a| a * c).collect(),
            ..self.clone()
        }
    }

    /// Expansion with only the mean term kept.
    pub fn mean_only(&self) -> Self {
        let mut terms = vec![DMatrix::zeros(self.dim(), self.dim()); self.terms.len()];
        terms[0] = self.terms[0].clone();
        Self { terms, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct BeamParams {
    pub length: f64,
    pub thickness: f64,
    pub width: f64,
    pub poisson: f64,
    pub kappa: f64,
    pub density: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            length: 1.0,
            thickness: 0.001,
            width: 1.0,
            poisson: 0.30,
            kappa: 5.0 / 6.0,
            density: 1.0,
        }
    }
}

impl BeamParams {
    pub fn element_midpoints(&self, n_elements: usize) -> Vec<f64> {
        let h = self.length / n_elements as f64;
        (0..n_elements).map(|e| (e as f64 + 0.5) * h).collect()
    }
}

/// Cantilever Timoshenko beam clamped at x = 0.
///
/// DOFs are ordered as all deflections w followed by all rotations θ; the
/// clamped node's w and θ are removed.
pub fn timoshenko_assemble(
    params: &BeamParams,
    n_elements: usize,
    field: &LognormalField,
) -> Result<GeneralizedProblem> {
    if n_elements < 2 {
        return Err(Error::InvalidArgument("beam needs at least two elements".into()));
    }
    if field.n_points() != n_elements {
        return Err(Error::DimensionMismatch(format!(
            "field has {} element values, mesh has {n_elements} elements",
            field.n_points()
        )));
    }
    let nn = n_elements + 1;
    let ndof = 2 * nn;
    let h = params.length / n_elements as f64;
    if !(h > 0.0) {
        return Err(Error::SingularElement(0));
    }
    let area = params.width * params.thickness;
    let inertia = params.width * params.thickness.powi(3) / 12.0;
    let shear = params.kappa * area / (2.0 * (1.0 + params.poisson));

    // unit-modulus element stiffness in local order [w_i, w_j, θ_i, θ_j]
    let mut ke = DMatrix::<f64>::zeros(4, 4);
    let kb = inertia / h;
    ke[(2, 2)] += kb;
    ke[(3, 3)] += kb;
    ke[(2, 3)] -= kb;
    ke[(3, 2)] -= kb;
    // one-point shear: γ = w' + θ at the midpoint
    let bs = [-1.0 / h, 1.0 / h, 0.5, 0.5];
    for a in 0..4 {
        for b in 0..4 {
            ke[(a, b)] += shear * h * bs[a] * bs[b];
        }
    }

    let mut k_full = vec![DMatrix::<f64>::zeros(ndof, ndof); field.n_terms()];
    let mut m_full = DMatrix::<f64>::zeros(ndof, ndof);
    let cm = [[2.0, 1.0], [1.0, 2.0]];
    for e in 0..n_elements {
        let dofs = [e, e + 1, nn + e, nn + e + 1];
        for (l, kl) in k_full.iter_mut().enumerate() {
            let scale = field.coeffs[l][e];
            if scale == 0.0 {
                continue;
            }
            for a in 0..4 {
                for b in 0..4 {
                    kl[(dofs[a], dofs[b])] += scale * ke[(a, b)];
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                m_full[(dofs[a], dofs[b])] += params.density * area * h / 6.0 * cm[a][b];
                m_full[(dofs[2 + a], dofs[2 + b])] += params.density * inertia * h / 6.0 * cm[a][b];
            }
        }
    }
    let free: Vec<usize> = (0..ndof).filter(|&d| d != 0 && d != nn).collect();
    Ok(reduce(k_full, m_full, free, ndof))
}

fn reduce(k_full: Vec<DMatrix<f64>>, m_full: DMatrix<f64>, free: Vec<usize>, ndof: usize) -> GeneralizedProblem {
    let pick = |a: &DMatrix<f64>| DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])]);
    GeneralizedProblem {
        stiffness: k_full.iter().map(pick).collect(),
        mass: pick(&m_full),
        free_dofs: free,
        total_dofs: ndof,
    }
}

#[derive(Clone, Debug)]
pub struct PlateParams {
    pub side: f64,
    pub thickness: f64,
    pub poisson: f64,
    pub kappa: f64,
    pub density: f64,
}

impl Default for PlateParams {
    fn default() -> Self {
        Self {
            side: 1.0,
            thickness: 0.1,
            poisson: 0.30,
            kappa: 5.0 / 6.0,
            density: 1.0,
        }
    }
}

impl PlateParams {
    /// Element centroids in row-major element order (x fastest).
    pub fn element_centroids(&self, nx: usize, ny: usize) -> Vec<[f64; 2]> {
        let (hx, hy) = (self.side / nx as f64, self.side / ny as f64);
        let mut out = Vec::with_capacity(nx * ny);
        for ey in 0..ny {
            for ex in 0..nx {
                out.push([(ex as f64 + 0.5) * hx, (ey as f64 + 0.5) * hy]);
            }
        }
        out
    }
}

const GAUSS2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

fn q4_shape(s: f64, t: f64) -> ([f64; 4], [[f64; 4]; 2]) {
    let n = [
        0.25 * (1.0 - s) * (1.0 - t),
        0.25 * (1.0 + s) * (1.0 - t),
        0.25 * (1.0 + s) * (1.0 + t),
        0.25 * (1.0 - s) * (1.0 + t),
    ];
    let d = [
        [
            -0.25 * (1.0 - t),
            0.25 * (1.0 - t),
            0.25 * (1.0 + t),
            -0.25 * (1.0 + t),
        ],
        [
            -0.25 * (1.0 - s),
            -0.25 * (1.0 + s),
            0.25 * (1.0 + s),
            0.25 * (1.0 - s),
        ],
    ];
    (n, d)
}

/// Shape values, physical derivatives and |J| at (s, t).
fn q4_physical(xy: &[[f64; 2]; 4], s: f64, t: f64, elem: usize) -> Result<([f64; 4], [[f64; 4]; 2], f64)> {
    let (n, d) = q4_shape(s, t);
    let mut j = [[0.0; 2]; 2];
    for a in 0..4 {
        for r in 0..2 {
            j[r][0] += d[r][a] * xy[a][0];
            j[r][1] += d[r][a] * xy[a][1];
        }
    }
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    if !(det > 0.0) {
        return Err(Error::SingularElement(elem));
    }
    let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
    let mut dx = [[0.0; 4]; 2];
    for a in 0..4 {
        dx[0][a] = inv[0][0] * d[0][a] + inv[0][1] * d[1][a];
        dx[1][a] = inv[1][0] * d[0][a] + inv[1][1] * d[1][a];
    }
    Ok((n, dx, det))
}

/// Square Mindlin plate on Q4 elements with all DOFs fixed on boundary nodes.
///
/// DOFs are ordered as all w, then all θx, then all θy. Bending uses 2×2
/// Gauss points, shear a single point, mass 2×2.
pub fn mindlin_assemble(
    params: &PlateParams,
    nx: usize,
    ny: usize,
    field: &LognormalField,
) -> Result<GeneralizedProblem> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("plate mesh needs at least one element per side".into()));
    }
    let ne = nx * ny;
    if field.n_points() != ne {
        return Err(Error::DimensionMismatch(format!(
            "field has {} element values, mesh has {ne} elements",
            field.n_points()
        )));
    }
    let nnx = nx + 1;
    let nn = nnx * (ny + 1);
    let ndof = 3 * nn;
    let (hx, hy) = (params.side / nx as f64, params.side / ny as f64);
    let t = params.thickness;
    let nu = params.poisson;
    let inertia = t.powi(3) / 12.0;
    let db = {
        let f = inertia / (1.0 - nu * nu);
        [[f, f * nu, 0.0], [f * nu, f, 0.0], [0.0, 0.0, f * (1.0 - nu) / 2.0]]
    };
    let ds = params.kappa * t / (2.0 * (1.0 + nu));

    let mut k_full = vec![DMatrix::<f64>::zeros(ndof, ndof); field.n_terms()];
    let mut m_full = DMatrix::<f64>::zeros(ndof, ndof);
    for ey in 0..ny {
        for ex in 0..nx {
            let e = ey * nx + ex;
            let nodes = [
                ey * nnx + ex,
                ey * nnx + ex + 1,
                (ey + 1) * nnx + ex + 1,
                (ey + 1) * nnx + ex,
            ];
            let xy = nodes.map(|n| [(n % nnx) as f64 * hx, (n / nnx) as f64 * hy]);
            let mut dofs = [0usize; 12];
            for a in 0..4 {
                dofs[a] = nodes[a];
                dofs[4 + a] = nn + nodes[a];
                dofs[8 + a] = 2 * nn + nodes[a];
            }
            let mut ke = DMatrix::<f64>::zeros(12, 12);
            let mut me = DMatrix::<f64>::zeros(12, 12);
            for &gs in &GAUSS2 {
                for &gt in &GAUSS2 {
                    let (n, dx, det) = q4_physical(&xy, gs, gt, e)?;
                    let mut bb = [[0.0; 12]; 3];
                    for a in 0..4 {
                        bb[0][4 + a] = dx[0][a];
                        bb[1][8 + a] = dx[1][a];
                        bb[2][4 + a] = dx[1][a];
                        bb[2][8 + a] = dx[0][a];
                    }
                    for p in 0..12 {
                        for q in 0..12 {
                            let mut v = 0.0;
                            for r in 0..3 {
                                for c in 0..3 {
                                    v += bb[r][p] * db[r][c] * bb[c][q];
                                }
                            }
                            ke[(p, q)] += v * det;
                        }
                    }
                    for a in 0..4 {
                        for b in 0..4 {
                            let nn_ab = n[a] * n[b] * det * params.density;
                            me[(a, b)] += nn_ab * t;
                            me[(4 + a, 4 + b)] += nn_ab * inertia;
                            me[(8 + a, 8 + b)] += nn_ab * inertia;
                        }
                    }
                }
            }
            let (n, dx, det) = q4_physical(&xy, 0.0, 0.0, e)?;
            let mut bs = [[0.0; 12]; 2];
            for a in 0..4 {
                bs[0][a] = dx[0][a];
                bs[0][4 + a] = n[a];
                bs[1][a] = dx[1][a];
                bs[1][8 + a] = n[a];
            }
            for p in 0..12 {
                for q in 0..12 {
                    // single point with weight 4
                    ke[(p, q)] += 4.0 * det * ds * (bs[0][p] * bs[0][q] + bs[1][p] * bs[1][q]);
                }
            }
            for (l, kl) in k_full.iter_mut().enumerate() {
                let scale = field.coeffs[l][e];
                if scale == 0.0 {
                    continue;
                }
                for p in 0..12 {
                    for q in 0..12 {
                        kl[(dofs[p], dofs[q])] += scale * ke[(p, q)];
                    }
                }
            }
            for p in 0..12 {
                for q in 0..12 {
                    m_full[(dofs[p], dofs[q])] += me[(p, q)];
                }
            }
        }
    }
    let on_boundary = |n: usize| {
        let (ix, iy) = (n % nnx, n / nnx);
        ix == 0 || iy == 0 || ix == nx || iy == ny
    };
    let free: Vec<usize> = (0..ndof).filter(|&d| !on_boundary(d % nn)).collect();
    Ok(reduce(k_full, m_full, free, ndof))
}

/// Standard-form operator A_ℓ = L⁻¹ K_ℓ L⁻ᵀ together with the mass factor L.
#[derive(Clone, Debug)]
pub struct StandardForm {
    pub expansion: MatrixExpansion,
    pub mass_factor: DMatrix<f64>,
}

impl StandardForm {
    /// Maps an eigenvector of the standard problem back to physical DOFs, u = L⁻ᵀ w.
    pub fn physical_vector(&self, w: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        self.mass_factor
            .transpose()
            .solve_upper_triangular(w)
            .expect("mass factor has a positive diagonal")
    }
}

pub fn to_standard(gp: &GeneralizedProblem, m_xi: usize, p: u32) -> Result<StandardForm> {
    let l = cholesky(&gp.mass)?;
    let terms = gp
        .stiffness
        .iter()
        .map(|k| {
            let x = l
                .solve_lower_triangular(k)
                .ok_or(Error::Singular)?;
            let mut a = l
                .solve_lower_triangular(&x.transpose())
                .ok_or(Error::Singular)?;
            symmetrize(&mut a);
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StandardForm {
        expansion: MatrixExpansion::new(terms, m_xi, p)?,
        mass_factor: l,
    })
}

/// Writes the plain-text expansion format: comment lines start with `#`,
/// then a header `M_x M_A m_xi p`, then M_A+1 dense row-major blocks (one
/// matrix row per line, blank line between blocks). Values are written in
/// shortest round-trip form.
pub fn save_expansion(exp: &MatrixExpansion, path: &Path) -> Result<()> {
    std::fs::write(path, format_expansion(exp))?;
    Ok(())
}

pub fn format_expansion(exp: &MatrixExpansion) -> String {
    let n = exp.dim();
    let mut s = String::new();
    s.push_str("# matrix expansion: M_x M_A m_xi p, then M_A+1 row-major blocks\n");
    let _ = writeln!(s, "{} {} {} {}", n, exp.n_terms() - 1, exp.m_xi, exp.p);
    for a in &exp.terms {
        s.push('\n');
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{:e}", a[(i, j)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn load_expansion(path: &Path) -> Result<MatrixExpansion> {
    parse_expansion(&std::fs::read_to_string(path)?)
}

pub fn parse_expansion(text: &str) -> Result<MatrixExpansion> {
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    let mut header = [0usize; 4];
    for (i, h) in header.iter_mut().enumerate() {
        let tok = tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("missing header field {i}")))?;
        *h = tok
            .parse()
            .map_err(|_| Error::Parse(format!("bad header field {tok:?}")))?;
    }
    let [n, m_a, m_xi, p] = header;
    if n == 0 {
        return Err(Error::Parse("matrix dimension must be positive".into()));
    }
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad value {t:?}"))))
        .collect::<Result<_>>()?;
    let want = (m_a + 1) * n * n;
    if values.len() != want {
        return Err(Error::DimensionMismatch(format!(
            "expected {want} values for {} blocks of {n}x{n}, found {}",
            m_a + 1,
            values.len()
        )));
    }
    let terms = values
        .chunks(n * n)
        .map(|c| DMatrix::from_row_slice(n, n, c))
        .collect();
    MatrixExpansion::new(terms, m_xi, p as u32)
}

/// Field discretization shared by the benchmark builders.
#[derive(Clone, Debug)]
pub struct FieldSpec {
    pub mean_modulus: f64,
    pub cov: f64,
    pub corr_len: f64,
    pub m_xi: usize,
    pub p: u32,
    pub variance: VarianceTerm,
}

/// A fully assembled benchmark: bases, lognormal field, generalized and
/// standard-form operators.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub basis_operator: GpcBasis,
    pub basis_solution: GpcBasis,
    pub field: LognormalField,
    pub problem: GeneralizedProblem,
    pub standard: StandardForm,
}

pub fn beam_benchmark(params: &BeamParams, n_elements: usize, spec: &FieldSpec) -> Result<Benchmark> {
    let basis_operator = gen_multi_indices(spec.m_xi, 2 * spec.p)?;
    let basis_solution = gen_multi_indices(spec.m_xi, spec.p)?;
    let (g0, sigma_g) = calibrate_lognormal(spec.mean_modulus, spec.cov)?;
    let pts = params.element_midpoints(n_elements);
    let kl = kl_1d_exponential(params.length, spec.corr_len, sigma_g, spec.m_xi, &pts)?.with_mean(g0);
    let field = lognormal_coeffs_with(&kl, &basis_operator, spec.variance)?;
    let problem = timoshenko_assemble(params, n_elements, &field)?;
    let standard = to_standard(&problem, spec.m_xi, spec.p)?;
    Ok(Benchmark {
        basis_operator,
        basis_solution,
        field,
        problem,
        standard,
    })
}

pub fn plate_benchmark(params: &PlateParams, nx: usize, ny: usize, spec: &FieldSpec) -> Result<Benchmark> {
    let basis_operator = gen_multi_indices(spec.m_xi, 2 * spec.p)?;
    let basis_solution = gen_multi_indices(spec.m_xi, spec.p)?;
    let (g0, sigma_g) = calibrate_lognormal(spec.mean_modulus, spec.cov)?;
    let pts = params.element_centroids(nx, ny);
    let area = params.side * params.side / (nx * ny) as f64;
    let kl = kl_2d_discrete(&pts, &vec![area; pts.len()], spec.corr_len, sigma_g, spec.m_xi)?.with_mean(g0);
    let field = lognormal_coeffs_with(&kl, &basis_operator, spec.variance)?;
    let problem = mindlin_assemble(params, nx, ny, &field)?;
    let standard = to_standard(&problem, spec.m_xi, spec.p)?;
    Ok(Benchmark {
        basis_operator,
        basis_solution,
        field,
        problem,
        standard,
    })
}
