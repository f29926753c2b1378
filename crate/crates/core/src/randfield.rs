//! Karhunen–Loève expansions of a Gaussian field with exponential covariance
//! C(x1, x2) = σ² exp(−‖x1 − x2‖ / L_corr), and the Hermite chaos coefficients
//! of the lognormal field exp(g).

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::sym_eig_unchecked;
use crate::polychaos::GpcBasis;

/// Truncated KL expansion g(x, ξ) = g0(x) + Σ_j g_j(x) ξ_j sampled at a fixed
/// set of evaluation points.
#[derive(Clone, Debug)]
pub struct GaussianKL {
    /// Mean g0 at each evaluation point.
    pub g0: Vec<f64>,
    /// `modes[j][x]` is √θ_j f_j(x), ordered by decreasing θ_j.
    pub modes: Vec<Vec<f64>>,
    /// KL eigenvalues θ_j.
    pub eigenvalues: Vec<f64>,
    pub sigma_g: f64,
    pub corr_len: f64,
}

impl GaussianKL {
    pub fn m_xi(&self) -> usize {
        self.modes.len()
    }

    pub fn n_points(&self) -> usize {
        self.g0.len()
    }

    /// Replaces the mean by a constant.
    pub fn with_mean(mut self, g0: f64) -> Self {
        self.g0.iter_mut().for_each(|v| *v = g0);
        self
    }

    /// Σ_j g_j(x)² at point `x`.
    pub fn retained_variance(&self, x: usize) -> f64 {
        self.modes.iter().map(|m| m[x] * m[x]).sum()
    }
}

/// Analytic KL eigenpairs of the exponential kernel on [0, L].
#[derive(Clone, Debug)]
pub struct ExponentialKl1d {
    pub length: f64,
    pub corr_len: f64,
    pub sigma_g: f64,
    /// (frequency ω, even?) per retained mode, in order of decreasing θ.
    pub frequencies: Vec<(f64, bool)>,
    pub eigenvalues: Vec<f64>,
}

const BISECT_ITERS: usize = 200;

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, mode: usize) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return Err(Error::RootNotFound(mode));
    }
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl ExponentialKl1d {
    pub fn new(length: f64, corr_len: f64, sigma_g: f64, m_xi: usize) -> Result<Self> {
        if !(length > 0.0 && corr_len > 0.0) || sigma_g < 0.0 {
            return Err(Error::InvalidArgument(
                "KL needs positive length and correlation length, non-negative sigma".into(),
            ));
        }
        let a = 0.5 * length;
        let c = 1.0 / corr_len;
        let mut cands = Vec::with_capacity(2 * m_xi);
        for i in 0..m_xi {
            // even: c cos(ωa) − ω sin(ωa) = 0 on [iπ/a, (i+½)π/a]
            let lo = i as f64 * PI / a;
            let hi = (i as f64 + 0.5) * PI / a;
            let w = bisect(|w| c * (w * a).cos() - w * (w * a).sin(), lo, hi, 2 * i)?;
            cands.push((w, true));
            // odd: ω cos(ωa) + c sin(ωa) = 0 on [(i+½)π/a, (i+1)π/a]
            let lo = (i as f64 + 0.5) * PI / a;
            let hi = (i as f64 + 1.0) * PI / a;
            let w = bisect(|w| w * (w * a).cos() + c * (w * a).sin(), lo, hi, 2 * i + 1)?;
            cands.push((w, false));
        }
        cands.sort_by(|x, y| x.0.total_cmp(&y.0));
        cands.truncate(m_xi);
        let eigenvalues = cands
            .iter()
            .map(|&(w, _)| 2.0 * c * sigma_g * sigma_g / (w * w + c * c))
            .collect();
        Ok(Self {
            length,
            corr_len,
            sigma_g,
            frequencies: cands,
            eigenvalues,
        })
    }

    /// L²[0, L]-normalized eigenfunction f_j(x), before sign fixing.
    pub fn eigenfunction(&self, j: usize, x: f64) -> f64 {
        let a = 0.5 * self.length;
        let t = x - a;
        let (w, even) = self.frequencies[j];
        let s2 = (2.0 * w * a).sin() / (2.0 * w);
        if even {
            (w * t).cos() / (a + s2).sqrt()
        } else {
            (w * t).sin() / (a - s2).sqrt()
        }
    }

    /// Evaluates √θ_j f_j at `points`; each mode is signed so that its value
    /// at the first point is non-negative. The mean is zero.
    pub fn evaluate(&self, points: &[f64]) -> GaussianKL {
        let modes = (0..self.frequencies.len())
            .map(|j| {
                let s = self.eigenvalues[j].sqrt();
                let mut m: Vec<f64> = points.iter().map(|&x| s * self.eigenfunction(j, x)).collect();
                orient(&mut m);
                m
            })
            .collect();
        GaussianKL {
            g0: vec![0.0; points.len()],
            modes,
            eigenvalues: self.eigenvalues.clone(),
            sigma_g: self.sigma_g,
            corr_len: self.corr_len,
        }
    }
}

fn orient(mode: &mut [f64]) {
    if mode.first().is_some_and(|v| *v < 0.0) {
        mode.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Analytic KL on [0, length] evaluated at `points`.
pub fn kl_1d_exponential(
    length: f64,
    corr_len: f64,
    sigma_g: f64,
    m_xi: usize,
    points: &[f64],
) -> Result<GaussianKL> {
    Ok(ExponentialKl1d::new(length, corr_len, sigma_g, m_xi)?.evaluate(points))
}

/// Nyström KL on an arbitrary point cloud with quadrature weights.
///
/// Solves W^½ C W^½ y = θ y and returns f = W^-½ y, so that Σ_x w_x f_j f_k = δ_jk.
pub fn kl_discrete(
    points: &[Vec<f64>],
    weights: &[f64],
    corr_len: f64,
    sigma_g: f64,
    m_xi: usize,
) -> Result<GaussianKL> {
    let n = points.len();
    if n < m_xi || weights.len() != n {
        return Err(Error::InvalidArgument(format!(
            "need at least {m_xi} points with one weight each, got {n} points and {} weights",
            weights.len()
        )));
    }
    if !(corr_len > 0.0) || sigma_g < 0.0 {
        return Err(Error::InvalidArgument("invalid covariance parameters".into()));
    }
    let sq: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let d: f64 = points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        sigma_g * sigma_g * (-d / corr_len).exp() * sq[i] * sq[j]
    });
    let eig = sym_eig_unchecked(cov);
    let mut eigenvalues = Vec::with_capacity(m_xi);
    let mut modes = Vec::with_capacity(m_xi);
    for r in 0..m_xi {
        let col = n - 1 - r;
        let mut theta = eig.values[col];
        if theta < 0.0 {
            log::warn!("clipping negative covariance eigenvalue {theta:.3e} to zero");
            theta = 0.0;
        }
        let s = theta.sqrt();
        let mut m: Vec<f64> = (0..n).map(|i| s * eig.vectors[(i, col)] / sq[i]).collect();
        orient(&mut m);
        eigenvalues.push(theta);
        modes.push(m);
    }
    Ok(GaussianKL {
        g0: vec![0.0; n],
        modes,
        eigenvalues,
        sigma_g,
        corr_len,
    })
}

/// Discrete KL for 2D point sets (e.g. element centroids).
pub fn kl_2d_discrete(
    points: &[[f64; 2]],
    weights: &[f64],
    corr_len: f64,
    sigma_g: f64,
    m_xi: usize,
) -> Result<GaussianKL> {
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    kl_discrete(&pts, weights, corr_len, sigma_g, m_xi)
}

/// Chaos coefficients E_ℓ(x) of exp(g(x, ξ)) in the operator basis.
#[derive(Clone, Debug)]
pub struct LognormalField {
    /// `coeffs[ℓ][x]`.
    pub coeffs: Vec<Vec<f64>>,
}

impl LognormalField {
    pub fn n_terms(&self) -> usize {
        self.coeffs.len()
    }

    pub fn n_points(&self) -> usize {
        self.coeffs.first().map_or(0, |c| c.len())
    }

    /// Evaluates Σ_ℓ E_ℓ(x) ψ_ℓ(ξ) at every point.
    pub fn sample(&self, basis: &GpcBasis, xi: &[f64]) -> Vec<f64> {
        let psi = basis.eval_all(xi);
        (0..self.n_points())
            .map(|x| self.coeffs.iter().zip(&psi).map(|(c, p)| c[x] * p).sum())
            .collect()
    }

    /// CSV with one row per point: `point, E_0, E_1, …`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = std::iter::once("point".to_string())
            .chain((0..self.n_terms()).map(|l| format!("E_{l}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for x in 0..self.n_points() {
            let mut row = vec![x.to_string()];
            row.extend(self.coeffs.iter().map(|c| format!("{:.17e}", c[x])));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Variance used in the exponent of the mean term exp(g0 + ½·var).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceTerm {
    /// Full pointwise variance σ_g², so E_0 equals the target mean.
    #[default]
    Full,
    /// Variance retained by the truncated KL, Σ_j g_j².
    Truncated,
}

/// E_ℓ(x) = exp(g0 + ½ Σ_j g_j²) Π_j g_j^{α_j} / √(α_j!) for orthonormal
/// Hermite ψ_ℓ with multi-index α, the truncated variance in the exponent.
pub fn lognormal_coeffs(kl: &GaussianKL, basis: &GpcBasis) -> Result<LognormalField> {
    lognormal_coeffs_with(kl, basis, VarianceTerm::Truncated)
}

/// As [`lognormal_coeffs`] with a choice of variance in the mean factor.
pub fn lognormal_coeffs_with(kl: &GaussianKL, basis: &GpcBasis, variance: VarianceTerm) -> Result<LognormalField> {
    if kl.m_xi() != basis.m_xi() {
        return Err(Error::DimensionMismatch(format!(
            "KL has {} modes, basis has {} variables",
            kl.m_xi(),
            basis.m_xi()
        )));
    }
    let n = kl.n_points();
    let mean: Vec<f64> = (0..n)
        .map(|x| {
            let var = match variance {
                VarianceTerm::Full => kl.sigma_g * kl.sigma_g,
                VarianceTerm::Truncated => kl.retained_variance(x),
            };
            (kl.g0[x] + 0.5 * var).exp()
        })
        .collect();
    let coeffs = basis
        .indices()
        .iter()
        .map(|alpha| {
            (0..n)
                .map(|x| {
                    let mut v = mean[x];
                    for (j, &d) in alpha.degrees().iter().enumerate() {
                        if d > 0 {
                            let fact: f64 = (1..=d).map(|k| k as f64).product();
                            v *= kl.modes[j][x].powi(d as i32) / fact.sqrt();
                        }
                    }
                    v
                })
                .collect()
        })
        .collect();
    Ok(LognormalField { coeffs })
}

/// Gaussian parameters (g0, σ_g) of a lognormal with the given mean and
/// coefficient of variation.
pub fn calibrate_lognormal(mean: f64, cov: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0) || !(0.0..1.0).contains(&cov) {
        return Err(Error::InvalidArgument(format!(
            "lognormal calibration needs mean > 0 and 0 <= CoV < 1, got {mean}, {cov}"
        )));
    }
    let sigma_g = (1.0 + cov * cov).ln().sqrt();
    Ok((mean.ln() - 0.5 * sigma_g * sigma_g, sigma_g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polychaos::gen_multi_indices;

    #[test]
    fn zero_sigma_gives_zero_modes() {
        let kl = kl_1d_exponential(1.0, 0.25, 0.0, 3, &[0.1, 0.5, 0.9]).unwrap();
        assert!(kl.modes.iter().flatten().all(|v| *v == 0.0));
        let pts = vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]];
        let kl = kl_2d_discrete(&pts, &[0.25; 4], 0.25, 0.0, 2).unwrap();
        assert!(kl.modes.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn eigenvalues_decrease_and_respect_trace() {
        let kl = ExponentialKl1d::new(1.0, 0.25, 0.7, 6).unwrap();
        for w in kl.eigenvalues.windows(2) {
            assert!(w[0] > w[1] && w[1] > 0.0);
        }
        assert!(kl.eigenvalues.iter().sum::<f64>() < 0.49);
        // alternating parity
        let par: Vec<bool> = kl.frequencies.iter().map(|f| f.1).collect();
        assert_eq!(par, vec![true, false, true, false, true, false]);
    }

    #[test]
    fn eigenfunctions_are_orthonormal() {
        let kl = ExponentialKl1d::new(2.0, 0.5, 1.0, 4).unwrap();
        // composite Gauss–Legendre is overkill; fine midpoint rule suffices here
        let n = 20000;
        let h = 2.0 / n as f64;
        for j in 0..4 {
            for k in 0..4 {
                let s: f64 = (0..n)
                    .map(|i| {
                        let x = (i as f64 + 0.5) * h;
                        kl.eigenfunction(j, x) * kl.eigenfunction(k, x) * h
                    })
                    .sum();
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-8, "({j},{k}) {s}");
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(ExponentialKl1d::new(0.0, 0.25, 1.0, 2).is_err());
        assert!(calibrate_lognormal(-1.0, 0.1).is_err());
        assert!(calibrate_lognormal(1.0, 1.0).is_err());
    }

    #[test]
    fn calibration_closed_form() {
        let (g0, s) = calibrate_lognormal(5.0, 0.0).unwrap();
        assert_eq!(s, 0.0);
        assert!((g0 - 5f64.ln()).abs() < 1e-15);
        let (_, s) = calibrate_lognormal(1.0, 0.25).unwrap();
        assert!((s - 1.0625f64.ln().sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lognormal_mean_term_and_zero_variance() {
        let basis = gen_multi_indices(2, 4).unwrap();
        let kl = kl_1d_exponential(1.0, 0.3, 0.4, 2, &[0.2, 0.7]).unwrap().with_mean(1.5);
        let f = lognormal_coeffs(&kl, &basis).unwrap();
        for x in 0..2 {
            let want = (1.5 + 0.5 * kl.retained_variance(x)).exp();
            assert!((f.coeffs[0][x] - want).abs() < 1e-14 * want);
        }
        let kl0 = kl_1d_exponential(1.0, 0.3, 0.0, 2, &[0.2, 0.7]).unwrap().with_mean(1.5);
        let f0 = lognormal_coeffs(&kl0, &basis).unwrap();
        assert!(f0.coeffs[1..].iter().flatten().all(|v| *v == 0.0));
        assert!(f0.coeffs[0].iter().all(|v| *v > 0.0));
    }

    #[test]
    fn analytic_eigenvalues_match_nystrom() {
        // midpoint Nyström is O(h²); extrapolate from 200 and 400 points
        let nystrom = |n: usize| {
            let h = 1.0 / n as f64;
            let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 + 0.5) * h]).collect();
            kl_discrete(&pts, &vec![h; n], 0.25, 1.0, 3).unwrap().eigenvalues
        };
        let (coarse, fine) = (nystrom(200), nystrom(400));
        let exact = ExponentialKl1d::new(1.0, 0.25, 1.0, 3).unwrap();
        for j in 0..3 {
            let extrapolated = (4.0 * fine[j] - coarse[j]) / 3.0;
            let e = exact.eigenvalues[j];
            assert!((extrapolated - e).abs() < 1e-4 * e, "{extrapolated} vs {e}");
            assert!((coarse[j] - e).abs() < 1e-3 * e);
        }
    }

    #[test]
    fn degenerate_2d_grid_matches_1d() {
        let n = 400;
        let h = 1.0 / n as f64;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        let pts: Vec<[f64; 2]> = xs.iter().map(|&x| [x, 0.0]).collect();
        let disc = kl_2d_discrete(&pts, &vec![h; n], 0.25, 1.0, 1).unwrap();
        let exact = kl_1d_exponential(1.0, 0.25, 1.0, 1, &xs).unwrap();
        assert!((disc.eigenvalues[0] - exact.eigenvalues[0]).abs() < 1e-3 * exact.eigenvalues[0]);
        let scale = exact.modes[0].iter().cloned().fold(0.0, f64::max);
        for (d, e) in disc.modes[0].iter().zip(&exact.modes[0]) {
            assert!((d - e).abs() < 1e-3 * scale);
        }
    }

    #[test]
    fn discrete_modes_are_weighted_orthonormal() {
        let pts: Vec<[f64; 2]> = (0..64).map(|i| [(i % 8) as f64 / 8.0 + 0.0625, (i / 8) as f64 / 8.0 + 0.0625]).collect();
        let w = vec![1.0 / 64.0; 64];
        let kl = kl_2d_discrete(&pts, &w, 0.25, 0.8, 4).unwrap();
        for win in kl.eigenvalues.windows(2) {
            assert!(win[0] >= win[1] && win[1] >= 0.0);
        }
        for j in 0..4 {
            for k in 0..4 {
                let ip: f64 = (0..64).map(|x| w[x] * kl.modes[j][x] * kl.modes[k][x]).sum();
                let want = if j == k { kl.eigenvalues[j] } else { 0.0 };
                assert!((ip - want).abs() < 1e-8 * kl.eigenvalues[0]);
            }
        }
    }

    #[test]
    fn coefficients_match_quadrature() {
        use crate::quadrature::tensor_gauss_hermite;
        let basis = gen_multi_indices(3, 6).unwrap();
        let kl = kl_1d_exponential(1.0, 0.25, 0.25, 3, &[0.05, 0.4, 0.95]).unwrap().with_mean(0.3);
        let f = lognormal_coeffs(&kl, &basis).unwrap();
        let grid = tensor_gauss_hermite(3, 24).unwrap();
        for x in 0..3 {
            let mut q = vec![0.0; basis.len()];
            for (xi, w) in grid.iter() {
                let g: f64 = kl.g0[x] + (0..3).map(|j| kl.modes[j][x] * xi[j]).sum::<f64>();
                let e = g.exp();
                for (l, p) in basis.eval_all(xi).iter().enumerate() {
                    q[l] += w * e * p;
                }
            }
            for l in 0..basis.len() {
                assert!((q[l] - f.coeffs[l][x]).abs() < 1e-10 * f.coeffs[0][x], "l={l} x={x}");
            }
        }
    }

    #[test]
    fn full_variance_restores_target_mean() {
        let (g0, s) = calibrate_lognormal(1e8, 0.25).unwrap();
        let basis = gen_multi_indices(3, 2).unwrap();
        let kl = kl_1d_exponential(1.0, 0.25, s, 3, &[0.0, 0.5, 1.0]).unwrap().with_mean(g0);
        let full = lognormal_coeffs_with(&kl, &basis, VarianceTerm::Full).unwrap();
        let trunc = lognormal_coeffs_with(&kl, &basis, VarianceTerm::Truncated).unwrap();
        for x in 0..3 {
            assert!((full.coeffs[0][x] - 1e8).abs() < 1e-6);
            assert!(trunc.coeffs[0][x] < 1e8);
        }
    }

    #[test]
    fn calibration_by_sampling() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (mean, cov, n) in [(1.0, 0.25, 1_000_000), (1e8, 0.1, 200_000)] {
            let (g0, s) = calibrate_lognormal(mean, cov).unwrap();
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (g0 + s * z).exp()
                })
                .collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((m - mean).abs() < 0.005 * mean);
            assert!((sd / m - cov).abs() < 0.005);
        }
    }

    #[test]
    fn truncated_field_mean_by_sampling() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let basis = gen_multi_indices(3, 6).unwrap();
        let (g0, s) = calibrate_lognormal(1.0, 0.25).unwrap();
        let kl = kl_1d_exponential(1.0, 0.25, s, 3, &[0.1, 0.6]).unwrap().with_mean(g0);
        let f = lognormal_coeffs(&kl, &basis).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let xi: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (a, v) in acc.iter_mut().zip(f.sample(&basis, &xi)) {
                *a += v / n as f64;
            }
        }
        for x in 0..2 {
            assert!((acc[x] - f.coeffs[0][x]).abs() < 0.01 * f.coeffs[0][x]);
        }
    }

    #[test]
    fn field_csv() {
        let basis = gen_multi_indices(1, 2).unwrap();
        let kl = kl_1d_exponential(1.0, 0.3, 0.2, 1, &[0.2, 0.7]).unwrap();
        let f = lognormal_coeffs(&kl, &basis).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("point,E_0,E_1,E_2\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
