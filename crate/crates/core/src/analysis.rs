//! Error metrics, density estimates, experiment configuration and the
//! orchestration behind the command-line tool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::galerkin::{
    deflate_modes, rayleigh_quotient_mean, sisi_run, subspace_iteration_max, Backend, EigenExpansion, GalerkinContext, RunStatus,
    SisiConfig, SisiOutcome, Variant,
};
use crate::linalg::{spectral_norm_sym, sym_eig};
use crate::models::{
    beam_benchmark, load_expansion, plate_benchmark, save_expansion, BeamParams, FieldSpec, MatrixExpansion,
    PlateParams,
};
use crate::polychaos::GpcBasis;
use crate::randfield::VarianceTerm;
use crate::sampling::{evaluate_operator, mc_run, sample_expansion, sc_run, SampleSet};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PdfCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl PdfCurve {
    /// Trapezoid integral of the density over the window.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,density")?;
        for (x, d) in self.x.iter().zip(&self.density) {
            writeln!(out, "{x:e},{d:e}")?;
        }
        Ok(())
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn silverman(sorted: &[f64]) -> Result<f64> {
    let n = sorted.len();
    if n < 2 || sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateSamples);
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    Ok(1.06 * spread * (n as f64).powf(-0.2))
}

fn kde_eval(sorted: &[f64], h: f64, x: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    x.iter()
        .map(|&xi| {
            // samples beyond 8h contribute below 1e-14 relative
            let a = sorted.partition_point(|&s| s < xi - 8.0 * h);
            let b = sorted.partition_point(|&s| s <= xi + 8.0 * h);
            sorted[a..b].iter().map(|s| (-0.5 * ((xi - s) / h).powi(2)).exp()).sum::<f64>() * norm
        })
        .collect()
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Gaussian kernel density estimate with Silverman's bandwidth, evaluated on
/// `n_points` equispaced abscissae in [min − 3h, max + 3h].
pub fn kde(samples: &[f64], n_points: usize) -> Result<PdfCurve> {
    if n_points < 2 {
        return Err(Error::InvalidArgument("kde needs at least 2 evaluation points".into()));
    }
    let s = sorted(samples);
    let h = silverman(&s)?;
    let x = linspace(s[0] - 3.0 * h, s[s.len() - 1] + 3.0 * h, n_points);
    let density = kde_eval(&s, h, &x);
    Ok(PdfCurve { x, density, bandwidth: h })
}

/// Overlap ∫ min(f, g) of the two kernel density estimates, 1 for identical
/// distributions and 0 for disjoint ones.
pub fn pdf_overlap(a: &[f64], b: &[f64], n_points: usize) -> Result<f64> {
    let (sa, sb) = (sorted(a), sorted(b));
    let (ha, hb) = (silverman(&sa)?, silverman(&sb)?);
    let lo = (sa[0] - 3.0 * ha).min(sb[0] - 3.0 * hb);
    let hi = (sa[sa.len() - 1] + 3.0 * ha).max(sb[sb.len() - 1] + 3.0 * hb);
    let x = linspace(lo, hi, n_points.max(2));
    let m: Vec<f64> = kde_eval(&sa, ha, &x)
        .into_iter()
        .zip(kde_eval(&sb, hb, &x))
        .map(|(f, g)| f.min(g))
        .collect();
    Ok(x.windows(2).zip(m.windows(2)).map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1])).sum())
}

/// ε_u(ξ) = ‖u(ξ) − u_ref(ξ)‖ / ‖u_ref(ξ)‖ pointwise.
pub fn eigvec_error(approx: &[DVector<f64>], reference: &[DVector<f64>]) -> Result<Vec<f64>> {
    if approx.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} approximate vectors, {} reference vectors",
            approx.len(),
            reference.len()
        )));
    }
    approx
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (u, r))| {
            let d = r.norm();
            if d == 0.0 {
                return Err(Error::ZeroNorm(i));
            }
            Ok((u - r).norm() / d)
        })
        .collect()
}

/// ε_r(ξ) = ‖A(ξ)u(ξ) − λ(ξ)u(ξ)‖ / ‖A(ξ)‖₂ at each point.
pub fn true_residual(
    a: &MatrixExpansion,
    basis_a: &GpcBasis,
    exp: &EigenExpansion,
    basis_sol: &GpcBasis,
    points: &[Vec<f64>],
) -> Vec<f64> {
    use rayon::prelude::*;
    let samples = sample_expansion(exp, basis_sol, points);
    points
        .par_iter()
        .zip(samples.lambda.par_iter().zip(&samples.vectors))
        .map(|(xi, (lam, u))| {
            let ax = evaluate_operator(a, basis_a, xi);
            (&ax * u - u * *lam).norm() / spectral_norm_sym(&ax)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Beam,
    Plate,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_modulus")]
    pub mean_modulus: f64,
    #[serde(default = "default_poisson")]
    pub poisson: f64,
    /// Beam length or plate side.
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "default_thickness")]
    pub thickness: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub density: f64,
    /// Beam elements, or plate elements per side.
    #[serde(default = "default_elements")]
    pub elements: usize,
    /// Expansion file for `kind = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_modulus() -> f64 {
    1e8
}
fn default_poisson() -> f64 {
    0.30
}
fn one() -> f64 {
    1.0
}
fn default_thickness() -> f64 {
    0.001
}
fn default_kappa() -> f64 {
    5.0 / 6.0
}
fn default_elements() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub cov: f64,
    /// Correlation length as an absolute distance.
    pub corr_len: f64,
    #[serde(default = "default_m_xi")]
    pub m_xi: usize,
    #[serde(default)]
    pub variance: VarianceTerm,
}

fn default_m_xi() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_level")]
    pub grid_level: usize,
}

fn default_p() -> u32 {
    3
}
fn default_level() -> usize {
    4
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            p: default_p(),
            grid_level: default_level(),
        }
    }
}

/// Settings shared by the Galerkin methods; each CLI method picks its variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalerkinConfig {
    pub modes: Vec<usize>,
    pub n_e: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub backend: Backend,
    pub divergence_window: usize,
    pub divergence_growth: f64,
    /// Shift for `sisi-shifted`, and the mode it starts from.
    pub rho: Option<f64>,
    pub shifted_mode: Option<usize>,
    /// Modes to deflate for `sisi-deflated`, and the modes iterated there.
    pub deflate: Vec<usize>,
    pub deflated_modes: Vec<usize>,
    pub c_lambda: Option<f64>,
    /// Modes for `subspace-max`; empty means the five largest.
    pub max_modes: Vec<usize>,
}

impl Default for GalerkinConfig {
    fn default() -> Self {
        let s = SisiConfig::default();
        Self {
            modes: s.modes,
            n_e: s.n_e,
            max_iter: s.max_iter,
            tol: s.tol,
            backend: s.backend,
            divergence_window: s.divergence_window,
            divergence_growth: s.divergence_growth,
            rho: None,
            shifted_mode: None,
            deflate: Vec::new(),
            deflated_modes: Vec::new(),
            c_lambda: None,
            max_modes: Vec::new(),
        }
    }
}

impl GalerkinConfig {
    fn sisi(&self, modes: Vec<usize>, variant: Variant) -> SisiConfig {
        SisiConfig {
            n_e: self.n_e,
            modes,
            max_iter: self.max_iter,
            tol: self.tol,
            variant,
            backend: self.backend.clone(),
            divergence_window: self.divergence_window,
            divergence_growth: self.divergence_growth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { samples: 2000, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub kde_points: usize,
    /// Also write the matrix expansion in the plain-text format.
    pub save_expansion: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            kde_points: 200,
            save_expansion: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MeanSolve,
    Sisi,
    SisiShifted,
    SisiDeflated,
    SubspaceMax,
    Collocate,
    MonteCarlo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MeanSolve => "mean-solve",
            Method::Sisi => "sisi",
            Method::SisiShifted => "sisi-shifted",
            Method::SisiDeflated => "sisi-deflated",
            Method::SubspaceMax => "subspace-max",
            Method::Collocate => "collocate",
            Method::MonteCarlo => "monte-carlo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub field: FieldConfig,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub galerkin: GalerkinConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Methods run by `all`; `compare` always runs the comparison set.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::MeanSolve, Method::Sisi, Method::Collocate, Method::MonteCarlo]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be positive")));
        if m.kind != ModelKind::File {
            for (name, v) in [
                ("mean_modulus", m.mean_modulus),
                ("length", m.length),
                ("thickness", m.thickness),
                ("kappa", m.kappa),
                ("density", m.density),
                ("corr_len", self.field.corr_len),
            ] {
                if !(v > 0.0) {
                    return bad(name);
                }
            }
            if m.elements == 0 {
                return bad("elements");
            }
            if !(0.0..1.0).contains(&self.field.cov) {
                return Err(Error::InvalidArgument("cov must lie in [0, 1)".into()));
            }
        } else if m.path.is_none() {
            return Err(Error::InvalidArgument("file model needs a path".into()));
        }
        if self.field.m_xi == 0 {
            return bad("m_xi");
        }
        if self.discretization.p == 0 {
            return bad("p");
        }
        if self.discretization.grid_level < self.field.m_xi {
            return Err(Error::InvalidArgument("grid_level must be at least m_xi".into()));
        }
        Ok(())
    }
}

/// Operator expansion and Galerkin context built from a configuration.
pub struct Problem {
    pub expansion: MatrixExpansion,
    pub ctx: GalerkinContext,
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let m = &cfg.model;
    let spec = FieldSpec {
        mean_modulus: m.mean_modulus,
        cov: cfg.field.cov,
        corr_len: cfg.field.corr_len,
        m_xi: cfg.field.m_xi,
        p: cfg.discretization.p,
        variance: cfg.field.variance,
    };
    let expansion = match m.kind {
        ModelKind::Beam => {
            let params = BeamParams {
                length: m.length,
                thickness: m.thickness,
                width: 1.0,
                poisson: m.poisson,
                kappa: m.kappa,
                density: m.density,
            };
            beam_benchmark(&params, m.elements, &spec)?.standard.expansion
        }
        ModelKind::Plate => {
            let params = PlateParams {
                side: m.length,
                thickness: m.thickness,
                poisson: m.poisson,
                kappa: m.kappa,
                density: m.density,
            };
            plate_benchmark(&params, m.elements, m.elements, &spec)?.standard.expansion
        }
        ModelKind::File => load_expansion(m.path.as_deref().expect("validated"))?,
    };
    let (m_xi, p) = match m.kind {
        ModelKind::File => (expansion.m_xi, expansion.p),
        _ => (cfg.field.m_xi, cfg.discretization.p),
    };
    let ctx = GalerkinContext::new(m_xi, p, cfg.discretization.grid_level)?;
    if expansion.n_terms() > ctx.basis_operator.len() {
        return Err(Error::DimensionMismatch(format!(
            "expansion has {} terms, operator basis has {}",
            expansion.n_terms(),
            ctx.basis_operator.len()
        )));
    }
    Ok(Problem { expansion, ctx })
}

/// One summary line per method and mode.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryRecord {
    pub method: String,
    pub mode: usize,
    pub status: Option<RunStatus>,
    pub iterations: Option<usize>,
    /// λ coefficients grouped by total polynomial degree.
    pub lambda_by_degree: Vec<DegreeGroup>,
    pub final_indicators: Option<crate::galerkin::Indicators>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DegreeGroup {
    pub degree: u32,
    pub coeffs: Vec<f64>,
}

pub fn group_by_degree(lambda: &[f64], basis: &GpcBasis) -> Vec<DegreeGroup> {
    basis
        .degree_groups()
        .into_iter()
        .filter(|(_, r)| r.start < lambda.len())
        .map(|(degree, r)| DegreeGroup {
            degree,
            coeffs: lambda[r.start..r.end.min(lambda.len())].to_vec(),
        })
        .collect()
}

/// Everything a run produced, kept in memory for callers and tests.
#[derive(Default)]
pub struct RunReport {
    pub summary: Vec<SummaryRecord>,
    pub mean_eigenvalues: Vec<f64>,
    pub rq0: Vec<EigenExpansion>,
    pub sisi: Option<SisiOutcome>,
    pub shifted: Option<SisiOutcome>,
    pub deflated: Option<SisiOutcome>,
    pub subspace_max: Option<SisiOutcome>,
    pub collocation: Vec<EigenExpansion>,
    pub monte_carlo: Option<SampleSet>,
    /// Collocation and Monte Carlo on the deflated operator.
    pub deflated_collocation: Vec<EigenExpansion>,
    pub deflated_monte_carlo: Option<SampleSet>,
    pub files: Vec<PathBuf>,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path)?;
        self.files.push(path);
        Ok(BufWriter::new(f))
    }

    fn expansion(&mut self, prefix: &str, e: &EigenExpansion) -> Result<()> {
        e.write_csv(self.create(&format!("{prefix}_mode{}.csv", e.mode))?)?;
        Ok(())
    }

    fn pdf(&mut self, name: &str, samples: &[f64], n: usize) -> Result<()> {
        match kde(samples, n) {
            Ok(curve) => curve.write_csv(self.create(name)?)?,
            Err(Error::DegenerateSamples) => log::info!("{name}: samples are constant, no density written"),
            Err(e) => return Err(e),
        }
        Ok(())
    }
}

fn galerkin_record(method: &str, out: &SisiOutcome, basis: &GpcBasis) -> Vec<SummaryRecord> {
    out.modes
        .iter()
        .map(|m| SummaryRecord {
            method: method.to_string(),
            mode: m.mode,
            status: Some(out.status),
            iterations: Some(out.iterations),
            lambda_by_degree: group_by_degree(&m.lambda, basis),
            final_indicators: out.log.for_mode(m.mode).last().map(|r| r.indicators),
        })
        .collect()
}

fn plain_record(method: &str, e: &EigenExpansion, basis: &GpcBasis) -> SummaryRecord {
    SummaryRecord {
        method: method.to_string(),
        mode: e.mode,
        status: None,
        iterations: None,
        lambda_by_degree: group_by_degree(&e.lambda, basis),
        final_indicators: None,
    }
}

/// Runs the requested methods and writes their outputs into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, methods: &[Method], out_dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(out_dir)?;
    let problem = build_problem(cfg).map_err(Error::at("model setup"))?;
    let a = &problem.expansion;
    let ctx = &problem.ctx;
    let g = &cfg.galerkin;
    let kde_n = cfg.output.kde_points;
    let mut w = Writer {
        dir: out_dir,
        files: Vec::new(),
    };
    let mut report = RunReport::default();
    if cfg.output.save_expansion {
        let path = out_dir.join("expansion.txt");
        save_expansion(a, &path)?;
        w.files.push(path);
    }
    let has = |m: Method| methods.contains(&m);

    if has(Method::MeanSolve) {
        let eig = sym_eig(a.mean()).map_err(Error::at("mean problem"))?;
        let mut f = w.create("mean_eigenvalues.csv")?;
        writeln!(f, "index,lambda")?;
        for (i, v) in eig.values.iter().enumerate() {
            writeln!(f, "{},{v:e}", i + 1)?;
        }
        report.mean_eigenvalues = eig.values.iter().copied().collect();
        report.rq0 = rayleigh_quotient_mean(a, ctx, &g.modes).map_err(Error::at("mean rayleigh quotient"))?;
        for e in &report.rq0 {
            w.expansion("rq0", e)?;
            report.summary.push(plain_record("rq0", e, &ctx.basis_solution));
        }
    }

    if has(Method::Sisi) {
        let out = sisi_run(a, ctx, &g.sisi(g.modes.clone(), Variant::Plain)).map_err(Error::at("sisi"))?;
        write_galerkin(&mut w, "sisi", &out)?;
        report.summary.extend(galerkin_record("sisi", &out, &ctx.basis_solution));
        if let Some(first) = out.snapshots.first() {
            for e in first {
                report.summary.push(plain_record("sisi_step1", e, &ctx.basis_solution));
            }
        }
        report.sisi = Some(out);
    }

    if has(Method::SisiShifted) {
        let rho = g
            .rho
            .ok_or_else(|| Error::InvalidArgument("sisi-shifted needs galerkin.rho".into()))?;
        let mode = g.shifted_mode.unwrap_or(g.modes[0]);
        let out = sisi_run(a, ctx, &g.sisi(vec![mode], Variant::Shifted { rho })).map_err(Error::at("shifted sisi"))?;
        write_galerkin(&mut w, "shifted", &out)?;
        report.summary.extend(galerkin_record("sisi_shifted", &out, &ctx.basis_solution));
        report.shifted = Some(out);
    }

    if has(Method::SisiDeflated) {
        if g.deflate.is_empty() || g.deflated_modes.is_empty() {
            return Err(Error::InvalidArgument(
                "sisi-deflated needs galerkin.deflate and galerkin.deflated_modes".into(),
            ));
        }
        let variant = Variant::Deflated {
            modes: g.deflate.clone(),
            c_lambda: g.c_lambda,
        };
        let out = sisi_run(a, ctx, &g.sisi(g.deflated_modes.clone(), variant)).map_err(Error::at("deflated sisi"))?;
        write_galerkin(&mut w, "deflated", &out)?;
        report.summary.extend(galerkin_record("sisi_deflated", &out, &ctx.basis_solution));
        report.deflated = Some(out);
    }

    if has(Method::SubspaceMax) {
        let n = a.dim();
        let modes = if g.max_modes.is_empty() {
            (n.saturating_sub(4).max(1)..=n).collect()
        } else {
            g.max_modes.clone()
        };
        let out = subspace_iteration_max(a, ctx, &g.sisi(modes, Variant::Plain)).map_err(Error::at("subspace max"))?;
        write_galerkin(&mut w, "max", &out)?;
        report.summary.extend(galerkin_record("subspace_max", &out, &ctx.basis_solution));
        report.subspace_max = Some(out);
    }

    // operator and mode positions for the deflated comparison runs
    let deflated_op = match &report.deflated {
        Some(_) => {
            let op = deflate_modes(a, &g.deflate, g.c_lambda).map_err(Error::at("deflation"))?;
            let pos = deflated_positions(a, &op, &g.deflated_modes)?;
            Some((op, pos))
        }
        None => None,
    };

    if has(Method::Collocate) {
        let out = sc_run(a, &ctx.basis_operator, &ctx.basis_solution, &ctx.grid, &g.modes)
            .map_err(Error::at("collocation"))?;
        out.samples.write_csv(w.create("sc_samples.csv")?)?;
        for e in &out.modes {
            w.expansion("sc", e)?;
            report.summary.push(plain_record("sc", e, &ctx.basis_solution));
        }
        report.collocation = out.modes;
        if let Some((op, pos)) = &deflated_op {
            let mut out = sc_run(op, &ctx.basis_operator, &ctx.basis_solution, &ctx.grid, pos)
                .map_err(Error::at("deflated collocation"))?;
            for (e, &m) in out.modes.iter_mut().zip(&g.deflated_modes) {
                e.mode = m;
                w.expansion("deflated_sc", e)?;
                report.summary.push(plain_record("sc_deflated", e, &ctx.basis_solution));
            }
            report.deflated_collocation = out.modes;
        }
    }

    if has(Method::MonteCarlo) {
        let mut modes = g.modes.clone();
        for o in [&report.shifted, &report.subspace_max].into_iter().flatten() {
            for m in &o.modes {
                if !modes.contains(&m.mode) {
                    modes.push(m.mode);
                }
            }
        }
        let (n, seed) = (cfg.monte_carlo.samples, cfg.monte_carlo.seed);
        let set = mc_run(a, &ctx.basis_operator, n, seed, &modes).map_err(Error::at("monte carlo"))?;
        set.write_csv(w.create("mc_samples.csv")?)?;
        report.monte_carlo = Some(set);
        if let Some((op, pos)) = &deflated_op {
            let mut set = mc_run(op, &ctx.basis_operator, n, seed, pos).map_err(Error::at("deflated monte carlo"))?;
            set.modes = g.deflated_modes.clone();
            set.write_csv(w.create("deflated_mc_samples.csv")?)?;
            report.deflated_monte_carlo = Some(set);
        }
    }

    write_tables(&mut w, cfg, &problem, &report)?;
    if let Some(mc) = &report.monte_carlo {
        let mut expansions: Vec<(&str, &EigenExpansion)> = Vec::new();
        expansions.extend(report.rq0.iter().map(|e| ("rq0", e)));
        expansions.extend(report.collocation.iter().map(|e| ("sc", e)));
        for (name, o) in [("sisi", &report.sisi), ("shifted", &report.shifted), ("max", &report.subspace_max)] {
            if let Some(o) = o {
                expansions.extend(o.modes.iter().map(|e| (name, e)));
            }
        }
        write_pdfs(&mut w, "", a, ctx, mc, &expansions, kde_n)?;
    }
    if let (Some((op, _)), Some(mc), Some(out)) = (&deflated_op, &report.deflated_monte_carlo, &report.deflated) {
        let mut expansions: Vec<(&str, &EigenExpansion)> = out.modes.iter().map(|e| ("sisi", e)).collect();
        expansions.extend(report.deflated_collocation.iter().map(|e| ("sc", e)));
        write_pdfs(&mut w, "deflated_", op, ctx, mc, &expansions, kde_n)?;
    }

    let mut f = w.create("summary.jsonl")?;
    for r in &report.summary {
        writeln!(f, "{}", serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?)?;
    }
    f.flush()?;
    drop(f);
    report.files = w.files;
    Ok(report)
}

fn write_galerkin(w: &mut Writer, prefix: &str, out: &SisiOutcome) -> Result<()> {
    for e in &out.modes {
        w.expansion(prefix, e)?;
    }
    out.log.write_csv(w.create(&format!("{prefix}_log.csv"))?)?;
    Ok(())
}

/// Position in the spectrum of the deflated mean of each original mean mode.
fn deflated_positions(a: &MatrixExpansion, deflated: &MatrixExpansion, modes: &[usize]) -> Result<Vec<usize>> {
    let orig = sym_eig(a.mean())?;
    let defl = sym_eig(deflated.mean())?;
    modes
        .iter()
        .map(|&m| {
            if m == 0 || m > orig.len() {
                return Err(Error::IndexOutOfRange {
                    index: m,
                    len: orig.len(),
                });
            }
            let u = orig.vector(m - 1);
            let best = (0..defl.len())
                .map(|i| (i, defl.vector(i).dot(&u).abs()))
                .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
            Ok(best.0 + 1)
        })
        .collect()
}

/// Coefficient tables for the selected modes: mean Rayleigh quotient, first
/// and final inverse iteration steps, collocation.
fn write_tables(w: &mut Writer, cfg: &ExperimentConfig, p: &Problem, r: &RunReport) -> Result<()> {
    let basis = &p.ctx.basis_solution;
    for (s, &mode) in cfg.galerkin.modes.iter().enumerate() {
        let cols: Vec<(&str, Option<&EigenExpansion>)> = vec![
            ("rq0", r.rq0.get(s)),
            ("sii_1", r.sisi.as_ref().and_then(|o| o.snapshots.first()).and_then(|v| v.get(s))),
            ("sii_n", r.sisi.as_ref().and_then(|o| o.modes.get(s))),
            ("sc", r.collocation.get(s)),
        ];
        let present: Vec<_> = cols.into_iter().filter_map(|(n, e)| e.map(|e| (n, e))).collect();
        if present.is_empty() {
            continue;
        }
        let mut f = w.create(&format!("table_mode{mode}.csv"))?;
        let names: Vec<&str> = present.iter().map(|(n, _)| *n).collect();
        writeln!(f, "d,k,{}", names.join(","))?;
        for (k, alpha) in basis.indices().iter().enumerate() {
            let vals: Vec<String> = present.iter().map(|(_, e)| format!("{:e}", e.lambda[k])).collect();
            writeln!(f, "{},{k},{}", alpha.total_degree(), vals.join(","))?;
        }
    }
    Ok(())
}

/// Eigenvalue pdfs, pairwise pdf overlaps and pdfs of ε_u and ε_r at the
/// Monte Carlo points for each expansion whose mode was sampled.
fn write_pdfs(
    w: &mut Writer,
    prefix: &str,
    op: &MatrixExpansion,
    ctx: &GalerkinContext,
    mc: &SampleSet,
    expansions: &[(&str, &EigenExpansion)],
    kde_n: usize,
) -> Result<()> {
    let basis = &ctx.basis_solution;
    for (s, &mode) in mc.modes.iter().enumerate() {
        w.pdf(&format!("pdf_{prefix}mc_mode{mode}.csv"), &mc.mode_values(s), kde_n)?;
    }
    if mc.modes.len() > 1 {
        let mut f = w.create(&format!("{prefix}pdf_overlap.csv"))?;
        writeln!(f, "mode_a,mode_b,overlap")?;
        for i in 0..mc.modes.len() {
            for j in i + 1..mc.modes.len() {
                match pdf_overlap(&mc.mode_values(i), &mc.mode_values(j), 4 * kde_n) {
                    Ok(o) => writeln!(f, "{},{},{o:e}", mc.modes[i], mc.modes[j])?,
                    Err(Error::DegenerateSamples) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    for &(name, e) in expansions {
        let Some(s) = mc.modes.iter().position(|&m| m == e.mode) else {
            continue;
        };
        let reference: Vec<DVector<f64>> = mc.vectors.iter().map(|v| v[s].clone()).collect();
        let samples = sample_expansion(e, basis, &mc.points);
        let m = e.mode;
        w.pdf(&format!("pdf_{prefix}{name}_mode{m}.csv"), &samples.lambda, kde_n)?;
        let eps_u = eigvec_error(&samples.vectors, &reference)?;
        w.pdf(&format!("eps_u_{prefix}{name}_mode{m}.csv"), &eps_u, kde_n)?;
        let eps_r = true_residual(op, &ctx.basis_operator, e, basis, &mc.points);
        w.pdf(&format!("eps_r_{prefix}{name}_mode{m}.csv"), &eps_r, kde_n)?;
    }
    Ok(())
}

/// One-line JSON status for the command-line tool.
pub fn status_line(methods: &[Method], report: &RunReport) -> String {
    json!({
        "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "records": report.summary.len(),
        "files": report.files.len(),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polychaos::gen_multi_indices;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kde_normal_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pdf = kde(&xs, 400).unwrap();
        let peak = pdf.density.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 0.3989).abs() < 0.02, "{peak}");
        assert!((pdf.integral() - 1.0).abs() < 1e-3);
        assert!(pdf.density.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn kde_scaling() {
        let xs = [0.1, 0.5, 0.7, 1.9, 2.0, 3.3];
        let a = kde(&xs, 50).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|x| x * 4.0).collect();
        let b = kde(&scaled, 50).unwrap();
        for i in 0..50 {
            assert!((b.x[i] - 4.0 * a.x[i]).abs() < 1e-12);
            assert!((b.density[i] - a.density[i] / 4.0).abs() < 1e-12);
        }
        assert!((a.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn overlap_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let far: Vec<f64> = a.iter().map(|x| x + 50.0).collect();
        assert!((pdf_overlap(&a, &a, 800).unwrap() - 1.0).abs() < 1e-3);
        assert!(pdf_overlap(&a, &b, 800).unwrap() > 0.9);
        assert!(pdf_overlap(&a, &far, 800).unwrap() < 1e-6);
    }

    #[test]
    fn kde_degenerate() {
        assert!(matches!(kde(&[1.0, 1.0, 1.0], 10), Err(Error::DegenerateSamples)));
        assert!(kde(&[1.0], 10).is_err());
    }

    #[test]
    fn eigvec_error_examples() {
        let u = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.0, -1.0])];
        assert_eq!(eigvec_error(&u, &u).unwrap(), vec![0.0, 0.0]);
        let twice: Vec<_> = u.iter().map(|v| v * 2.0).collect();
        for e in eigvec_error(&twice, &u).unwrap() {
            assert!((e - 1.0).abs() < 1e-15);
        }
        assert!(eigvec_error(&u, &[DVector::zeros(2), DVector::zeros(2)]).is_err());
    }

    #[test]
    fn true_residual_examples() {
        use crate::galerkin::StochasticVector;
        let basis_a = gen_multi_indices(1, 2).unwrap();
        let basis_s = gen_multi_indices(1, 1).unwrap();
        let a0 = nalgebra::DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0]));
        let a = MatrixExpansion::new(vec![a0], 1, 1).unwrap();
        let u = StochasticVector::from_mean(&DVector::from_vec(vec![1.0, 0.0]), 2);
        let exact = EigenExpansion {
            mode: 1,
            lambda: vec![2.0, 0.0],
            vector: u.clone(),
        };
        let pts = vec![vec![0.3], vec![-1.0]];
        assert!(true_residual(&a, &basis_a, &exact, &basis_s, &pts).iter().all(|r| r.abs() < 1e-12));
        let off = EigenExpansion {
            mode: 1,
            lambda: vec![2.5, 0.0],
            vector: u,
        };
        for r in true_residual(&a, &basis_a, &off, &basis_s, &pts) {
            assert!((r - 0.5 / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_grouping() {
        let b = gen_multi_indices(3, 2).unwrap();
        let lam: Vec<f64> = (0..b.len()).map(|k| k as f64).collect();
        let g = group_by_degree(&lam, &b);
        assert_eq!(g.len(), 3);
        assert_eq!(g[1].coeffs, vec![1.0, 2.0, 3.0]);
        assert_eq!(g[2].coeffs.len(), 6);
    }

    #[test]
    fn config_parsing_and_validation() {
        let text = r#"
            [model]
            kind = "beam"
            [field]
            cov = 0.1
            corr_len = 0.25
            [galerkin]
            modes = [1, 2]
            backend = { kind = "pcg", tol = 1e-10, max_iter = 100 }
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model.elements, 20);
        assert_eq!(cfg.discretization.p, 3);
        assert_eq!(cfg.galerkin.modes, vec![1, 2]);
        assert_eq!(cfg.field.variance, VarianceTerm::Full);
        assert!(matches!(cfg.galerkin.backend, Backend::Pcg { .. }));
        assert!(ExperimentConfig::from_toml(&text.replace("cov = 0.1", "cov = 1.5")).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("corr_len = 0.25", "corr_len = 0.25\nbogus = 1")).is_err());
        assert!(ExperimentConfig::from_toml("[model]\nkind = \"file\"\n[field]\ncov = 0.1\ncorr_len = 1.0\n").is_err());
    }
}
