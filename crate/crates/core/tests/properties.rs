use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stoch_eig::analysis::{eigvec_error, kde};
use stoch_eig::galerkin::{
    grid_orthonormality, rayleigh_quotient, rayleigh_quotient_full, sisi_run, smgs, Backend, GalerkinContext,
    SisiConfig, StochasticVector,
};
use stoch_eig::linalg::sym_eig;
use stoch_eig::models::{format_expansion, parse_expansion, MatrixExpansion};
use stoch_eig::polychaos::{basis_size, gen_multi_indices, quad_tensor, triple_tensor};
use stoch_eig::quadrature::{smolyak, tensor_gauss_hermite};
use stoch_eig::sampling::{mc_run, sc_run};

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn gaussian_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        (1..k).step_by(2).map(|v| v as f64).product()
    }
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * (0.5 * scale)
}

/// A_0 well separated and positive definite, fluctuations of size `amp`.
/// Terms above degree p vanish so the eigenpairs are well resolved at order p.
fn random_operator(seed: u64, n: usize, m_xi: usize, p: u32, amp: f64) -> MatrixExpansion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_terms = basis_size(m_xi, 2 * p);
    let diag = DVector::from_fn(n, |i, _| 1.0 + 2.0 * i as f64);
    let mut terms = vec![DMatrix::from_diagonal(&diag) + random_symmetric(&mut rng, n, 0.05)];
    for l in 1..n_terms {
        // first-order terms dominate, higher terms decay quickly
        let w = if l <= m_xi {
            amp
        } else if l < basis_size(m_xi, p) {
            amp * 0.05
        } else {
            0.0
        };
        terms.push(random_symmetric(&mut rng, n, w));
    }
    MatrixExpansion::new(terms, m_xi, p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn basis_counts(m in 1usize..=6, p in 0u32..=5) {
        let b = gen_multi_indices(m, p).unwrap();
        prop_assert_eq!(b.len(), basis_size(m, p));
        prop_assert_eq!(b.len(), binomial(m + p as usize, p as usize));
        for (d, r) in b.degree_groups() {
            prop_assert_eq!(r.len(), binomial(m + d as usize - 1, d as usize));
            for k in r {
                prop_assert_eq!(b.indices()[k].total_degree(), d);
            }
        }
    }

    #[test]
    fn basis_orthonormal_on_tensor_grid(m in 1usize..=3, p in 1u32..=3) {
        let b = gen_multi_indices(m, p).unwrap();
        let g = tensor_gauss_hermite(m, p as usize + 1).unwrap();
        let psi: Vec<Vec<f64>> = g.points().iter().map(|x| b.eval_all(x)).collect();
        for j in 0..b.len() {
            for k in 0..b.len() {
                let s: f64 = psi.iter().zip(g.weights()).map(|(v, w)| w * v[j] * v[k]).sum();
                let want = if j == k { 1.0 } else { 0.0 };
                prop_assert!((s - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn triple_tensor_matches_quadrature(m in 1usize..=3, p in 1u32..=2) {
        let ba = gen_multi_indices(m, 2 * p).unwrap();
        let bs = gen_multi_indices(m, p).unwrap();
        let c = triple_tensor(&ba, &bs).unwrap();
        let g = tensor_gauss_hermite(m, 2 * p as usize + 1).unwrap();
        let pa: Vec<Vec<f64>> = g.points().iter().map(|x| ba.eval_all(x)).collect();
        let ps: Vec<Vec<f64>> = g.points().iter().map(|x| bs.eval_all(x)).collect();
        for l in 0..ba.len() {
            for j in 0..bs.len() {
                for k in 0..bs.len() {
                    let q: f64 = (0..g.len()).map(|i| g.weights()[i] * pa[i][l] * ps[i][j] * ps[i][k]).sum();
                    prop_assert!((q - c.get(l, j, k)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn smolyak_weights_and_exactness(dim in 1usize..=4, extra in 0usize..=2, seed in any::<u64>()) {
        let level = dim + extra;
        let g = smolyak(dim, level).unwrap();
        prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(&g, &smolyak(dim, level).unwrap());
        // random monomial of total degree ≤ 2·level − 1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut left = 2 * level as u32 - 1;
        let mut exps = vec![0u32; dim];
        for e in exps.iter_mut() {
            *e = rng.random_range(0..=left);
            left -= *e;
        }
        let got = g.integrate(|x| x.iter().zip(&exps).map(|(v, &e)| v.powi(e as i32)).product());
        let want: f64 = exps.iter().map(|&e| gaussian_moment(e)).product();
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{:?}: {} vs {}", exps, got, want);
    }

    #[test]
    fn eigenvalues_invariant_under_orthogonal_similarity(n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_symmetric(&mut rng, n, 1.0);
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let mut b = &q * &a * q.transpose();
        b = (&b + b.transpose()) * 0.5;
        let ea = sym_eig(&a).unwrap();
        let eb = sym_eig(&b).unwrap();
        for (x, y) in ea.values.iter().zip(eb.values.iter()) {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn zero_variance_reduction(n in 3usize..=6, seed in any::<u64>()) {
        let a = random_operator(seed, n, 2, 2, 0.0).mean_only();
        let ctx = GalerkinContext::new(2, 2, 3).unwrap();
        let cfg = SisiConfig { modes: vec![1, 2], max_iter: 200, tol: 1e-13, ..Default::default() };
        let out = sisi_run(&a, &ctx, &cfg).unwrap();
        let eig = sym_eig(a.mean()).unwrap();
        for (s, e) in out.modes.iter().enumerate() {
            prop_assert!((e.lambda[0] - eig.values[s]).abs() < 1e-10 * eig.values[s].abs());
            prop_assert!(e.lambda[1..].iter().all(|v| v.abs() < 1e-10));
            for k in 1..e.vector.n_terms() {
                prop_assert!(e.vector.block(k).norm() < 1e-10);
            }
            let u0 = e.vector.block(0);
            let v = eig.vector(s);
            prop_assert!((u0.dot(&v).abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn truncated_and_full_rayleigh_quotient_agree_on_mean_data(n in 2usize..=5, seed in any::<u64>()) {
        let a = random_operator(seed, n, 2, 2, 0.0).mean_only();
        let ctx = GalerkinContext::new(2, 2, 3).unwrap();
        let c4 = ctx.quad_tensor().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let u0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let u = StochasticVector::from_mean(&u0, ctx.n_terms());
        let au = StochasticVector::from_mean(&(a.mean() * &u0), ctx.n_terms());
        let t = rayleigh_quotient(&u, &au, &ctx.c3);
        let f = rayleigh_quotient_full(&u, &a, &c4);
        for k in 0..ctx.n_terms() {
            prop_assert!((t[k] - f[k]).abs() < 1e-12 * (1.0 + t[0].abs()));
        }
    }

    #[test]
    fn smgs_output_orthonormal_at_every_point(n in 3usize..=6, n_s in 1usize..=3, seed in any::<u64>()) {
        let ctx = GalerkinContext::new(2, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<StochasticVector> = (0..n_s)
            .map(|_| StochasticVector { coeffs: DMatrix::from_fn(n, ctx.n_terms(), |_, k| {
                let s = if k == 0 { 1.0 } else { 0.2 };
                s * rng.random_range(-1.0..1.0)
            }) })
            .collect();
        let out = smgs(&vs, &ctx).unwrap();
        prop_assert!(out.max_defect <= 1e-8);
        prop_assert_eq!(out.vectors.len(), n_s);
        prop_assert!(grid_orthonormality(&out.vectors, &ctx).is_finite());
    }

    #[test]
    fn direct_and_pcg_backends_agree(n in 3usize..=5, seed in any::<u64>()) {
        let a = random_operator(seed, n, 2, 2, 0.05);
        let ctx = GalerkinContext::new(2, 2, 3).unwrap();
        let base = SisiConfig { modes: vec![1], max_iter: 6, tol: 0.0, ..Default::default() };
        let d = sisi_run(&a, &ctx, &base).unwrap();
        let p = sisi_run(&a, &ctx, &SisiConfig { backend: Backend::Pcg { tol: 1e-13, max_iter: 500 }, ..base }).unwrap();
        for (x, y) in d.modes[0].lambda.iter().zip(&p.modes[0].lambda) {
            prop_assert!((x - y).abs() < 1e-8 * d.modes[0].lambda[0].abs());
        }
    }

    #[test]
    fn kde_is_a_density(values in prop::collection::vec(-50.0f64..50.0, 2..200)) {
        prop_assume!(values.iter().any(|v| *v != values[0]));
        let pdf = kde(&values, 400).unwrap();
        prop_assert!(pdf.density.iter().all(|d| *d >= 0.0));
        prop_assert!((pdf.integral() - 1.0).abs() < 1e-3);
        prop_assert!(pdf.bandwidth > 0.0);
    }

    #[test]
    fn eigvec_error_scaling(c in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(4, |_, _| rng.random_range(0.5..1.0))).collect();
        let scaled: Vec<DVector<f64>> = u.iter().map(|v| v * c).collect();
        for e in eigvec_error(&scaled, &u).unwrap() {
            prop_assert!((e - (c - 1.0).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn expansion_text_roundtrip_is_exact(n in 1usize..=5, m in 1usize..=2, p in 1u32..=2, seed in any::<u64>()) {
        let a = random_operator(seed, n, m, p, 0.3);
        let back = parse_expansion(&format_expansion(&a)).unwrap();
        prop_assert_eq!(back.m_xi, a.m_xi);
        prop_assert_eq!(back.p, a.p);
        prop_assert_eq!(back.terms, a.terms);
    }
}

#[test]
fn quad_tensor_symmetry() {
    let ba = gen_multi_indices(2, 4).unwrap();
    let bs = gen_multi_indices(2, 2).unwrap();
    let c4 = quad_tensor(&ba, &bs).unwrap();
    for &(l, i, j, k, v) in c4.entries() {
        assert!((c4.get(l, j, i, k) - v).abs() < 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn monte_carlo_statistics_match_collocation() {
    let a = random_operator(17, 4, 2, 3, 0.04);
    let ctx = GalerkinContext::new(2, 3, 4).unwrap();
    let sc = sc_run(&a, &ctx.basis_operator, &ctx.basis_solution, &ctx.grid, &[1, 2]).unwrap();
    for n in [500usize, 20_000] {
        let mc = mc_run(&a, &ctx.basis_operator, n, 5, &[1, 2]).unwrap();
        for s in 0..2 {
            let v = mc.mode_values(s);
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let lam = &sc.modes[s].lambda;
            let sc_sd = lam[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
            let se_mean = sd / (n as f64).sqrt();
            let se_sd = sd / (2.0 * (n - 1) as f64).sqrt();
            assert!((mean - lam[0]).abs() < 3.0 * se_mean, "n={n} mode {s}: mean {mean} vs {}", lam[0]);
            assert!((sd - sc_sd).abs() < 3.0 * se_sd, "n={n} mode {s}: sd {sd} vs {sc_sd}");
        }
    }
}
