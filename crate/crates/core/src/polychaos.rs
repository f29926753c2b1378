//! Multivariate orthonormal Hermite chaos.
//!
//! The basis is indexed in graded order: all multi-indices of total degree 0,
//! then total degree 1, and so on. Within one degree, indices are sorted in
//! descending lexicographic order of their degree vectors, so for three
//! variables the degree-1 block is `ξ1, ξ2, ξ3` and the degree-2 block is
//! `ξ1², ξ1ξ2, ξ1ξ3, ξ2², ξ2ξ3, ξ3²`.
//!
//! Expectation tensors are computed from the closed-form univariate Hermite
//! linearization coefficients, so every stored entry is exact up to roundoff.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};

/// Entries with absolute value below this are not stored in the tensors.
pub const DROP_TOL: f64 = 1e-12;

/// Per-variable polynomial degrees of one basis function.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn degrees(&self) -> &[u32] {
        &self.0
    }
}

/// Total-degree Hermite chaos basis in `m_xi` variables up to degree `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct GpcBasis {
    m_xi: usize,
    degree: u32,
    indices: Vec<MultiIndex>,
}

/// Number of multi-indices of total degree ≤ p in m variables, (m+p)!/(m! p!).
pub fn basis_size(m_xi: usize, p: u32) -> usize {
    // binomial(m+p, p) computed incrementally, exact in u128
    let mut acc: u128 = 1;
    for i in 1..=p as u128 {
        acc = acc * (m_xi as u128 + i) / i;
    }
    acc as usize
}

/// Builds the graded basis for `m_xi` variables and maximal total degree `p`.
pub fn gen_multi_indices(m_xi: usize, p: u32) -> Result<GpcBasis> {
    if m_xi == 0 {
        return Err(Error::InvalidArgument("m_xi must be at least 1".into()));
    }
    let mut indices = Vec::with_capacity(basis_size(m_xi, p));
    for d in 0..=p {
        let mut block = Vec::new();
        let mut current = vec![0u32; m_xi];
        compositions(d, 0, &mut current, &mut block);
        // descending lexicographic: (1,0,0) before (0,1,0)
        block.sort_by(|a, b| b.cmp(a));
        indices.extend(block.into_iter().map(MultiIndex));
    }
    Ok(GpcBasis {
        m_xi,
        degree: p,
        indices,
    })
}

fn compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in 0..=remaining {
        current[pos] = k;
        compositions(remaining - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

impl GpcBasis {
    pub fn m_xi(&self) -> usize {
        self.m_xi
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn index(&self, ell: usize) -> Option<&MultiIndex> {
        self.indices.get(ell)
    }

    /// Position of a multi-index in this basis, if present.
    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        self.indices.iter().position(|m| m.0 == alpha)
    }

    /// Evaluates ψ_ell at `xi`.
    pub fn eval(&self, ell: usize, xi: &[f64]) -> Result<f64> {
        let alpha = self.indices.get(ell).ok_or(Error::IndexOutOfRange {
            index: ell,
            len: self.indices.len(),
        })?;
        if xi.len() != self.m_xi {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates, basis has {} variables",
                xi.len(),
                self.m_xi
            )));
        }
        Ok(alpha
            .0
            .iter()
            .zip(xi)
            .map(|(&n, &x)| hermite_eval(n, x))
            .product())
    }

    /// Evaluates every basis function at `xi`, reusing the univariate tables.
    pub fn eval_all(&self, xi: &[f64]) -> Vec<f64> {
        assert_eq!(xi.len(), self.m_xi, "point dimension mismatch");
        let tables: Vec<Vec<f64>> = xi.iter().map(|&x| hermite_table(self.degree, x)).collect();
        self.indices
            .iter()
            .map(|alpha| {
                alpha
                    .0
                    .iter()
                    .enumerate()
                    .map(|(v, &n)| tables[v][n as usize])
                    .product()
            })
            .collect()
    }

    /// Half-open ranges of basis positions grouped by total degree.
    pub fn degree_groups(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        let mut groups = Vec::new();
        let mut start = 0;
        for d in 0..=self.degree {
            let n = self.indices[start..]
                .iter()
                .take_while(|m| m.total_degree() == d)
                .count();
            groups.push((d, start..start + n));
            start += n;
        }
        groups
    }
}

/// Convenience wrapper matching the operation name used throughout the crate.
pub fn basis_eval(basis: &GpcBasis, ell: usize, xi: &[f64]) -> Result<f64> {
    basis.eval(ell, xi)
}

/// Orthonormal probabilists' Hermite polynomial h_n(x) = He_n(x)/√(n!).
///
/// Uses the normalized recurrence √(k+1) h_{k+1} = x h_k − √k h_{k−1}.
pub fn hermite_eval(n: u32, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = x;
    for k in 1..n {
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Values h_0(x), …, h_n(x).
pub fn hermite_table(n: u32, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(1.0);
    if n == 0 {
        return out;
    }
    out.push(x);
    for k in 1..n as usize {
        let kf = k as f64;
        let next = (x * out[k] - kf.sqrt() * out[k - 1]) / (kf + 1.0).sqrt();
        out.push(next);
    }
    out
}

fn ln_factorial(n: u32) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// E[h_a h_b h_c] for orthonormal univariate Hermite polynomials.
///
/// Nonzero only when a+b+c is even and the triangle inequality holds; then it
/// equals √(a! b! c!) / ((s−a)! (s−b)! (s−c)!) with s = (a+b+c)/2.
pub fn hermite_triple(a: u32, b: u32, c: u32) -> f64 {
    let sum = a + b + c;
    if sum % 2 == 1 {
        return 0.0;
    }
    let s = sum / 2;
    if s < a || s < b || s < c {
        return 0.0;
    }
    let ln = 0.5 * (ln_factorial(a) + ln_factorial(b) + ln_factorial(c))
        - ln_factorial(s - a)
        - ln_factorial(s - b)
        - ln_factorial(s - c);
    ln.exp()
}

/// E[h_a h_b h_c h_d] via the linearization h_a h_b = Σ_r coef_r h_{a+b−2r}.
pub fn hermite_quad(a: u32, b: u32, c: u32, d: u32) -> f64 {
    if (a + b + c + d) % 2 == 1 {
        return 0.0;
    }
    // h_a h_b = Σ_r √(a! b! (a+b−2r)!) / (r! (a−r)! (b−r)!) h_{a+b−2r}
    let mut acc = 0.0;
    for r in 0..=a.min(b) {
        let n = a + b - 2 * r;
        let t = hermite_triple(n, c, d);
        if t == 0.0 {
            continue;
        }
        let ln = 0.5 * (ln_factorial(a) + ln_factorial(b) + ln_factorial(n))
            - ln_factorial(r)
            - ln_factorial(a - r)
            - ln_factorial(b - r);
        acc += ln.exp() * t;
    }
    acc
}

/// Sparse c_{ℓjk} = E[ψ_ℓ ψ_j ψ_k] with ℓ over the operator basis and j, k
/// over the solution basis.
#[derive(Clone, Debug)]
pub struct TripleTensor {
    dims: (usize, usize, usize),
    entries: Vec<(usize, usize, usize, f64)>,
}

impl TripleTensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Nonzero entries `(ℓ, j, k, value)`, sorted by (ℓ, j, k).
    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, ell: usize, j: usize, k: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1, e.2).cmp(&(ell, j, k)))
            .map(|pos| self.entries[pos].3)
            .unwrap_or(0.0)
    }

    /// Entries with all three indices inside the solution basis, as used by
    /// the truncated Rayleigh quotient and products of two expansions.
    pub fn solution_block(&self) -> impl Iterator<Item = &(usize, usize, usize, f64)> {
        let n = self.dims.1;
        self.entries.iter().filter(move |e| e.0 < n)
    }

    /// Writes one `ell j k value` line per nonzero.
    pub fn write_coo<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for &(l, j, k, v) in &self.entries {
            writeln!(out, "{l} {j} {k} {v:.17e}")?;
        }
        Ok(())
    }
}

fn check_same_dim(basis_a: &GpcBasis, basis_sol: &GpcBasis) -> Result<()> {
    if basis_a.m_xi != basis_sol.m_xi {
        return Err(Error::DimensionMismatch(format!(
            "operator basis has {} variables, solution basis has {}",
            basis_a.m_xi, basis_sol.m_xi
        )));
    }
    Ok(())
}

pub fn triple_tensor(basis_a: &GpcBasis, basis_sol: &GpcBasis) -> Result<TripleTensor> {
    check_same_dim(basis_a, basis_sol)?;
    let n_a = basis_a.len();
    let n_s = basis_sol.len();
    let mut entries = Vec::new();
    for (l, al) in basis_a.indices.iter().enumerate() {
        for (j, aj) in basis_sol.indices.iter().enumerate() {
            for (k, ak) in basis_sol.indices.iter().enumerate() {
                let mut v = 1.0;
                for var in 0..basis_a.m_xi {
                    v *= hermite_triple(al.0[var], aj.0[var], ak.0[var]);
                    if v == 0.0 {
                        break;
                    }
                }
                if v.abs() > DROP_TOL {
                    entries.push((l, j, k, v));
                }
            }
        }
    }
    Ok(TripleTensor {
        dims: (n_a, n_s, n_s),
        entries,
    })
}

/// Sparse c_{ℓijk} = E[ψ_ℓ ψ_i ψ_j ψ_k]; ℓ and k over the operator basis,
/// i and j over the solution basis.
#[derive(Clone, Debug)]
pub struct QuadTensor {
    dims: (usize, usize, usize, usize),
    entries: Vec<(usize, usize, usize, usize, f64)>,
}

impl QuadTensor {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, ell: usize, i: usize, j: usize, k: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1, e.2, e.3).cmp(&(ell, i, j, k)))
            .map(|pos| self.entries[pos].4)
            .unwrap_or(0.0)
    }

    pub fn write_coo<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for &(l, i, j, k, v) in &self.entries {
            writeln!(out, "{l} {i} {j} {k} {v:.17e}")?;
        }
        Ok(())
    }
}

pub fn quad_tensor(basis_a: &GpcBasis, basis_sol: &GpcBasis) -> Result<QuadTensor> {
    check_same_dim(basis_a, basis_sol)?;
    let m = basis_a.m_xi;
    let max_deg = basis_a.degree.max(basis_sol.degree);
    // univariate table E[h_a h_b h_c h_d] for all degrees up to max_deg
    let nd = max_deg as usize + 1;
    let mut table = vec![0.0; nd * nd * nd * nd];
    let idx = |a: usize, b: usize, c: usize, d: usize| ((a * nd + b) * nd + c) * nd + d;
    for a in 0..nd {
        for b in 0..nd {
            for c in 0..nd {
                for d in 0..nd {
                    table[idx(a, b, c, d)] = hermite_quad(a as u32, b as u32, c as u32, d as u32);
                }
            }
        }
    }
    let mut entries = Vec::new();
    for (l, al) in basis_a.indices.iter().enumerate() {
        for (i, ai) in basis_sol.indices.iter().enumerate() {
            for (j, aj) in basis_sol.indices.iter().enumerate() {
                for (k, ak) in basis_a.indices.iter().enumerate() {
                    let mut v = 1.0;
                    for var in 0..m {
                        v *= table[idx(
                            al.0[var] as usize,
                            ai.0[var] as usize,
                            aj.0[var] as usize,
                            ak.0[var] as usize,
                        )];
                        if v == 0.0 {
                            break;
                        }
                    }
                    if v.abs() > DROP_TOL {
                        entries.push((l, i, j, k, v));
                    }
                }
            }
        }
    }
    Ok(QuadTensor {
        dims: (basis_a.len(), basis_sol.len(), basis_sol.len(), basis_a.len()),
        entries,
    })
}

/// Sparse lookup keyed by (ℓ, j, k); used where random access dominates.
pub fn triple_map(c: &TripleTensor) -> BTreeMap<(usize, usize, usize), f64> {
    c.entries.iter().map(|&(l, j, k, v)| ((l, j, k), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_counts() {
        assert_eq!(gen_multi_indices(3, 3).unwrap().len(), 20);
        assert_eq!(gen_multi_indices(3, 6).unwrap().len(), 84);
        let b = gen_multi_indices(4, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.indices()[0].0, vec![0, 0, 0, 0]);
        for m in 1..=6 {
            for p in 0..=5 {
                assert_eq!(gen_multi_indices(m, p).unwrap().len(), basis_size(m, p));
            }
        }
    }

    #[test]
    fn zero_variables_rejected() {
        assert!(gen_multi_indices(0, 2).is_err());
    }

    #[test]
    fn graded_ordering() {
        let b = gen_multi_indices(3, 2).unwrap();
        let got: Vec<Vec<u32>> = b.indices().iter().map(|m| m.0.clone()).collect();
        let want = vec![
            vec![0, 0, 0],
            vec![1, 0, 0],
            vec![0, 1, 0],
            vec![0, 0, 1],
            vec![2, 0, 0],
            vec![1, 1, 0],
            vec![1, 0, 1],
            vec![0, 2, 0],
            vec![0, 1, 1],
            vec![0, 0, 2],
        ];
        assert_eq!(got, want);
        let groups = b.degree_groups();
        assert_eq!(groups, vec![(0, 0..1), (1, 1..4), (2, 4..10)]);
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite_eval(0, 3.7), 1.0);
        assert_eq!(hermite_eval(1, 2.0), 2.0);
        assert!(hermite_eval(2, 1.0).abs() < 1e-15);
        // h_3(x) = (x³ − 3x)/√6
        let x: f64 = 1.3;
        assert!((hermite_eval(3, x) - (x.powi(3) - 3.0 * x) / 6f64.sqrt()).abs() < 1e-14);
        let t = hermite_table(5, x);
        for n in 0..=5 {
            assert_eq!(t[n], hermite_eval(n as u32, x));
        }
    }

    #[test]
    fn basis_eval_examples() {
        let b = gen_multi_indices(2, 2).unwrap();
        assert_eq!(basis_eval(&b, 0, &[0.3, -1.0]).unwrap(), 1.0);
        let pos = b.position(&[1, 0]).unwrap();
        assert_eq!(basis_eval(&b, pos, &[0.7, 5.0]).unwrap(), 0.7);
        let b1 = gen_multi_indices(1, 2).unwrap();
        assert!(basis_eval(&b1, 2, &[1.0]).unwrap().abs() < 1e-15);
        assert!(matches!(
            basis_eval(&b, 99, &[0.0, 0.0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn triple_small_values() {
        assert!((hermite_triple(2, 1, 1) - 2f64.sqrt()).abs() < 1e-14);
        assert_eq!(hermite_triple(1, 1, 1), 0.0);
        assert!((hermite_quad(1, 1, 1, 1) - 3.0).abs() < 1e-14);
        assert!((hermite_triple(0, 3, 3) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn triple_tensor_mean_slice_is_identity() {
        let ba = gen_multi_indices(2, 4).unwrap();
        let bs = gen_multi_indices(2, 2).unwrap();
        let c = triple_tensor(&ba, &bs).unwrap();
        for j in 0..bs.len() {
            for k in 0..bs.len() {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((c.get(0, j, k) - want).abs() < 1e-14);
                for l in 0..ba.len() {
                    assert_eq!(c.get(l, j, k), c.get(l, k, j));
                }
            }
        }
    }

    #[test]
    fn mismatched_bases_rejected() {
        let ba = gen_multi_indices(2, 4).unwrap();
        let bs = gen_multi_indices(3, 2).unwrap();
        assert!(triple_tensor(&ba, &bs).is_err());
        assert!(quad_tensor(&ba, &bs).is_err());
    }

    #[test]
    fn coo_export() {
        let b = gen_multi_indices(1, 1).unwrap();
        let c = triple_tensor(&b, &b).unwrap();
        let mut buf = Vec::new();
        c.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), c.nnz());
        assert!(text.starts_with("0 0 0 1.0"));
    }
}
