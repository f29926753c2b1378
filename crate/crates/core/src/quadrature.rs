//! Gauss–Hermite rules for the standard normal measure, tensor grids and
//! Smolyak sparse grids.
//!
//! Smolyak levels use linear growth: the univariate rule of level `i` has `i`
//! points. A grid of level `k` in `m` dimensions combines all level vectors
//! with `m ≤ |i| ≤ m + k − 1`, which makes it exact for total degree `2k − 1`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::polychaos::hermite_table;

/// Coordinates closer than this are treated as the same node when merging.
pub const MERGE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum GridKind {
    GaussHermite { points: usize },
    Tensor { points_per_dim: Vec<usize> },
    Smolyak { level: usize },
}

/// Quadrature nodes in R^m with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadGrid {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    kind: GridKind,
}

impl QuadGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> &GridKind {
        &self.kind
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .iter()
            .map(|p| p.as_slice())
            .zip(self.weights.iter().copied())
    }

    /// Σ_q f(ξ_q) w_q.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.iter().map(|(p, w)| f(p) * w).sum()
    }

    /// CSV with columns xi_1..xi_m, weight.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.dim)
            .map(|d| format!("xi_{d}"))
            .chain(std::iter::once("weight".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (p, w) in self.iter() {
            let row: Vec<String> = p
                .iter()
                .chain(std::iter::once(&w))
                .map(|v| format!("{v:.17e}"))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// n-point Gauss–Hermite rule for the standard normal density.
///
/// Nodes come from the Golub–Welsch eigenproblem, are polished by Newton
/// steps on h_n, and symmetrized; weights use the Christoffel formula
/// w_i = 1 / Σ_{k<n} h_k(x_i)².
pub fn gauss_hermite_1d(n: usize) -> Result<QuadGrid> {
    let (x, w) = gauss_hermite_nodes(n)?;
    Ok(QuadGrid {
        dim: 1,
        points: x.into_iter().map(|v| vec![v]).collect(),
        weights: w,
        kind: GridKind::GaussHermite { points: n },
    })
}

pub(crate) fn gauss_hermite_nodes(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "Gauss-Hermite rule needs at least one point".into(),
        ));
    }
    if n == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut x: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    x.sort_by(|a, b| a.total_cmp(b));
    for xi in x.iter_mut() {
        for _ in 0..3 {
            let t = hermite_table(n as u32, *xi);
            // h_n' = √n h_{n−1}
            let deriv = (n as f64).sqrt() * t[n - 1];
            if deriv == 0.0 {
                break;
            }
            *xi -= t[n] / deriv;
        }
    }
    for i in 0..n / 2 {
        let s = 0.5 * (x[n - 1 - i] - x[i]);
        x[i] = -s;
        x[n - 1 - i] = s;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let mut w: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let t = hermite_table(n as u32 - 1, xi);
            1.0 / t.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    for i in 0..n / 2 {
        let s = 0.5 * (w[i] + w[n - 1 - i]);
        w[i] = s;
        w[n - 1 - i] = s;
    }
    let total: f64 = w.iter().sum();
    for wi in w.iter_mut() {
        *wi /= total;
    }
    Ok((x, w))
}

/// Cartesian product of one-dimensional rules.
pub fn tensor_grid(rules: &[QuadGrid]) -> Result<QuadGrid> {
    if rules.is_empty() {
        return Err(Error::InvalidArgument("tensor grid needs at least one rule".into()));
    }
    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    let mut weights = vec![1.0];
    for rule in rules {
        if rule.dim != 1 {
            return Err(Error::DimensionMismatch(
                "tensor grid factors must be one-dimensional".into(),
            ));
        }
        let mut np = Vec::with_capacity(points.len() * rule.len());
        let mut nw = Vec::with_capacity(points.len() * rule.len());
        for (p, w) in points.iter().zip(&weights) {
            for (q, v) in rule.iter() {
                let mut pt = p.clone();
                pt.push(q[0]);
                np.push(pt);
                nw.push(w * v);
            }
        }
        points = np;
        weights = nw;
    }
    Ok(QuadGrid {
        dim: rules.len(),
        points,
        weights,
        kind: GridKind::Tensor {
            points_per_dim: rules.iter().map(|r| r.len()).collect(),
        },
    })
}

/// Full tensor Gauss–Hermite grid with `n` points per dimension.
pub fn tensor_gauss_hermite(dim: usize, n: usize) -> Result<QuadGrid> {
    let rule = gauss_hermite_1d(n)?;
    tensor_grid(&vec![rule; dim])
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn level_vectors(dim: usize, lo: usize, hi: usize) -> Vec<Vec<usize>> {
    fn rec(pos: usize, dim: usize, sum: usize, hi: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == dim {
            out.push(cur.clone());
            return;
        }
        let remaining = dim - pos - 1;
        let mut v = 1;
        while sum + v + remaining <= hi {
            cur.push(v);
            rec(pos + 1, dim, sum + v, hi, cur, out);
            cur.pop();
            v += 1;
        }
    }
    let mut out = Vec::new();
    rec(0, dim, 0, hi, &mut Vec::new(), &mut out);
    out.retain(|v| v.iter().sum::<usize>() >= lo);
    out
}

/// Smolyak sparse grid built from non-nested Gauss–Hermite rules.
pub fn smolyak(dim: usize, level: usize) -> Result<QuadGrid> {
    if dim == 0 || level == 0 {
        return Err(Error::InvalidArgument(
            "smolyak grid needs dim >= 1 and level >= 1".into(),
        ));
    }
    let q = dim + level - 1;
    let lo = dim.max(q + 1 - dim);
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (1..=level)
        .map(gauss_hermite_nodes)
        .collect::<Result<_>>()?;

    let key = |p: &[f64]| -> Vec<i64> { p.iter().map(|v| (v / MERGE_TOL).round() as i64).collect() };
    let mut merged: BTreeMap<Vec<i64>, (Vec<f64>, f64)> = BTreeMap::new();
    for lv in level_vectors(dim, lo, q) {
        let s: usize = lv.iter().sum();
        let coef = if (q - s).is_multiple_of(2) { 1.0 } else { -1.0 } * binomial(dim - 1, q - s);
        if coef == 0.0 {
            continue;
        }
        let factors: Vec<QuadGrid> = lv
            .iter()
            .map(|&n| QuadGrid {
                dim: 1,
                points: rules[n - 1].0.iter().map(|&x| vec![x]).collect(),
                weights: rules[n - 1].1.clone(),
                kind: GridKind::GaussHermite { points: n },
            })
            .collect();
        let tg = tensor_grid(&factors)?;
        for (p, w) in tg.iter() {
            merged
                .entry(key(p))
                .and_modify(|e| e.1 += coef * w)
                .or_insert_with(|| (p.to_vec(), coef * w));
        }
    }
    let (points, weights): (Vec<_>, Vec<_>) = merged.into_values().unzip();
    Ok(QuadGrid {
        dim,
        points,
        weights,
        kind: GridKind::Smolyak { level },
    })
}
