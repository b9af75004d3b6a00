//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use tailquant_core::latent::{BlockKind, ModelStructure, PrecisionBlock, Site, SiteSet, SparseRows};

pub fn site_set(coords: &[(f64, f64)]) -> SiteSet {
    SiteSet::new(
        coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Site {
                id: format!("S{i:02}"),
                x_km: x,
                y_km: y,
            })
            .collect(),
    )
    .unwrap()
}

/// Gauss–Legendre nodes and weights on `[a, b]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = 0.5 * (a + b) + 0.5 * (b - a) * (-z);
        w[i] = (b - a) / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Orthonormal basis of `{x : C x = 0}` (columns).
pub fn null_basis(c: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if c.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // projector onto the complement of the row space of C
    let cct = c * c.transpose();
    let p = DMatrix::identity(n, n) - c.transpose() * cct.try_inverse().unwrap() * c;
    let eig = p.symmetric_eigen();
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&k| eig.eigenvalues[k] > 0.5)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Exact posterior of `x` under prior precision `q` restricted to `C x = 0`,
/// Gaussian data `y ~ N(A x + offset, 1/tau)`.
pub fn conjugate_posterior(
    q: &DMatrix<f64>,
    a: &DMatrix<f64>,
    tau: f64,
    y: &[f64],
    c: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = q.nrows();
    let v = null_basis(c, n);
    let h = v.transpose() * (q + a.transpose() * a * tau) * &v;
    let h_inv = h.try_inverse().unwrap();
    let b = v.transpose() * a.transpose() * DVector::from_column_slice(y) * tau;
    let mean = &v * &h_inv * b;
    let cov = &v * h_inv * v.transpose();
    (mean, cov)
}

/// `log N(y; 0, A Sigma_prior A^T + I/tau)` with the constrained prior covariance.
pub fn conjugate_log_marginal(q: &DMatrix<f64>, a: &DMatrix<f64>, tau: f64, y: &[f64], c: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    let v = null_basis(c, n);
    let prior_cov = &v * (v.transpose() * q * &v).try_inverse().unwrap() * v.transpose();
    let m = y.len();
    let s = a * prior_cov * a.transpose() + DMatrix::identity(m, m) / tau;
    let chol = s.cholesky().unwrap();
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + yv.dot(&alpha))
}

/// Custom structure with `iid` blocks of given sizes and unit-scale identity structure.
pub fn iid_structure(sizes: &[(usize, f64)], rows: &[Vec<(usize, f64)>]) -> ModelStructure {
    let dim: usize = sizes.iter().map(|s| s.0).sum();
    let mut blocks = Vec::new();
    for (b, &(size, scale)) in sizes.iter().enumerate() {
        blocks.push(PrecisionBlock {
            kind: BlockKind::Iid,
            name: format!("b{b}"),
            start: 0,
            structure: DMatrix::identity(size, size),
            scale,
            labels: (0..size).map(|i| format!("b{b}[{i}]")).collect(),
        });
    }
    let mut a = SparseRows::new(dim);
    for r in rows {
        a.push_row(r);
    }
    ModelStructure::new(blocks, a, Vec::new()).unwrap()
}

/// Minimizer of `f` by Nelder–Mead with a fixed iteration budget.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64, tol: f64, max_iter: usize) -> Vec<f64> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let spread = simplex
            .iter()
            .skip(1)
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread < tol {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let lin = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = lin(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = lin(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] { lin(-0.5) } else { lin(0.5) };
            let fc = f(&xc);
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap();
    simplex[best].clone()
}
