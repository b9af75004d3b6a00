//! Latent Gaussian building blocks: the Matérn spatial effect over stations,
//! the cyclic second-order random walk over 52 weeks, the intercept, and the
//! assembled block-diagonal precision with its observation matrix.

use std::collections::HashMap;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::bessel_k1;

pub const WEEKS_PER_YEAR: usize = 52;

/// Diagonal jitter added to the spatial correlation matrix.
pub const SPATIAL_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub x_km: f64,
    pub y_km: f64,
}

/// Stations with planar (already projected) coordinates in km.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteSet {
    sites: Vec<Site>,
    index: HashMap<String, usize>,
}

impl SiteSet {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        let mut index = HashMap::with_capacity(sites.len());
        for (i, s) in sites.iter().enumerate() {
            if !(s.x_km.is_finite() && s.y_km.is_finite()) {
                return Err(Error::Data(format!("station `{}` has non-finite coordinates", s.id)));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Data(format!("station `{}` listed twice", s.id)));
            }
        }
        Ok(Self { sites, index })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn get(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.id.clone()).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.sites[i], &self.sites[j]);
        (a.x_km - b.x_km).hypot(a.y_km - b.y_km)
    }
}

/// Matérn spatial effect with smoothness fixed at one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternSpec {
    pub psi: f64,
    pub tau_s: f64,
}

impl MaternSpec {
    pub const NU: f64 = 1.0;

    pub fn new(psi: f64, tau_s: f64) -> Result<Self> {
        if !(psi > 0.0 && psi.is_finite()) {
            return Err(Error::domain(format!("Matérn range must be positive, got {psi}")));
        }
        if !(tau_s > 0.0 && tau_s.is_finite()) {
            return Err(Error::domain(format!("spatial precision must be positive, got {tau_s}")));
        }
        Ok(Self { psi, tau_s })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicRw2Spec {
    pub n_weeks: usize,
    pub tau_t: f64,
}

impl CyclicRw2Spec {
    pub fn new(n_weeks: usize, tau_t: f64) -> Result<Self> {
        if n_weeks < 5 {
            return Err(Error::domain(format!("cyclic RW2 needs at least 5 nodes, got {n_weeks}")));
        }
        if !(tau_t > 0.0 && tau_t.is_finite()) {
            return Err(Error::domain(format!("RW2 precision must be positive, got {tau_t}")));
        }
        Ok(Self { n_weeks, tau_t })
    }

    pub fn weekly(tau_t: f64) -> Result<Self> {
        Self::new(WEEKS_PER_YEAR, tau_t)
    }
}

/// Matérn correlation with `nu = 1`: `(sqrt(2) h / psi) K_1(sqrt(2) h / psi)`.
pub fn matern_correlation(h: f64, psi: f64) -> f64 {
    if h <= 0.0 {
        return 1.0;
    }
    let x = std::f64::consts::SQRT_2 * h / psi;
    if x > 700.0 {
        return 0.0;
    }
    x * bessel_k1(x)
}

pub fn matern_correlation_matrix(sites: &SiteSet, psi: f64) -> DMatrix<f64> {
    let n = sites.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            matern_correlation(sites.distance(i, j), psi)
        }
    })
}

/// Unit-precision spatial structure `R^{-1}` (with jitter on `R`).
pub fn spatial_structure(sites: &SiteSet, psi: f64) -> Result<DMatrix<f64>> {
    let mut r = matern_correlation_matrix(sites, psi);
    for i in 0..r.nrows() {
        r[(i, i)] += SPATIAL_JITTER;
    }
    let chol = r
        .cholesky()
        .ok_or_else(|| Error::Decomposition("spatial correlation matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < 10.0 * SPATIAL_JITTER {
        return Err(Error::Decomposition(
            "spatial correlation matrix is numerically singular (duplicate or near-duplicate stations?)".into(),
        ));
    }
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `tau_s * (R + jitter)^{-1}`.
pub fn build_spatial_precision(spec: &MaternSpec, sites: &SiteSet) -> Result<DMatrix<f64>> {
    Ok(spatial_structure(sites, spec.psi)? * spec.tau_s)
}

/// Unscaled cyclic RW2 structure `D^T D` with `D` the circular second-difference operator.
pub fn rw2_structure(n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::zeros(n, n);
    for w in 0..n {
        d[(w, (w + n - 1) % n)] += 1.0;
        d[(w, w)] -= 2.0;
        d[(w, (w + 1) % n)] += 1.0;
    }
    d.transpose() * d
}

/// Cyclic RW2 precision and its sum-to-zero constraint vector.
pub fn build_rw2_precision(spec: &CyclicRw2Spec) -> (DMatrix<f64>, DVector<f64>) {
    (
        rw2_structure(spec.n_weeks) * spec.tau_t,
        DVector::from_element(spec.n_weeks, 1.0),
    )
}

/// Week index in `1..=52` for a day of year; days 365-366 fall in week 52.
pub fn week_of_day_of_year(day_of_year: u32) -> u32 {
    day_of_year.div_ceil(7).clamp(1, WEEKS_PER_YEAR as u32)
}

pub fn week_of_date(date: NaiveDate) -> u32 {
    week_of_day_of_year(date.ordinal())
}

/// Row-compressed sparse matrix for the observation map `eta = A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(j, v) in entries {
            assert!(j < self.ncols, "column {j} out of range");
            self.indices.push(j);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = Self::new(m.ncols());
        for i in 0..m.nrows() {
            let row: Vec<(usize, f64)> = (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect();
            out.push_row(&row);
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `A^T w`.
    pub fn tmul(&self, w: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * wi;
                }
            }
        }
        out
    }

    /// `target += A^T diag(c) A`.
    pub fn add_weighted_gram(&self, c: &[f64], target: &mut DMatrix<f64>) {
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            let r = self.indptr[i]..self.indptr[i + 1];
            let idx = &self.indices[r.clone()];
            let val = &self.values[r];
            for (a, &ja) in idx.iter().enumerate() {
                let va = ci * val[a];
                for (b, &jb) in idx.iter().enumerate() {
                    target[(ja, jb)] += va * val[b];
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Intercept,
    Spatial,
    Weekly,
    Iid,
    Custom,
}

/// One diagonal block `scale * structure` of the latent precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionBlock {
    pub kind: BlockKind,
    pub name: String,
    pub start: usize,
    pub structure: DMatrix<f64>,
    /// Default scale used when the block's precision is not a free hyperparameter.
    pub scale: f64,
    pub labels: Vec<String>,
}

impl PrecisionBlock {
    pub fn size(&self) -> usize {
        self.structure.nrows()
    }
}

/// Block-diagonal latent precision, observation map and linear constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStructure {
    blocks: Vec<PrecisionBlock>,
    obs: SparseRows,
    /// Orthonormal constraint rows `C` with `C x = 0`.
    constraints: DMatrix<f64>,
}

impl ModelStructure {
    /// Blocks are laid out in order; `start` fields are recomputed.
    pub fn new(mut blocks: Vec<PrecisionBlock>, obs: SparseRows, constraint_rows: Vec<DVector<f64>>) -> Result<Self> {
        let mut start = 0;
        for b in blocks.iter_mut() {
            if b.structure.nrows() != b.structure.ncols() {
                return Err(Error::domain(format!("block `{}` is not square", b.name)));
            }
            if b.labels.len() != b.size() {
                return Err(Error::domain(format!("block `{}` label count mismatch", b.name)));
            }
            b.start = start;
            start += b.size();
        }
        if obs.ncols() != start {
            return Err(Error::domain(format!(
                "observation matrix has {} columns, latent dimension is {start}",
                obs.ncols()
            )));
        }
        let constraints = orthonormalize(&constraint_rows, start)?;
        Ok(Self {
            blocks,
            obs,
            constraints,
        })
    }

    pub fn dim(&self) -> usize {
        self.obs.ncols()
    }

    pub fn blocks(&self) -> &[PrecisionBlock] {
        &self.blocks
    }

    pub fn block(&self, kind: BlockKind) -> Option<&PrecisionBlock> {
        self.blocks.iter().find(|b| b.kind == kind)
    }

    pub fn obs_matrix(&self) -> &SparseRows {
        &self.obs
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    pub fn default_scales(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.scale).collect()
    }

    /// Dense `Q = blockdiag(scale_b * S_b)`.
    pub fn precision(&self, scales: &[f64]) -> DMatrix<f64> {
        assert_eq!(scales.len(), self.blocks.len());
        let n = self.dim();
        let mut q = DMatrix::zeros(n, n);
        for (b, &s) in self.blocks.iter().zip(scales) {
            let k = b.size();
            let mut view = q.view_mut((b.start, b.start), (k, k));
            view.copy_from(&(&b.structure * s));
        }
        q
    }

    pub fn labels(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.labels.iter().cloned()).collect()
    }
}

fn orthonormalize(rows: &[DVector<f64>], n: usize) -> Result<DMatrix<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for r in rows {
        if r.len() != n {
            return Err(Error::domain("constraint length differs from latent dimension"));
        }
        let mut v = r.clone();
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm > 1e-12 * r.norm().max(1.0) {
            basis.push(v / norm);
        }
    }
    let mut c = DMatrix::zeros(basis.len(), n);
    for (i, b) in basis.iter().enumerate() {
        c.set_row(i, &b.transpose());
    }
    Ok(c)
}

/// Latent layout `(intercept, spatial[sites], weekly[52])` with one unit-pattern
/// row per observation `(site index, week in 1..=52)`.
pub fn assemble_indexed(
    matern: &MaternSpec,
    rw2: &CyclicRw2Spec,
    sites: &SiteSet,
    obs: &[(usize, u32)],
    intercept_precision: f64,
) -> Result<ModelStructure> {
    let n_sites = sites.len();
    let n_weeks = rw2.n_weeks;
    let dim = 1 + n_sites + n_weeks;
    let mut a = SparseRows::new(dim);
    for &(s, w) in obs {
        if s >= n_sites {
            return Err(Error::UnknownStation(format!("#{s}")));
        }
        if w == 0 || w as usize > n_weeks {
            return Err(Error::domain(format!("week {w} outside 1..={n_weeks}")));
        }
        a.push_row(&[(0, 1.0), (1 + s, 1.0), (1 + n_sites + w as usize - 1, 1.0)]);
    }
    let blocks = vec![
        PrecisionBlock {
            kind: BlockKind::Intercept,
            name: "intercept".into(),
            start: 0,
            structure: DMatrix::from_element(1, 1, 1.0),
            scale: intercept_precision,
            labels: vec!["intercept".into()],
        },
        PrecisionBlock {
            kind: BlockKind::Spatial,
            name: "spatial".into(),
            start: 0,
            structure: spatial_structure(sites, matern.psi)?,
            scale: matern.tau_s,
            labels: sites.sites().iter().map(|s| format!("spatial[{}]", s.id)).collect(),
        },
        PrecisionBlock {
            kind: BlockKind::Weekly,
            name: "weekly".into(),
            start: 0,
            structure: rw2_structure(n_weeks),
            scale: rw2.tau_t,
            labels: (1..=n_weeks).map(|w| format!("weekly[{w}]")).collect(),
        },
    ];
    let mut sum_to_zero = DVector::zeros(dim);
    for w in 0..n_weeks {
        sum_to_zero[1 + n_sites + w] = 1.0;
    }
    ModelStructure::new(blocks, a, vec![sum_to_zero])
}

/// Same as [`assemble_indexed`] but keyed by station id and calendar date.
pub fn assemble_model(
    matern: &MaternSpec,
    rw2: &CyclicRw2Spec,
    sites: &SiteSet,
    obs: &[(&str, NaiveDate)],
    intercept_precision: f64,
) -> Result<ModelStructure> {
    let indexed = obs
        .iter()
        .map(|&(id, date)| {
            sites
                .index_of(id)
                .map(|s| (s, week_of_date(date)))
                .ok_or_else(|| Error::UnknownStation(id.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_indexed(matern, rw2, sites, &indexed, intercept_precision)
}
