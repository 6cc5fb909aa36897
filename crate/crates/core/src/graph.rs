//! Label co-occurrence graph and personalized-PageRank propagation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::LinearOperator;
use crate::error::{shape_err, Error, Result};
use crate::linalg::Lu;
use crate::tensor::{matmul_t, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeWeighting {
    /// Weight 1 for any pair that ever co-occurs.
    #[default]
    Binary,
    /// Number of label sets containing the pair.
    Counts,
}

/// Symmetric co-occurrence graph over `L` labels with its normalized
/// adjacency `D^-1/2 (A + I) D^-1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocGraph {
    a: Tensor,
    a_hat: Tensor,
}

impl CoocGraph {
    /// One clique per label set.
    pub fn build(num_labels: usize, label_sets: &[Vec<usize>], weighting: EdgeWeighting) -> Result<Self> {
        let mut a = Tensor::zeros(num_labels, num_labels);
        for set in label_sets {
            let uniq: BTreeSet<usize> = set.iter().copied().collect();
            if let Some(&bad) = uniq.iter().find(|&&i| i >= num_labels) {
                return Err(Error::Dataset(format!("label index {bad} outside 0..{num_labels}")));
            }
            let members: Vec<usize> = uniq.into_iter().collect();
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    let w = match weighting {
                        EdgeWeighting::Binary => 1.0,
                        EdgeWeighting::Counts => a.get(i, j) + 1.0,
                    };
                    a.set(i, j, w);
                    a.set(j, i, w);
                }
            }
        }
        Ok(Self::from_adjacency_unchecked(a))
    }

    /// Builds from an undirected weighted edge list. Self-loops are rejected.
    pub fn from_edges(num_labels: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut a = Tensor::zeros(num_labels, num_labels);
        for &(i, j, w) in edges {
            if i >= num_labels || j >= num_labels {
                return Err(Error::Dataset(format!("edge ({i}, {j}) outside 0..{num_labels}")));
            }
            if i == j {
                return Err(Error::Dataset(format!("self-loop on {i}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Dataset(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            a.set(i, j, w);
            a.set(j, i, w);
        }
        Ok(Self::from_adjacency_unchecked(a))
    }

    fn from_adjacency_unchecked(a: Tensor) -> Self {
        let n = a.rows();
        let mut deg = alloc::vec![1.0; n];
        for (i, d) in deg.iter_mut().enumerate() {
            *d += a.row(i).iter().sum::<f64>();
        }
        let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / libm::sqrt(d)).collect();
        let mut a_hat = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let at = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
                if at != 0.0 {
                    a_hat.set(i, j, inv_sqrt[i] * at * inv_sqrt[j]);
                }
            }
        }
        Self { a, a_hat }
    }

    pub fn num_labels(&self) -> usize {
        self.a.rows()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.a
    }

    pub fn a_hat(&self) -> &Tensor {
        &self.a_hat
    }

    /// Degrees of `A + I`.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.num_labels())
            .map(|i| 1.0 + self.a.row(i).iter().sum::<f64>())
            .collect()
    }

    /// Upper-triangle edges `(i, j, weight)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.num_labels();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.a.get(i, j);
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, c: usize) -> Vec<usize> {
        self.a
            .row(c)
            .iter()
            .enumerate()
            .filter(|&(_, &w)| w > 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Labels adjacent to every code in `cs`; empty for empty input.
    pub fn neighbor_intersection(&self, cs: &[usize]) -> Vec<usize> {
        let Some((&first, rest)) = cs.split_first() else {
            return Vec::new();
        };
        let mut acc: BTreeSet<usize> = self.neighbors(first).into_iter().collect();
        for &c in rest {
            let next: BTreeSet<usize> = self.neighbors(c).into_iter().collect();
            acc = acc.intersection(&next).copied().collect();
        }
        acc.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PprConfig {
    /// Teleport probability.
    pub d: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            d: 0.5,
            max_iters: 50,
            tol: 1e-10,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d < 1.0) {
            return Err(Error::Config(format!("ppr teleport d = {} must lie in (0, 1)", self.d)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("ppr max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

fn system_matrix(g: &CoocGraph, d: f64) -> Tensor {
    let n = g.num_labels();
    let mut m = g.a_hat.scale(-(1.0 - d));
    for i in 0..n {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    m
}

/// `d (I - (1-d) A_hat)^-1 X` via an LU solve.
pub fn ppr_closed_form(g: &CoocGraph, cfg: &PprConfig, x: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    if x.rows() != g.num_labels() {
        return Err(shape_err("ppr_closed_form", g.a_hat.shape(), x.shape()));
    }
    let lu = Lu::factor(&system_matrix(g, cfg.d))?;
    closed_form_apply(&lu, &g.a_hat, cfg.d, x, false)
}

/// `(A_hat - I) X`; exactly zero on rows of isolated labels.
fn minus_identity(a_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut y = a_hat.matmul(x)?;
    for (v, xv) in y.data_mut().iter_mut().zip(x.data()) {
        *v -= xv;
    }
    Ok(y)
}

/// `d M^-1 X` written as `X + (1-d) M^-1 (A_hat - I) X`, which returns
/// isolated rows bit for bit. `A_hat` is symmetric and commutes with `M`, so
/// the transpose only swaps the solve.
fn closed_form_apply(lu: &Lu, a_hat: &Tensor, d: f64, x: &Tensor, transpose: bool) -> Result<Tensor> {
    let corr = if transpose {
        minus_identity(a_hat, &lu.solve_transpose(x)?)?
    } else {
        lu.solve(&minus_identity(a_hat, x)?)?
    };
    let mut z = x.clone();
    for (v, c) in z.data_mut().iter_mut().zip(corr.data()) {
        *v += (1.0 - d) * c;
    }
    Ok(z)
}

/// One step `Z <- X + (1-d) (A_hat Z - X)`, the same map as
/// `(1-d) A_hat Z + d X` with isolated rows kept exact.
fn ppr_step(a_hat: &Tensor, transpose: bool, d: f64, z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut next = matmul_t(a_hat, transpose, z, false)?;
    for (n, xv) in next.data_mut().iter_mut().zip(x.data()) {
        *n = xv + (1.0 - d) * (*n - xv);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PprRun {
    pub z: Tensor,
    pub iterations: usize,
    /// Max-abs change of the last update.
    pub residual: f64,
    pub converged: bool,
}

/// Fixed-point iteration `Z <- (1-d) A_hat Z + d X` from `Z = X`.
pub fn ppr_iterate(g: &CoocGraph, cfg: &PprConfig, x: &Tensor) -> Result<PprRun> {
    cfg.validate()?;
    if x.rows() != g.num_labels() {
        return Err(shape_err("ppr_iterate", g.a_hat.shape(), x.shape()));
    }
    let mut z = x.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        let next = ppr_step(&g.a_hat, false, cfg.d, &z, x)?;
        residual = next.max_abs_diff(&z)?;
        z = next;
        if residual <= cfg.tol {
            return Ok(PprRun {
                z,
                iterations: it,
                residual,
                converged: true,
            });
        }
    }
    Ok(PprRun {
        z,
        iterations: cfg.max_iters,
        residual,
        converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PprMode {
    #[default]
    ClosedForm,
    Iterate,
}

/// Propagation as a fixed linear map, for use on the autodiff tape.
/// The closed form keeps the factorization; the iterative form runs a fixed
/// `max_iters` steps so the map stays linear.
#[derive(Debug, Clone)]
pub struct PprOperator {
    d: f64,
    mode: PprMode,
    iters: usize,
    a_hat: Tensor,
    lu: Option<Lu>,
}

impl PprOperator {
    pub fn new(g: &CoocGraph, cfg: &PprConfig, mode: PprMode) -> Result<Self> {
        cfg.validate()?;
        let lu = match mode {
            PprMode::ClosedForm => Some(Lu::factor(&system_matrix(g, cfg.d))?),
            PprMode::Iterate => None,
        };
        Ok(Self {
            d: cfg.d,
            mode,
            iters: cfg.max_iters,
            a_hat: g.a_hat.clone(),
            lu,
        })
    }

    pub fn mode(&self) -> PprMode {
        self.mode
    }

    fn iterate(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        let mut z = x.clone();
        for _ in 0..self.iters {
            z = ppr_step(&self.a_hat, transpose, self.d, &z, x)?;
        }
        Ok(z)
    }
}

impl LinearOperator for PprOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.lu {
            Some(lu) => closed_form_apply(lu, &self.a_hat, self.d, x, false),
            None => self.iterate(x, false),
        }
    }

    fn apply_transpose(&self, g: &Tensor) -> Result<Tensor> {
        match &self.lu {
            Some(lu) => closed_form_apply(lu, &self.a_hat, self.d, g, true),
            None => self.iterate(g, true),
        }
    }
}
