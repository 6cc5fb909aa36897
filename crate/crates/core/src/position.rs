//! Stack-based tree positions.
//!
//! A position is `k` blocks of width `n`. Descending to child `i` pushes the
//! one-hot `e_i` onto the front and drops the last block; ascending pops the
//! front block and appends zeros. The root is the zero vector, so any node's
//! position is the composition of pushes along its root path.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_t, Tensor};
use crate::tree::CodeTree;

#[derive(Debug, Clone, PartialEq)]
pub struct TreePosition {
    vec: Vec<f64>,
    n: usize,
    k: usize,
}

impl TreePosition {
    pub fn root(n: usize, k: usize) -> Self {
        Self {
            vec: vec![0.0; n * k],
            n,
            k,
        }
    }

    /// Wraps a raw vector; fails unless it has `n * k` entries.
    pub fn from_vec(vec: Vec<f64>, n: usize, k: usize) -> Result<Self> {
        if vec.len() != n * k {
            return Err(shape_err("tree position", (1, vec.len()), (n, k)));
        }
        Ok(Self { vec, n, k })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }

    pub fn branching(&self) -> usize {
        self.n
    }

    pub fn depth_capacity(&self) -> usize {
        self.k
    }

    fn block(&self, b: usize) -> &[f64] {
        &self.vec[b * self.n..(b + 1) * self.n]
    }

    fn block_is_zero(&self, b: usize) -> bool {
        self.block(b).iter().all(|&v| v == 0.0)
    }

    /// Number of non-zero blocks, which equals the depth of the position.
    pub fn depth(&self) -> usize {
        (0..self.k).filter(|&b| !self.block_is_zero(b)).count()
    }

    pub fn is_root(&self) -> bool {
        self.vec.iter().all(|&v| v == 0.0)
    }

    /// Every block is zero or one-hot, and zero blocks form a suffix.
    pub fn is_stack_valid(&self) -> bool {
        let mut seen_zero = false;
        for b in 0..self.k {
            let blk = self.block(b);
            let ones = blk.iter().filter(|&&v| v == 1.0).count();
            let zeros = blk.iter().filter(|&&v| v == 0.0).count();
            if zeros == self.n {
                seen_zero = true;
            } else if ones == 1 && zeros == self.n - 1 {
                if seen_zero {
                    return false;
                }
            } else {
                return false;
            }
        }
        true
    }

    /// Push child index `i`.
    pub fn down(&self, i: usize) -> Result<Self> {
        if i >= self.n {
            return Err(Error::Capacity {
                n: self.n,
                k: self.k,
                reason: "child index exceeds branching capacity",
            });
        }
        if self.k == 0 || !self.block_is_zero(self.k - 1) {
            return Err(Error::Capacity {
                n: self.n,
                k: self.k,
                reason: "depth capacity exhausted",
            });
        }
        let mut out = vec![0.0; self.n * self.k];
        out[i] = 1.0;
        out[self.n..].copy_from_slice(&self.vec[..self.n * (self.k - 1)]);
        Ok(Self {
            vec: out,
            n: self.n,
            k: self.k,
        })
    }

    /// Pop the most recent path segment.
    pub fn up(&self) -> Result<Self> {
        if self.is_root() {
            return Err(Error::Underflow);
        }
        let mut out = vec![0.0; self.n * self.k];
        out[..self.n * (self.k - 1)].copy_from_slice(&self.vec[self.n..]);
        Ok(Self {
            vec: out,
            n: self.n,
            k: self.k,
        })
    }
}

/// Checks that a tree fits into `n x k` positions.
pub fn check_capacity(tree: &CodeTree, n: usize, k: usize) -> Result<()> {
    if n < tree.max_branching() {
        return Err(Error::Capacity {
            n,
            k,
            reason: "tree branching exceeds n",
        });
    }
    if k < tree.max_depth() {
        return Err(Error::Capacity {
            n,
            k,
            reason: "tree depth exceeds k",
        });
    }
    Ok(())
}

/// Position of a node by index, built from pushes along the root path.
pub fn encode_node(tree: &CodeTree, idx: usize, n: usize, k: usize) -> Result<TreePosition> {
    check_capacity(tree, n, k)?;
    let mut pos = TreePosition::root(n, k);
    for step in tree.path_from_root(idx) {
        pos = pos.down(tree.node(step).child_index)?;
    }
    Ok(pos)
}

pub fn encode_path(tree: &CodeTree, code: &str, n: usize, k: usize) -> Result<TreePosition> {
    let idx = tree.index_of(code)?;
    encode_node(tree, idx, n, k)
}

/// Raw positions of every label, one row per label (`L x n*k`).
pub fn encode_all(tree: &CodeTree, n: usize, k: usize) -> Result<Tensor> {
    check_capacity(tree, n, k)?;
    let l = tree.num_labels();
    let mut out = Tensor::zeros(l, n * k);
    for label in 0..l {
        let p = encode_node(tree, label + 1, n, k)?;
        out.row_mut(label).copy_from_slice(p.as_slice());
    }
    Ok(out)
}

/// Linear map from `n*k` raw positions to the model width `d_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosProjection {
    /// `d_e x d_pos`.
    pub matrix: Tensor,
}

impl PosProjection {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Tensor::identity(d),
        }
    }

    /// Fixed-seed projection with orthonormal rows (or columns when
    /// `d_e > d_pos`), which keeps distinct positions distinct.
    pub fn orthonormal<R: rand::Rng + ?Sized>(rng: &mut R, d_e: usize, d_pos: usize) -> Self {
        Self {
            matrix: crate::init::orthonormal(rng, d_e, d_pos),
        }
    }

    pub fn d_e(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d_pos(&self) -> usize {
        self.matrix.cols()
    }
}

/// Projected positions, one row per label (`L x d_e`). Row `l` is
/// `proj.matrix * position(l)`.
pub fn project_all(tree: &CodeTree, proj: &PosProjection, n: usize, k: usize) -> Result<Tensor> {
    if proj.d_pos() != n * k {
        return Err(shape_err("project_all", proj.matrix.shape(), (n, k)));
    }
    let raw = encode_all(tree, n, k)?;
    matmul_t(&raw, false, &proj.matrix, true)
}
