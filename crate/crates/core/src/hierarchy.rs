//! Bidirectional hierarchy encoders.
//!
//! The up encoder runs one self-attention block over each sibling set (no
//! positional signal, so it is permutation-equivariant); the down encoder
//! maps `position(parent) + init(node)` for each node on its own. Both are
//! pulled together by a symmetric KL loss over row-softmaxed outputs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::position::{project_all, PosProjection};
use crate::tensor::Tensor;
use crate::tree::CodeTree;

/// Floor inside the logarithms of the alignment loss.
pub const KL_FLOOR: f64 = 1e-8;

/// Token table for code descriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct DescEmbedding {
    pub vocab: BTreeMap<String, usize>,
    /// `|vocab| x d_e`.
    pub table: Tensor,
}

impl DescEmbedding {
    /// Collects description tokens in sorted order and draws a seeded table.
    pub fn build<R: Rng + ?Sized>(rng: &mut R, tree: &CodeTree, d_e: usize) -> Self {
        let mut vocab = BTreeMap::new();
        for node in tree.nodes() {
            for tok in &node.description {
                vocab.entry(tok.clone()).or_insert(0);
            }
        }
        for (i, v) in vocab.values_mut().enumerate() {
            *v = i;
        }
        let table = init::uniform(rng, vocab.len(), d_e, 1.0);
        Self { vocab, table }
    }

    pub fn d_e(&self) -> usize {
        self.table.cols()
    }
}

/// Mean description embedding per node (`nodes x d_e`); zero for empty
/// descriptions, including the virtual root.
pub fn code_inits(tree: &CodeTree, desc: &DescEmbedding) -> Result<Tensor> {
    let d = desc.d_e();
    let mut out = Tensor::zeros(tree.len(), d);
    for (i, node) in tree.nodes().iter().enumerate() {
        if node.description.is_empty() {
            continue;
        }
        let row = out.row_mut(i);
        for tok in &node.description {
            let id = *desc
                .vocab
                .get(tok)
                .ok_or_else(|| Error::UnknownCode(alloc::format!("description token `{tok}`")))?;
            for (r, e) in row.iter_mut().zip(desc.table.row(id)) {
                *r += e;
            }
        }
        let n = node.description.len() as f64;
        for r in row.iter_mut() {
            *r /= n;
        }
    }
    Ok(out)
}

/// Projected positions for every node (`nodes x d_e`), root row zero.
pub fn node_positions(tree: &CodeTree, proj: &PosProjection, n: usize, k: usize) -> Result<Tensor> {
    let labels = project_all(tree, proj, n, k)?;
    let zero = Tensor::zeros(1, proj.d_e());
    let mut rows = Vec::with_capacity(tree.len());
    rows.push(zero.row(0).to_vec());
    for l in 0..labels.rows() {
        rows.push(labels.row(l).to_vec());
    }
    if rows.len() == 1 {
        return Ok(zero);
    }
    Tensor::from_rows(&rows)
}

/// Single self-attention block with a residual feed-forward layer.
/// All-zero weights make it the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const BLOCK_TENSORS: [&str; 8] = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

impl Block {
    pub fn zeros(d: usize) -> Self {
        let z = || Tensor::zeros(d, d);
        Self {
            wq: z(),
            wk: z(),
            wv: z(),
            wo: z(),
            w1: z(),
            b1: Tensor::zeros(1, d),
            w2: z(),
            b2: Tensor::zeros(1, d),
        }
    }

    /// Small random weights; the block starts close to the identity.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        let s = 0.5 / libm::sqrt(d as f64);
        let mut u = || init::uniform(rng, d, d, s);
        Self {
            wq: u(),
            wk: u(),
            wv: u(),
            wo: u(),
            w1: u(),
            b1: Tensor::zeros(1, d),
            w2: u(),
            b2: Tensor::zeros(1, d),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Result<BlockVars> {
        let mut v = [Var::default(); 8];
        for (slot, t) in v.iter_mut().zip(self.tensors()) {
            *slot = if trainable { tape.param(t)? } else { tape.constant_ref(t)? };
        }
        Ok(BlockVars(v))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars(pub [Var; 8]);

impl BlockVars {
    fn ffn_residual(&self, tape: &mut Tape<'_>, y: Var) -> Result<Var> {
        let [_, _, _, _, w1, b1, w2, b2] = self.0;
        let h = tape.matmul(y, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let f = tape.matmul(h, w2)?;
        let f = tape.add_row(f, b2)?;
        tape.add(y, f)
    }

    /// Self-attention over the rows of `x` followed by the feed-forward layer.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let [wq, wk, wv, wo, ..] = self.0;
        let d = tape.value(x).cols();
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let s = tape.matmul_t(q, false, k, true)?;
        let s = tape.scale(s, 1.0 / libm::sqrt(d as f64))?;
        let a = tape.softmax_rows(s)?;
        let ctx = tape.matmul(a, v)?;
        let o = tape.matmul(ctx, wo)?;
        let y = tape.add(x, o)?;
        self.ffn_residual(tape, y)
    }

    /// Same block applied to each row as a one-element set. The singleton
    /// softmax is exactly 1, so the query/key path drops out.
    pub fn forward_rowwise(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let [_, _, wv, wo, ..] = self.0;
        let v = tape.matmul(x, wv)?;
        let o = tape.matmul(v, wo)?;
        let y = tape.add(x, o)?;
        self.ffn_residual(tape, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprEncoders {
    pub up: Block,
    pub down: Block,
}

impl BprEncoders {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        Self {
            up: Block::init(rng, d),
            down: Block::init(rng, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            up: Block::zeros(d),
            down: Block::zeros(d),
        }
    }
}

/// Constant tree inputs shared by both passes, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeInputs {
    pub inits: Tensor,
    pub positions: Tensor,
}

impl TreeInputs {
    pub fn new(tree: &CodeTree, inits: Tensor, positions: Tensor) -> Result<Self> {
        if inits.shape() != positions.shape() || inits.rows() != tree.len() {
            return Err(shape_err("tree inputs", inits.shape(), positions.shape()));
        }
        Ok(Self { inits, positions })
    }
}

/// `i_up` for every node (`nodes x d`). Each sibling set is encoded jointly
/// from `position + init`; the root takes the mean of its children's outputs.
pub fn up_pass(tape: &mut Tape<'_>, tree: &CodeTree, inits: Var, positions: Var, up: &BlockVars) -> Result<Var> {
    let x = tape.add(positions, inits)?;
    let d = tape.value(x).cols();
    let mut outputs = Vec::new();
    // Row of each non-root node inside the stacked sibling-set outputs.
    let mut slot = vec![0usize; tree.len()];
    let mut stacked = 0;
    let mut root_out = None;
    for (idx, node) in tree.nodes().iter().enumerate() {
        if node.children.is_empty() {
            continue;
        }
        let set = tape.select_rows(x, &node.children)?;
        let out = up.forward(tape, set)?;
        for (i, &c) in node.children.iter().enumerate() {
            slot[c] = stacked + i;
        }
        stacked += node.children.len();
        if idx == tree.root() {
            root_out = Some(out);
        }
        outputs.push(out);
    }
    let root_row = match root_out {
        Some(out) => {
            let m = tape.value(out).rows();
            let avg = tape.constant(Tensor::filled(1, m, 1.0 / m as f64))?;
            tape.matmul(avg, out)?
        }
        None => tape.constant(Tensor::zeros(1, d))?,
    };
    if outputs.is_empty() {
        return Ok(root_row);
    }
    let all = tape.concat_rows(&outputs)?;
    let order: Vec<usize> = (1..tree.len()).map(|i| slot[i]).collect();
    let rest = tape.select_rows(all, &order)?;
    tape.concat_rows(&[root_row, rest])
}

/// `i_down` for every node: `position(parent) + init(node)` through the down
/// block, and the root copies its `i_up` row.
pub fn down_pass(
    tape: &mut Tape<'_>,
    tree: &CodeTree,
    inits: Var,
    positions: Var,
    down: &BlockVars,
    up_out: Var,
) -> Result<Var> {
    let d = tape.value(inits).cols();
    let root_row = tape.slice(up_out, 0, 1, 0, d)?;
    if tree.len() == 1 {
        return Ok(root_row);
    }
    let parents: Vec<usize> = tree.nodes()[1..]
        .iter()
        .map(|n| n.parent.unwrap_or(0))
        .collect();
    let own: Vec<usize> = (1..tree.len()).collect();
    let pp = tape.select_rows(positions, &parents)?;
    let ii = tape.select_rows(inits, &own)?;
    let x = tape.add(pp, ii)?;
    let rest = down.forward_rowwise(tape, x)?;
    tape.concat_rows(&[root_row, rest])
}

/// `KL(p||q) + KL(q||p) + (KL(p||q) - KL(q||p))^2` with each term averaged
/// over rows after a row softmax.
pub fn bpr_loss(tape: &mut Tape<'_>, up: Var, down: Var) -> Result<Var> {
    let (r, c) = tape.value(up).shape();
    if tape.value(down).shape() != (r, c) {
        return Err(shape_err("bpr_loss", (r, c), tape.value(down).shape()));
    }
    let p = tape.softmax_rows(up)?;
    let q = tape.softmax_rows(down)?;
    let pf = tape.add_scalar(p, KL_FLOOR)?;
    let qf = tape.add_scalar(q, KL_FLOOR)?;
    let lp = tape.log(pf)?;
    let lq = tape.log(qf)?;
    let diff = tape.sub(lp, lq)?;
    let t1 = tape.mul(p, diff)?;
    let s1 = tape.sum(t1)?;
    let l1 = tape.scale(s1, 1.0 / r.max(1) as f64)?;
    let neg = tape.scale(diff, -1.0)?;
    let t2 = tape.mul(q, neg)?;
    let s2 = tape.sum(t2)?;
    let l2 = tape.scale(s2, 1.0 / r.max(1) as f64)?;
    let gap = tape.sub(l1, l2)?;
    let gap2 = tape.mul(gap, gap)?;
    let both = tape.add(l1, l2)?;
    tape.add(both, gap2)
}

/// Plain evaluation of [`bpr_loss`].
pub fn bpr_loss_value(up: &Tensor, down: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let u = tape.constant_ref(up)?;
    let d = tape.constant_ref(down)?;
    let l = bpr_loss(&mut tape, u, d)?;
    Ok(tape.value(l).item())
}

/// Label rows (root excluded) of a `nodes x d` matrix.
fn label_rows(tape: &mut Tape<'_>, all: Var) -> Result<Var> {
    let (n, d) = tape.value(all).shape();
    tape.slice(all, 1, n - 1, 0, d)
}

/// Both passes and the alignment loss over the label rows.
pub struct PassOutputs {
    pub up: Var,
    pub down: Var,
    pub loss: Var,
}

pub fn run_passes(
    tape: &mut Tape<'_>,
    tree: &CodeTree,
    inits: Var,
    positions: Var,
    up: &BlockVars,
    down: &BlockVars,
) -> Result<PassOutputs> {
    if tree.num_labels() == 0 {
        return Err(Error::Config("hierarchy encoders need at least one code".into()));
    }
    let u = up_pass(tape, tree, inits, positions, up)?;
    let d = down_pass(tape, tree, inits, positions, down, u)?;
    let ul = label_rows(tape, u)?;
    let dl = label_rows(tape, d)?;
    let loss = bpr_loss(tape, ul, dl)?;
    Ok(PassOutputs { up: u, down: d, loss })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BprConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub stop_below: f64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 500,
            stop_below: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprTrainReport {
    /// Loss measured at the start of every epoch, plus the final value.
    pub losses: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: f64,
}

fn block_grads(grads: &mut crate::autodiff::Gradients, vars: &BlockVars, block: &Block) -> Vec<Tensor> {
    vars.0
        .iter()
        .zip(block.tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect()
}

fn loss_and_grads(
    tree: &CodeTree,
    inputs: &TreeInputs,
    enc: &BprEncoders,
    train_up: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let i = tape.constant_ref(&inputs.inits)?;
    let p = tape.constant_ref(&inputs.positions)?;
    let uv = enc.up.on_tape(&mut tape, train_up)?;
    let dv = enc.down.on_tape(&mut tape, !train_up)?;
    let out = run_passes(&mut tape, tree, i, p, &uv, &dv)?;
    let loss = tape.value(out.loss).item();
    let mut g = tape.backward(out.loss)?;
    let grads = if train_up {
        block_grads(&mut g, &uv, &enc.up)
    } else {
        block_grads(&mut g, &dv, &enc.down)
    };
    Ok((loss, grads))
}

/// Alternating Adam steps on the up and down blocks until the alignment loss
/// drops below `cfg.stop_below` or `cfg.max_epochs` is reached.
pub fn train_bpr(tree: &CodeTree, inputs: &TreeInputs, enc: &mut BprEncoders, cfg: &BprConfig) -> Result<BprTrainReport> {
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut up_state = AdamState::new(&enc.up.tensors());
    let mut down_state = AdamState::new(&enc.down.tensors());
    let mut losses = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let (loss, g_up) = loss_and_grads(tree, inputs, enc, true)?;
        losses.push(loss);
        if loss < cfg.stop_below {
            return Ok(BprTrainReport {
                losses,
                epochs: epoch,
                converged: true,
                final_loss: loss,
            });
        }
        adam_step(&mut enc.up.tensors_mut(), &g_up, &mut up_state, &adam)?;
        let (_, g_down) = loss_and_grads(tree, inputs, enc, false)?;
        adam_step(&mut enc.down.tensors_mut(), &g_down, &mut down_state, &adam)?;
    }
    let (final_loss, _) = loss_and_grads(tree, inputs, enc, true)?;
    losses.push(final_loss);
    Ok(BprTrainReport {
        losses,
        epochs: cfg.max_epochs,
        converged: final_loss < cfg.stop_below,
        final_loss,
    })
}

/// Final code representations, label rows only (`L x d_e`).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeRepr {
    pub vt: Tensor,
    pub vp: Tensor,
    pub vpt: Tensor,
}

pub fn combine(vt: &Tensor, vp: &Tensor) -> Result<Tensor> {
    vt.add(vp)
}

/// `Vt = (i_up + i_down) / 2` on the label rows; on the tape so joint
/// training can differentiate through it.
pub fn vt_on_tape(tape: &mut Tape<'_>, tree: &CodeTree, inits: Var, positions: Var, up: &BlockVars, down: &BlockVars) -> Result<(Var, Var)> {
    let out = run_passes(tape, tree, inits, positions, up, down)?;
    let s = tape.add(out.up, out.down)?;
    let s = label_rows(tape, s)?;
    Ok((tape.scale(s, 0.5)?, out.loss))
}

pub fn code_repr(tree: &CodeTree, inputs: &TreeInputs, enc: &BprEncoders) -> Result<CodeRepr> {
    let mut tape = Tape::new();
    let i = tape.constant_ref(&inputs.inits)?;
    let p = tape.constant_ref(&inputs.positions)?;
    let uv = enc.up.on_tape(&mut tape, false)?;
    let dv = enc.down.on_tape(&mut tape, false)?;
    let (vt, _) = vt_on_tape(&mut tape, tree, i, p, &uv, &dv)?;
    let vt = tape.value(vt).clone();
    let vp = inputs.positions.slice_rows(1, tree.len() - 1);
    let vpt = combine(&vt, &vp)?;
    Ok(CodeRepr { vt, vp, vpt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_tree() -> CodeTree {
        CodeTree::build(&[
            ("100", "fever of unknown origin"),
            ("100.1", "fever acute"),
            ("100.2", "fever chronic"),
            ("100.3", "fever recurrent"),
            ("101", "cough"),
        ])
        .unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Tensor {
        init::uniform(rng, r, c, s)
    }

    fn inputs(rng: &mut ChaCha8Rng, tree: &CodeTree, d: usize) -> TreeInputs {
        let desc = DescEmbedding::build(rng, tree, d);
        let inits = code_inits(tree, &desc).unwrap();
        let positions = node_positions(tree, &PosProjection::orthonormal(rng, d, 3 * 2), 3, 2).unwrap();
        TreeInputs::new(tree, inits, positions).unwrap()
    }

    /// Plain-loop reference of one block over a set of rows.
    fn block_oracle(b: &Block, x: &Tensor) -> Tensor {
        let (m, d) = x.shape();
        let mm = |a: &Tensor, w: &Tensor| {
            let mut o = Tensor::zeros(a.rows(), w.cols());
            for i in 0..a.rows() {
                for j in 0..w.cols() {
                    let mut s = 0.0;
                    for k in 0..a.cols() {
                        s += a.get(i, k) * w.get(k, j);
                    }
                    o.set(i, j, s);
                }
            }
            o
        };
        let (q, k, v) = (mm(x, &b.wq), mm(x, &b.wk), mm(x, &b.wv));
        let mut att = Tensor::zeros(m, m);
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / libm::sqrt(d as f64))
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| libm::exp(s - mx)).sum();
            for j in 0..m {
                att.set(i, j, libm::exp(scores[j] - mx) / z);
            }
        }
        let y = x.add(&mm(&mm(&att, &v), &b.wo)).unwrap();
        let mut h = mm(&y, &b.w1);
        for i in 0..m {
            for j in 0..d {
                h.set(i, j, (h.get(i, j) + b.b1.get(0, j)).max(0.0));
            }
        }
        let mut f = mm(&h, &b.w2);
        for i in 0..m {
            for j in 0..d {
                f.set(i, j, f.get(i, j) + b.b2.get(0, j));
            }
        }
        y.add(&f).unwrap()
    }

    fn run_block(b: &Block, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bv = b.on_tape(&mut tape, false).unwrap();
        let xv = tape.constant_ref(x).unwrap();
        let o = bv.forward(&mut tape, xv).unwrap();
        tape.value(o).clone()
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 3, 4, 1.0);
        assert_eq!(run_block(&Block::zeros(4), &x), x);
    }

    #[test]
    fn block_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Block::init(&mut rng, 5);
        let x = random(&mut rng, 3, 5, 1.0);
        assert!(run_block(&b, &x).max_abs_diff(&block_oracle(&b, &x)).unwrap() < 1e-12);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Block::init(&mut rng, 4);
        let x = random(&mut rng, 4, 4, 1.0);
        let perm = [2, 0, 3, 1];
        let y = run_block(&b, &x);
        let yp = run_block(&b, &x.select_rows(&perm));
        assert!(yp.max_abs_diff(&y.select_rows(&perm)).unwrap() < 1e-12);
    }

    #[test]
    fn rowwise_equals_singleton_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Block::init(&mut rng, 4);
        let x = random(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new();
        let bv = b.on_tape(&mut tape, false).unwrap();
        let xv = tape.constant_ref(&x).unwrap();
        let o = bv.forward_rowwise(&mut tape, xv).unwrap();
        for r in 0..3 {
            let single = run_block(&b, &x.slice_rows(r, 1));
            assert!(single.row(0).iter().zip(tape.value(o).row(r)).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn passes_match_scripted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tree = toy_tree();
        let d = 4;
        let inp = inputs(&mut rng, &tree, d);
        let enc = BprEncoders::init(&mut rng, d);
        let mut tape = Tape::new();
        let i = tape.constant_ref(&inp.inits).unwrap();
        let p = tape.constant_ref(&inp.positions).unwrap();
        let uv = enc.up.on_tape(&mut tape, false).unwrap();
        let dv = enc.down.on_tape(&mut tape, false).unwrap();
        let u = up_pass(&mut tape, &tree, i, p, &uv).unwrap();
        let dn = down_pass(&mut tape, &tree, i, p, &dv, u).unwrap();
        let (u, dn) = (tape.value(u).clone(), tape.value(dn).clone());

        let x = inp.positions.add(&inp.inits).unwrap();
        for node in tree.nodes() {
            if node.children.is_empty() {
                continue;
            }
            let out = block_oracle(&enc.up, &x.select_rows(&node.children));
            for (r, &c) in node.children.iter().enumerate() {
                assert!(out.row(r).iter().zip(u.row(c)).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        let root_children = &tree.node(0).children;
        let mean = block_oracle(&enc.up, &x.select_rows(root_children));
        for c in 0..d {
            let m: f64 = (0..mean.rows()).map(|r| mean.get(r, c)).sum::<f64>() / mean.rows() as f64;
            assert!((u.get(0, c) - m).abs() < 1e-12);
        }
        assert_eq!(dn.row(0), u.row(0));
        for idx in 1..tree.len() {
            let parent = tree.node(idx).parent.unwrap();
            let row: Vec<f64> = inp.positions.row(parent).iter().zip(inp.inits.row(idx)).map(|(a, b)| a + b).collect();
            let o = block_oracle(&enc.down, &Tensor::row_vector(row));
            assert!(o.row(0).iter().zip(dn.row(idx)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_down_encoder_adds_parent_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = toy_tree();
        let inp = inputs(&mut rng, &tree, 3);
        let enc = BprEncoders::zeros(3);
        let mut tape = Tape::new();
        let i = tape.constant_ref(&inp.inits).unwrap();
        let p = tape.constant_ref(&inp.positions).unwrap();
        let uv = enc.up.on_tape(&mut tape, false).unwrap();
        let dv = enc.down.on_tape(&mut tape, false).unwrap();
        let u = up_pass(&mut tape, &tree, i, p, &uv).unwrap();
        let dn = down_pass(&mut tape, &tree, i, p, &dv, u).unwrap();
        let idx = tree.index_of("100.2").unwrap();
        let parent = tree.index_of("100").unwrap();
        let want: Vec<f64> = inp.positions.row(parent).iter().zip(inp.inits.row(idx)).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(dn).row(idx), want.as_slice());
    }

    #[test]
    fn inits_average_description_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tree = toy_tree();
        let desc = DescEmbedding::build(&mut rng, &tree, 3);
        let inits = code_inits(&tree, &desc).unwrap();
        assert_eq!(inits.row(0), &[0.0; 3]);
        let idx = tree.index_of("100.1").unwrap();
        let (a, b) = (desc.vocab["fever"], desc.vocab["acute"]);
        for c in 0..3 {
            let m = (desc.table.get(a, c) + desc.table.get(b, c)) / 2.0;
            assert!((inits.get(idx, c) - m).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random(&mut rng, 4, 6, 2.0);
        let d = random(&mut rng, 4, 6, 2.0);
        assert_eq!(bpr_loss_value(&u, &u).unwrap(), 0.0);
        let a = bpr_loss_value(&u, &d).unwrap();
        let b = bpr_loss_value(&d, &u).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn two_dim_hand_case() {
        // Logits whose softmax is (0.9, 0.1) and (0.5, 0.5).
        let up = Tensor::row_vector(vec![libm::log(0.9), libm::log(0.1)]);
        let down = Tensor::row_vector(vec![0.0, 0.0]);
        let kl = |p: [f64; 2], q: [f64; 2]| -> f64 {
            (0..2).map(|i| p[i] * (libm::log(p[i] + KL_FLOOR) - libm::log(q[i] + KL_FLOOR))).sum()
        };
        let l1 = kl([0.9, 0.1], [0.5, 0.5]);
        let l2 = kl([0.5, 0.5], [0.9, 0.1]);
        let want = l1 + l2 + (l1 - l2) * (l1 - l2);
        assert!((bpr_loss_value(&up, &down).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random(&mut rng, 3, 4, 1.0);
        let d = random(&mut rng, 3, 4, 1.0);
        let r = grad_check(|t, v| bpr_loss(t, v[0], v[1]), &[u, d], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn encoder_gradients_check_through_both_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tree = toy_tree();
        let inp = inputs(&mut rng, &tree, 3);
        let enc = BprEncoders::init(&mut rng, 3);
        let mut params: Vec<Tensor> = enc.up.tensors().into_iter().cloned().collect();
        params.extend(enc.down.tensors().into_iter().cloned());
        let r = grad_check(
            |t, v| {
                let i = t.constant(inp.inits.clone())?;
                let p = t.constant(inp.positions.clone())?;
                let up = BlockVars(v[..8].try_into().unwrap());
                let dn = BlockVars(v[8..].try_into().unwrap());
                Ok(run_passes(t, &tree, i, p, &up, &dn)?.loss)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn aligned_encoders_stop_immediately() {
        let tree = toy_tree();
        let n = tree.len();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inp = TreeInputs::new(&tree, random(&mut rng, n, 3, 1.0), Tensor::zeros(n, 3)).unwrap();
        let mut enc = BprEncoders::zeros(3);
        let before = enc.clone();
        let rep = train_bpr(&tree, &inp, &mut enc, &BprConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.epochs, 0);
        assert!(rep.final_loss < 0.01);
        assert_eq!(enc, before);
    }

    #[test]
    fn training_reduces_loss_on_twenty_nodes() {
        let codes: Vec<(String, String)> = (0..4)
            .flat_map(|g| {
                let mut v = vec![(alloc::format!("{}", 200 + g), alloc::format!("group {g}"))];
                for c in 0..4 {
                    v.push((alloc::format!("{}.{}", 200 + g, c), alloc::format!("group {g} item {c}")));
                }
                v
            })
            .collect();
        let tree = CodeTree::build(&codes).unwrap();
        assert_eq!(tree.len(), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let desc = DescEmbedding::build(&mut rng, &tree, d);
        let inits = code_inits(&tree, &desc).unwrap();
        let positions = node_positions(&tree, &PosProjection::orthonormal(&mut rng, d, 8), 4, 2).unwrap();
        let inp = TreeInputs::new(&tree, inits, positions).unwrap();
        let mut enc = BprEncoders::init(&mut rng, d);
        let cfg = BprConfig {
            lr: 1e-3,
            max_epochs: 10,
            stop_below: 0.0,
        };
        let rep = train_bpr(&tree, &inp, &mut enc, &cfg).unwrap();
        assert!(!rep.converged);
        for w in rep.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", rep.losses);
        }
        assert!(rep.final_loss < rep.losses[0]);

        let mut enc2 = BprEncoders::init(&mut ChaCha8Rng::seed_from_u64(12), d);
        let full = train_bpr(&tree, &inp, &mut enc2, &BprConfig::default()).unwrap();
        assert!(full.converged, "{}", full.final_loss);
        let stop_at = full.losses.iter().position(|&l| l < 0.01).unwrap();
        assert_eq!(stop_at, full.losses.len() - 1);
    }

    #[test]
    fn combine_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&mut rng, 3, 2, 1.0);
        let b = random(&mut rng, 3, 2, 1.0);
        let z = Tensor::zeros(3, 2);
        assert_eq!(combine(&a, &z).unwrap(), a);
        assert_eq!(combine(&z, &b).unwrap(), b);
        let s = combine(&a, &b).unwrap();
        for i in 0..6 {
            assert_eq!(s.data()[i], a.data()[i] + b.data()[i]);
        }
        assert!(combine(&a, &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn code_repr_is_deterministic_and_sized() {
        let tree = toy_tree();
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let inp = inputs(&mut rng, &tree, 4);
            let enc = BprEncoders::init(&mut rng, 4);
            code_repr(&tree, &inp, &enc).unwrap()
        };
        let a = build();
        assert_eq!(a.vpt.shape(), (tree.num_labels(), 4));
        assert_eq!(a, build());
    }
}
