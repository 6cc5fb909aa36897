//! Code-wise attention, aggregation and per-code scoring.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{shape_err, Result};
use crate::init;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d_h x d_e`.
    pub w_a: Tensor,
    /// `1 x d_e`.
    pub b_a: Tensor,
    /// `2*d_e x d_e`, shared by all codes.
    pub w_fc: Tensor,
    /// `L x d_e`.
    pub score_vecs: Tensor,
    /// `L x 1`.
    pub score_bias: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_h: usize, d_e: usize, labels: usize) -> Self {
        Self {
            w_a: init::xavier(rng, d_h, d_e),
            b_a: Tensor::zeros(1, d_e),
            w_fc: init::xavier(rng, 2 * d_e, d_e),
            score_vecs: init::xavier(rng, labels, d_e),
            score_bias: Tensor::zeros(labels, 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_a: Var,
    pub b_a: Var,
    pub w_fc: Var,
    pub score_vecs: Var,
    pub score_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `N x d_e` projected document map `tanh(H W_a + b_a)`.
    pub z: Var,
    /// `L x N`, rows sum to one.
    pub weights: Var,
    /// `L x d_e`.
    pub araw: Var,
}

/// Per-code softmax attention of `Vpt` (`L x d_e`) over the positions of `H`.
pub fn code_wise_attention(tape: &mut Tape<'_>, h: Var, vpt: Var, w_a: Var, b_a: Var) -> Result<Attention> {
    let z = tape.matmul(h, w_a)?;
    let z = tape.add_row(z, b_a)?;
    let z = tape.tanh(z)?;
    let scores = tape.matmul_t(vpt, false, z, true)?;
    let weights = tape.softmax_rows(scores)?;
    let araw = tape.matmul(weights, z)?;
    Ok(Attention { z, weights, araw })
}

/// `F = [P | PPR] W_fc`, `logit_l = score_vecs_l . F_l + score_bias_l`.
pub fn aggregate(tape: &mut Tape<'_>, p: Var, ppr: Var, w_fc: Var, score_vecs: Var, score_bias: Var) -> Result<Var> {
    if tape.value(p).shape() != tape.value(ppr).shape() {
        return Err(shape_err("aggregate", tape.value(p).shape(), tape.value(ppr).shape()));
    }
    let p3r = tape.concat_cols(&[p, ppr])?;
    let f = tape.matmul(p3r, w_fc)?;
    let dots = tape.row_dot(f, score_vecs)?;
    tape.add(dots, score_bias)
}

/// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
pub fn bce_loss(tape: &mut Tape<'_>, logits: Var, gold: &[f64]) -> Result<(Var, Var)> {
    let probs = tape.sigmoid(logits)?;
    let loss = tape.bce(probs, gold)?;
    Ok((probs, loss))
}

/// Maps candidate per-code features to logits without recording anything.
pub trait Scorer {
    fn logits(&self, p: &Tensor) -> Result<Vec<f64>>;
}

/// The aggregation head with a frozen propagated branch.
pub struct HeadScorer<'a> {
    pub ppr: &'a Tensor,
    pub w_fc: &'a Tensor,
    pub score_vecs: &'a Tensor,
    pub score_bias: &'a Tensor,
}

impl Scorer for HeadScorer<'_> {
    fn logits(&self, p: &Tensor) -> Result<Vec<f64>> {
        if p.shape() != self.ppr.shape() {
            return Err(shape_err("head scorer", p.shape(), self.ppr.shape()));
        }
        let d = p.cols();
        let top = self.w_fc.slice_rows(0, d);
        let bottom = self.w_fc.slice_rows(d, d);
        let mut f = p.matmul(&top)?;
        f.add_assign(&self.ppr.matmul(&bottom)?)?;
        Ok((0..p.rows())
            .map(|l| {
                f.row(l).iter().zip(self.score_vecs.row(l)).map(|(a, b)| a * b).sum::<f64>()
                    + self.score_bias.get(l, 0)
            })
            .collect())
    }
}

pub fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        init::uniform(rng, r, c, 1.0)
    }

    #[test]
    fn single_position_attention_is_the_projected_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, vpt, w, b) = (rnd(&mut rng, 1, 5), rnd(&mut rng, 3, 4), rnd(&mut rng, 5, 4), rnd(&mut rng, 1, 4));
        let mut t = Tape::new();
        let vs = [&h, &vpt, &w, &b].map(|x| t.constant_ref(x).unwrap());
        let a = code_wise_attention(&mut t, vs[0], vs[1], vs[2], vs[3]).unwrap();
        assert_eq!(t.value(a.weights).data(), &[1.0, 1.0, 1.0]);
        for l in 0..3 {
            assert_eq!(t.value(a.araw).row(l), t.value(a.z).row(0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, vpt, w, b) = (rnd(&mut rng, 7, 5), rnd(&mut rng, 4, 3), rnd(&mut rng, 5, 3), rnd(&mut rng, 1, 3));
        let mut t = Tape::new();
        let vs = [&h, &vpt, &w, &b].map(|x| t.constant_ref(x).unwrap());
        let a = code_wise_attention(&mut t, vs[0], vs[1], vs[2], vs[3]).unwrap();
        let s = t.value(a.weights);
        for l in 0..4 {
            assert!((s.row(l).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        let h = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, -1.0]]).unwrap();
        let vpt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let w = Tensor::identity(2);
        let b = Tensor::zeros(1, 2);
        let mut t = Tape::new();
        let vs = [&h, &vpt, &w, &b].map(|x| t.constant_ref(x).unwrap());
        let a = code_wise_attention(&mut t, vs[0], vs[1], vs[2], vs[3]).unwrap();
        let z = [[libm::tanh(0.5), 0.0], [0.0, libm::tanh(-1.0)]];
        for (l, v) in [[1.0, 0.0], [0.0, 2.0]].iter().enumerate() {
            let s: Vec<f64> = z.iter().map(|zr| zr[0] * v[0] + zr[1] * v[1]).collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|x| libm::exp(x - m)).collect();
            let w: Vec<f64> = e.iter().map(|x| x / (e[0] + e[1])).collect();
            for c in 0..2 {
                let want = w[0] * z[0][c] + w[1] * z[1][c];
                assert!((t.value(a.araw).get(l, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_features_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = HeadParams::init(&mut rng, 4, 3, 5);
        let zeros = Tensor::zeros(5, 3);
        let mut t = Tape::new();
        let pv = t.constant_ref(&zeros).unwrap();
        let w = t.param(&p.w_fc).unwrap();
        let sv = t.param(&p.score_vecs).unwrap();
        let sb = t.param(&p.score_bias).unwrap();
        let logits = aggregate(&mut t, pv, pv, w, sv, sb).unwrap();
        let (probs, _) = bce_loss(&mut t, logits, &[0.0; 5]).unwrap();
        assert_eq!(t.value(probs).data(), &[0.5; 5]);
    }

    #[test]
    fn zeroed_score_vector_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = HeadParams::init(&mut rng, 4, 3, 2);
        p.score_vecs.row_mut(1).fill(0.0);
        p.score_bias.set(1, 0, 0.7);
        for _ in 0..3 {
            let feats = rnd(&mut rng, 2, 3);
            let s = HeadScorer {
                ppr: &feats,
                w_fc: &p.w_fc,
                score_vecs: &p.score_vecs,
                score_bias: &p.score_bias,
            };
            assert_eq!(s.logits(&feats).unwrap()[1], 0.7);
        }
    }

    #[test]
    fn scorer_matches_tape_and_hand_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = HeadParams::init(&mut rng, 4, 2, 2);
        let (pf, ppr) = (rnd(&mut rng, 2, 2), rnd(&mut rng, 2, 2));
        let mut t = Tape::new();
        let a = t.constant_ref(&pf).unwrap();
        let b = t.constant_ref(&ppr).unwrap();
        let w = t.param(&p.w_fc).unwrap();
        let sv = t.param(&p.score_vecs).unwrap();
        let sb = t.param(&p.score_bias).unwrap();
        let logits = aggregate(&mut t, a, b, w, sv, sb).unwrap();
        let s = HeadScorer {
            ppr: &ppr,
            w_fc: &p.w_fc,
            score_vecs: &p.score_vecs,
            score_bias: &p.score_bias,
        };
        let pure = s.logits(&pf).unwrap();
        for l in 0..2 {
            let cat = [pf.get(l, 0), pf.get(l, 1), ppr.get(l, 0), ppr.get(l, 1)];
            let mut want = p.score_bias.get(l, 0);
            for j in 0..2 {
                let fj: f64 = (0..4).map(|i| cat[i] * p.w_fc.get(i, j)).sum();
                want += fj * p.score_vecs.get(l, j);
            }
            assert!((pure[l] - want).abs() < 1e-14);
            assert!((t.value(logits).get(l, 0) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_left_block_scores_p_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut p = HeadParams::init(&mut rng, 4, d, 2);
        let mut w = Tensor::zeros(2 * d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        p.w_fc = w;
        let pf = rnd(&mut rng, 2, d);
        let score = |ppr: &Tensor| {
            HeadScorer {
                ppr,
                w_fc: &p.w_fc,
                score_vecs: &p.score_vecs,
                score_bias: &p.score_bias,
            }
            .logits(&pf)
            .unwrap()
        };
        assert_eq!(score(&rnd(&mut rng, 2, d)), score(&rnd(&mut rng, 2, d)));
    }

    #[test]
    fn bce_hand_cases() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(4, 1)).unwrap();
        let (_, l) = bce_loss(&mut t, logits, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((t.value(l).item() - 4.0 * core::f64::consts::LN_2).abs() < 1e-12);
        let probs = [0.9, 0.2, 0.6];
        let gold = [1.0, 0.0, 0.0];
        let want = -(libm::log(0.9) + libm::log(0.8) + libm::log(0.4));
        assert!((crate::autodiff::bce_value(&probs, &gold) - want).abs() < 1e-14);
        let exact = crate::autodiff::bce_value(&[1.0, 0.0], &[1.0, 0.0]);
        assert!(exact > 0.0 && exact < 1e-6);
    }
}
