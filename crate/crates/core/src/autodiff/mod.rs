//! Reverse-mode differentiation over dense two-dimensional tensors.
//!
//! The primitive set is deliberately small: exactly what the document
//! encoder, the hierarchy encoders and the prediction head need. There is no
//! implicit broadcasting; row biases go through [`Tape::add_row`].
//!
//! Subgradient conventions: `relu'(0) = 0`, and `max` routes the gradient to
//! the lowest index among ties.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use tape::{bce_value, sigmoid, softmax_rows, Axis, Gradients, LinearOperator, Tape, Var, BCE_CLAMP};

use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Inverted-dropout mask: kept entries are scaled by `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, rate: f64) -> Option<Tensor> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        if rng.gen::<f64>() < keep {
            *v = 1.0 / keep;
        }
    }
    Some(t)
}

/// Central-difference checks of every differentiable primitive over `trials`
/// random draws. Returns the worst relative error per primitive.
pub fn primitive_grad_checks(seed: u64, trials: usize, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(r, c, data).expect("length matches shape")
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for _ in 0..trials {
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 4, 2);
        let pos = a.map(|v| v.abs() + 0.5);
        let x = rand_tensor(&mut rng, 6, 2);
        let cw = rand_tensor(&mut rng, 3 * 2, 3);
        let bias = rand_tensor(&mut rng, 1, 4);
        // Output weights keep sums from collapsing symmetric gradients.
        let o34 = rand_tensor(&mut rng, 3, 4);
        macro_rules! check {
            ($name:expr, $params:expr, $f:expr) => {{
                let r = grad_check($f, $params, eps)?;
                match worst.iter_mut().find(|(n, _)| *n == $name) {
                    Some(w) => w.1 = w.1.max(r.max_rel_err),
                    None => worst.push(($name, r.max_rel_err)),
                }
            }};
        }
        let weighted = |t: &mut Tape<'_>, v: Var, o: &Tensor| -> Result<Var> {
            let ov = t.constant(o.clone())?;
            let m = t.mul(v, ov)?;
            t.sum(m)
        };
        check!("matmul", &[a.clone(), w.clone()], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            t.sum(m)
        });
        check!("matmul_nt", &[a.clone(), b.clone()], |t, v| {
            let m = t.matmul_t(v[0], false, v[1], true)?;
            t.sum(m)
        });
        check!("matmul_tn", &[a.clone(), b.clone()], |t, v| {
            let m = t.matmul_t(v[0], true, v[1], false)?;
            t.sum(m)
        });
        check!("add", &[a.clone(), b.clone()], |t, v| {
            let m = t.add(v[0], v[1])?;
            weighted(t, m, &o34)
        });
        check!("sub", &[a.clone(), b.clone()], |t, v| {
            let m = t.sub(v[0], v[1])?;
            weighted(t, m, &o34)
        });
        check!("mul", &[a.clone(), b.clone()], |t, v| {
            let m = t.mul(v[0], v[1])?;
            t.sum(m)
        });
        check!("scale", &[a.clone()], |t, v| {
            let m = t.scale(v[0], -1.7)?;
            weighted(t, m, &o34)
        });
        check!("add_row", &[a.clone(), bias.clone()], |t, v| {
            let m = t.add_row(v[0], v[1])?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
        check!("concat_rows", &[a.clone(), b.clone()], |t, v| {
            let m = t.concat_rows(&[v[0], v[1]])?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
        check!("concat_cols", &[a.clone(), b.clone()], |t, v| {
            let m = t.concat_cols(&[v[0], v[1]])?;
            let m = t.tanh(m)?;
            t.sum(m)
        });
        check!("slice", &[a.clone()], |t, v| {
            let m = t.slice(v[0], 1, 2, 1, 3)?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
        check!("conv1d", &[x.clone(), cw.clone()], |t, v| {
            let m = t.conv1d(v[0], v[1], 3)?;
            let m = t.tanh(m)?;
            t.sum(m)
        });
        check!("relu", &[a.clone()], |t, v| {
            let m = t.relu(v[0])?;
            weighted(t, m, &o34)
        });
        check!("tanh", &[a.clone()], |t, v| {
            let m = t.tanh(v[0])?;
            weighted(t, m, &o34)
        });
        check!("sigmoid", &[a.clone()], |t, v| {
            let m = t.sigmoid(v[0])?;
            weighted(t, m, &o34)
        });
        check!("softmax", &[a.clone()], |t, v| {
            let m = t.softmax_rows(v[0])?;
            weighted(t, m, &o34)
        });
        check!("max_rows", &[a.clone()], |t, v| {
            let m = t.max(v[0], Axis::Rows)?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
        check!("max_cols", &[a.clone()], |t, v| {
            let m = t.max(v[0], Axis::Cols)?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
        check!("mean", &[a.clone()], |t, v| {
            let m = t.mul(v[0], v[0])?;
            t.mean(m)
        });
        check!("log", &[pos.clone()], |t, v| {
            let m = t.log(v[0])?;
            weighted(t, m, &o34)
        });
        check!("transpose", &[a.clone()], |t, v| {
            let m = t.transpose(v[0])?;
            let m = t.matmul(m, v[0])?;
            t.sum(m)
        });
        check!("gather", &[a.clone()], |t, v| {
            let m = t.gather(v[0], &[Some(2), None, Some(0), Some(2)])?;
            let m = t.mul(m, m)?;
            t.sum(m)
        });
        check!("row_dot", &[a.clone(), b.clone()], |t, v| {
            let m = t.row_dot(v[0], v[1])?;
            let m = t.tanh(m)?;
            t.sum(m)
        });
        let probs = a.map(|v| 0.1 + 0.8 * (v + 1.0) / 2.0);
        let gold: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        check!("bce", &[probs], |t, v| t.bce(v[0], &gold));
        let mask = dropout_mask(&mut rng, 3, 4, 0.2);
        check!("dropout", &[a.clone()], |t, v| {
            let m = t.dropout(v[0], mask.clone())?;
            weighted(t, m, &o34)
        });
    }
    Ok(worst)
}
