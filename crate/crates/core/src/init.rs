//! Seeded parameter initializers.

use rand::Rng;

use crate::tensor::Tensor;

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.gen_range(-scale..=scale);
    }
    t
}

/// Glorot uniform for a `fan_in x fan_out` weight.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let scale = libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
    uniform(rng, fan_in, fan_out, scale)
}

/// Random matrix with orthonormal rows when `rows <= cols`, orthonormal
/// columns otherwise (modified Gram-Schmidt on uniform draws).
pub fn orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let transpose = rows > cols;
    let (count, dim) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut basis = Tensor::zeros(count, dim);
    let mut i = 0;
    while i < count {
        let mut v: alloc::vec::Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for j in 0..i {
            let b = basis.row(j);
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        // Degenerate draws are simply redrawn.
        if norm < 1e-6 {
            continue;
        }
        for (dst, x) in basis.row_mut(i).iter_mut().zip(&v) {
            *dst = x / norm;
        }
        i += 1;
    }
    if transpose {
        basis.transpose()
    } else {
        basis
    }
}
