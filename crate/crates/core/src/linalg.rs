//! Small dense helpers shared by the model and the losses.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

/// Rows per parallel work item. Fixed so results do not depend on the thread count.
const ROW_CHUNK: usize = 64;

/// `a · bᵀ`, parallel over fixed-size row blocks of `a`.
pub fn matmul_nt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, inner) = a.dim();
    assert_eq!(inner, b.ncols(), "matmul_nt inner dimension");
    let mut out = Array2::zeros((rows, b.nrows()));
    let bt = b.t();
    out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(chunk, mut block)| {
            let start = chunk * ROW_CHUNK;
            let stop = start + block.nrows();
            general_mat_mul(1.0, &a.slice(s![start..stop, ..]), &bt, 0.0, &mut block);
        });
    out
}

#[inline]
pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn row_norms(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.outer_iter().map(|r| dot(r, r).sqrt()).collect()
}

/// Frobenius norm squared.
pub fn sum_sq(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_nt_matches_dot() {
        let a = Array2::from_shape_fn((130, 5), |(i, j)| (i as f64 * 0.3 - j as f64).sin());
        let b = Array2::from_shape_fn((7, 5), |(i, j)| (i * j) as f64 * 0.1 - 0.2);
        let got = matmul_nt(a.view(), b.view());
        let want = a.dot(&b.t());
        assert_eq!(got, want);
    }

    #[test]
    fn norms() {
        let m = array![[3.0, 4.0], [0.0, 1.0]];
        assert_eq!(row_norms(m.view()), array![5.0, 1.0]);
        assert_eq!(sum_sq(m.view()), 26.0);
    }
}
