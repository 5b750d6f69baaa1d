//! Dense tensors and tape-based reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{concat_last, dropout, gather_rows, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tensor::matmul_raw;


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
            let ab_c = matmul_raw(&matmul_raw(&a, &b).unwrap(), &c).unwrap();
            let a_bc = matmul_raw(&a, &matmul_raw(&b, &c).unwrap()).unwrap();
            let scale = ab_c.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(ab_c.max_abs_diff(&a_bc) / scale < 1e-9);
        }

        #[test]
        fn softmax_normalised(row in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
            let n = row.len();
            let tape = Tape::new();
            let x = Tensor::new(&[1, n], row).unwrap();
            let y = tape.constant(x.clone()).softmax_lastdim().value();
            prop_assert!((y.sum() - 1.0).abs() < 1e-9);
            let ys = tape.constant(x.map(|v| v + shift)).softmax_lastdim().value();
            prop_assert!(y.max_abs_diff(&ys) < 1e-12);
        }
    }
}
