//! Reverse-mode automatic differentiation over dense grids.
//!
//! A [`Tape`] records every primitive as it is evaluated. Leaves are either
//! parameters (which receive gradients) or constants (which never do).
//! `Tape::backward` walks the record once in reverse and returns a
//! [`Gradients`] map keyed by parameter handle.

mod kernels;
mod tape;

pub use tape::{trilinear_corners, Corners, Gradients, OpKind, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.param(Grid::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1], &[0.0]);
        let y = t.exp(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2, 4], &[3.0; 8]);
        let y = t.softmax(x, 1).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cumsum_by_hand() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let y = t.cumsum(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[1], &[3.0]);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softplus_gradient_at_zero_is_half() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[4], &[0.0; 4]);
        let y = t.softplus(x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unused_parameters_get_exact_zeros_and_constants_nothing() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut t, &[3], &[5.0; 3]);
        let c = t.constant(Grid::new([2], vec![4.0, 4.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Grid::zeros([2, 3]));
        let b = t.param(Grid::zeros([4]));
        assert!(matches!(t.add(a, b), Err(crate::Error::Contract { .. })));
    }

    #[test]
    fn non_finite_output_names_the_primitive() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[1], &[1.0]);
        let z = leaf(&mut t, &[1], &[0.0]);
        match t.div(a, z) {
            Err(crate::Error::NonFinite { op }) => assert_eq!(op, "div"),
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn broadcast_gradients_reduce_over_repeated_axes() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut t, &[2, 1], &[10.0, 20.0]);
        let y = t.mul(a, b).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.param(Grid::from_fn([3, 4, 5, 2], |i| (i as f32 * 0.37).sin()));
            let w = t.param(Grid::from_fn([3, 3, 3, 2, 3], |i| (i as f32 * 0.11).cos() * 0.2));
            let b = t.param(Grid::zeros([3]));
            let y = t.conv3d(x, w, b).unwrap();
            let y = t.softmax(y, 2).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
