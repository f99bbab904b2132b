use proptest::prelude::*;
use semimoe_autograd::{Tape, Tensor, Var};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_are_distributions(x in values(2 * 3 * 2 * 2)) {
        let tape = Tape::new();
        let s = tape.constant(Tensor::new(&[2, 3, 2, 2], x)).softmax().value();
        let d = s.data();
        for b in 0..2 {
            for px in 0..4 {
                let total: f64 = (0..3).map(|c| d[b * 12 + c * 4 + px]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn gradient_of_a_linear_functional_is_its_coefficients(x in values(12), c in values(12)) {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[3, 4], x));
        let l = v.mul(tape.constant(Tensor::new(&[3, 4], c.clone()))).sum();
        let g = tape.backward(l).get_or_zeros(v);
        prop_assert_eq!(g.data(), c.as_slice());
    }

    #[test]
    fn square_gradient_is_twice_the_input(x in values(10)) {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[10], x.clone()));
        let g = tape.backward(v.square().sum()).get_or_zeros(v);
        for (gi, xi) in g.data().iter().zip(&x) {
            prop_assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_undoes_concat(a in values(2 * 2 * 3), b in values(2 * 3)) {
        let tape = Tape::new();
        let va = tape.constant(Tensor::new(&[2, 2, 3], a));
        let vb = tape.constant(Tensor::new(&[2, 1, 3], b));
        let joined = Var::concat(&[va, vb]);
        prop_assert_eq!(joined.shape(), vec![2, 3, 3]);
        prop_assert!(joined.narrow(0, 2).value().bit_eq(&va.value()));
        prop_assert!(joined.narrow(2, 1).value().bit_eq(&vb.value()));
    }

    #[test]
    fn convolution_is_linear_in_its_weights(
        x in values(2 * 5 * 5),
        w in values(3 * 2 * 3 * 3),
        k in -3.0f64..3.0,
    ) {
        let tape = Tape::new();
        let input = tape.constant(Tensor::new(&[1, 2, 5, 5], x));
        let weight = Tensor::new(&[3, 2, 3, 3], w);
        let bias = tape.constant(Tensor::zeros(&[3]));
        let base = input.conv2d(tape.constant(weight.clone()), bias, 1).value();
        let scaled = input.conv2d(tape.constant(weight.map(|v| v * k)), bias, 1).value();
        for (s, b) in scaled.data().iter().zip(base.data()) {
            prop_assert!((s - k * b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn pooling_then_upsampling_keeps_the_shape(x in values(4 * 6)) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(&[1, 1, 4, 6], x));
        let pooled = v.max_pool2();
        prop_assert_eq!(pooled.shape(), vec![1, 1, 2, 3]);
        let back = pooled.upsample2();
        prop_assert_eq!(back.shape(), vec![1, 1, 4, 6]);
        // each pooled value is the max of its window, so it dominates the input there
        let (pv, xv) = (back.value(), v.value());
        for (p, x) in pv.data().iter().zip(xv.data()) {
            prop_assert!(p >= x);
        }
    }
}
