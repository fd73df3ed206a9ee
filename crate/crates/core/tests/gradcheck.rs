//! Central finite-difference checks of every differentiable operation at f64.

mod common;

use common::{cases, over_seeds, FD_TOLERANCE};

macro_rules! gradcheck_test {
    ($name:ident) => {
        #[test]
        fn $name() {
            let worst = over_seeds(cases::$name);
            assert!(worst < FD_TOLERANCE, "{}: worst relative error {worst:e}", stringify!($name));
        }
    };
}

gradcheck_test!(matmul);
gradcheck_test!(conv2d);
gradcheck_test!(conv2d_stride1);
gradcheck_test!(transposed_conv2d);
gradcheck_test!(linear_layer);
gradcheck_test!(relu);
gradcheck_test!(softmax);
gradcheck_test!(attention_kernel);
gradcheck_test!(multi_head);
gradcheck_test!(reparameterize_op);
gradcheck_test!(reconstruction_loss);
gradcheck_test!(kl_loss);

#[test]
fn matmul_gradient_of_sum_is_ones() {
    use bvae::tensor::{Tape, Tensor};
    let mut t = Tape::<f64>::new();
    let a = t.param(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap().to_f64(), vec![1.0; 4]);
}

#[test]
fn reparameterize_log_var_gradient_is_half_sigma_eps() {
    use bvae::model::{reparameterize, LatentGaussian};
    use bvae::tensor::{Tape, Tensor};
    let (mu, lv, eps) = ([0.3, -1.2, 2.0], [0.5, -1.0, 1.4], [0.7, -0.4, 1.1]);
    let mut t = Tape::<f64>::new();
    let g = LatentGaussian {
        mu: t.param(Tensor::from_f64(&[1, 3], &mu).unwrap()),
        log_var: t.param(Tensor::from_f64(&[1, 3], &lv).unwrap()),
    };
    let z = reparameterize(&mut t, &g, Tensor::from_f64(&[1, 3], &eps).unwrap()).unwrap();
    let s = t.sum(z).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(g.mu).unwrap().to_f64(), vec![1.0; 3]);
    let glv = t.grad(g.log_var).unwrap().to_f64();
    for j in 0..3 {
        let expected = 0.5 * (0.5 * lv[j]).exp() * eps[j];
        assert!((glv[j] - expected).abs() < 1e-12, "{j}: {} vs {expected}", glv[j]);
    }
}
