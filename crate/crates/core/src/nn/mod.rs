//! Minimal CPU neural-network engine: NCHW tensors, layers with explicit
//! backward passes, and first-order optimizers.
//!
//! Convolutions lower to im2col + GEMM. Every layer is generic over
//! [`Scalar`] so the same graph can be instantiated in `f64` for
//! finite-difference gradient checks.

mod layers;
mod loss;
mod optim;
mod tensor;

pub use layers::{
    BatchNorm, Conv2d, ConvGeometry, DenseConcat, GlobalAvgPool, Layer, Linear, NamedSlots, Param,
    Pool2d, PoolKind, Relu, Residual, Sequential, Slot,
};
pub use loss::softmax_cross_entropy;
pub use optim::{Optimizer, OptimizerKind, OptimizerSettings};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod gradcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn randomize_params(layer: &mut dyn Layer<f64>, rng: &mut ChaCha8Rng) {
        let mut slots = Vec::new();
        layer.visit("", &mut slots);
        for (_, slot) in slots.iter_mut() {
            if slot.is_param() {
                for v in slot.value_mut().data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
    }

    /// Checks d(sum(w * layer(x)))/d(x, params) against central differences.
    fn check(layer: &mut dyn Layer<f64>, input_shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize_params(layer, &mut rng);
        let x = random_tensor(input_shape, &mut rng);
        let out_shape = layer.output_shape(input_shape);
        let w = random_tensor(&out_shape, &mut rng);
        let objective = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| -> f64 {
            let y = layer.forward(x, true);
            assert_eq!(y.shape(), &out_shape[..]);
            let v = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            // discard the cache from this probe
            layer.backward(&w);
            v
        };
        let y = layer.forward(&x, true);
        assert_eq!(y.shape(), &out_shape[..]);
        {
            let mut slots = Vec::new();
            layer.visit("", &mut slots);
            for (_, s) in slots.iter_mut() {
                if let Slot::Param(p) = s {
                    p.zero_grad();
                }
            }
        }
        let dx = layer.backward(&w);
        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        {
            let mut slots = Vec::new();
            layer.visit("", &mut slots);
            for (name, s) in slots.iter_mut() {
                if let Slot::Param(p) = s {
                    analytic.push((name.clone(), p.grad().unwrap().data().to_vec()));
                }
            }
        }
        let h = 1e-6;
        let close = |a: f64, n: f64, what: &str| {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(err < 1e-5, "{what}: analytic {a} numeric {n}");
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (objective(layer, &xp) - objective(layer, &xm)) / (2.0 * h);
            close(dx.data()[i], num, &format!("input[{i}]"));
        }
        for (pi, (name, grads)) in analytic.iter().enumerate() {
            for j in 0..grads.len() {
                let perturb = |layer: &mut dyn Layer<f64>, delta: f64| {
                    let mut slots = Vec::new();
                    layer.visit("", &mut slots);
                    let params: Vec<_> = slots.into_iter().filter(|(_, s)| s.is_param()).collect();
                    let (_, mut slot) = params.into_iter().nth(pi).unwrap();
                    slot.value_mut().data_mut()[j] += delta;
                };
                perturb(layer, h);
                let fp = objective(layer, &x);
                perturb(layer, -2.0 * h);
                let fm = objective(layer, &x);
                perturb(layer, h);
                close(grads[j], (fp - fm) / (2.0 * h), &format!("{name}[{j}]"));
            }
        }
    }

    #[test]
    fn conv_same_padding() {
        let mut l = Conv2d::new(2, 3, ConvGeometry { kernel: 3, stride: 1, pad: 1 }, true);
        check(&mut l, &[2, 2, 5, 4], 1);
    }

    #[test]
    fn conv_strided_no_bias() {
        let mut l = Conv2d::new(3, 2, ConvGeometry { kernel: 3, stride: 2, pad: 1 }, false);
        check(&mut l, &[2, 3, 6, 7], 2);
    }

    #[test]
    fn conv_wide_kernel_and_unpadded_stride() {
        let mut l = Conv2d::new(2, 2, ConvGeometry { kernel: 5, stride: 1, pad: 2 }, false);
        check(&mut l, &[1, 2, 6, 5], 16);
        let mut l = Conv2d::new(2, 3, ConvGeometry { kernel: 2, stride: 2, pad: 0 }, true);
        check(&mut l, &[2, 2, 5, 6], 17);
    }

    #[test]
    fn conv_pointwise() {
        let mut l = Conv2d::new(4, 3, ConvGeometry { kernel: 1, stride: 1, pad: 0 }, true);
        check(&mut l, &[3, 4, 3, 3], 3);
    }

    #[test]
    fn batch_norm_spatial_and_flat() {
        check(&mut BatchNorm::new(3), &[4, 3, 2, 3], 4);
        check(&mut BatchNorm::new(5), &[6, 5], 5);
    }

    #[test]
    fn linear() {
        check(&mut Linear::new(4, 3), &[5, 4], 6);
    }

    #[test]
    fn pools() {
        check(&mut Pool2d::new(PoolKind::Max, 2, 2, 0), &[2, 2, 4, 6], 7);
        check(&mut Pool2d::new(PoolKind::Max, 3, 2, 1), &[1, 2, 5, 5], 8);
        check(&mut Pool2d::new(PoolKind::Average, 3, 2, 1), &[2, 1, 5, 6], 9);
        check(&mut GlobalAvgPool::new(), &[2, 3, 3, 2], 10);
    }

    #[test]
    fn relu() {
        check(&mut Relu::new(), &[3, 7], 11);
    }

    #[test]
    fn residual_post_activation_with_projection() {
        let main = Sequential::new()
            .with("conv1", Conv2d::new(2, 3, ConvGeometry { kernel: 3, stride: 2, pad: 1 }, false))
            .with("bn1", BatchNorm::new(3));
        let proj = Sequential::new()
            .with("conv", Conv2d::new(2, 3, ConvGeometry { kernel: 1, stride: 2, pad: 0 }, false));
        let mut l = Residual::new(None, main, Some(proj), true);
        check(&mut l, &[3, 2, 4, 4], 12);
    }

    #[test]
    fn residual_pre_activation_identity() {
        let pre = Sequential::new().with("bn", BatchNorm::new(2)).with("relu", Relu::new());
        let main = Sequential::new()
            .with("conv1", Conv2d::new(2, 2, ConvGeometry { kernel: 3, stride: 1, pad: 1 }, true));
        let mut l = Residual::new(Some(pre), main, None, false);
        check(&mut l, &[2, 2, 3, 3], 13);
    }

    #[test]
    fn residual_pre_activation_projection() {
        let pre = Sequential::new().with("bn", BatchNorm::new(2)).with("relu", Relu::new());
        let main = Sequential::new()
            .with("conv1", Conv2d::new(2, 4, ConvGeometry { kernel: 3, stride: 1, pad: 1 }, true));
        let proj = Sequential::new()
            .with("conv", Conv2d::new(2, 4, ConvGeometry { kernel: 1, stride: 1, pad: 0 }, false));
        let mut l = Residual::new(Some(pre), main, Some(proj), false);
        check(&mut l, &[2, 2, 3, 3], 14);
    }

    #[test]
    fn dense_concat() {
        let body = Sequential::new()
            .with("bn", BatchNorm::new(2))
            .with("conv", Conv2d::new(2, 3, ConvGeometry { kernel: 3, stride: 1, pad: 1 }, false));
        check(&mut DenseConcat::new(body), &[2, 2, 3, 3], 15);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        // fresh running stats are (0, 1): eval output ~ input
        let y = bn.forward(&x, false);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        bn.forward(&x, true);
        let mut slots = Vec::new();
        bn.visit("bn", &mut slots);
        let mean = slots.iter().find(|(n, _)| n == "bn.running_mean").unwrap().1.value().data()[0];
        assert!((mean - 0.25).abs() < 1e-12);
    }
}
