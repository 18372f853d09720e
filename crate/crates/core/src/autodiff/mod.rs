//! Minimal reverse-mode automatic differentiation over dense tensors:
//! enough to train the force-term network and the unrolled solver end to end.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{central_diff_grad, max_rel_err, NodeId, PadMode, Param, ParamStore, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::BoundaryCondition;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| r.gen_range(lo..hi)).collect())
            .unwrap()
    }

    #[test]
    fn sigmoid_relu_pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 1, 1, 3, vec![0.0, -3.0, 2.0]).unwrap());
        let s = tape.sigmoid(x);
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-15);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(1, 1, 4, 4, 1, -1.0, 1.0));
        let w = tape.input(Tensor::from_vec(1, 1, 1, 1, vec![1.0]).unwrap());
        let b = tape.input(Tensor::zeros(1, 1, 1, 1));
        let y = tape.conv2d(x, w, b, 1, PadMode::Zero(0)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_laplacian_kernel_zero_on_constant() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(1, 1, 5, 5, 2.0));
        let w = tape.input(
            Tensor::from_vec(1, 1, 3, 3, vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0])
                .unwrap(),
        );
        let b = tape.input(Tensor::zeros(1, 1, 1, 1));
        let y = tape.conv2d(x, w, b, 1, PadMode::Reflect(1)).unwrap();
        assert!(tape.value(y).max_abs() < 1e-15);
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_channels() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(1, 2, 4, 4));
        let w_even = tape.input(Tensor::zeros(1, 2, 2, 2));
        let b = tape.input(Tensor::zeros(1, 1, 1, 1));
        assert!(tape.conv2d(x, w_even, b, 1, PadMode::Zero(1)).is_err());
        let w_badc = tape.input(Tensor::zeros(1, 3, 3, 3));
        assert!(tape.conv2d(x, w_badc, b, 1, PadMode::Zero(1)).is_err());
    }

    /// Autodiff vs central differences through an arbitrary tape builder.
    fn gradcheck(
        build: &mut dyn FnMut(&mut Tape, NodeId) -> NodeId,
        x0: &Tensor,
        tol: f64,
    ) {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss, &mut store).unwrap();
        let got = grads[x].clone().expect("input must receive a gradient");
        let want = central_diff_grad(
            &mut |probe: &Tensor| {
                let mut t = Tape::new();
                let xi = t.input(probe.clone());
                let l = build(&mut t, xi);
                t.value(l).item()
            },
            x0,
            1e-5,
        );
        let err = max_rel_err(&got, &want);
        assert!(err <= tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn gradcheck_conv_weight_bias_and_input() {
        // gradient wrt input
        let x0 = rand_tensor(1, 2, 6, 6, 3, -1.0, 1.0);
        let w0 = rand_tensor(3, 2, 3, 3, 4, -0.5, 0.5);
        let b0 = rand_tensor(1, 3, 1, 1, 5, -0.5, 0.5);
        let zeros = Tensor::zeros(1, 3, 6, 6);
        gradcheck(
            &mut |tape, x| {
                let w = tape.input(w0.clone());
                let b = tape.input(b0.clone());
                let y = tape.conv2d(x, w, b, 1, PadMode::Zero(1)).unwrap();
                tape.l2(y, &zeros).unwrap()
            },
            &x0,
            1e-4,
        );
        // gradient wrt kernel (treat the kernel as the checked tensor)
        gradcheck(
            &mut |tape, w| {
                let x = tape.input(x0.clone());
                let b = tape.input(b0.clone());
                let y = tape.conv2d(x, w, b, 1, PadMode::Wrap(1)).unwrap();
                tape.l2(y, &zeros).unwrap()
            },
            &w0,
            1e-4,
        );
        // gradient wrt bias
        gradcheck(
            &mut |tape, b| {
                let x = tape.input(x0.clone());
                let w = tape.input(w0.clone());
                let y = tape.conv2d(x, w, b, 1, PadMode::Reflect(1)).unwrap();
                tape.l2(y, &zeros).unwrap()
            },
            &b0,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_pointwise_chain() {
        let x0 = rand_tensor(2, 1, 3, 4, 6, -1.5, 1.5);
        let target = rand_tensor(2, 1, 3, 4, 7, 0.0, 1.0);
        gradcheck(
            &mut |tape, x| {
                let s = tape.sigmoid(x);
                let sq = tape.square(s);
                let sm = tape.scalar_mul(0.7, sq);
                let wp = tape.well_prime(sm);
                tape.l2(wp, &target).unwrap()
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_mul_add_sub() {
        let x0 = rand_tensor(1, 2, 3, 3, 8, -1.0, 1.0);
        let other = rand_tensor(1, 2, 3, 3, 9, -1.0, 1.0);
        let zeros = Tensor::zeros(1, 2, 3, 3);
        gradcheck(
            &mut |tape, x| {
                let o = tape.input(other.clone());
                let m = tape.mul(x, o).unwrap();
                let a = tape.add(m, x).unwrap();
                let s = tape.sub(a, o).unwrap();
                tape.l2(s, &zeros).unwrap()
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_batch_norm_training() {
        let x0 = rand_tensor(2, 3, 4, 4, 10, -2.0, 2.0);
        let g0 = rand_tensor(1, 3, 1, 1, 11, 0.5, 1.5);
        let b0 = rand_tensor(1, 3, 1, 1, 12, -0.5, 0.5);
        let zeros = Tensor::zeros(2, 3, 4, 4);
        gradcheck(
            &mut |tape, x| {
                let g = tape.input(g0.clone());
                let b = tape.input(b0.clone());
                let (y, _, _) = tape.batch_norm_2d(x, g, b, 1e-5, true, None).unwrap();
                tape.l2(y, &zeros).unwrap()
            },
            &x0,
            1e-4,
        );
        // gamma path
        gradcheck(
            &mut |tape, g| {
                let x = tape.input(x0.clone());
                let b = tape.input(b0.clone());
                let (y, _, _) = tape.batch_norm_2d(x, g, b, 1e-5, true, None).unwrap();
                tape.l2(y, &zeros).unwrap()
            },
            &g0,
            1e-4,
        );
    }

    #[test]
    fn batch_norm_identity_on_normalized_input() {
        // already-normalized batch, gamma = 1, beta = 0 -> output == input
        let mut base = rand_tensor(1, 1, 4, 4, 13, -1.0, 1.0);
        let mean = base.data().iter().sum::<f64>() / 16.0;
        let var = base.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        for v in base.data_mut() {
            *v = (*v - mean) / var.sqrt();
        }
        let mut tape = Tape::new();
        let x = tape.input(base.clone());
        let g = tape.input(Tensor::filled(1, 1, 1, 1, 1.0));
        let b = tape.input(Tensor::zeros(1, 1, 1, 1));
        let (y, _, _) = tape.batch_norm_2d(x, g, b, 1e-9, true, None).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_and_upsample_shapes_and_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).shape(), (1, 1, 1, 1));
        assert_eq!(tape.value(p).item(), 4.0);
        let u = tape.upsample_nearest2(x);
        assert_eq!(tape.value(u).shape(), (1, 1, 4, 4));
        // upsample then maxpool recovers the original exactly
        let back = tape.maxpool2(u).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        // odd spatial size is rejected
        let odd = tape.input(Tensor::zeros(1, 1, 3, 4));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn gradcheck_pool_upsample_concat() {
        let x0 = rand_tensor(1, 2, 4, 4, 14, -1.0, 1.0);
        let other = rand_tensor(1, 1, 2, 2, 15, -1.0, 1.0);
        let zeros = Tensor::zeros(1, 3, 2, 2);
        gradcheck(
            &mut |tape, x| {
                let p = tape.maxpool2(x).unwrap();
                let o = tape.input(other.clone());
                let c = tape.concat_channels(p, o).unwrap();
                tape.l2(c, &zeros).unwrap()
            },
            &x0,
            1e-4,
        );
        let zeros_up = Tensor::zeros(1, 2, 8, 8);
        gradcheck(
            &mut |tape, x| {
                let u = tape.upsample_nearest2(x);
                tape.l2(u, &zeros_up).unwrap()
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_pde_nodes_both_bcs() {
        for bc in [BoundaryCondition::Periodic, BoundaryCondition::NeumannZeroFlux] {
            let x0 = rand_tensor(1, 1, 5, 5, 16, -0.5, 1.5);
            let zeros = Tensor::zeros(1, 1, 5, 5);
            gradcheck(
                &mut |tape, x| {
                    let l = tape.tfpm_laplacian_node(x, 1.3, 0.8, 1.0, bc, false).unwrap();
                    tape.l2(l, &zeros).unwrap()
                },
                &x0,
                1e-4,
            );
            gradcheck(
                &mut |tape, x| {
                    let l = tape.fdm_laplacian_node(x, 1.0, bc).unwrap();
                    tape.l2(l, &zeros).unwrap()
                },
                &x0,
                1e-4,
            );
        }
    }

    #[test]
    fn fdm_adjoint_kills_constant_cotangents() {
        // The transposed kernel also sums to zero under periodic bc, so a
        // constant shift of the residual leaves the input gradient unchanged.
        let mut store = ParamStore::new();
        let x0 = rand_tensor(1, 1, 6, 6, 18, -1.0, 1.0);
        let grad_for = |target: &Tensor, store: &mut ParamStore| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let lap = tape.fdm_laplacian_node(x, 1.0, BoundaryCondition::Periodic).unwrap();
            let loss = tape.l2(lap, target).unwrap();
            tape.backward(loss, store).unwrap()[x].clone().unwrap()
        };
        let g_shifted = grad_for(&Tensor::filled(1, 1, 6, 6, -0.5), &mut store);
        let g_zero = grad_for(&Tensor::zeros(1, 1, 6, 6), &mut store);
        for (a, b) in g_shifted.data().iter().zip(g_zero.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tfpm_constant_zero_input_paths() {
        // At u = 0 the output is identically zero and the center-path
        // derivative vanishes; the neighbor path carries lambda^2/den per arc.
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(1, 1, 4, 4));
        let l = tape
            .tfpm_laplacian_node(x, 1.0, 1.0, 1.0, BoundaryCondition::Periodic, false)
            .unwrap();
        assert!(tape.value(l).max_abs() == 0.0);
        let ones = Tensor::filled(1, 1, 4, 4, 1.0);
        let loss = tape.l2(l, &ones).unwrap(); // gradient framed against -1 residual
        let grads = tape.backward(loss, &mut store).unwrap();
        let g = grads[x].as_ref().unwrap();
        // finite-difference confirms the total gradient
        let want = central_diff_grad(
            &mut |probe| {
                let mut t = Tape::new();
                let xi = t.input(probe.clone());
                let li = t
                    .tfpm_laplacian_node(xi, 1.0, 1.0, 1.0, BoundaryCondition::Periodic, false)
                    .unwrap();
                let lo = t.l2(li, &ones).unwrap();
                t.value(lo).item()
            },
            &Tensor::zeros(1, 1, 4, 4),
            1e-5,
        );
        assert!(max_rel_err(g, &want) <= 1e-4);
        assert!(g.max_abs() > 0.0, "neighbor path must carry gradient");
    }

    #[test]
    fn losses_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::from_vec(1, 1, 1, 2, vec![0.5, 0.5]).unwrap());
        let t = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 1.0]).unwrap();
        let l = tape.bce(p, &t).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);

        let x = tape.input(Tensor::from_vec(1, 1, 1, 3, vec![0.3, 0.6, 0.9]).unwrap());
        let same = Tensor::from_vec(1, 1, 1, 3, vec![0.3, 0.6, 0.9]).unwrap();
        let l2 = tape.l2(x, &same).unwrap();
        assert_eq!(tape.value(l2).item(), 0.0);

        // perfect confident predictions drive bce to ~0
        let conf = tape.input(Tensor::from_vec(1, 1, 1, 2, vec![1.0 - 1e-7, 1e-7]).unwrap());
        let tgt = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let lb = tape.bce(conf, &tgt).unwrap();
        assert!(tape.value(lb).item() <= 1e-6);
    }

    #[test]
    fn gradcheck_losses() {
        let p0 = rand_tensor(1, 1, 3, 3, 19, 0.05, 0.95);
        let t = rand_tensor(1, 1, 3, 3, 20, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        for kind in 0..3 {
            let t = t.clone();
            gradcheck(
                &mut |tape, p| match kind {
                    0 => tape.bce(p, &t).unwrap(),
                    1 => tape.l2(p, &t).unwrap(),
                    _ => tape.hinge(p, &t).unwrap(),
                },
                &p0,
                1e-4,
            );
        }
    }

    #[test]
    fn backward_linear_in_cotangent() {
        // backward(a * loss) == a * backward(loss)
        let x0 = rand_tensor(1, 1, 4, 4, 21, -1.0, 1.0);
        let zeros = Tensor::zeros(1, 1, 4, 4);
        let mut store = ParamStore::new();
        let run = |scale: f64, store: &mut ParamStore| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let s = tape.sigmoid(x);
            let l = tape.l2(s, &zeros).unwrap();
            let scaled = tape.scalar_mul(scale, l);
            let grads = tape.backward(scaled, store).unwrap();
            grads[x].clone().unwrap()
        };
        let g1 = run(1.0, &mut store);
        let g3 = run(3.0, &mut store);
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!((3.0 * a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn replay_reproduces_losses_bit_identically() {
        let x0 = rand_tensor(2, 1, 6, 6, 22, -1.0, 1.0);
        let t = rand_tensor(2, 1, 6, 6, 23, 0.0, 1.0);
        let run = || -> f64 {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let s = tape.sigmoid(x);
            let l = tape.bce(s, &t).unwrap();
            tape.value(l).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn param_gradients_accumulate_into_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled(1, 1, 1, 1, 2.0));
        let mut tape = Tape::new();
        let wid = tape.param(&store, w);
        let sq = tape.square(wid);
        let loss = tape.l2(sq, &Tensor::scalar(0.0)).unwrap();
        tape.backward(loss, &mut store).unwrap();
        // d/dw (w^2)^2 = 4 w^3 = 32
        assert!((store.get(w).grad.item() - 32.0).abs() < 1e-12);
    }
}
