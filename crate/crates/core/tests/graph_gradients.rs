//! Finite-difference verification of every tape operation.
//!
//! Each op is wrapped as scalar = sum(random_weights * op(x)) so the output
//! gradient seen by the op is non-uniform, then the analytic gradient of
//! every input is compared against central differences.

use hpgan_core::gradcheck::{max_rel_error, numerical_grad, FD_STEP};
use hpgan_core::graph::PadMode;
use hpgan_core::tensor::Tensor;
use hpgan_core::{Graph, RngStream, Var};
use ndarray::IxDyn;

fn rand_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(IxDyn(shape));
    for v in t.iter_mut() {
        *v = rng.uniform_range(lo, hi);
    }
    t
}

/// Uniform in [-1, 1] but at least `margin` away from `kink`, so FD probes
/// never cross a non-smooth point.
fn rand_tensor_away_from(rng: &mut RngStream, shape: &[usize], kink: f64, margin: f64) -> Tensor {
    let mut t = Tensor::zeros(IxDyn(shape));
    for v in t.iter_mut() {
        loop {
            let c = rng.uniform_range(-1.0, 1.0);
            if (c - kink).abs() > margin {
                *v = c;
                break;
            }
        }
    }
    t
}

/// Checks d(scalar)/d(x) where scalar = sum(w ⊙ f(x)).
fn check_unary<F>(name: &str, x0: &Tensor, seed: u64, f: F)
where
    F: Fn(&mut Graph, Var) -> Var,
{
    // probe forward once for the output shape
    let out_shape = {
        let mut g = Graph::new();
        let xv = g.constant(x0.clone());
        let y = f(&mut g, xv);
        g.value(y).shape().to_vec()
    };
    let mut wrng = RngStream::new(seed ^ 0xabcd_1234);
    let w = rand_tensor(&mut wrng, &out_shape, -1.0, 1.0);

    let eval = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv);
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv);
        let s = g.sum_all(p);
        g.scalar_value(s)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x0.clone());
    let y = f(&mut g, xv);
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv);
    let s = g.sum_all(p);
    g.backward(s);
    let analytic = g.grad(xv).expect("missing gradient").clone();

    let numeric = numerical_grad(eval, x0, FD_STEP);
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "{name}: max rel error {err:.3e}");
}

#[test]
fn elementwise_ops() {
    let mut rng = RngStream::new(11);
    let shape = [3, 7];
    let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
    let xpos = rand_tensor(&mut rng, &shape, 0.3, 2.0);
    let xkink = rand_tensor_away_from(&mut rng, &shape, 0.0, 0.05);

    check_unary("neg", &x, 1, |g, v| g.neg(v));
    check_unary("add_scalar", &x, 2, |g, v| g.add_scalar(v, 0.7));
    check_unary("mul_scalar", &x, 3, |g, v| g.mul_scalar(v, -1.3));
    check_unary("recip", &xpos, 4, |g, v| g.recip(v));
    check_unary("sqr", &x, 5, |g, v| g.sqr(v));
    check_unary("sqrt", &xpos, 6, |g, v| g.sqrt(v));
    check_unary("abs", &xkink, 7, |g, v| g.abs(v));
    check_unary("exp", &x, 8, |g, v| g.exp(v));
    check_unary("ln", &xpos, 9, |g, v| g.ln(v));
    check_unary("tanh", &x, 10, |g, v| g.tanh(v));
    check_unary("sigmoid", &x, 11, |g, v| g.sigmoid(v));
    check_unary("softmax", &x, 12, |g, v| g.softmax(v));
}

#[test]
fn kinked_ops_away_from_kink() {
    let mut rng = RngStream::new(13);
    let xk = rand_tensor_away_from(&mut rng, &[4, 6], 0.0, 0.05);
    check_unary("relu", &xk, 21, |g, v| g.relu(v));
    check_unary("leaky_relu", &xk, 22, |g, v| g.leaky_relu(v, 0.2));
    let mut rng2 = RngStream::new(14);
    let xm = rand_tensor_away_from(&mut rng2, &[4, 6], 0.25, 0.05);
    check_unary("max_scalar", &xm, 23, |g, v| g.max_scalar(v, 0.25));
}

#[test]
fn binary_elementwise_ops() {
    let mut rng = RngStream::new(15);
    let a0 = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let b0 = rand_tensor(&mut rng, &[3, 5], 0.4, 2.0);

    // wrt a with b fixed
    check_unary("add.lhs", &a0, 31, |g, v| {
        let bv = g.constant(b0.clone());
        g.add(v, bv)
    });
    check_unary("sub.lhs", &a0, 32, |g, v| {
        let bv = g.constant(b0.clone());
        g.sub(v, bv)
    });
    check_unary("mul.lhs", &a0, 33, |g, v| {
        let bv = g.constant(b0.clone());
        g.mul(v, bv)
    });
    check_unary("div.lhs", &a0, 34, |g, v| {
        let bv = g.constant(b0.clone());
        g.div(v, bv)
    });
    // wrt b with a fixed
    check_unary("sub.rhs", &b0, 35, |g, v| {
        let av = g.constant(a0.clone());
        g.sub(av, v)
    });
    check_unary("div.rhs", &b0, 36, |g, v| {
        let av = g.constant(a0.clone());
        g.div(av, v)
    });
}

#[test]
fn matmul_gradients() {
    let mut rng = RngStream::new(17);
    let a0 = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let b0 = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    check_unary("matmul.lhs", &a0, 41, |g, v| {
        let bv = g.constant(b0.clone());
        g.matmul(v, bv)
    });
    check_unary("matmul.rhs", &b0, 42, |g, v| {
        let av = g.constant(a0.clone());
        g.matmul(av, v)
    });

    let a3 = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let b3 = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    check_unary("bat_matmul.lhs", &a3, 43, |g, v| {
        let bv = g.constant(b3.clone());
        g.bat_matmul(v, bv)
    });
    check_unary("bat_matmul.rhs", &b3, 44, |g, v| {
        let av = g.constant(a3.clone());
        g.bat_matmul(av, v)
    });
}

#[test]
fn conv_gradients() {
    let mut rng = RngStream::new(19);
    // stride 1 pad 1 and stride 2 pad 1, both wrt x and w
    for (stride, pad, tag) in [(1usize, 1usize, 50u64), (2, 1, 60), (4, 0, 70)] {
        let kh = if stride == 4 { 4 } else { 3 };
        let x0 = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &[4, 3, kh, kh], -0.5, 0.5);
        check_unary("conv2d.x", &x0, tag + 1, |g, v| {
            let wv = g.constant(w0.clone());
            g.conv2d(v, wv, stride, pad)
        });
        check_unary("conv2d.w", &w0, tag + 2, |g, v| {
            let xv = g.constant(x0.clone());
            g.conv2d(xv, v, stride, pad)
        });
    }
}

#[test]
fn spatial_ops() {
    let mut rng = RngStream::new(23);
    let x0 = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    check_unary("pad2d.zero", &x0, 81, |g, v| g.pad2d(v, 2, PadMode::Zero));
    check_unary("pad2d.reflect", &x0, 82, |g, v| {
        g.pad2d(v, 2, PadMode::Reflect)
    });
    check_unary("avg_pool2d", &x0, 83, |g, v| g.avg_pool2d(v, 2));
    check_unary("avg_pool2d.k3", &x0, 84, |g, v| g.avg_pool2d(v, 3));
    check_unary("nearest_up2", &x0, 85, |g, v| g.nearest_up2(v));
    check_unary("bilinear_up2", &x0, 86, |g, v| g.bilinear_up2(v));
    check_unary("translate2d", &x0, 87, |g, v| {
        g.translate2d(v, &[(1, -2), (0, 3)])
    });
}

#[test]
fn reduction_and_shape_ops() {
    let mut rng = RngStream::new(29);
    let x0 = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    check_unary("sum_axes.0", &x0, 91, |g, v| g.sum_axes(v, &[0]));
    check_unary("sum_axes.02", &x0, 92, |g, v| g.sum_axes(v, &[0, 2]));
    check_unary("mean_axes", &x0, 93, |g, v| g.mean_axes(v, &[1]));
    check_unary("sum_all", &x0, 94, |g, v| g.sum_all(v));
    check_unary("mean_all", &x0, 95, |g, v| g.mean_all(v));
    check_unary("reshape", &x0, 96, |g, v| g.reshape(v, &[6, 4]));
    check_unary("permute", &x0, 97, |g, v| g.permute(v, &[2, 0, 1]));

    let small = rand_tensor(&mut rng, &[1, 3, 1], -1.0, 1.0);
    check_unary("broadcast", &small, 98, |g, v| g.broadcast(v, &[2, 3, 4]));

    let a0 = rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0);
    check_unary("concat", &a0, 99, |g, v| {
        let other = g.constant(Tensor::zeros(IxDyn(&[2, 1, 4])) + 0.5);
        g.concat(&[v, other, v], 1)
    });
}

#[test]
fn composite_helpers() {
    let mut rng = RngStream::new(31);
    let x0 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w0 = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let b0 = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    check_unary("linear.x", &x0, 101, |g, v| {
        let wv = g.constant(w0.clone());
        let bv = g.constant(b0.clone());
        g.linear(v, wv, bv)
    });
    check_unary("linear.b", &b0, 102, |g, v| {
        let xv = g.constant(x0.clone());
        let wv = g.constant(w0.clone());
        g.linear(xv, wv, v)
    });

    let xi = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let wc = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let bc = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    check_unary("conv2d_bias.b", &bc, 103, |g, v| {
        let xv = g.constant(xi.clone());
        let wv = g.constant(wc.clone());
        g.conv2d_bias(xv, wv, v, 1, 1)
    });
}

#[test]
fn deep_composition_gradient() {
    // A miniature conv -> pool -> nonlinearity -> linear chain: closest to
    // how the tape is used for real, exercising grad accumulation across
    // many op kinds at once.
    let mut rng = RngStream::new(37);
    let x0 = rand_tensor(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);
    let w1 = rand_tensor(&mut rng, &[4, 2, 3, 3], -0.4, 0.4);
    let w2 = rand_tensor(&mut rng, &[4 * 4 * 4, 6], -0.3, 0.3);
    check_unary("deep_chain", &x0, 111, |g, v| {
        let w1v = g.constant(w1.clone());
        let h = g.conv2d(v, w1v, 2, 1); // [2,4,4,4]
        let h = g.tanh(h);
        let h = g.reshape(h, &[2, 4 * 4 * 4]);
        let w2v = g.constant(w2.clone());
        let h = g.matmul(h, w2v);
        g.sigmoid(h)
    });
}
