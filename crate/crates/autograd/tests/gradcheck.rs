//! Central finite-difference checks of every op's backward pass, in f64.

use autograd::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rand_array(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares the analytic gradient of `sum(f(inputs) * r)` for a fixed random
/// `r` against central differences, for every element of every input.
fn check<F>(name: &str, inputs: Vec<ArrayD<f64>>, f: F)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let mut rng = StdRng::seed_from_u64(17);
    let vars: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::variable(a.clone())).collect();
    let out = f(&vars);
    let r = Tensor::new(rand_array(&mut rng, out.shape()));
    let grads = out.mul(&r).sum_all().backward();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let ts: Vec<Tensor<f64>> = xs.iter().map(|a| Tensor::new(a.clone())).collect();
        f(&ts).mul(&r).sum_all().item()
    };
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[i].as_slice_mut().unwrap()[j] += h;
            minus[i].as_slice_mut().unwrap()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[j];
            let err = (a - numeric).abs() / (1.0 + numeric.abs().max(a.abs()));
            assert!(err < 1e-5, "{name}: input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> StdRng {
    StdRng::seed_from_u64(5)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = rand_array(&mut r, &[2, 3]);
    let b = rand_array(&mut r, &[1, 3]);
    let pos = rand_array(&mut r, &[2, 3]).mapv(|v| v.abs() + 0.5);
    check("add", vec![a.clone(), b.clone()], |t| t[0].add(&t[1]));
    check("sub", vec![a.clone(), b.clone()], |t| t[0].sub(&t[1]));
    check("mul", vec![a.clone(), b.clone()], |t| t[0].mul(&t[1]));
    check("div", vec![a.clone(), pos.clone()], |t| t[0].div(&t[1]));
    check("exp", vec![a.clone()], |t| t[0].exp());
    check("ln", vec![pos.clone()], |t| t[0].ln());
    check("sqrt", vec![pos.clone()], |t| t[0].sqrt());
    check("powf", vec![pos.clone()], |t| t[0].powf(1.7));
    check("gelu", vec![a.clone()], |t| t[0].gelu());
    check("sigmoid", vec![a.clone()], |t| t[0].sigmoid());
    check("softplus", vec![a.clone().mapv(|v| 5.0 * v)], |t| t[0].softplus());
    check("leaky_relu", vec![a.clone()], |t| t[0].leaky_relu(0.01));
    check("smooth_l1", vec![a.clone().mapv(|v| 3.0 * v)], |t| t[0].smooth_l1(1.0));
    check("scale", vec![a], |t| t[0].scale(-2.5).add_scalar(1.0));
}

#[test]
fn reductions_and_shapes() {
    let mut r = rng();
    let a = rand_array(&mut r, &[2, 3, 4]);
    check("sum_axes", vec![a.clone()], |t| t[0].sum_axes(&[0, 2]));
    check("mean_axes_keep", vec![a.clone()], |t| t[0].mean_axes_keep(&[1]));
    check("mean_all", vec![a.clone()], |t| t[0].mean_all());
    check("permute", vec![a.clone()], |t| t[0].permute(&[2, 0, 1]));
    check("reshape", vec![a.clone()], |t| t[0].permute(&[1, 0, 2]).reshape(&[6, 4]));
    check("narrow", vec![a.clone()], |t| t[0].narrow(2, 1, 2));
    check("pad", vec![a.clone()], |t| t[0].pad(&[(0, 0), (1, 2), (0, 1)]));
    check("roll", vec![a.clone()], |t| t[0].roll(&[(1, 1), (2, -3)]));
    check("index_select0", vec![a.clone()], |t| t[0].index_select0(&[1, 0, 1]));
    let b = rand_array(&mut r, &[2, 1, 4]);
    check("concat", vec![a, b], |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1));
}

#[test]
fn linear_algebra() {
    let mut r = rng();
    let x = rand_array(&mut r, &[2, 3, 4]);
    let w = rand_array(&mut r, &[5, 4]);
    let b = rand_array(&mut r, &[5]);
    check("linear", vec![x.clone(), w, b], |t| t[0].linear(&t[1], Some(&t[2])));
    let y = rand_array(&mut r, &[2, 4, 3]);
    check("bmm", vec![x.clone(), y], |t| t[0].bmm(&t[1], false));
    let z = rand_array(&mut r, &[2, 5, 4]);
    check("bmm_t", vec![x.clone(), z], |t| t[0].bmm(&t[1], true));
    let q = rand_array(&mut r, &[2, 2, 3, 4]);
    let k = rand_array(&mut r, &[2, 2, 5, 4]);
    check("matmul", vec![q, k], |t| t[0].matmul(&t[1], true));
}

#[test]
fn normalisation() {
    let mut r = rng();
    let x = rand_array(&mut r, &[3, 5]);
    check("softmax", vec![x.clone()], |t| t[0].softmax());
    check("log_softmax", vec![x.clone()], |t| t[0].log_softmax());
    let w = rand_array(&mut r, &[5]);
    let b = rand_array(&mut r, &[5]);
    check("layer_norm", vec![x.clone(), w, b], |t| t[0].layer_norm(Some(&t[1]), Some(&t[2]), 1e-5));
    check("layer_norm_plain", vec![x], |t| t[0].layer_norm(None, None, 1e-5));
    let v = rand_array(&mut r, &[2, 4, 2, 2, 3]);
    let gw = rand_array(&mut r, &[4]);
    let gb = rand_array(&mut r, &[4]);
    check("group_norm", vec![v.clone(), gw, gb], |t| t[0].group_norm(2, Some(&t[1]), Some(&t[2]), 1e-5));
    check("instance_norm", vec![v], |t| t[0].group_norm(4, None, None, 1e-5));
}

#[test]
fn convolutions_and_pooling() {
    let mut r = rng();
    let x = rand_array(&mut r, &[2, 2, 4, 5, 3]);
    let w3 = rand_array(&mut r, &[3, 2, 3, 3, 3]);
    let b = rand_array(&mut r, &[3]);
    check("conv3d same", vec![x.clone(), w3.clone(), b.clone()], |t| {
        t[0].conv3d(&t[1], Some(&t[2]), 1, 1)
    });
    check("conv3d strided", vec![x.clone(), w3], |t| t[0].conv3d(&t[1], None, 2, 1));
    let w1 = rand_array(&mut r, &[3, 2, 1, 1, 1]);
    check("conv3d 1x1", vec![x.clone(), w1, b.clone()], |t| t[0].conv3d(&t[1], Some(&t[2]), 1, 0));
    let w2 = rand_array(&mut r, &[3, 2, 2, 2, 2]);
    let xe = rand_array(&mut r, &[1, 2, 4, 4, 2]);
    check("conv3d k2s2", vec![xe, w2], |t| t[0].conv3d(&t[1], None, 2, 0));
    let wt = rand_array(&mut r, &[2, 3, 2, 2, 2]);
    check("conv_transpose3d", vec![x.clone(), wt, b], |t| {
        t[0].conv_transpose3d(&t[1], Some(&t[2]))
    });
    check("max_pool3d", vec![x.clone()], |t| t[0].max_pool3d(3, 2, 1));
    let xp = rand_array(&mut r, &[1, 2, 4, 4, 5]);
    check("avg_pool3d", vec![xp], |t| t[0].avg_pool3d(2));
    check("upsample_nearest", vec![x], |t| t[0].upsample_nearest([8, 10, 6]));
}

#[test]
fn conv_chunking_matches_single_pass() {
    // Enough channels that the column buffer spans several depth chunks.
    let mut r = rng();
    let x = rand_array(&mut r, &[1, 64, 24, 24, 24]);
    let w = rand_array(&mut r, &[2, 64, 3, 3, 3]);
    let y = Tensor::new(x.clone()).conv3d(&Tensor::new(w.clone()), None, 1, 1);
    // direct evaluation at a few positions
    let direct = |co: usize, z: usize, yy: usize, xx: usize| -> f64 {
        let mut s = 0.0;
        for ci in 0..64 {
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iz, iy, ix) = (z + kz, yy + ky, xx + kx);
                        if iz < 1 || iy < 1 || ix < 1 || iz > 24 || iy > 24 || ix > 24 {
                            continue;
                        }
                        s += x[[0, ci, iz - 1, iy - 1, ix - 1]] * w[[co, ci, kz, ky, kx]];
                    }
                }
            }
        }
        s
    };
    for &(co, z, yy, xx) in &[(0, 0, 0, 0), (1, 23, 23, 23), (0, 12, 3, 17), (1, 7, 20, 0)] {
        let v = y.value()[[0, co, z, yy, xx]];
        assert!((v - direct(co, z, yy, xx)).abs() < 1e-9);
    }
}
