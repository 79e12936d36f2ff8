use std::collections::HashMap;

use dctps::alloc::{Heuristic, SupportPlan};
use dctps::dct::truncated_dct_matrix;
use dctps::layers::{
    build_network, BackwardOptions, Conv2d, ConvGeometry, Layer, LayerSpec, Linear, Network, NetworkSpec, WeightKind,
    WeightOp, Weights,
};
use dctps::sparse::SparseMatrix;
use dctps::tape::{Graph, SparsePattern, Tape};
use dctps::tensor::{max_abs_diff, rel_error, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, nnz: usize) -> SparseMatrix {
    let triplets = sample(rng, rows * cols, nnz)
        .into_iter()
        .map(|i| (i / cols, i % cols, rng.random_range(-1.0..1.0)))
        .collect();
    SparseMatrix::from_triplets(rows, cols, triplets).unwrap()
}

fn dctps_op(rng: &mut ChaCha8Rng, rows: usize, cols: usize, nnz: usize) -> WeightOp {
    let sparse = random_sparse(rng, rows, cols, nnz);
    let alpha = rng.random_range(0.5..1.5);
    let bias = random_vec(rng, rows);
    WeightOp::new(rows, cols, Weights::Dctps { alpha, sparse }, Some(bias)).unwrap()
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn dense_oracle(op: &WeightOp, x: &[f64]) -> Vec<f64> {
    let w = op.effective_matrix().unwrap();
    let bias = op.bias().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; op.rows()]);
    w.chunks(op.cols())
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect()
}

#[test]
fn dctps_linear_examples() {
    let empty = SparseMatrix::empty(4, 4).unwrap();
    let ones = [1.0; 4];
    let zero = Linear::new(WeightOp::new(4, 4, Weights::Dctps { alpha: 0.0, sparse: empty.clone() }, None).unwrap());
    assert_eq!(zero.forward(&ones).unwrap(), vec![0.0; 4]);

    let plain = Linear::new(WeightOp::new(4, 4, Weights::Dctps { alpha: 1.0, sparse: empty }, None).unwrap());
    assert!(max_abs_diff(&plain.forward(&ones).unwrap(), &[2.0, 0.0, 0.0, 0.0]) < 1e-12);

    let s = SparseMatrix::from_triplets(4, 4, vec![(0, 0, 1.0)]).unwrap();
    let op = WeightOp::new(4, 4, Weights::Dctps { alpha: 0.5, sparse: s }, None).unwrap();
    // 0.5 C + densify(S), built independently of the operator.
    let c = truncated_dct_matrix(4, 4).unwrap();
    let mut w = c.data().iter().map(|v| 0.5 * v).collect::<Vec<_>>();
    w[0] += 1.0;
    let oracle: Vec<f64> = w.chunks(4).map(|r| r.iter().sum()).collect();
    let y = Linear::new(op).forward(&ones).unwrap();
    assert!(max_abs_diff(&y, &oracle) < 1e-12);
    assert!(max_abs_diff(&y, &[2.0, 0.0, 0.0, 0.0]) < 1e-12);
}

#[test]
fn dctps_linear_with_unit_alpha_is_rect_dct() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, n) in [(8, 8), (4, 16), (16, 4), (5, 3), (3, 7)] {
        let op = WeightOp::new(m, n, Weights::Dctps { alpha: 1.0, sparse: SparseMatrix::empty(m, n).unwrap() }, None)
            .unwrap();
        let x = random_vec(&mut rng, n);
        let plan = dctps::dct::DctPlan::new(m.max(n)).unwrap();
        assert_eq!(Linear::new(op).forward(&x).unwrap(), plan.rect_apply(&x, m).unwrap());
    }
}

#[test]
fn dctps_forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (m, n) in [(1, 1), (4, 4), (10, 6), (6, 10), (32, 64), (64, 32), (17, 9), (120, 400)] {
        let nnz = rng.random_range(0..=m * n / 3);
        let layer = Linear::new(dctps_op(&mut rng, m, n, nnz));
        let x = random_vec(&mut rng, n);
        let y = layer.forward(&x).unwrap();
        assert!(max_abs_diff(&y, &dense_oracle(&layer.op, &x)) <= 1e-10, "{m}x{n}");
    }
}

#[test]
fn linear_storage_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let op = dctps_op(&mut rng, 6, 9, 7);
    assert_eq!(op.trainable_count(), 7 + 1 + 6);
    let frozen = dctps_op(&mut rng, 6, 9, 7).with_alpha_trainable(false);
    assert_eq!(frozen.trainable_count(), 7 + 6);
}

#[test]
fn linear_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = Linear::new(dctps_op(&mut rng, 3, 5, 2));
    assert!(layer.forward(&[0.0; 4]).is_err());
    assert!(layer.backward(&[0.0; 5], &[0.0; 2]).is_err());
}

#[test]
fn linear_backward_zero_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = Linear::new(dctps_op(&mut rng, 6, 4, 5));
    let g = layer.backward(&random_vec(&mut rng, 4), &[0.0; 6]).unwrap();
    assert!(g.input.iter().all(|&v| v == 0.0));
    assert_eq!(g.grad.alpha, 0.0);
    assert!(g.grad.values.iter().chain(&g.grad.bias).all(|&v| v == 0.0));
}

/// Checks every gradient of `<v, layer(x)>` against central differences.
fn check_linear_fd(layer: &Linear, x: &[f64], v: &[f64]) {
    let g = layer.backward(x, v).unwrap();
    let obj = |l: &Linear, x: &[f64]| dctps::tensor::dot(&l.forward(x).unwrap(), v);

    let dx: Vec<f64> = (0..x.len())
        .map(|i| {
            central_diff(
                |t| {
                    let mut xp = x.to_vec();
                    xp[i] = t;
                    obj(layer, &xp)
                },
                x[i],
            )
        })
        .collect();
    assert!(rel_error(&g.input, &dx) <= 1e-5, "dx");

    let dvals: Vec<f64> = (0..layer.op.nnz())
        .map(|i| {
            central_diff(
                |t| {
                    let mut l = layer.clone();
                    l.op.values_mut()[i] = t;
                    obj(&l, x)
                },
                layer.op.values()[i],
            )
        })
        .collect();
    assert!(rel_error(&g.grad.values, &dvals) <= 1e-5, "dS");

    let dbias: Vec<f64> = (0..layer.op.rows())
        .map(|i| {
            central_diff(
                |t| {
                    let mut l = layer.clone();
                    l.op.bias_mut().unwrap()[i] = t;
                    obj(&l, x)
                },
                layer.op.bias().unwrap()[i],
            )
        })
        .collect();
    assert!(rel_error(&g.grad.bias, &dbias) <= 1e-5, "dbias");

    if let Some(alpha) = layer.op.alpha() {
        let da = central_diff(
            |t| {
                let mut l = layer.clone();
                l.op.set_alpha(t).unwrap();
                obj(&l, x)
            },
            alpha,
        );
        assert!(rel_error(&[g.grad.alpha], &[da]) <= 1e-5, "dalpha");
    }
}

#[test]
fn dctps_linear_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (m, n, nnz) in [(4, 4, 0), (8, 5, 10), (5, 8, 12), (16, 16, 40), (3, 11, 6)] {
        let layer = Linear::new(dctps_op(&mut rng, m, n, nnz));
        let x = random_vec(&mut rng, n);
        let v = random_vec(&mut rng, m);
        check_linear_fd(&layer, &x, &v);
    }
}

#[test]
fn empty_support_backward_is_transform_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, n) = (6, 10);
    let op = WeightOp::new(m, n, Weights::Dctps { alpha: 1.0, sparse: SparseMatrix::empty(m, n).unwrap() }, None)
        .unwrap();
    let v = random_vec(&mut rng, m);
    let g = Linear::new(op).backward(&random_vec(&mut rng, n), &v).unwrap();
    let d = truncated_dct_matrix(m, n).unwrap();
    let dt = d.transpose().unwrap();
    let expected = dt.matmul(&Tensor::matrix(m, 1, v).unwrap()).unwrap();
    assert!(max_abs_diff(&g.input, expected.data()) < 1e-12);
}

#[test]
fn sparse_and_dense_linear_backward_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sparse = random_sparse(&mut rng, 5, 7, 9);
    let layer = Linear::new(WeightOp::new(5, 7, Weights::Sparse(sparse), Some(random_vec(&mut rng, 5))).unwrap());
    check_linear_fd(&layer, &random_vec(&mut rng, 7), &random_vec(&mut rng, 5));
    let dense = Linear::new(WeightOp::new(4, 3, Weights::Dense(random_vec(&mut rng, 12)), Some(random_vec(&mut rng, 4))).unwrap());
    check_linear_fd(&dense, &random_vec(&mut rng, 3), &random_vec(&mut rng, 4));
}

/// Direct convolution with an explicit filter tensor `[c_out, c_in, k, k]`.
fn conv_oracle(geom: &ConvGeometry, filters: &[f64], bias: &[f64], image: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let (k, oh, ow) = (geom.kernel, geom.out_h(), geom.out_w());
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..geom.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            let x = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if y < 0 || x < 0 || y >= geom.in_h as isize || x >= geom.in_w as isize {
                                continue;
                            }
                            let pix = image[(ci * geom.in_h + y as usize) * geom.in_w + x as usize];
                            acc += filters[((co * geom.in_channels + ci) * k + ky) * k + kx] * pix;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn dctps_conv_trivial_cases() {
    let geom = ConvGeometry::new(2, 4, 4, 3, 1, 1).unwrap();
    let zero = Conv2d::new(
        geom,
        WeightOp::new(3, 18, Weights::Dctps { alpha: 0.0, sparse: SparseMatrix::empty(3, 18).unwrap() }, None).unwrap(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(zero.forward(&random_vec(&mut rng, 32)).unwrap().iter().all(|&v| v == 0.0));

    let geom = ConvGeometry::new(1, 3, 3, 1, 1, 0).unwrap();
    let ident = Conv2d::new(
        geom,
        WeightOp::new(1, 1, Weights::Dctps { alpha: 1.0, sparse: SparseMatrix::empty(1, 1).unwrap() }, None).unwrap(),
    )
    .unwrap();
    let img = random_vec(&mut rng, 9);
    assert!(max_abs_diff(&ident.forward(&img).unwrap(), &img) < 1e-15);
    let up = random_vec(&mut rng, 9);
    let g = ident.backward(&img, &up).unwrap();
    assert!(max_abs_diff(&g.input, &up) < 1e-15);
}

#[test]
fn dctps_conv_matches_dense_conv_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (c_in, h, w, c_out, k, stride, pad) in [(1, 5, 5, 2, 3, 1, 0), (3, 6, 7, 4, 3, 2, 1), (2, 8, 8, 6, 5, 1, 2), (1, 4, 4, 8, 2, 2, 0)] {
        let geom = ConvGeometry::new(c_in, h, w, k, stride, pad).unwrap();
        let cols = geom.patch_len();
        let op = dctps_op(&mut rng, c_out, cols, cols * c_out / 4);
        let filters = op.effective_matrix().unwrap();
        let bias = op.bias().unwrap().to_vec();
        let conv = Conv2d::new(geom, op).unwrap();
        let img = random_vec(&mut rng, geom.input_len());
        let got = conv.forward(&img).unwrap();
        assert!(max_abs_diff(&got, &conv_oracle(&geom, &filters, &bias, &img)) <= 1e-10);
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let geom = ConvGeometry::new(2, 5, 4, 3, 2, 1).unwrap();
    let conv = Conv2d::new(geom, dctps_op(&mut rng, 3, 18, 14)).unwrap();
    let img = random_vec(&mut rng, geom.input_len());
    let up = random_vec(&mut rng, conv.out_len());
    let g = conv.backward(&img, &up).unwrap();
    let obj = |c: &Conv2d, x: &[f64]| dctps::tensor::dot(&c.forward(x).unwrap(), &up);

    let dimg: Vec<f64> = (0..img.len())
        .map(|i| {
            central_diff(
                |t| {
                    let mut x = img.clone();
                    x[i] = t;
                    obj(&conv, &x)
                },
                img[i],
            )
        })
        .collect();
    assert!(rel_error(&g.input, &dimg) <= 1e-5);

    let dvals: Vec<f64> = (0..conv.op.nnz())
        .map(|i| {
            central_diff(
                |t| {
                    let mut c = conv.clone();
                    c.op.values_mut()[i] = t;
                    obj(&c, &img)
                },
                conv.op.values()[i],
            )
        })
        .collect();
    assert!(rel_error(&g.grad.values, &dvals) <= 1e-5);

    let da = central_diff(
        |t| {
            let mut c = conv.clone();
            c.op.set_alpha(t).unwrap();
            obj(&c, &img)
        },
        conv.op.alpha().unwrap(),
    );
    assert!(rel_error(&[g.grad.alpha], &[da]) <= 1e-5);

    let dbias: Vec<f64> = (0..3)
        .map(|i| {
            central_diff(
                |t| {
                    let mut c = conv.clone();
                    c.op.bias_mut().unwrap()[i] = t;
                    obj(&c, &img)
                },
                conv.op.bias().unwrap()[i],
            )
        })
        .collect();
    assert!(rel_error(&g.grad.bias, &dbias) <= 1e-5);

    let zero = conv.backward(&img, &vec![0.0; conv.out_len()]).unwrap();
    assert!(zero.input.iter().chain(&zero.grad.values).all(|&v| v == 0.0));
    assert_eq!(zero.grad.alpha, 0.0);
}

fn plan_for(spec: &NetworkSpec, density: f64, seed: u64) -> SupportPlan {
    SupportPlan::with_density(spec.layer_shapes().unwrap(), density, Heuristic::Epl, seed).unwrap()
}

#[test]
fn prunable_counts() {
    let mlp = NetworkSpec::mlp(&[784, 64, 10], WeightKind::Dctps);
    assert_eq!(mlp.prunable_count().unwrap(), 50816);
    assert_eq!(mlp.non_prunable_count().unwrap(), 64 + 10 + 2);

    // Classic LeNet-5 on 28x28: conv 1->6 (5x5, pad 2), pool, conv 6->16 (5x5),
    // pool, 400-120-84-10.
    let layers = NetworkSpec::parse_layers("conv:6:5:1:2, maxpool, conv:16:5, maxpool, fc:120, fc:84, fc:10").unwrap();
    let lenet = NetworkSpec::new(vec![1, 28, 28], layers, WeightKind::Sparse);
    let hand = 6 * 25 + 16 * 6 * 25 + 400 * 120 + 120 * 84 + 84 * 10;
    assert_eq!(lenet.prunable_count().unwrap(), hand);
    assert_eq!(lenet.non_prunable_count().unwrap(), 6 + 16 + 120 + 84 + 10);

    let small = NetworkSpec::lenet5([1, 8, 8], 10, WeightKind::Dctps);
    assert_eq!(small.prunable_count().unwrap(), 150 + 2400 + 64 * 120 + 120 * 84 + 840);
}

#[test]
fn layer_spec_round_trip() {
    let text = "conv:6:5:1:2,maxpool,avgpool,fc:10";
    let layers = NetworkSpec::parse_layers(text).unwrap();
    let back: Vec<String> = layers.iter().map(LayerSpec::to_string).collect();
    assert_eq!(back.join(","), text);
    assert!(NetworkSpec::parse_layers("fc").is_err());
    assert!(NetworkSpec::parse_layers("conv:6").is_err());
    assert!(NetworkSpec::parse_layers("pool:2").is_err());
}

#[test]
fn invalid_specs() {
    let spec = NetworkSpec::new(vec![10], vec![LayerSpec::Pool(dctps::layers::PoolKind::Max)], WeightKind::Dense);
    assert!(spec.prunable_count().is_err());
    let spec = NetworkSpec::mlp(&[4, 3], WeightKind::Sparse);
    assert!(build_network(&spec, None, 0).is_err());
}

#[test]
fn dctps_init_state() {
    let spec = NetworkSpec::lenet5([1, 8, 8], 10, WeightKind::Dctps);
    for density in [0.001, 0.05, 1.0] {
        let net = build_network(&spec, Some(&plan_for(&spec, density, 1)), 7).unwrap();
        for op in net.weight_ops() {
            assert_eq!(op.alpha(), Some(1.0));
            assert!(op.values().iter().all(|&v| v == 0.0));
            assert!(op.bias().unwrap().iter().all(|&v| v == 0.0));
        }
        let nnz: usize = net.weight_ops().iter().map(|o| o.nnz()).sum();
        assert_eq!(nnz, (density * 21150.0_f64).round() as usize);
    }
}

#[test]
fn dctps_init_function_is_density_independent() {
    let spec = NetworkSpec::lenet5([1, 8, 8], 10, WeightKind::Dctps);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_vec(&mut rng, 3 * 64);
    let outputs: Vec<Vec<f64>> = [0.001, 0.01, 0.2, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let net = build_network(&spec, Some(&plan_for(&spec, d, i as u64)), 100 + i as u64).unwrap();
            net.forward(&x, 3).unwrap()
        })
        .collect();
    for o in &outputs[1..] {
        assert_eq!(o, &outputs[0]);
    }
}

#[test]
fn alpha_init_is_configurable() {
    let mut spec = NetworkSpec::mlp(&[8, 6, 4], WeightKind::Dctps);
    spec.alpha_init = vec![0.0, 0.25];
    let net = build_network(&spec, Some(&plan_for(&spec, 0.5, 0)), 0).unwrap();
    let alphas: Vec<_> = net.weight_ops().iter().map(|o| o.alpha().unwrap()).collect();
    assert_eq!(alphas, vec![0.0, 0.25]);
    spec.alpha_init = vec![1.0, 2.0, 3.0];
    assert!(build_network(&spec, Some(&plan_for(&spec, 0.5, 0)), 0).is_err());
}

/// Collects every trainable scalar with a setter so the loss can be probed.
fn perturb(net: &Network, idx: usize, delta: f64) -> Network {
    let mut net = net.clone();
    let mut i = idx;
    for op in net.weight_ops_mut() {
        let n = op.nnz();
        if i < n {
            op.values_mut()[i] += delta;
            return net;
        }
        i -= n;
        if op.alpha().is_some() && op.alpha_trainable() {
            if i == 0 {
                let a = op.alpha().unwrap();
                op.set_alpha(a + delta).unwrap();
                return net;
            }
            i -= 1;
        }
        let b = op.bias_mut().unwrap();
        if i < b.len() {
            b[i] += delta;
            return net;
        }
        i -= b.len();
    }
    panic!("parameter index out of range");
}

fn flat_grads(net: &Network, grads: &dctps::layers::NetworkGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (layer, g) in net.layers().iter().zip(&grads.layers) {
        let (Some(op), Some(g)) = (layer.weight_op(), g) else { continue };
        out.extend(&g.values);
        if op.alpha().is_some() && op.alpha_trainable() {
            out.push(g.alpha);
        }
        out.extend(&g.bias);
    }
    out
}

fn small_conv_spec(kind: WeightKind) -> NetworkSpec {
    let layers = NetworkSpec::parse_layers("conv:3:3:1:1,maxpool,conv:4:3:1:0,avgpool,fc:5,fc:3").unwrap();
    NetworkSpec::new(vec![2, 8, 8], layers, kind)
}

#[test]
fn network_gradients_match_finite_differences() {
    for kind in [WeightKind::Dense, WeightKind::Sparse, WeightKind::Dctps] {
        let spec = small_conv_spec(kind);
        let plan = plan_for(&spec, 0.4, 5);
        let mut net = build_network(&spec, (kind != WeightKind::Dense).then_some(&plan), 3).unwrap();
        // Move off the zero initialisation so every parameter matters.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for op in net.weight_ops_mut() {
            op.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            op.bias_mut().unwrap().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let x = random_vec(&mut rng, 4 * 128);
        let labels = vec![0, 2, 1, 2];
        let res = net.loss_and_grad(&x, &labels, BackwardOptions::default(), &mut 0).unwrap();
        let analytic = flat_grads(&net, &res.grads);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let lp = perturb(&net, i, h).loss(&x, &labels).unwrap();
                let lm = perturb(&net, i, -h).loss(&x, &labels).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        assert!(rel_error(&analytic, &numeric) <= 1e-5, "{kind}: {}", rel_error(&analytic, &numeric));
    }
}

#[test]
fn dense_grid_gradients_and_input_gradient() {
    let spec = small_conv_spec(WeightKind::Dctps);
    let net = build_network(&spec, Some(&plan_for(&spec, 0.2, 1)), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_vec(&mut rng, 128);
    let opts = BackwardOptions {
        dense_grads: true,
        input_grad: true,
    };
    let res = net.loss_and_grad(&x, &[1], opts, &mut 0).unwrap();
    for (layer, g) in net.layers().iter().zip(&res.grads.layers) {
        let (Some(op), Some(g)) = (layer.weight_op(), g) else { continue };
        let grid = g.grid(op).unwrap();
        assert_eq!(grid.len(), op.capacity());
        for (k, &(r, c)) in op.sparse().unwrap().support().iter().enumerate() {
            assert!((grid[r * op.cols() + c] - g.values[k]).abs() < 1e-12);
        }
    }
    let dx = res.grads.input.unwrap();
    let h = 1e-6;
    for i in [0, 17, 64, 127] {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fd = (net.loss(&xp, &[1]).unwrap() - net.loss(&xm, &[1]).unwrap()) / (2.0 * h);
        assert!((fd - dx[i]).abs() <= 1e-5 * (1.0 + fd.abs()));
    }
}

#[test]
fn jvp_and_vjp_are_adjoint() {
    let spec = small_conv_spec(WeightKind::Dctps);
    let mut net = build_network(&spec, Some(&plan_for(&spec, 0.3, 1)), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for op in net.weight_ops_mut() {
        op.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let x = random_vec(&mut rng, 128);
    let t = random_vec(&mut rng, 128);
    let u = random_vec(&mut rng, 3);
    let jt = net.jvp(&x, &t).unwrap();
    let ju = net.vjp(&x, &u).unwrap();
    let lhs = dctps::tensor::dot(&u, &jt);
    let rhs = dctps::tensor::dot(&ju, &t);
    assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    // Piecewise linear: a small step along t changes logits by J t.
    let eps = 1e-7;
    let xp: Vec<f64> = x.iter().zip(&t).map(|(a, b)| a + eps * b).collect();
    let y0 = net.forward(&x, 1).unwrap();
    let y1 = net.forward(&xp, 1).unwrap();
    let fd: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| (a - b) / eps).collect();
    assert!(rel_error(&fd, &jt) < 1e-5);
}

/// The same DCTpS MLP expressed as a tape graph yields identical gradients.
#[test]
fn network_agrees_with_tape() {
    let spec = NetworkSpec::mlp(&[12, 8, 3], WeightKind::Dctps);
    let mut net = build_network(&spec, Some(&plan_for(&spec, 0.3, 4)), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for op in net.weight_ops_mut() {
        op.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        op.bias_mut().unwrap().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        let a = rng.random_range(0.5..1.5);
        op.set_alpha(a).unwrap();
    }
    let batch = 5;
    let x = random_vec(&mut rng, batch * 12);
    let labels = vec![0, 1, 2, 1, 0];

    let mut g = Graph::new();
    let mut h = g.input("x");
    let mut feed = HashMap::new();
    feed.insert("x".to_string(), Tensor::new(vec![batch, 12], x.clone()).unwrap());
    let ops = net.weight_ops();
    for (l, op) in ops.iter().enumerate() {
        let s = op.sparse().unwrap();
        let pattern = SparsePattern {
            rows: s.rows(),
            cols: s.cols(),
            support: s.support().to_vec(),
        };
        let (a, v, b) = (format!("a{l}"), format!("s{l}"), format!("b{l}"));
        let an = g.param(&a);
        let vn = g.param(&v);
        let bn = g.param(&b);
        feed.insert(a, Tensor::vector(vec![op.alpha().unwrap()]));
        feed.insert(v, Tensor::vector(op.values().to_vec()));
        feed.insert(b, Tensor::vector(op.bias().unwrap().to_vec()));
        let d = g.dct(h, op.rows());
        let d = g.scale(d, an);
        let sx = g.sparse_matmul(pattern, vn, h);
        let sum = g.add(d, sx);
        h = g.add(sum, bn);
        if l + 1 < ops.len() {
            h = g.relu(h);
        }
    }
    let loss = g.softmax_cross_entropy(h, labels.clone());
    g.set_output(loss).unwrap();
    let mut tape = Tape::new(&g);
    let tape_loss = tape.forward(&feed).unwrap().item().unwrap();
    let tape_grads = tape.backward().unwrap();

    let res = net.loss_and_grad(&x, &labels, BackwardOptions::default(), &mut 0).unwrap();
    assert!((res.loss - tape_loss).abs() < 1e-12);
    let mut l = 0;
    for (layer, grad) in net.layers().iter().zip(&res.grads.layers) {
        if layer.weight_op().is_none() {
            continue;
        }
        let grad = grad.as_ref().unwrap();
        assert!(max_abs_diff(&grad.values, tape_grads[&format!("s{l}")].data()) < 1e-12);
        assert!(max_abs_diff(&grad.bias, tape_grads[&format!("b{l}")].data()) < 1e-12);
        assert!((grad.alpha - tape_grads[&format!("a{l}")].data()[0]).abs() < 1e-12);
        l += 1;
    }
    assert!(matches!(net.layers()[0], Layer::Linear(_)));
}
