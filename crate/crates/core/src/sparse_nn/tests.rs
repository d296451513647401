use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::voxgrid::{build_coord_index, build_downsample, build_rulebook_subm, transpose_rulebook, KernelSpec, VoxelCoord};

fn c(x: i32, y: i32, z: i32) -> VoxelCoord {
    VoxelCoord::new(x, y, z)
}

fn subm_rb(coords: &[VoxelCoord]) -> Arc<Rulebook> {
    let index = build_coord_index(coords).unwrap();
    Arc::new(build_rulebook_subm(coords, &index, &KernelSpec::submanifold(3).unwrap()).unwrap())
}

fn random_support(rng: &mut ChaCha8Rng, extent: i32, n: usize) -> Vec<VoxelCoord> {
    let mut set = std::collections::BTreeSet::new();
    while set.len() < n {
        set.insert(c(rng.random_range(0..extent), rng.random_range(0..extent), rng.random_range(0..extent)));
    }
    set.into_iter().collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_conv(rng: &mut ChaCha8Rng, volume: usize, cin: usize, cout: usize, bias: bool) -> ConvParams<f64> {
    let mut p = ConvParams::zeros(volume, cin, cout, bias);
    p.weights = random_vec(rng, p.weights.len());
    if let Some(b) = &mut p.bias {
        *b = random_vec(rng, cout);
    }
    p
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

/// Central finite differences of `f` at `x`, compared against `analytic`.
fn check_gradient(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
    let h = 1e-5;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (numeric - analytic[i]).abs();
        let scale = numeric.abs().max(analytic[i].abs());
        assert!(err <= 1e-8 || err <= 1e-3 * scale, "element {i}: analytic {} numeric {numeric}", analytic[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coords = random_support(&mut rng, 5, 30);
    let st = SparseTensor::new(coords.clone(), random_vec(&mut rng, 60), 2).unwrap();
    let mut p = ConvParams::<f64>::zeros(27, 2, 2, true);
    p.slot_mut(13).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let out = subm_conv_forward(&st, &subm_rb(&coords), &p).unwrap();
    assert_eq!(out.features(), st.features());
    assert_eq!(out.coords(), st.coords());
}

#[test]
fn single_voxel_subm_uses_center_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords = vec![c(3, 1, 4)];
    let h = [0.5, -2.0];
    let st = SparseTensor::new(coords.clone(), h.to_vec(), 2).unwrap();
    let p = random_conv(&mut rng, 27, 2, 3, true);
    let out = subm_conv_forward(&st, &subm_rb(&coords), &p).unwrap();
    let w = p.slot(13);
    let bias = p.bias.as_ref().unwrap();
    let want: Vec<f64> = (0..3).map(|o| bias[o] + h[0] * w[o] + h[1] * w[3 + o]).collect();
    assert_close(out.features(), &want, 1e-15);
}

#[test]
fn channel_mismatch_is_rejected() {
    let coords = vec![c(0, 0, 0)];
    let st = SparseTensor::new(coords.clone(), vec![1.0f64], 1).unwrap();
    let p = ConvParams::<f64>::zeros(27, 2, 2, false);
    assert!(matches!(subm_conv_forward(&st, &subm_rb(&coords), &p), Err(Error::ShapeMismatch(_))));
}

#[test]
fn strided_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fine = vec![c(2, 3, 5)];
    let (_, rb) = build_downsample(&fine, &KernelSpec::downsample()).unwrap();
    let rb = Arc::new(rb);
    let st = SparseTensor::new(fine, vec![1.5, -1.0], 2).unwrap();
    let p = random_conv(&mut rng, 8, 2, 2, true);
    let out = strided_conv_forward(&st, &rb, &p).unwrap();
    assert_eq!(out.coords(), &[c(1, 1, 2)]);
    // Offset (0,1,1) → slot 0·1 + 1·2 + 1·4 = 6.
    let w = p.slot(6);
    let b = p.bias.as_ref().unwrap();
    let want = [b[0] + 1.5 * w[0] - w[2], b[1] + 1.5 * w[1] - w[3]];
    assert_close(out.features(), &want, 1e-15);

    let fine = vec![c(0, 0, 0), c(1, 1, 1)];
    let (_, rb) = build_downsample(&fine, &KernelSpec::downsample()).unwrap();
    let rb = Arc::new(rb);
    let st = SparseTensor::new(fine.clone(), vec![1.0, 2.0, 10.0, 20.0], 2).unwrap();
    let mut p = ConvParams::<f64>::zeros(8, 2, 2, true);
    for slot in 0..8 {
        p.slot_mut(slot).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }
    p.bias = Some(vec![0.25, 0.5]);
    let out = strided_conv_forward(&st, &rb, &p).unwrap();
    assert_eq!(out.features(), &[11.25, 22.5]);

    let t = Arc::new(transpose_rulebook(&rb, &fine).unwrap());
    p.bias = None;
    let up = inverse_conv_forward(&out, &t, &p).unwrap();
    assert_eq!(up.coords(), fine.as_slice());
    assert_eq!(up.features(), &[11.25, 22.5, 11.25, 22.5]);

    let zero = SparseTensor::new(vec![c(0, 0, 0)], vec![0.0, 0.0], 2).unwrap();
    let mut rp = random_conv(&mut rng, 8, 2, 2, false);
    rp.bias = Some(vec![0.0, 0.0]);
    assert!(inverse_conv_forward(&zero, &t, &rp).unwrap().features().iter().all(|&v| v == 0.0));
}

#[test]
fn rows_without_pairs_receive_bias() {
    // A strided rulebook run against the wrong kind is rejected; an isolated
    // output row under a subm kernel still carries bias plus its self term.
    let coords = vec![c(0, 0, 0), c(5, 5, 5)];
    let st = SparseTensor::new(coords.clone(), vec![0.0, 0.0], 1).unwrap();
    let mut p = ConvParams::<f64>::zeros(27, 1, 1, true);
    p.bias = Some(vec![0.75]);
    let out = subm_conv_forward(&st, &subm_rb(&coords), &p).unwrap();
    assert_eq!(out.features(), &[0.75, 0.75]);
    let (_, down) = build_downsample(&coords, &KernelSpec::downsample()).unwrap();
    assert!(subm_conv_forward(&st, &Arc::new(down), &p).is_err());
}

#[test]
fn instance_norm_examples() {
    let st = SparseTensor::new(vec![c(0, 0, 0), c(1, 0, 0)], vec![1.0f64, 3.0], 1).unwrap();
    let p = NormParams { gamma: vec![1.0], beta: vec![0.0], eps: 1e-12 };
    assert_close(sparse_instance_norm(&st, &p).unwrap().features(), &[-1.0, 1.0], 1e-9);

    let st = SparseTensor::new(vec![c(0, 0, 0), c(1, 0, 0), c(2, 0, 0)], vec![4.0f64; 3], 1).unwrap();
    let p = NormParams { gamma: vec![2.0], beta: vec![0.3], eps: 1e-5 };
    assert!(sparse_instance_norm(&st, &p).unwrap().features().iter().all(|&v| v == 0.3));

    let st = SparseTensor::new(vec![c(0, 0, 0)], vec![7.0f64, -1.0], 2).unwrap();
    let p = NormParams { gamma: vec![1.0, 3.0], beta: vec![0.5, -0.5], eps: 1e-5 };
    assert_eq!(sparse_instance_norm(&st, &p).unwrap().features(), &[0.5, -0.5]);

    let empty = SparseTensor::<f64>::empty(1);
    let p = NormParams::identity(1, 1e-5);
    assert!(matches!(sparse_instance_norm(&empty, &p), Err(Error::EmptyTensor)));
}

#[test]
fn instance_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let coords = random_support(&mut rng, 6, 50);
    let st = SparseTensor::new(coords, (0..150).map(|_| rng.random_range(-5.0..9.0)).collect(), 3).unwrap();
    let out = sparse_instance_norm(&st, &NormParams::identity(3, 1e-5)).unwrap();
    for ch in 0..3 {
        let col: Vec<f64> = out.features().iter().skip(ch).step_by(3).copied().collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn leaky_relu_examples() {
    let st = SparseTensor::new(vec![c(0, 0, 0), c(1, 0, 0)], vec![2.0f64, -2.0], 1).unwrap();
    let out = leaky_relu(&st, 0.01).unwrap();
    assert_eq!(out.features()[0], 2.0);
    assert!((out.features()[1] + 0.02).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = random_vec(&mut rng, 200);
    let coords: Vec<VoxelCoord> = (0..200).map(|i| c(i, 0, 0)).collect();
    let out = leaky_relu(&SparseTensor::new(coords, xs.clone(), 1).unwrap(), 0.01).unwrap();
    for i in 0..200 {
        for j in 0..200 {
            if xs[i] < xs[j] {
                assert!(out.features()[i] < out.features()[j]);
            }
        }
    }
}

#[test]
fn concat_layout_and_errors() {
    let coords = vec![c(0, 0, 0), c(1, 0, 0)];
    let a = SparseTensor::new(coords.clone(), vec![1.0f64, 2.0, 3.0, 4.0], 2).unwrap();
    let b = SparseTensor::new(coords, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0], 3).unwrap();
    let cat = concat_skip(&a, &b).unwrap();
    assert_eq!(cat.channels(), 5);
    assert_eq!(cat.features(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
    let (l, r) = split_channels(cat.features(), 2, 3);
    assert_eq!(l, a.features());
    assert_eq!(r, b.features());

    let other = SparseTensor::new(vec![c(0, 0, 0), c(2, 0, 0)], vec![0.0; 6], 3).unwrap();
    assert!(matches!(concat_skip(&a, &other), Err(Error::SupportMismatch)));
}

#[test]
fn head_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let coords: Vec<VoxelCoord> = (0..7).map(|i| c(i, 0, 0)).collect();
    let x: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..2.0)).collect();
    let st = SparseTensor::new(coords, x.clone(), 3).unwrap();

    let mut p = HeadParams::<f64>::zeros(3, 4, 0.01);
    p.b2 = vec![0.1, -0.2, 0.3, 0.4];
    let out = mlp_head_forward(&st, &p).unwrap();
    for row in out.features().chunks(4) {
        assert_eq!(row, p.b2.as_slice());
    }

    // Identity first layer on nonnegative inputs collapses to one affine map.
    p.w1 = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    p.w2 = random_vec(&mut rng, 12);
    let out = mlp_head_forward(&st, &p).unwrap();
    for (i, row) in out.features().chunks(4).enumerate() {
        for k in 0..4 {
            let want = p.b2[k] + (0..3).map(|j| x[i * 3 + j] * p.w2[j * 4 + k]).sum::<f64>();
            assert!((row[k] - want).abs() < 1e-12);
        }
    }

    // Random head against a scalar evaluator.
    let p = HeadParams {
        w1: random_vec(&mut rng, 9),
        b1: random_vec(&mut rng, 3),
        w2: random_vec(&mut rng, 12),
        b2: random_vec(&mut rng, 4),
        channels: 3,
        classes: 4,
        slope: 0.01,
    };
    let out = mlp_head_forward(&st, &p).unwrap();
    for (i, row) in out.features().chunks(4).enumerate() {
        let mut hidden = [0.0; 3];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z = p.b1[j] + (0..3).map(|m| x[i * 3 + m] * p.w1[m * 3 + j]).sum::<f64>();
            *h = if z >= 0.0 { z } else { 0.01 * z };
        }
        for k in 0..4 {
            let want = p.b2[k] + (0..3).map(|j| hidden[j] * p.w2[j * 4 + k]).sum::<f64>();
            assert!((row[k] - want).abs() < 1e-12);
        }
    }
    let wrong = SparseTensor::new(vec![c(0, 0, 0)], vec![0.0; 2], 2).unwrap();
    assert!(mlp_head_forward(&wrong, &p).is_err());
}

#[test]
fn bias_only_conv_gradient_counts_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let coords = random_support(&mut rng, 4, 12);
    let st = SparseTensor::new(coords.clone(), random_vec(&mut rng, 12), 1).unwrap();
    let p = ConvParams::<f64>::zeros(27, 1, 2, true);
    let (_, cache) = conv_forward(LayerKind::SubmConv, &st, &subm_rb(&coords), &p, true).unwrap();
    let g = layer_backward(LayerKind::SubmConv, LayerRef::Conv(&p), cache.as_ref(), &[1.0; 24]).unwrap();
    assert_eq!(g.params[1], vec![12.0, 12.0]);
}

#[test]
fn single_voxel_weight_gradient_is_outer_product() {
    let coords = vec![c(0, 0, 0)];
    let h = [2.0, -3.0];
    let g = [0.5, 1.0, -1.0];
    let st = SparseTensor::new(coords.clone(), h.to_vec(), 2).unwrap();
    let p = ConvParams::<f64>::zeros(27, 2, 3, false);
    let (_, cache) = conv_forward(LayerKind::SubmConv, &st, &subm_rb(&coords), &p, true).unwrap();
    let grads = layer_backward(LayerKind::SubmConv, LayerRef::Conv(&p), cache.as_ref(), &g).unwrap();
    let center = &grads.params[0][13 * 6..14 * 6];
    assert_eq!(center, &[1.0, 2.0, -2.0, -1.5, -3.0, 3.0]);
    assert!(grads.params[0][..13 * 6].iter().all(|&v| v == 0.0));
}

#[test]
fn missing_cache_is_reported() {
    let p = ConvParams::<f64>::zeros(27, 1, 1, false);
    assert!(matches!(
        layer_backward(LayerKind::SubmConv, LayerRef::Conv(&p), None, &[]),
        Err(Error::MissingCache(_))
    ));
    let wrong = LayerCache::LeakyRelu { input: vec![1.0] };
    assert!(matches!(
        layer_backward(LayerKind::SubmConv, LayerRef::Conv(&p), Some(&wrong), &[1.0]),
        Err(Error::MissingCache(_))
    ));
}

/// Forward of one conv kind as a function of (input, weights, bias).
fn conv_case(kind: LayerKind, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..25);
    let fine = random_support(&mut rng, 5, n);
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let (rb, st_coords, volume) = match kind {
        LayerKind::SubmConv => (subm_rb(&fine), fine.clone(), 27),
        LayerKind::StridedConv => {
            let (_, rb) = build_downsample(&fine, &KernelSpec::downsample()).unwrap();
            (Arc::new(rb), fine.clone(), 8)
        }
        LayerKind::InverseConv => {
            let (coarse, rb) = build_downsample(&fine, &KernelSpec::downsample()).unwrap();
            (Arc::new(transpose_rulebook(&rb, &fine).unwrap()), coarse, 8)
        }
        _ => unreachable!(),
    };
    let x = random_vec(&mut rng, st_coords.len() * cin);
    let p = random_conv(&mut rng, volume, cin, cout, true);
    let upstream = random_vec(&mut rng, rb.out_count() * cout);
    let st = SparseTensor::new(st_coords.clone(), x.clone(), cin).unwrap();
    let (_, cache) = conv_forward(kind, &st, &rb, &p, true).unwrap();
    let grads = layer_backward(kind, LayerRef::Conv(&p), cache.as_ref(), &upstream).unwrap();

    let loss = |x: &[f64], p: &ConvParams<f64>| {
        let st = SparseTensor::new(st_coords.clone(), x.to_vec(), cin).unwrap();
        dot(conv_forward(kind, &st, &rb, p, false).unwrap().0.features(), &upstream)
    };
    check_gradient(&x, &grads.input, |v| loss(v, &p));
    check_gradient(&p.weights, &grads.params[0], |w| {
        let mut q = p.clone();
        q.weights = w.to_vec();
        loss(&x, &q)
    });
    check_gradient(p.bias.as_ref().unwrap(), &grads.params[1], |b| {
        let mut q = p.clone();
        q.bias = Some(b.to_vec());
        loss(&x, &q)
    });
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..8 {
        conv_case(LayerKind::SubmConv, seed);
        conv_case(LayerKind::StridedConv, 100 + seed);
        conv_case(LayerKind::InverseConv, 200 + seed);
    }
}

#[test]
fn norm_activation_head_gradients_match_finite_differences() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.random_range(2..20);
        let coords = random_support(&mut rng, 5, n);
        let ch = rng.random_range(1..4);
        let x = random_vec(&mut rng, n * ch);

        let p = NormParams { gamma: random_vec(&mut rng, ch), beta: random_vec(&mut rng, ch), eps: 1e-5 };
        let up = random_vec(&mut rng, n * ch);
        let st = SparseTensor::new(coords.clone(), x.clone(), ch).unwrap();
        let (_, cache) = instance_norm_forward(&st, &p, true).unwrap();
        let g = layer_backward(LayerKind::InstanceNorm, LayerRef::Norm(&p), cache.as_ref(), &up).unwrap();
        let norm_loss = |x: &[f64], p: &NormParams<f64>| {
            let st = SparseTensor::new(coords.clone(), x.to_vec(), ch).unwrap();
            dot(sparse_instance_norm(&st, p).unwrap().features(), &up)
        };
        check_gradient(&x, &g.input, |v| norm_loss(v, &p));
        check_gradient(&p.gamma, &g.params[0], |v| norm_loss(&x, &NormParams { gamma: v.to_vec(), ..p.clone() }));
        check_gradient(&p.beta, &g.params[1], |v| norm_loss(&x, &NormParams { beta: v.to_vec(), ..p.clone() }));

        let (_, cache) = leaky_relu_train(&st, 0.01, true).unwrap();
        let g = layer_backward(LayerKind::LeakyRelu, LayerRef::LeakyRelu { slope: 0.01 }, cache.as_ref(), &up).unwrap();
        check_gradient(&x, &g.input, |v| {
            let st = SparseTensor::new(coords.clone(), v.to_vec(), ch).unwrap();
            dot(leaky_relu(&st, 0.01).unwrap().features(), &up)
        });

        let k = rng.random_range(2..5);
        let hp = HeadParams {
            w1: random_vec(&mut rng, ch * ch),
            b1: random_vec(&mut rng, ch),
            w2: random_vec(&mut rng, ch * k),
            b2: random_vec(&mut rng, k),
            channels: ch,
            classes: k,
            slope: 0.01,
        };
        let up = random_vec(&mut rng, n * k);
        let (_, cache) = mlp_head_train(&st, &hp, true).unwrap();
        let g = layer_backward(LayerKind::MlpHead, LayerRef::MlpHead(&hp), cache.as_ref(), &up).unwrap();
        let head_loss = |x: &[f64], hp: &HeadParams<f64>| {
            let st = SparseTensor::new(coords.clone(), x.to_vec(), ch).unwrap();
            dot(mlp_head_forward(&st, hp).unwrap().features(), &up)
        };
        check_gradient(&x, &g.input, |v| head_loss(v, &hp));
        check_gradient(&hp.w1, &g.params[0], |v| head_loss(&x, &HeadParams { w1: v.to_vec(), ..hp.clone() }));
        check_gradient(&hp.b1, &g.params[1], |v| head_loss(&x, &HeadParams { b1: v.to_vec(), ..hp.clone() }));
        check_gradient(&hp.w2, &g.params[2], |v| head_loss(&x, &HeadParams { w2: v.to_vec(), ..hp.clone() }));
        check_gradient(&hp.b2, &g.params[3], |v| head_loss(&x, &HeadParams { b2: v.to_vec(), ..hp.clone() }));
    }
}

#[test]
fn conv_is_linear_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let coords = random_support(&mut rng, 6, 40);
    let rb = subm_rb(&coords);
    let p = random_conv(&mut rng, 27, 2, 3, false);
    let (x, y) = (random_vec(&mut rng, 80), random_vec(&mut rng, 80));
    let (alpha, beta) = (0.7, -1.3);
    let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
    let run = |v: &[f64]| {
        subm_conv_forward(&SparseTensor::new(coords.clone(), v.to_vec(), 2).unwrap(), &rb, &p)
            .unwrap()
            .into_features()
    };
    let (fx, fy, fc) = (run(&x), run(&y), run(&combo));
    let want: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| alpha * a + beta * b).collect();
    assert_close(&fc, &want, 1e-12);
}

#[test]
fn conv_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let coords = random_support(&mut rng, 6, 40);
    let st = SparseTensor::new(coords.clone(), random_vec(&mut rng, 80), 2).unwrap();
    let p = random_conv(&mut rng, 27, 2, 2, true);
    let out = subm_conv_forward(&st, &subm_rb(&coords), &p).unwrap();

    let mut perm: Vec<usize> = (0..40).collect();
    for i in (1..40).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pst = st.permuted(&perm);
    let pout = subm_conv_forward(&pst, &subm_rb(pst.coords()), &p).unwrap();
    assert_close(pout.features(), out.permuted(&perm).features(), 1e-12);
}
