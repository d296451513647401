use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::pipeline::DatasetStats;
use crate::voxgrid::VoxelCoord;

fn random_support(rng: &mut ChaCha8Rng, extent: i32, n: usize) -> Vec<VoxelCoord> {
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert(VoxelCoord::new(
            rng.random_range(0..extent),
            rng.random_range(0..extent),
            rng.random_range(0..extent),
        ));
    }
    set.into_iter().collect()
}

fn random_input(seed: u64, extent: i32, n: usize) -> SparseTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random_support(&mut rng, extent, n);
    let features = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    SparseTensor::new(coords, features, 1).unwrap()
}

/// Labels from geometry so the task is learnable: class by distance band from a corner.
fn banded_labels(st: &SparseTensor<f64>, classes: u16) -> Vec<u16> {
    st.coords().iter().map(|c| ((c.x + c.y + c.z) as u16 / 4) % classes).collect()
}

fn micro_config() -> UNetConfig {
    UNetConfig { levels: 2, base_widths: vec![2, 4], width_factor: 1.0, classes: 2, ..UNetConfig::default() }
}

#[test]
fn default_channels_follow_width_factor() {
    assert_eq!(UNetConfig::default().channels(), vec![16, 32, 64, 128]);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        UNetConfig { levels: 1, base_widths: vec![4], ..UNetConfig::default() },
        UNetConfig { base_widths: vec![4, 8, 8, 32], ..UNetConfig::default() },
        UNetConfig { classes: 1, ..UNetConfig::default() },
        UNetConfig { width_factor: 0.01, ..UNetConfig::default() },
        UNetConfig { base_widths: vec![4, 8, 16], ..UNetConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(init_network::<f32>(&cfg, 0), Err(Error::InvalidConfig(_))), "{cfg:?}");
    }
}

#[test]
fn default_parameter_count_is_pinned() {
    let cfg = UNetConfig::default();
    // Independent count straight from the block shapes.
    let ch = cfg.channels();
    let block = |k: usize, cin: usize, cout: usize| k * cin * cout + 2 * cout;
    let mut expected = 0;
    for l in 0..4 {
        expected += block(27, if l == 0 { 1 } else { ch[l] }, ch[l]) + block(27, ch[l], ch[l]);
        if l < 3 {
            expected += block(8, ch[l], ch[l + 1]) + block(8, ch[l + 1], ch[l]);
            expected += block(27, 2 * ch[l], ch[l]) + block(27, ch[l], ch[l]);
        }
    }
    expected += 16 * 16 + 16 + 16 * 4 + 4;
    assert_eq!(cfg.parameter_count(), expected);
    assert_eq!(cfg.parameter_count(), 1_778_468);
    let net = init_network::<f32>(&cfg, 0).unwrap();
    assert_eq!(net.slots().iter().map(|s| s.len()).sum::<usize>(), 1_778_468);
}

#[test]
fn layout_names_match_slots() {
    let cfg = micro_config();
    let net = init_network::<f64>(&cfg, 3).unwrap();
    let layout = cfg.parameter_layout();
    assert_eq!(layout.len(), net.slots().len());
    for ((name, shape), slot) in layout.iter().zip(net.slots()) {
        assert_eq!(shape.iter().product::<usize>(), slot.len(), "{name}");
    }
    let names: BTreeSet<_> = layout.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), layout.len());
    assert!(names.contains("enc0.block0.conv.weight"));
    assert!(names.contains("up0.conv.weight"));
    assert!(names.contains("head.fc2.bias"));
}

#[test]
fn init_is_deterministic() {
    let cfg = UNetConfig::default();
    let a = init_network::<f32>(&cfg, 42).unwrap();
    let b = init_network::<f32>(&cfg, 42).unwrap();
    let c = init_network::<f32>(&cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_constants() {
    let net = init_network::<f32>(&UNetConfig::default(), 1).unwrap();
    let blocks = net.encoder.iter().flatten().chain(&net.down).chain(&net.up).chain(net.decoder.iter().flatten());
    for b in blocks {
        assert!(b.norm.gamma.iter().all(|&g| g == 1.0));
        assert!(b.norm.beta.iter().all(|&v| v == 0.0));
        assert!(b.conv.bias.is_none());
    }
    assert!(net.head.b1.iter().chain(&net.head.b2).all(|&v| v == 0.0));
}

#[test]
fn he_normal_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fan_in = 27 * 64;
    let w = he_normal(27 * 64 * 64, fan_in, &mut rng);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let target = 2.0 / fan_in as f64;
    assert!((var - target).abs() <= 0.1 * target, "variance {var} vs {target}");
}

#[test]
fn forward_preserves_coordinates() {
    let net = init_network::<f64>(&UNetConfig::default(), 5).unwrap();
    let st = random_input(1, 9, 120);
    let logits = net.predict_logits(&st).unwrap();
    assert_eq!(logits.coords(), st.coords());
    assert_eq!(logits.channels(), 4);
    assert!(logits.features().iter().all(|v| v.is_finite()));
}

#[test]
fn single_voxel_forward() {
    let net = init_network::<f32>(&UNetConfig::default(), 5).unwrap();
    let st = SparseTensor::new(vec![VoxelCoord::new(3, 1, 4)], vec![0.7f32], 1).unwrap();
    let logits = net.predict_logits(&st).unwrap();
    assert_eq!(logits.len(), 1);
    assert_eq!(logits.features().len(), 4);
    assert!(logits.features().iter().all(|v| v.is_finite()));
}

#[test]
fn forward_rejects_bad_input() {
    let net = init_network::<f32>(&micro_config(), 5).unwrap();
    assert!(matches!(net.predict_logits(&SparseTensor::empty(1)), Err(Error::EmptyTensor)));
    let two = SparseTensor::new(vec![VoxelCoord::new(0, 0, 0)], vec![1.0f32, 2.0], 2).unwrap();
    assert!(matches!(net.predict_logits(&two), Err(Error::ShapeMismatch(_))));
}

#[test]
fn forward_is_permutation_equivariant() {
    let net = init_network::<f64>(&UNetConfig::default(), 8).unwrap();
    let st = random_input(2, 8, 90);
    let mut perm: Vec<usize> = (0..st.len()).collect();
    perm.reverse();
    perm.swap(3, 40);
    let a = net.predict_logits(&st).unwrap();
    let b = net.predict_logits(&st.permuted(&perm)).unwrap();
    let k = 4;
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..k {
            let (x, y) = (b.features()[new * k + c], a.features()[old * k + c]);
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "row {old} class {c}: {x} vs {y}");
        }
    }
}

#[test]
fn forward_is_worker_count_independent() {
    let net = init_network::<f32>(&UNetConfig::default(), 8).unwrap();
    let st = random_input(3, 12, 400).cast::<f32>();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| net.predict_logits(&st).unwrap().into_features())
    };
    let one = run(1);
    for threads in [2, 3, 8] {
        let other = run(threads);
        assert!(one.iter().zip(&other).all(|(a, b)| a.to_bits() == b.to_bits()), "{threads} workers");
    }
}

#[test]
fn dense_reference_matches_sparse() {
    let net = init_network::<f64>(&UNetConfig::default(), 11).unwrap();
    for (seed, extent, n) in [(4u64, 9i32, 150usize), (5, 7, 1), (6, 11, 60)] {
        let st = random_input(seed, extent, n);
        let sparse = net.predict_logits(&st).unwrap();
        let dense = dense_reference_forward(&net, &st, [extent as usize; 3]).unwrap();
        assert_eq!(dense.coords(), st.coords());
        for (a, b) in sparse.features().iter().zip(dense.features()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn dense_reference_handles_odd_anisotropic_extent() {
    let net = init_network::<f64>(&micro_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut set = BTreeSet::new();
    while set.len() < 40 {
        set.insert(VoxelCoord::new(rng.random_range(0..7), rng.random_range(0..4), rng.random_range(0..5)));
    }
    let n = set.len();
    let st = SparseTensor::new(set.into_iter().collect(), (0..n).map(|i| i as f64 * 0.1).collect(), 1).unwrap();
    let sparse = net.predict_logits(&st).unwrap();
    let dense = dense_reference_forward(&net, &st, [7, 4, 5]).unwrap();
    for (a, b) in sparse.features().iter().zip(dense.features()) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }
    assert!(matches!(dense_reference_forward(&net, &st, [6, 4, 5]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn zero_learning_rate_is_identity() {
    let cfg = UNetConfig { classes: 3, ..UNetConfig::default() };
    let mut net = init_network::<f32>(&cfg, 2).unwrap();
    let before = net.clone();
    let st = random_input(7, 6, 80);
    let labels = banded_labels(&st, 3);
    let window = st.cast::<f32>().with_labels(labels).unwrap();
    let mut opt = OptimState::new(&net, AdamConfig { learning_rate: 0.0, ..AdamConfig::default() });
    let loss = LossConfig { classes: 3, ..LossConfig::default() };
    train_step(&mut net, &mut opt, &window, &loss).unwrap();
    assert_eq!(opt.step, 1);
    for (a, b) in net.slots().iter().zip(before.slots()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn train_step_requires_labels_and_matching_classes() {
    let mut net = init_network::<f32>(&micro_config(), 2).unwrap();
    let mut opt = OptimState::new(&net, AdamConfig::default());
    let st = random_input(7, 4, 10).cast::<f32>();
    let loss = LossConfig { classes: 2, ..LossConfig::default() };
    assert!(train_step(&mut net, &mut opt, &st, &loss).is_err());
    let labelled = st.with_labels(vec![0; 10]).unwrap();
    let wrong = LossConfig { classes: 3, ..LossConfig::default() };
    assert!(matches!(train_step(&mut net, &mut opt, &labelled, &wrong), Err(Error::InvalidConfig(_))));
}

#[test]
fn overfits_a_tiny_window() {
    let cfg = UNetConfig { classes: 3, ..UNetConfig::default() };
    let mut net = init_network::<f32>(&cfg, 21).unwrap();
    let st = random_input(8, 7, 180);
    let labels = banded_labels(&st, 3);
    let window = st.cast::<f32>().with_labels(labels).unwrap();
    let mut opt = OptimState::new(&net, AdamConfig::default());
    let loss = LossConfig { classes: 3, ..LossConfig::default() };
    let losses: Vec<f64> = (0..50).map(|_| train_step(&mut net, &mut opt, &window, &loss).unwrap()).collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < first);
    assert!(last < 0.25 * first, "loss went from {first} to {last}");
}

fn total_loss(net: &UNet<f64>, window: &SparseTensor<f64>, loss: &LossConfig) -> f64 {
    let logits = net.predict_logits(window).unwrap();
    combined_loss(logits.features(), window.labels().unwrap(), loss).unwrap().0
}

#[test]
fn micro_net_gradient_matches_finite_differences() {
    let cfg = micro_config();
    let loss = LossConfig { classes: 2, ..LossConfig::default() };
    for seed in [1u64, 2] {
        let mut net = init_network::<f64>(&cfg, seed).unwrap();
        // Non-trivial affine norm parameters exercise their gradients too.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for ((name, _), slot) in cfg.parameter_layout().iter().zip(net.slots_mut()) {
            if !name.ends_with(".weight") {
                slot.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let st = random_input(seed + 10, 4, 28);
        let labels = banded_labels(&st, 2);
        let window = st.with_labels(labels).unwrap();

        let (logits, trace) = net.forward(&window, true).unwrap();
        let (_, d_logits) = combined_loss(logits.features(), window.labels().unwrap(), &loss).unwrap();
        let grads = net.backward(&trace.unwrap(), &d_logits).unwrap();

        let h = 1e-5;
        let layout = cfg.parameter_layout();
        let analytic: Vec<Vec<f64>> = grads.slots().into_iter().cloned().collect();
        for (s, (name, _)) in layout.iter().enumerate() {
            for i in 0..analytic[s].len() {
                let original = net.slots()[s][i];
                net.slots_mut()[s][i] = original + h;
                let plus = total_loss(&net, &window, &loss);
                net.slots_mut()[s][i] = original - h;
                let minus = total_loss(&net, &window, &loss);
                net.slots_mut()[s][i] = original;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[s][i];
                let err = (numeric - a).abs();
                assert!(
                    err <= 1e-8 || err <= 1e-3 * numeric.abs().max(a.abs()),
                    "{name}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}

fn stats() -> DatasetStats {
    DatasetStats { mean: 700.0 / 3.0, std: 0.1 + 0.2 }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bnt");
    let cfg = micro_config();
    let mut net = init_network::<f32>(&cfg, 77).unwrap();
    let mut opt = OptimState::new(&net, AdamConfig::default());
    let st = random_input(1, 4, 20).cast::<f32>().with_labels(vec![1; 20]).unwrap();
    train_step(&mut net, &mut opt, &st, &LossConfig { classes: 2, ..LossConfig::default() }).unwrap();

    let ckpt = Checkpoint::from_network(&net, stats(), 77, Some(&opt));
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.network::<f32>().unwrap(), net);
    assert_eq!(loaded.optimizer_state::<f32>().unwrap().unwrap(), opt);
    assert_eq!(loaded.stats, stats());
    assert_eq!(loaded.seed, 77);

    let bare = Checkpoint::from_network(&net, stats(), 77, None);
    let bytes = bare.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(back.optimizer_state::<f32>().unwrap().is_none());
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let net = init_network::<f32>(&micro_config(), 1).unwrap();
    let bytes = Checkpoint::from_network(&net, stats(), 1, None).to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"BNT1");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic(_))));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::VersionMismatch { found: 9, expected: 1 })));

    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::TruncatedFile(_))));

    let mut flipped = bytes.clone();
    let at = bytes.len() - 12;
    flipped[at] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::ChecksumMismatch { .. })));
}

#[test]
fn every_flipped_checkpoint_byte_is_an_error() {
    let net = init_network::<f32>(&micro_config(), 1).unwrap();
    let bytes = Checkpoint::from_network(&net, stats(), 1, None).to_bytes().unwrap();
    for i in 0..bytes.len() {
        for mask in [0x01, 0x80, 0xff] {
            let mut copy = bytes.clone();
            copy[i] ^= mask;
            assert!(Checkpoint::from_bytes(&copy).is_err(), "byte {i} mask {mask:#x}");
        }
    }
}

#[test]
fn checkpoint_shape_must_match_config() {
    let net = init_network::<f32>(&micro_config(), 1).unwrap();
    let mut ckpt = Checkpoint::from_network(&net, stats(), 1, None);
    ckpt.tensors[0].shape = vec![27, 1, 1];
    ckpt.tensors[0].data.truncate(27);
    let bytes = ckpt.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::ShapeMismatch(_))));

    let mut missing = Checkpoint::from_network(&net, stats(), 1, None);
    missing.tensors.pop();
    assert!(matches!(Checkpoint::from_bytes(&missing.to_bytes().unwrap()), Err(Error::ShapeMismatch(_))));
}
