mod common;

use cardionet::checkpoint::Checkpoint;
use cardionet::model::{CardioNet, CardioNetConfig, Mode};
use cardionet::ops::{conv2d, matmul, maxpool2d, relu};
use cardionet::Tensor;
use common::grad::random_tensor;
use common::small_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Forward pass written directly against the primitive ops.
fn reference_forward(net: &CardioNet<f64>, images: &Tensor<f64>) -> Tensor<f64> {
    let cfg = net.config();
    let p = |n: &str| net.param(n).unwrap().clone();
    let mut x = images.clone();
    for b in 1..=cfg.conv_channels.len() {
        let y = conv2d(
            &x,
            &p(&format!("conv{b}.weight")),
            &p(&format!("conv{b}.bias")),
            1,
            1,
        )
        .unwrap();
        x = maxpool2d(&relu(&y), 2, 2).unwrap().0;
    }
    let n = x.shape()[0];
    let mut x = x.reshape(&[n, cfg.flatten_width().unwrap()]).unwrap();
    let fc = cfg.fc_widths.len() + 1;
    for b in 1..=fc {
        let mut y = matmul(&x, &p(&format!("fc{b}.weight"))).unwrap();
        let bias = p(&format!("fc{b}.bias"));
        let width = bias.len();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bias.data()[i % width];
        }
        x = if b < fc { relu(&y) } else { y };
    }
    x
}

#[test]
fn forward_matches_op_composition() {
    let net = CardioNet::<f64>::new(small_config(), 5).unwrap();
    let images = random_tensor(&[3, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(9));
    let got = net.forward_eval(&images).unwrap();
    let want = reference_forward(&net, &images);
    assert_eq!(got.shape(), &[3, 3]);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let (train_logits, _) = net.forward(&images, Mode::Train).unwrap();
    assert_eq!(train_logits, got);
}

#[test]
fn default_architecture_shapes() {
    let cfg = CardioNetConfig::default();
    assert_eq!(cfg.spatial_sizes().unwrap(), vec![75, 37, 18, 9, 4]);
    assert_eq!(cfg.flatten_width().unwrap(), 128 * 4 * 4);
    let net = CardioNet::<f32>::new(cfg, 0).unwrap();
    let expected = [
        16 * 3 * 9 + 16,
        32 * 16 * 9 + 32,
        64 * 32 * 9 + 64,
        128 * 64 * 9 + 128,
        2048 * 256 + 256,
        256 * 128 + 128,
        128 * 64 + 64,
        64 * 3 + 3,
    ];
    assert_eq!(net.num_parameters(), expected.iter().sum::<usize>());
    assert_eq!(net.num_parameters(), 663_331);
    let logits = net
        .forward_eval(&Tensor::full(&[2, 3, 75, 75], 0.5).unwrap())
        .unwrap();
    assert_eq!(logits.shape(), &[2, 3]);
}

#[test]
fn same_seed_same_weights() {
    let a = CardioNet::<f32>::new(small_config(), 42).unwrap();
    let b = CardioNet::<f32>::new(small_config(), 42).unwrap();
    let c = CardioNet::<f32>::new(small_config(), 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn f32_and_f64_agree() {
    let net64 = CardioNet::<f64>::new(small_config(), 8).unwrap();
    let net32: CardioNet<f32> = net64.cast();
    let images = random_tensor(&[2, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(1));
    let a = net64.forward_eval(&images).unwrap();
    let b = net32.forward_eval(&images.cast()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - f64::from(*y)).abs() < 1e-4);
    }
}

#[test]
fn checkpoint_layout_for_default_config() {
    let net = CardioNet::<f32>::new(CardioNetConfig::default(), 3).unwrap();
    let bytes = Checkpoint::from_model(&net, 0, None, None, 3)
        .to_bytes()
        .unwrap();
    assert_eq!(&bytes[..4], b"CDNT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    let tensors: [(&str, &[usize]); 16] = [
        ("conv1.weight", &[16, 3, 3, 3]),
        ("conv1.bias", &[16]),
        ("conv2.weight", &[32, 16, 3, 3]),
        ("conv2.bias", &[32]),
        ("conv3.weight", &[64, 32, 3, 3]),
        ("conv3.bias", &[64]),
        ("conv4.weight", &[128, 64, 3, 3]),
        ("conv4.bias", &[128]),
        ("fc1.weight", &[2048, 256]),
        ("fc1.bias", &[256]),
        ("fc2.weight", &[256, 128]),
        ("fc2.bias", &[128]),
        ("fc3.weight", &[128, 64]),
        ("fc3.bias", &[64]),
        ("fc4.weight", &[64, 3]),
        ("fc4.bias", &[3]),
    ];
    let body: usize = tensors
        .iter()
        .map(|(name, shape)| {
            2 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
        })
        .sum();
    assert_eq!(bytes.len(), 4 + 4 + 4 + meta_len + 4 + body);
    let count_at = 12 + meta_len;
    assert_eq!(
        u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap()),
        16
    );
    let names: Vec<&str> = net.param_names().iter().map(String::as_str).collect();
    let want: Vec<&str> = tensors.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, want);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net = CardioNet::<f32>::new(small_config(), 4).unwrap();
    let ckpt = Checkpoint::from_model(&net, 3, Some(0.9), Some(0.8), 4);
    ckpt.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(loaded.to_model().unwrap(), net);
}
