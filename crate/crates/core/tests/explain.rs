use paxnet::autodiff::{Tape, Tensor};
use paxnet::capsnet::{AutoencoderModel, ModelConfig, PaXNetModel, Sample};
use paxnet::explain::{
    cam_from, default_grid, grad_cam, layer_names, overlay, per_provider_cams, robustness_sweep, sweep_csv, Transform,
};
use paxnet::imgproc::GrayImage;
use paxnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini(seed: u64) -> PaXNetModel {
    let cfg = ModelConfig::mini();
    let ae = AutoencoderModel::new(cfg.autoencoder.clone(), seed).unwrap();
    PaXNetModel::new(cfg, &ae, seed).unwrap()
}

fn tooth(seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(32, 32, |x, y| {
        let inside = (8..24).contains(&x) && (6..28).contains(&y);
        (if inside { 0.8 } else { 0.1 }) + 0.1 * rng.random::<f64>()
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Score = sum(v * swish(conv(x, k))); the activation is the conv output, so
/// its gradient is v * swish'(a), written out by hand.
#[test]
fn toy_network_matches_hand_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[1, 1, 6, 6], 1.0, &mut rng);
    let k = Tensor::uniform(&[2, 1, 3, 3], 1.0, &mut rng);
    let v = Tensor::uniform(&[1, 2, 6, 6], 1.0, &mut rng);

    let mut t = Tape::new();
    let xv = t.constant(x);
    let kv = t.param(k);
    let vv = t.constant(v.clone());
    let a = t.conv2d(xv, kv, None, 1, 1).unwrap();
    let s = t.swish(a);
    let p = t.mul(s, vv).unwrap();
    let score = t.sum(p);
    t.backward(score).unwrap();
    let act = t.value(a).clone();
    let got = cam_from(&act, &t.grad(a).unwrap(), 12).unwrap();

    let hand: Vec<f64> = act
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &v)| {
            let s = sigmoid(a);
            v * s * (1.0 + a * (1.0 - s))
        })
        .collect();
    let hand = Tensor::new(act.shape(), hand).unwrap();
    let want = cam_from(&act, &hand, 12).unwrap();
    assert_eq!((got.width(), got.height()), (12, 12));
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((g - w).abs() < 1e-10);
    }

    // Weighted map before resizing, by hand: weights are channel means.
    let hw = 36;
    let weights: Vec<f64> = (0..2).map(|c| hand.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let raw: Vec<f64> = (0..hw)
        .map(|i| (weights[0] * act.data()[i] + weights[1] * act.data()[hw + i]).max(0.0))
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let native = cam_from(&act, &t.grad(a).unwrap(), 6).unwrap();
    for (g, r) in native.data().iter().zip(&raw) {
        assert!((g - r / max).abs() < 1e-10);
    }
}

#[test]
fn maps_per_provider_and_fusion() {
    let m = mini(2);
    let img = tooth(3);
    let maps = per_provider_cams(&m, Sample::anonymous(&img), 1).unwrap();
    assert_eq!(maps.len(), 3);
    let names: Vec<&str> = maps.iter().map(|h| h.source_layer.as_str()).collect();
    assert_eq!(names, layer_names(&m).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(names[2], "fusion");
    for h in &maps {
        assert_eq!((h.values.width(), h.values.height()), (32, 32));
        assert!(h.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let max = h.values.data().iter().cloned().fold(0.0, f64::max);
        assert!(h.is_zero() || (max - 1.0).abs() < 1e-12);
    }
    // The encoder is frozen but still carries gradient to its last layer.
    assert!(!maps[1].is_zero(), "frozen provider map is empty");
}

#[test]
fn maps_are_deterministic() {
    let img = tooth(4);
    let a = per_provider_cams(&mini(5), Sample::anonymous(&img), 0).unwrap();
    let b = per_provider_cams(&mini(5), Sample::anonymous(&img), 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_input_gives_empty_map() {
    let m = mini(6);
    // Zero padding turns any other constant into a framed square.
    let flat = GrayImage::from_fn(32, 32, |_, _| 0.0);
    for layer in layer_names(&m) {
        let h = grad_cam(&m, Sample::anonymous(&flat), 1, &layer).unwrap();
        assert!(h.is_zero(), "{layer}");
        assert_eq!(h.top_decile().count(), 0);
    }
}

#[test]
fn bad_layer_or_class_is_a_parameter_error() {
    let m = mini(7);
    let img = tooth(8);
    assert!(matches!(grad_cam(&m, Sample::anonymous(&img), 0, "nope"), Err(Error::Parameter(_))));
    assert!(matches!(grad_cam(&m, Sample::anonymous(&img), 2, "fusion"), Err(Error::Parameter(_))));
}

#[test]
fn sweep_identity_and_grid() {
    let m = mini(9);
    let img = tooth(10);
    let rows = robustness_sweep(&m, &img, None, &[Transform::Rotate(0.0), Transform::Scale(1.0)], "fusion").unwrap();
    for r in &rows {
        assert!(!r.changed);
        assert!((r.iou - 1.0).abs() < 1e-12, "{r:?}");
    }
    let rows = robustness_sweep(&m, &img, None, &default_grid(), "fusion").unwrap();
    assert!(rows.len() >= 16);
    let csv = sweep_csv(&rows).unwrap();
    assert_eq!(csv.lines().next(), Some("kind,value,predicted,changed,iou"));
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn overlay_size_and_range() {
    let m = mini(11);
    let img = tooth(12);
    let h = grad_cam(&m, Sample::anonymous(&img), 1, "fusion").unwrap();
    let rgb = overlay(&img, &h);
    assert_eq!(rgb.len(), 32 * 32);
    assert!(rgb.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}
