use paxnet::autodiff::{container, gradcheck, ops, ParamStore, Tensor};
use paxnet::capsnet::{
    self, dynamic_routing, loss_on_tape, paxnet_forward, train_autoencoder, AeConfig, AeTrainConfig,
    AutoencoderModel, GradMode, Masking, ModelConfig, PaXNetModel, ProviderSpec, Sample,
};
use paxnet::imgproc::GrayImage;
use paxnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini_model(seed: u64) -> PaXNetModel {
    let cfg = ModelConfig::mini();
    let ae = AutoencoderModel::new(cfg.autoencoder.clone(), seed).unwrap();
    PaXNetModel::new(cfg, &ae, seed).unwrap()
}

fn noise_image(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(size, size, |_, _| rng.random::<f64>())
}

/// Plain-loop routing recurrence over `u[i][j][k]`.
fn reference_routing(u: &[Vec<Vec<f64>>], iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let m = u.len();
    let n = u[0].len();
    let d = u[0][0].len();
    let mut b = vec![vec![0.0; n]; m];
    let mut v = vec![vec![0.0; d]; n];
    let mut cs = Vec::new();
    for _ in 0..iters {
        let mut c = vec![vec![0.0; n]; m];
        for i in 0..m {
            let mx = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - mx).exp()).sum();
            for j in 0..n {
                c[i][j] = (b[i][j] - mx).exp() / z;
            }
        }
        for j in 0..n {
            let mut s = vec![0.0; d];
            for i in 0..m {
                for k in 0..d {
                    s[k] += c[i][j] * u[i][j][k];
                }
            }
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let f = if n2 > 0.0 { n2.sqrt() / (1.0 + n2) } else { 0.0 };
            v[j] = s.iter().map(|x| x * f).collect();
        }
        for i in 0..m {
            for j in 0..n {
                b[i][j] += (0..d).map(|k| u[i][j][k] * v[j][k]).sum::<f64>();
            }
        }
        cs.push(c);
    }
    (v, cs)
}

#[test]
fn routing_matches_reference_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let u: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| (0..2).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let flat: Vec<f64> = u.iter().flatten().flatten().cloned().collect();
    let r = dynamic_routing(&Tensor::new(&[3, 2, 4], flat).unwrap(), 3).unwrap();
    let (v, cs) = reference_routing(&u, 3);
    for j in 0..2 {
        for k in 0..4 {
            assert!((r.v.data()[j * 4 + k] - v[j][k]).abs() < 1e-12);
        }
    }
    for (ours, theirs) in r.couplings.iter().zip(&cs) {
        for i in 0..3 {
            for j in 0..2 {
                assert!((ours.data()[i * 2 + j] - theirs[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn routing_gradient_on_capsule_toy() {
    // 4 primary capsules, 2 class capsules, gradient w.r.t. W through 3 iterations.
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Tensor::uniform(&[1, 4, 3], 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 2, 5, 3], 0.8, &mut rng);
        let r = gradcheck::check(&[w], None, 1e-4, |t, v| {
            let uu = t.constant(u.clone());
            let uhat = t.capsule_predict(uu, v[0])?;
            let (vv, _) = capsnet::route(t, uhat, 3)?;
            let norms = t.norm_last(vv)?;
            let sq = t.mul(norms, norms)?;
            let wts = t.constant(Tensor::new(&[1, 2], vec![1.0, -0.7]).unwrap());
            let s = t.mul(sq, wts)?;
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
    }
}

#[test]
fn forward_contracts() {
    let model = mini_model(3);
    let img = noise_image(32, 1);
    let a = paxnet_forward(&model, &img).unwrap();
    let b = paxnet_forward(&model, &img).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.v, b.v);
    assert_eq!(a.reconstruction, b.reconstruction);
    assert!((a.probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(a.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let norms = ops::norm_last(&a.v).unwrap();
    assert!(norms.data().iter().all(|&n| n < 1.0 + 1e-9));
    assert!(a.reconstruction.data().iter().all(|&p| (0.0..=1.0).contains(&p)));

    // Inputs at another resolution are resized first.
    let big = noise_image(50, 2);
    assert!(paxnet_forward(&model, &big).is_ok());
}

#[test]
fn cnn_only_forward() {
    let base = ModelConfig::mini();
    let ae = AutoencoderModel::new(base.autoencoder.clone(), 0).unwrap();
    let model = PaXNetModel::new(base.cnn_only(), &ae, 0).unwrap();
    assert_eq!(model.providers.len(), 1);
    let out = paxnet_forward(&model, &noise_image(32, 4)).unwrap();
    assert!((out.probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn config_rules() {
    let mut cfg = ModelConfig::mini();
    cfg.providers.push(ProviderSpec::Cnn { channels: [4, 4] });
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let json = serde_json::to_string(&ModelConfig::mini()).unwrap();
    let back: ModelConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, ModelConfig::mini());
    assert!(serde_json::from_str::<ModelConfig>(r#"{"input_size": 32, "bogus": 1}"#).is_err());
}

#[test]
fn dense_width_projection() {
    let cfg = ModelConfig {
        dense_width: Some(180),
        ..ModelConfig::mini()
    };
    let ae = AutoencoderModel::new(cfg.autoencoder.clone(), 0).unwrap();
    let model = PaXNetModel::new(cfg, &ae, 0).unwrap();
    assert_eq!(model.params["dense.w"].shape()[1], 180);
    assert_eq!(model.params["proj.w"].shape(), &[180, 80]);
    assert!(paxnet_forward(&model, &noise_image(32, 0)).is_ok());
}

#[test]
fn reconstruct_examples() {
    let mut model = mini_model(5);
    for k in ["bridge.w", "bridge.b"] {
        let s = model.params[k].shape().to_vec();
        model.params.insert(k.into(), Tensor::zeros(&s));
    }
    // Fresh decoder biases are zero, so decoding a zero latent gives sigmoid(0).
    let img = model.reconstruct(&Tensor::zeros(&[32])).unwrap();
    assert!(img.data().iter().all(|&p| p == 0.5));

    let model = mini_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let masked = Tensor::uniform(&[32], 1.0, &mut rng);
    let a = model.reconstruct(&masked).unwrap();
    let reloaded = PaXNetModel::from_params(
        model.config.clone(),
        container::decode(&container::to_bytes(&model.params)).unwrap(),
    )
    .unwrap();
    assert_eq!(reloaded.reconstruct(&masked).unwrap(), a);
}

#[test]
fn frozen_weights_get_no_gradient() {
    let model = mini_model(8);
    let img = noise_image(32, 3);
    let mut g = model.graph(&[Sample::anonymous(&img)], GradMode::Train, Masking::Teacher(&[1])).unwrap();
    let loss = loss_on_tape(&mut g.tape, g.norms, g.recon, g.input, &[1], &model.config.loss).unwrap();
    g.tape.backward(loss).unwrap();
    for (name, v) in &g.params {
        let grad = g.tape.grad(*v);
        if name.starts_with("enc.") || name.starts_with("dec.") {
            assert!(grad.is_none(), "{name} received a gradient");
        } else if name != "proj.w" {
            assert!(grad.is_some(), "{name} has no gradient");
        }
    }
}

#[test]
fn explain_mode_reaches_frozen_layers() {
    let model = mini_model(9);
    let img = noise_image(32, 4);
    let mut g = model.graph(&[Sample::anonymous(&img)], GradMode::Explain, Masking::Winner).unwrap();
    let target = g.tape.sum(g.norms);
    g.tape.backward(target).unwrap();
    for layer in ["cnn.conv2", "enc.conv4", "fusion"] {
        assert!(g.tape.grad(g.layers[layer]).is_some(), "{layer}");
    }
}

fn sidecar_store(dir: &std::path::Path, ids: &[&str], size: usize) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    for id in ids {
        store.insert(id.to_string(), Tensor::uniform(&[3, size, size], 1.0, &mut rng));
    }
    let p = dir.join(format!("side{size}.pxn"));
    container::save(&store, &p).unwrap();
    p
}

#[test]
fn sidecar_provider() {
    let dir = tempfile::tempdir().unwrap();
    let base = ModelConfig::mini();
    let ae = AutoencoderModel::new(base.autoencoder.clone(), 0).unwrap();
    let img = noise_image(32, 5);

    for (size, ok) in [(8, true), (4, true), (16, true), (3, false)] {
        let mut cfg = base.clone();
        cfg.providers.push(ProviderSpec::Sidecar {
            name: "ext".into(),
            path: sidecar_store(dir.path(), &["a", "b"], size),
            channels: 3,
            size,
        });
        let model = PaXNetModel::new(cfg, &ae, 0).unwrap();
        let r = model.forward(&[Sample::new(&img, "a"), Sample::new(&img, "b")]);
        if ok {
            assert_eq!(r.unwrap().len(), 2);
            assert!(matches!(model.forward(&[Sample::new(&img, "zzz")]), Err(Error::Data(_))));
        } else {
            assert!(matches!(r, Err(Error::Shape(_))));
        }
    }
}

/// Loss of `model` with its trainable tensors replaced by `values`, plus the
/// analytic gradients when asked for.
fn mini_loss(model: &PaXNetModel, names: &[String], values: &[Tensor], imgs: &[GrayImage], labels: &[usize], grads: bool) -> (f64, Vec<Tensor>) {
    let mut m = model.clone();
    for (n, v) in names.iter().zip(values) {
        m.params.insert(n.clone(), v.clone());
    }
    let samples: Vec<Sample> = imgs.iter().map(Sample::anonymous).collect();
    let mut g = m.graph(&samples, GradMode::Train, Masking::Teacher(labels)).unwrap();
    let loss = loss_on_tape(&mut g.tape, g.norms, g.recon, g.input, labels, &m.config.loss).unwrap();
    let value = g.tape.value(loss).item().unwrap();
    if !grads {
        return (value, Vec::new());
    }
    g.tape.backward(loss).unwrap();
    let gs = names
        .iter()
        .map(|n| g.tape.grad(g.params[n]).unwrap_or_else(|| Tensor::zeros(m.params[n].shape())))
        .collect();
    (value, gs)
}

#[test]
fn mini_model_gradient_check() {
    let model = mini_model(10);
    let imgs: Vec<GrayImage> = (0..2).map(|i| noise_image(32, 20 + i)).collect();
    let labels = [0usize, 1];
    let names = model.trainable_names();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params[n].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| (0..3).map(|_| rng.random_range(0..t.len())).collect())
        .collect();
    let (_, analytic) = mini_loss(&model, &names, &inputs, &imgs, &labels, true);
    let r = gradcheck::compare(&inputs, &analytic, Some(&coords), 1e-5, |xs| {
        Ok(mini_loss(&model, &names, xs, &imgs, &labels, false).0)
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn autoencoder_overfits_one_image() {
    let cfg = AeConfig {
        input_size: 16,
        channels: [4, 4, 4, 4],
    };
    let img = GrayImage::from_fn(16, 16, |x, y| 0.2 + 0.6 * ((x / 4 + y / 4) % 2) as f64);
    let train = AeTrainConfig {
        epochs: 1500,
        lr: 1e-2,
        batch_size: 1,
        seed: 0,
    };
    let (model, hist) = train_autoencoder(std::slice::from_ref(&img), &cfg, &train).unwrap();
    let rec = model.reconstruct(&[&img]).unwrap();
    let mse: f64 = rec[0].data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 256.0;
    assert!(mse < 1e-3, "mse {mse}, last epoch {:?}", hist.last());
}

#[test]
fn autoencoder_zero_lr_and_empty() {
    let cfg = AeConfig {
        input_size: 16,
        channels: [2, 2, 2, 2],
    };
    let img = noise_image(16, 0);
    let train = AeTrainConfig {
        epochs: 3,
        lr: 0.0,
        batch_size: 1,
        seed: 4,
    };
    let (model, _) = train_autoencoder(&[img], &cfg, &train).unwrap();
    let fresh = AutoencoderModel::new(cfg.clone(), 4).unwrap();
    assert_eq!(container::to_bytes(&model.params), container::to_bytes(&fresh.params));
    assert!(matches!(train_autoencoder(&[], &cfg, &train), Err(Error::Data(_))));
}
