use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embryo_core::sequence::FrameSequence;
use embryo_net::checkpoint::{decode_checkpoint, encode_checkpoint, load_compatible, save_checkpoint};
use embryo_net::layers::Tensor;
use embryo_net::train::focal_loss_logit;
use embryo_net::{NetError, Network, NetworkConfig};

fn random_sequence(id: &str, cfg: &NetworkConfig, rng: &mut impl Rng) -> FrameSequence {
    let mut s = FrameSequence::zeros(id, vec![0.0; cfg.input_frames], cfg.input_side);
    s.data.iter_mut().for_each(|v| *v = rng.gen());
    s.validity_mask.fill(true);
    s
}

fn random_input(cfg: &NetworkConfig, batch: usize, rng: &mut impl Rng) -> Tensor {
    let shape = [batch, cfg.input_frames, cfg.input_side, cfg.input_side, 1];
    let n = shape.iter().product();
    Tensor::from_vec(&shape, (0..n).map(|_| rng.gen::<f64>()).collect())
}

#[test]
fn paper_profile_shape_trace() {
    let net = Network::build(&NetworkConfig::paper(), 0).unwrap();
    let trace = net.shape_trace();
    let get = |name: &str| trace.iter().find(|e| e.name == name).unwrap().shape.clone();
    // independent stride arithmetic: temporal /2 at the stem, 4a and 5a;
    // spatial /2 at the stem, 2a, 3a, 4a and 5a
    assert_eq!(get("Conv3d_1a_7x7"), vec![1, 64, 128, 128, 16]);
    assert_eq!(get("MaxPool3d_2a_3x3"), vec![1, 64, 64, 64, 16]);
    assert_eq!(get("Conv3d_2c_3x3"), vec![1, 64, 64, 64, 48]);
    assert_eq!(get("Mixed_3b"), vec![1, 64, 32, 32, 64]);
    assert_eq!(get("Mixed_3c"), vec![1, 64, 32, 32, 120]);
    assert_eq!(get("MaxPool3d_4a_3x3"), vec![1, 32, 16, 16, 120]);
    assert_eq!(get("Mixed_4f"), vec![1, 32, 16, 16, 208]);
    assert_eq!(get("MaxPool3d_5a_2x2"), vec![1, 16, 8, 8, 208]);
    // 1024 * 0.25 channels, 128 / 8 timesteps
    assert_eq!(get("Mixed_5c"), vec![1, 16, 8, 8, 256]);
    assert_eq!(get("spatial_max_avg_pool"), vec![1, 16, 512]);
    assert_eq!(get("bidirectional"), vec![1, 256]);
    assert_eq!(get("fh"), vec![1, 1]);
    assert_eq!(get("discard"), vec![1, 1]);
}

#[test]
fn tiny_profile_shape_trace() {
    let net = Network::build(&NetworkConfig::tiny(), 0).unwrap();
    let trace = net.shape_trace();
    let last = trace.iter().find(|e| e.name == "Mixed_5c").unwrap();
    assert_eq!(last.shape, vec![1, 4, 2, 2, 64]);
    assert_eq!(trace.iter().find(|e| e.name == "bidirectional").unwrap().shape, vec![1, 32]);
}

#[test]
fn paper_profile_parameter_count_is_pinned() {
    let mut a = Network::build(&NetworkConfig::paper(), 0).unwrap();
    let mut b = Network::build(&NetworkConfig::paper(), 99).unwrap();
    let n = a.param_count();
    assert_eq!(n, b.param_count());
    assert_eq!(n, PAPER_PARAM_COUNT);
}

// convolutions without bias, two batch-norm vectors per unit, two LSTMs
// and two single-unit heads
const PAPER_PARAM_COUNT: usize = 1_428_954;

#[test]
fn eval_mode_is_deterministic_and_bounded() {
    let cfg = NetworkConfig::tiny();
    let net = Network::build(&cfg, 5).unwrap();
    let zeros = FrameSequence::zeros("z", vec![0.0; cfg.input_frames], cfg.input_side);
    let a = net.predict(std::slice::from_ref(&zeros)).unwrap();
    let b = net.predict(std::slice::from_ref(&zeros)).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<FrameSequence> = (0..3).map(|i| random_sequence(&format!("e{i}"), &cfg, &mut rng)).collect();
    for o in net.predict(&batch).unwrap().iter().chain(&a) {
        assert!(o.fh_probability > 0.0 && o.fh_probability < 1.0);
        assert!(o.discard_probability > 0.0 && o.discard_probability < 1.0);
    }
}

#[test]
fn batch_permutation_and_duplicates() {
    let cfg = NetworkConfig::tiny();
    let net = Network::build(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_sequence("a", &cfg, &mut rng);
    let b = random_sequence("b", &cfg, &mut rng);
    let c = random_sequence("c", &cfg, &mut rng);
    let out = net.predict(&[a.clone(), b.clone(), c.clone()]).unwrap();
    let perm = net.predict(&[c.clone(), a.clone(), b.clone()]).unwrap();
    assert_eq!(out[0], perm[1]);
    assert_eq!(out[1], perm[2]);
    assert_eq!(out[2], perm[0]);
    let dup = net.predict(&[b.clone(), a, b]).unwrap();
    assert_eq!(dup[0], dup[2]);
}

#[test]
fn eval_inference_is_shareable_across_threads() {
    let cfg = NetworkConfig::tiny();
    let net = Network::build(&cfg, 8).unwrap();
    let seq = random_sequence("x", &cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let want = net.predict(std::slice::from_ref(&seq)).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..2).map(|_| s.spawn(|| net.predict(std::slice::from_ref(&seq)).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), want);
        }
    });
}

/// Sum of both focal losses over the batch for fixed targets, training mode.
fn loss(net: &mut Network, x: &Tensor, targets: &[(f64, f64)]) -> f64 {
    let (logits, _) = net.forward_train(x).unwrap();
    logits
        .iter()
        .zip(targets)
        .map(|(&(a, b), &(ya, yb))| focal_loss_logit(a, ya, 2.0, 0.5).0 + focal_loss_logit(b, yb, 2.0, 0.5).0)
        .sum()
}

#[test]
fn tiny_gradients_match_central_differences() {
    let mut cfg = NetworkConfig::tiny();
    cfg.dropout_rate = 0.0;
    let mut net = Network::build(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_input(&cfg, 2, &mut rng);
    let targets = [(1.0, 0.0), (0.0, 1.0)];

    let (logits, tape) = net.forward_train(&x).unwrap();
    let mut d_fh = Vec::new();
    let mut d_disc = Vec::new();
    for (&(a, b), &(ya, yb)) in logits.iter().zip(&targets) {
        d_fh.push(focal_loss_logit(a, ya, 2.0, 0.5).1);
        d_disc.push(focal_loss_logit(b, yb, 2.0, 0.5).1);
    }
    net.zero_grad();
    net.backward(tape, &d_fh, &d_disc);
    // backward also advanced the running statistics; training-mode forwards
    // never read them, so finite differences are unaffected

    // one random entry from every parameter tensor; entries with a
    // structurally vanishing gradient are skipped
    let mut picks: Vec<(usize, usize, f64)> = Vec::new();
    let mut k = 0;
    net.visit_params(&mut |p| {
        let i = rng.gen_range(0..p.value.len());
        if p.grad[i].abs() > 1e-5 {
            picks.push((k, i, p.grad[i]));
        }
        k += 1;
    });
    assert!(picks.len() >= 20, "only {} usable parameters", picks.len());

    // small enough that no max-pool or ReLU switches inside the stencil
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for &(tensor, index, analytic) in &picks {
        let nudge = |net: &mut Network, delta: f64| {
            let mut k = 0;
            net.visit_params(&mut |p| {
                if k == tensor {
                    p.value[index] += delta;
                }
                k += 1;
            });
        };
        nudge(&mut net, eps);
        let lp = loss(&mut net, &x, &targets);
        nudge(&mut net, -2.0 * eps);
        let lm = loss(&mut net, &x, &targets);
        nudge(&mut net, eps);
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        assert!(rel <= 1e-4, "tensor {tensor}[{index}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
    }
    eprintln!("checked {} parameters, worst relative error {worst:e}", picks.len());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let cfg = NetworkConfig::tiny();
    let mut net = Network::build(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    net.visit_buffers(&mut |b| b.value.iter_mut().for_each(|v| *v = rng.gen()));
    let meta = serde_json::json!({"note": "x"});
    let bytes = encode_checkpoint(&mut net, 42, meta.clone()).unwrap();
    let (mut back, header) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(header.step, 42);
    assert_eq!(header.meta, meta);
    assert_eq!(encode_checkpoint(&mut back, 42, meta.clone()).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &mut net, 42, meta).unwrap();
    let seq = random_sequence("s", &cfg, &mut rng);
    let (loaded, _) = load_compatible(&path, &cfg).unwrap();
    assert_eq!(loaded.predict(std::slice::from_ref(&seq)).unwrap(), net.predict(&[seq]).unwrap());
    assert!(matches!(load_compatible(&path, &NetworkConfig::paper()), Err(NetError::Incompatible(_))));
}
