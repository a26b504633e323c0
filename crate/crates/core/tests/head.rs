use cmac::head::{batch_loss, cross_entropy, multitask_loss, smooth_l1, DetectionHead};
use cmac::nn::{Init, Linear};
use cmac::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero(store: &mut ParamStore, lin: Linear) {
    for id in [lin.weight, lin.bias] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
}

#[test]
fn zero_classifier_is_uniform() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = DetectionHead::new(&mut store, "heads", 5, 5, 3, Init::Gaussian(0.5), &mut rng);
    zero(&mut store, head.cls);
    let mut g = Graph::new();
    let local = g.input(Tensor::uniform(&[4, 5], -2.0, 2.0, &mut rng));
    let p = head.classify(&mut g, &store, local, None).unwrap();
    assert!(g.value(p).data().iter().all(|&x| x == 0.25));
}

#[test]
fn classifier_bias_sets_odds() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = DetectionHead::new(&mut store, "heads", 3, 3, 1, Init::Gaussian(0.5), &mut rng);
    zero(&mut store, head.cls);
    *store.get_mut(head.cls.bias) = Tensor::vector(&[std::f64::consts::LN_2, 0.0]);
    let mut g = Graph::new();
    let local = g.input(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng));
    let p = head.classify(&mut g, &store, local, None).unwrap();
    for row in g.value(p).data().chunks(2) {
        assert!((row[0] - 2.0 / 3.0).abs() < 1e-15 && (row[1] - 1.0 / 3.0).abs() < 1e-15);
    }
    let t = head.regress(&mut g, &store, local).unwrap();
    assert_eq!(g.shape(t), &[2, 4]);
}

#[test]
fn regression_ignores_global_context() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = DetectionHead::new(&mut store, "heads", 8, 4, 3, Init::Gaussian(0.5), &mut rng);
    let mut g = Graph::new();
    let local = g.input(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
    let global = g.input(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
    head.classify(&mut g, &store, local, Some(global)).unwrap();
    let t = head.regress(&mut g, &store, local).unwrap();
    assert_eq!(g.shape(t), &[3, 12]);
    let loss = g.sum(t);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt_or_zero(global).data().iter().all(|&x| x == 0.0));
    assert!(grads.wrt_or_zero(local).max_abs() > 0.0);
}

#[test]
fn background_rows_add_no_localization_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let logits = g.input(Tensor::uniform(&[6, 4], -2.0, 2.0, &mut rng));
    let probs = g.softmax(logits).unwrap();
    let offsets = g.input(Tensor::uniform(&[6, 12], -3.0, 3.0, &mut rng));
    let zeros = g.input(Tensor::zeros(&[6, 12]));
    let labels = [0; 6];
    let targets = [[0.7, -0.2, 1.5, 0.1]; 6];
    let a = batch_loss(&mut g, probs, offsets, &labels, &targets).unwrap();
    let b = batch_loss(&mut g, probs, zeros, &labels, &targets).unwrap();
    assert_eq!(g.value(a.loc).item(), 0.0);
    assert_eq!(g.value(a.cls).item().to_bits(), g.value(b.cls).item().to_bits());
    let grads = g.backward(a.loc).unwrap();
    assert!(grads.wrt_or_zero(offsets).data().iter().all(|&x| x == 0.0));

    let p = g.value(probs).data()[..4].to_vec();
    let loss = multitask_loss(&p, 0, &[9.0, -9.0, 9.0, 9.0], &[0.0; 4]);
    assert_eq!(loss.to_bits(), cross_entropy(&p, 0).to_bits());
}

#[test]
fn smooth_l1_reference_values() {
    assert_eq!(smooth_l1(0.0), 0.0);
    assert_eq!(smooth_l1(0.5), 0.125);
    assert_eq!(smooth_l1(2.0), 1.5);
    assert_eq!(smooth_l1(-2.0), 1.5);
    assert_eq!(smooth_l1(1.0), 0.5);
}
