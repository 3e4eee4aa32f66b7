//! Encoder invariances, classifier output and checkpoint round trips.

use cot_core::models::{checkpoint, Model, ModelConfig};
use cot_core::pointcloud::{Domain, PointCloud};
use cot_core::renderer::{render_multiview, CameraRig, ImageStack, RenderParams};
use cot_core::rng;
use cot_core::tensor::Tape;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = rng::stream(seed, &[5]);
    let pts = (0..n).map(|_| [0; 3].map(|_| r.random_range(-1.0f32..1.0))).collect();
    PointCloud::new(pts, None, Domain::Source).unwrap()
}

fn model() -> Model {
    Model::new(ModelConfig::default(), 7).unwrap()
}

fn encode3d(m: &Model, c: &PointCloud) -> (Vec<f32>, Vec<f32>) {
    let mut t = Tape::<f32>::new();
    let p = m.bind(&mut t, false);
    let (g, z) = m.encode3d(&mut t, &p, &[c]).unwrap();
    (t.value(g).to_vec(), t.value(z).to_vec())
}

fn encode2d(m: &Model, s: &ImageStack) -> (Vec<f32>, Vec<f32>) {
    let mut t = Tape::<f32>::new();
    let p = m.bind(&mut t, false);
    let (g, z) = m.encode2d(&mut t, &p, &[s]).unwrap();
    (t.value(g).to_vec(), t.value(z).to_vec())
}

#[test]
fn point_encoder_ignores_order_and_duplicates() {
    let m = model();
    let c = random_cloud(1, 40);
    let base = encode3d(&m, &c);
    let mut pts = c.points().to_vec();
    pts.shuffle(&mut rng::stream(2, &[]));
    assert_eq!(encode3d(&m, &c.with_points(pts.clone()).unwrap()), base);
    let doubled: Vec<_> = pts.iter().chain(pts.iter()).copied().collect();
    assert_eq!(encode3d(&m, &c.with_points(doubled).unwrap()).0, base.0);
}

#[test]
fn batch_composition_does_not_change_features() {
    let m = model();
    let (a, b) = (random_cloud(3, 30), random_cloud(4, 50));
    let mut t = Tape::<f32>::new();
    let p = m.bind(&mut t, false);
    let (g, _) = m.encode3d(&mut t, &p, &[&a, &b]).unwrap();
    let e = m.cfg.emb_dim;
    assert_eq!(&t.value(g)[..e], encode3d(&m, &a).0.as_slice());
    assert_eq!(&t.value(g)[e..], encode3d(&m, &b).0.as_slice());
}

#[test]
fn projections_are_unit_norm() {
    let m = model();
    let params = RenderParams {
        point_radius: 0.03,
        ..RenderParams::default()
    };
    for seed in 0..100 {
        let c = random_cloud(seed, 20 + seed as usize % 30);
        let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm(&encode3d(&m, &c).1) - 1.0).abs() <= 1e-5);
        if seed % 10 == 0 {
            let s = render_multiview(&c, &CameraRig::new(3, 0.0).unwrap(), &params).unwrap();
            assert!((norm(&encode2d(&m, &s).1) - 1.0).abs() <= 1e-5);
        }
    }
}

#[test]
fn image_encoder_pools_over_views() {
    let m = model();
    let params = RenderParams {
        point_radius: 0.03,
        ..RenderParams::default()
    };
    let s = render_multiview(&random_cloud(8, 200), &CameraRig::new(4, 0.0).unwrap(), &params).unwrap();
    let base = encode2d(&m, &s);
    let mut rev = s.clone();
    rev.images.reverse();
    assert_eq!(encode2d(&m, &rev), base);

    let one = ImageStack {
        images: vec![s.images[1].clone()],
        params: s.params,
    };
    let same = ImageStack {
        images: vec![s.images[1].clone(); 5],
        params: s.params,
    };
    assert_eq!(encode2d(&m, &same), encode2d(&m, &one));
}

#[test]
fn classifier_outputs_a_distribution() {
    let m = model();
    let clouds: Vec<PointCloud> = (0..10).map(|s| random_cloud(s, 32)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let (_, probs) = m.predict(&refs).unwrap();
    for row in probs.data().chunks(m.cfg.classes) {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    let mut m = model();
    let clouds: Vec<PointCloud> = (0..4).map(|s| random_cloud(s, 32)).collect();
    let params = RenderParams {
        point_radius: 0.05,
        ..RenderParams::default()
    };
    let stacks: Vec<ImageStack> = clouds
        .iter()
        .map(|c| render_multiview(c, &CameraRig::new(2, 0.0).unwrap(), &params).unwrap())
        .collect();
    let mut t = Tape::<f32>::new();
    let p = m.bind(&mut t, true);
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let srefs: Vec<&ImageStack> = stacks.iter().collect();
    let (g, z3) = m.encode3d(&mut t, &p, &refs).unwrap();
    let (_, z2) = m.encode2d(&mut t, &p, &srefs).unwrap();
    let probs = m.classify(&mut t, &p, g, Some(3)).unwrap();
    let l1 = cot_core::losses::loss_mm(&mut t, z3, z3, z2, 0.1, false).unwrap();
    let lp = t.log(probs);
    let l2 = t.mean(lp);
    let l = t.sub(l1, l2).unwrap();
    let grads = t.backward(l).unwrap();
    m.absorb_gradients(&p, &grads).unwrap();
    for (name, tensor) in m.params.names().iter().zip(m.params.tensors()) {
        let g = tensor.grad().unwrap();
        assert!(g.iter().all(|x| x.is_finite()), "{name}");
        assert!(g.iter().any(|&x| x != 0.0), "{name} received no gradient");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cotc");
    let m = model();
    checkpoint::save(&path, &m.named_parameters()).unwrap();
    let mut fresh = Model::new(ModelConfig::default(), 999).unwrap();
    let c = random_cloud(11, 64);
    assert_ne!(encode3d(&fresh, &c), encode3d(&m, &c));
    fresh.params.load_named(&checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(encode3d(&fresh, &c), encode3d(&m, &c));
    assert_eq!(fresh.predict(&[&c]).unwrap(), m.predict(&[&c]).unwrap());
    assert_eq!(std::fs::read(&path).unwrap()[..4], *b"COTC");
}

#[test]
fn mismatched_checkpoint_rejected() {
    let small = Model::new(ModelConfig { emb_dim: 16, ..ModelConfig::default() }, 1).unwrap();
    let mut m = model();
    assert!(m.params.load_named(&small.named_parameters()).is_err());
}
