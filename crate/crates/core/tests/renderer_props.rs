//! Rasteriser geometry, symmetry and determinism.

use cot_core::par;
use cot_core::pointcloud::{normalize_unit_sphere, Domain, PointCloud};
use cot_core::renderer::{disc_rect_area, pgm_bytes, render_multiview, render_view, CameraRig, RenderParams};
use cot_core::rng;
use rand::Rng;

fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = rng::stream(seed, &[77]);
    let pts = (0..n).map(|_| [0; 3].map(|_| r.random_range(-1.0f32..1.0))).collect();
    normalize_unit_sphere(&PointCloud::new(pts, None, Domain::Source).unwrap()).unwrap()
}

fn params(radius: f64, size: usize) -> RenderParams {
    RenderParams {
        point_radius: radius,
        points_per_pixel: 2,
        image_size: size,
    }
}

#[test]
fn disc_rect_area_matches_fine_grid() {
    let mut r = rng::stream(1, &[]);
    for _ in 0..30 {
        let rad = r.random_range(0.1..1.0);
        let (x0, y0) = (r.random_range(-1.2..0.5), r.random_range(-1.2..0.5));
        let (x1, y1) = (x0 + r.random_range(0.05..1.0), y0 + r.random_range(0.05..1.0));
        let n = 1500;
        let mut inside = 0usize;
        for i in 0..n {
            for j in 0..n {
                let x = x0 + (i as f64 + 0.5) * (x1 - x0) / n as f64;
                let y = y0 + (j as f64 + 0.5) * (y1 - y0) / n as f64;
                if x * x + y * y <= rad * rad {
                    inside += 1;
                }
            }
        }
        let grid = inside as f64 / (n * n) as f64 * (x1 - x0) * (y1 - y0);
        let exact = disc_rect_area(rad, x0, x1, y0, y1);
        assert!((grid - exact).abs() < 2e-3 * (x1 - x0) * (y1 - y0) + 1e-6, "{grid} vs {exact}");
    }
}

#[test]
fn four_fold_symmetric_cloud_gives_identical_views() {
    let mut r = rng::stream(2, &[]);
    let mut pts = Vec::new();
    for _ in 0..40 {
        let (a, b, c) = (r.random_range(-0.7f32..0.7), r.random_range(-0.7f32..0.7), r.random_range(-0.7f32..0.7));
        pts.extend([[a, b, c], [-b, a, c], [-a, -b, c], [b, -a, c]]);
    }
    let cloud = PointCloud::new(pts, None, Domain::Source).unwrap();
    let p = params(0.03, 32);
    let stack = render_multiview(&cloud, &CameraRig::new(4, 0.0).unwrap(), &p).unwrap();
    for im in &stack.images[1..] {
        assert_eq!(pgm_bytes(im), pgm_bytes(&stack.images[0]));
        assert_eq!(im.data, stack.images[0].data);
    }
    // explicit quarter turn of the cloud, re-rendered at view 0
    let turned = cloud.with_points(cloud.points().iter().map(|p| [-p[1], p[0], p[2]]).collect()).unwrap();
    assert_eq!(render_view(&turned, 0.0, 0.0, &p).unwrap().data, stack.images[0].data);
}

#[test]
fn rotating_the_cloud_shifts_the_view() {
    let cloud = random_cloud(3, 300);
    let p = params(0.02, 32);
    let delta = 0.37f64;
    let (s, c) = delta.sin_cos();
    let rotated = cloud
        .with_points(
            cloud
                .points()
                .iter()
                .map(|q| {
                    let (x, y) = (q[0] as f64, q[1] as f64);
                    [(c * x - s * y) as f32, (s * x + c * y) as f32, q[2]]
                })
                .collect(),
        )
        .unwrap();
    for a in [0.0, 1.0, 2.5] {
        let lhs = render_view(&rotated, a, 0.0, &p).unwrap().to_bytes();
        let rhs = render_view(&cloud, a + delta, 0.0, &p).unwrap().to_bytes();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((*x as i32 - *y as i32).abs() <= 1);
        }
    }
}

#[test]
fn lit_pixels_grow_with_radius() {
    let cloud = random_cloud(4, 200);
    let mut last = 0;
    for radius in [0.001, 0.004, 0.008, 0.02, 0.05, 0.1] {
        let lit = render_view(&cloud, 0.3, 0.2, &params(radius, 32)).unwrap().lit_pixels();
        assert!(lit >= last);
        last = lit;
    }
}

#[test]
fn single_view_rig_equals_render_view_and_echoes_params() {
    let cloud = random_cloud(5, 100);
    let p = RenderParams::default();
    let stack = render_multiview(&cloud, &CameraRig::new(1, 0.0).unwrap(), &p).unwrap();
    assert_eq!(stack.views(), 1);
    assert_eq!(stack.params, p);
    assert_eq!(stack.images[0], render_view(&cloud, 0.0, 0.0, &p).unwrap());
}

#[test]
fn pixels_stay_in_unit_interval() {
    let cloud = random_cloud(6, 2000);
    let stack = render_multiview(&cloud, &CameraRig::default(), &params(0.1, 16)).unwrap();
    assert!(stack.images.iter().flat_map(|im| &im.data).all(|&v| (0.0..=1.0).contains(&v)));
    assert!(stack.images.iter().flat_map(|im| &im.data).any(|&v| v == 1.0));
}

#[test]
fn identical_across_runs_and_thread_counts() {
    let cloud = random_cloud(7, 500);
    let p = params(0.008, 32);
    let run = |threads| par::with_threads(threads, || render_multiview(&cloud, &CameraRig::default(), &p).unwrap());
    let (a, b, c) = (run(1), run(4), run(4));
    let bytes = |s: &cot_core::renderer::ImageStack| s.images.iter().flat_map(pgm_bytes).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&b), bytes(&c));
}
