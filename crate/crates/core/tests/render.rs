use blurfield::camera::{generate_ray, Camera};
use blurfield::field::{query_point, FieldModel, FieldShape};
use blurfield::render::{composite, render_patch, RayMeter, RenderOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn draws(seed: u64, n: usize) -> (Vec<f64>, Vec<[f64; 3]>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
    let rgb = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let delta = (0..n).map(|_| rng.gen_range(0.0..0.3)).collect();
    (sigma, rgb, delta)
}

proptest! {
    #[test]
    fn weights_and_transmittance_conserve_mass(seed in any::<u64>(), n in 1usize..80) {
        let (sigma, rgb, delta) = draws(seed, n);
        let c = composite(&sigma, &rgb, &delta).unwrap();
        let total: f64 = c.weights.iter().sum::<f64>() + c.t_final;
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(c.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        // T_q = 1 - sum_{p<q} w_p is non-increasing
        let mut t = 1.0;
        for w in &c.weights {
            let next = t - w;
            prop_assert!(next <= t + 1e-15);
            t = next;
        }
    }

    #[test]
    fn splitting_a_sample_changes_nothing(seed in any::<u64>(), n in 1usize..30, at in 0usize..30) {
        let (sigma, rgb, delta) = draws(seed, n);
        let q = at % n;
        let mut s2 = sigma.clone();
        let mut c2 = rgb.clone();
        let mut d2 = delta.clone();
        s2.insert(q + 1, sigma[q]);
        c2.insert(q + 1, rgb[q]);
        d2[q] = delta[q] / 2.0;
        d2.insert(q + 1, delta[q] / 2.0);
        let a = composite(&sigma, &rgb, &delta).unwrap();
        let b = composite(&s2, &c2, &d2).unwrap();
        for ch in 0..3 {
            prop_assert!((a.color[ch] - b.color[ch]).abs() < 1e-6);
        }
        prop_assert!((a.t_final - b.t_final).abs() < 1e-6);
    }
}

#[test]
fn ln2_pair_closed_form() {
    let ln2 = std::f64::consts::LN_2;
    let c1 = [0.9, 0.2, 0.4];
    let c2 = [0.1, 0.6, 1.0];
    let c = composite(&[ln2, ln2], &[c1, c2], &[1.0, 1.0]).unwrap();
    assert!((c.weights[0] - 0.5).abs() < 1e-12);
    assert!((c.weights[1] - 0.25).abs() < 1e-12);
    assert!((c.t_final - 0.25).abs() < 1e-12);
    for ch in 0..3 {
        assert!((c.color[ch] - (0.5 * c1[ch] + 0.25 * c2[ch])).abs() < 1e-12);
    }
}

fn test_camera() -> Camera {
    Camera::look_at([0.4, -0.6, -3.0], [0.0, 0.1, 0.0], [0.0, -1.0, 0.0], 14.0, 16, 16)
}

/// Per pixel: slab test, midpoint samples, point queries and an explicit
/// transmittance loop.
fn pixel_oracle(field: &FieldModel<f64>, cam: &Camera, h: usize, w: usize, n: usize) -> [f64; 3] {
    let o = cam.position();
    let d = cam.direction(h, w);
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let ta = (-1.0 - o[a]) / d[a];
        let tb = (1.0 - o[a]) / d[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t1 <= t0 {
        return [0.0; 3];
    }
    let bin = (t1 - t0) / n as f64;
    let ts: Vec<f64> = (0..n).map(|q| t0 + (q as f64 + 0.5) * bin).collect();
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    for q in 0..n {
        let delta = if q + 1 < n { ts[q + 1] - ts[q] } else { t1 - ts[q] };
        let x = [o[0] + d[0] * ts[q], o[1] + d[1] * ts[q], o[2] + d[2] * ts[q]];
        let Ok(s) = query_point(field, &x, &d) else {
            continue;
        };
        let alpha = 1.0 - (-s.sigma * delta).exp();
        for c in 0..3 {
            color[c] += trans * alpha * s.rgb[c];
        }
        trans *= 1.0 - alpha;
    }
    color
}

#[test]
fn patch_render_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = FieldShape {
        res: [6; 3],
        density_ranks: [2; 3],
        app_ranks: [2; 3],
        app_dim: 5,
        hidden: 8,
        dir_freqs: 1,
        density_shift: 0.5,
        init_scale: 0.7,
        half_extent: 1.0,
    };
    let field = FieldModel::<f64>::random(&shape, &mut rng).unwrap();
    let cam = test_camera();
    let meter = RayMeter::default();
    let mut opts = RenderOptions::new(24);
    opts.meter = Some(&meter);
    let patch = render_patch(&field, &cam, (4, 5), 8, &opts).unwrap();
    assert_eq!(meter.get(), 64);
    let mut lit = 0;
    for i in 0..8 {
        for j in 0..8 {
            let want = pixel_oracle(&field, &cam, 4 + i, 5 + j, 24);
            for c in 0..3 {
                assert!((patch.get(i, j, c) - want[c]).abs() < 1e-10, "pixel ({i},{j})");
            }
            lit += usize::from(want.iter().any(|&v| v > 1e-3));
        }
    }
    assert!(lit > 32, "the patch should mostly see the field");
}

#[test]
fn patch_must_fit_the_image() {
    let field = FieldModel::<f64>::random(&FieldShape::default(), &mut ChaCha8Rng::seed_from_u64(0));
    let field = field.unwrap();
    let cam = test_camera();
    assert!(render_patch(&field, &cam, (10, 0), 8, &RenderOptions::new(4)).is_err());
}

#[test]
fn camera_rays_match_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eye = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(2.0..4.0)];
    let target = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let mut cam = Camera::look_at(eye, target, [0.0, -1.0, 0.0], 30.0, 24, 32);
    cam.fy = 27.0;
    cam.cx = 15.3;
    cam.cy = 12.9;
    cam.validate().unwrap();
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(0..24), rng.gen_range(0..32));
        // K^-1 [u v 1] written out, then the rotation block
        let u = w as f64 + 0.5;
        let v = h as f64 + 0.5;
        let kinv = [[1.0 / cam.fx, 0.0, -cam.cx / cam.fx], [0.0, 1.0 / cam.fy, -cam.cy / cam.fy], [0.0, 0.0, 1.0]];
        let pix = [u, v, 1.0];
        let cam_dir: Vec<f64> = (0..3).map(|i| (0..3).map(|j| kinv[i][j] * pix[j]).sum()).collect();
        let world: Vec<f64> = (0..3).map(|i| (0..3).map(|j| cam.c2w[i][j] * cam_dir[j]).sum()).collect();
        let norm = world.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ray = generate_ray::<f64>(&cam, h, w);
        for a in 0..3 {
            assert!((ray.direction[a] - world[a] / norm).abs() < 1e-12);
            assert!((ray.origin[a] - cam.c2w[a][3]).abs() < 1e-12);
        }
    }
}
