#![allow(dead_code)]

use blurfield::camera::Camera;
use blurfield::raster::Raster;
use blurfield::sampler::TrainView;
use blurfield::sharpness::LevelMap;
use blurfield::training::{Params, TrainConfig};
use blurfield::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Camera on a circle of radius 3 around the origin, looking at it.
pub fn orbit_camera(angle: f64, size: usize, focal: f64) -> Camera {
    let eye = [3.0 * angle.sin(), -0.4, -3.0 * angle.cos()];
    Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], focal, size, size)
}

/// Random captures and level maps around the unit cube.
pub fn random_views<T: Real>(rng: &mut ChaCha8Rng, n: usize, size: usize, n_levels: usize) -> Vec<TrainView<T>> {
    (0..n)
        .map(|v| {
            let data = (0..size * size * 3).map(|_| T::c(rng.gen_range(0.0..1.0))).collect();
            TrainView {
                name: format!("view{v}"),
                image: Raster::from_vec(size, size, 3, data).unwrap(),
                camera: orbit_camera(v as f64 * 0.9, size, size as f64),
                levels: LevelMap {
                    height: size,
                    width: size,
                    n_levels,
                    levels: (0..size * size).map(|_| rng.gen_range(0..n_levels as u32)).collect(),
                },
            }
        })
        .collect()
}

pub fn cast_views<T: Real, U: Real>(views: &[TrainView<T>]) -> Vec<TrainView<U>> {
    views
        .iter()
        .map(|v| TrainView {
            name: v.name.clone(),
            image: v.image.cast(),
            camera: v.camera.clone(),
            levels: v.levels.clone(),
        })
        .collect()
}

/// Grid 8^3, P = 7, K = 3, N_k = 4.
pub fn small_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::preset("tiny").unwrap();
    c.seed = seed;
    c.init_scale = 0.4;
    c.lr_crf = 0.01;
    c
}

/// Breaks the symmetry of the initial kernels and response curves.
pub fn perturb<T: Real>(params: &mut Params<T>, rng: &mut ChaCha8Rng) {
    for v in params.kernels.values.iter_mut() {
        *v += T::c(rng.gen_range(-0.5..0.5));
    }
    for g in params.crf.iter_mut() {
        *g += T::c(rng.gen_range(-0.3..0.3));
    }
}

use blurfield::sampler::{sample_batch, PatchBatch};
use blurfield::training::{batch_loss, batch_loss_and_grad};

pub fn cast_batch<T: Real, U: Real>(b: &PatchBatch<T>) -> PatchBatch<U> {
    PatchBatch {
        p: b.p,
        k: b.k,
        patches: b.patches.clone(),
        levels: b.levels.clone(),
        skip: b.skip.clone(),
        gt: b.gt.iter().map(|r| r.cast()).collect(),
    }
}

fn perturbed_loss(
    params: &Params<f64>,
    cfg: &TrainConfig,
    views: &[TrainView<f64>],
    batch: &PatchBatch<f64>,
    i: usize,
    delta: f64,
) -> f64 {
    let mut p = params.clone();
    let mut left = i;
    for t in p.tensors_mut() {
        if left < t.len() {
            t[left] += delta;
            break;
        }
        left -= t.len();
    }
    batch_loss(&p, cfg, views, batch).unwrap()
}

/// Central differences in f64 with h = 1e-5 resolve about 1e-12 absolute;
/// smaller gradients are not sampled.
pub const MIN_CHECKED_GRAD: f64 = 1e-7;

pub struct GradCheck {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// One random small configuration: 32-bit analytic gradients of the full
/// chain against 64-bit central differences on `n_field` field values,
/// `n_kernel` raw kernel values and every response parameter.
pub fn gradient_check(seed: u64, n_field: usize, n_kernel: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_config(seed);
    let views = random_views::<f32>(&mut rng, 2, 12, cfg.n_k);
    let mut params = Params::<f32>::init(&cfg, views.len()).unwrap();
    perturb(&mut params, &mut rng);
    let batch = sample_batch(&mut rng, &views, cfg.n_patches, cfg.p, cfg.k, cfg.n_skip).unwrap();
    let (_, grad) = batch_loss_and_grad(&params, &cfg, &views, &batch, None).unwrap();

    let mut names = Vec::new();
    let mut flat = Vec::new();
    for (name, _, vals) in grad.tensors() {
        for &v in vals {
            names.push(name.clone());
            flat.push(v as f64);
        }
    }
    let pick = |rng: &mut ChaCha8Rng, want: &dyn Fn(&str) -> bool, n: usize| -> Vec<usize> {
        let pool: Vec<usize> = (0..flat.len()).filter(|&i| want(&names[i]) && flat[i].abs() >= MIN_CHECKED_GRAD).collect();
        (0..n.min(pool.len())).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    let mut chosen = pick(&mut rng, &|n| n != "kernels" && n != "crf", n_field);
    chosen.extend(pick(&mut rng, &|n| n == "kernels", n_kernel));
    chosen.extend((0..flat.len()).filter(|&i| names[i] == "crf" && flat[i].abs() >= MIN_CHECKED_GRAD));

    let p64 = params.cast::<f64>();
    let v64 = cast_views::<f32, f64>(&views);
    let b64 = cast_batch::<f32, f64>(&batch);
    let h = 1e-5;
    chosen
        .into_iter()
        .map(|i| {
            let up = perturbed_loss(&p64, &cfg, &v64, &b64, i, h);
            let down = perturbed_loss(&p64, &cfg, &v64, &b64, i, -h);
            GradCheck {
                index: i,
                tensor: names[i].clone(),
                analytic: flat[i],
                numeric: (up - down) / (2.0 * h),
            }
        })
        .collect()
}
