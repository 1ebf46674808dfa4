//! Train-and-evaluate runs on synthetic scenes with known blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{levels_of, PriorOptions, Split, View};
use crate::error::Result;
use crate::kernels::{kernel_spread, normalize, KernelStack};
use crate::metrics::{psnr, ssim};
use crate::raster::Raster;
use crate::render::{render_image, RenderOptions};
use crate::sampler::TrainView;
use crate::sharpness::{quantize, LevelMap, PriorSource, SharpnessMap};
use crate::synthetic::{blur_training_views, make_synthetic_scene, PsfBin, SyntheticScene, SyntheticSceneSpec, TrainingBlur};
use crate::training::{train, KernelMode, TrainConfig, TrainState};

/// A synthetic scene with its blurred training captures.
pub struct Experiment {
    pub scene: SyntheticScene,
    pub bank: Vec<PsfBin>,
    pub blurred: Vec<Raster<f64>>,
    /// True blur std per training pixel.
    pub std_maps: Vec<Raster<f64>>,
}

impl Experiment {
    pub fn new(spec: &SyntheticSceneSpec) -> Result<Self> {
        let scene = make_synthetic_scene(spec)?;
        let TrainingBlur {
            bank,
            blurred,
            std_maps,
            ..
        } = blur_training_views(&scene)?;
        Ok(Self {
            scene,
            bank,
            blurred,
            std_maps,
        })
    }

    pub fn n_train(&self) -> usize {
        self.scene.spec.n_views
    }

    /// Position of each training pixel's blur std among the bank stds, or
    /// `None` where the pixel sees only background.
    pub fn strata(&self, view: usize) -> Vec<Option<usize>> {
        let far = self.scene.spec.far_depth();
        self.std_maps[view]
            .data
            .iter()
            .zip(&self.scene.depth[view].data)
            .map(|(s, &d)| if d < far { self.bank.iter().position(|b| b.std == *s) } else { None })
            .collect()
    }

    pub fn levels(&self, source: LevelSource, n_k: usize) -> Result<Vec<LevelMap>> {
        (0..self.n_train())
            .map(|v| match source {
                LevelSource::Prior(p) => {
                    let view = View {
                        file: format!("{v:03}.png"),
                        split: Split::Train,
                        image: self.blurred[v].clone(),
                        camera: self.scene.cameras[v].clone(),
                        defocus: None,
                        depth: None,
                    };
                    levels_of(&view, &PriorOptions::new(p, n_k))
                }
                LevelSource::Oracle => {
                    let mut values = self.std_maps[v].clone();
                    values.data.iter_mut().for_each(|s| *s = -*s);
                    quantize(
                        &SharpnessMap {
                            values,
                            source: PriorSource::External,
                        },
                        n_k,
                    )
                }
                LevelSource::Random(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(v as u64);
                    let img = &self.blurred[v];
                    Ok(LevelMap {
                        height: img.height,
                        width: img.width,
                        n_levels: n_k,
                        levels: (0..img.height * img.width).map(|_| rng.gen_range(0..n_k as u32)).collect(),
                    })
                }
            })
            .collect()
    }

    pub fn train_views(&self, levels: Vec<LevelMap>) -> Vec<TrainView<f32>> {
        levels
            .into_iter()
            .enumerate()
            .map(|(v, levels)| TrainView {
                name: format!("{v:03}"),
                image: self.blurred[v].cast(),
                camera: self.scene.cameras[v].clone(),
                levels,
            })
            .collect()
    }

    /// Trains for `steps` and scores clean renders of the held-out views.
    pub fn run(&self, cfg: &TrainConfig, source: LevelSource, steps: usize) -> Result<RunResult> {
        let levels = self.levels(source, cfg.n_k)?;
        let views = self.train_views(levels);
        let mut state = TrainState::<f32>::new(cfg.clone(), views.len())?;
        let losses = train(&mut state, &views, steps, None, None)?;
        let (test_psnr, test_ssim) = self.evaluate(&state)?;
        let spread = self.stratum_spread(&state, &views);
        Ok(RunResult {
            losses,
            test_psnr,
            test_ssim,
            stratum_spread: spread,
            state,
        })
    }

    /// Mean PSNR and SSIM of clean renders against the sharp held-out views.
    pub fn evaluate(&self, state: &TrainState<f32>) -> Result<(f64, f64)> {
        let n = self.n_train();
        let opts = RenderOptions::new(state.config.samples_per_ray);
        let far = self.scene.spec.far_depth() as f32;
        let (mut p, mut s) = (0.0, 0.0);
        let tests = &self.scene.cameras[n..];
        for (i, cam) in tests.iter().enumerate() {
            let (img, _) = render_image(&state.params.field, cam, &opts, far)?;
            let gt: Raster<f32> = self.scene.sharp[n + i].cast();
            p += psnr(&img, &gt)?;
            s += ssim(&img, &gt)?;
        }
        Ok((p / tests.len() as f64, s / tests.len() as f64))
    }

    /// Spread of the kernel each foreground training pixel is blurred with
    /// (zero for skipped groups), averaged per blur std.
    pub fn stratum_spread(&self, state: &TrainState<f32>, views: &[TrainView<f32>]) -> Vec<f64> {
        let cfg = &state.config;
        let grid = &state.params.kernels;
        let n_strata = self.bank.len();
        let mut sum = vec![0.0; n_strata];
        let mut count = vec![0usize; n_strata];
        for (v, view) in views.iter().enumerate() {
            let spreads: Vec<f64> = (0..grid.n_levels)
                .map(|l| {
                    if cfg.kernel_mode != KernelMode::Learned || l >= grid.n_levels - cfg.n_skip.min(grid.n_levels) {
                        return 0.0;
                    }
                    let raw = KernelStack {
                        n: 1,
                        k: grid.k,
                        channels: grid.channels,
                        data: grid.row(v, l).to_vec(),
                    };
                    kernel_spread(&normalize(&raw).0.data, grid.k, grid.channels)
                })
                .collect();
            for (s, &l) in self.strata(v).into_iter().zip(&view.levels.levels) {
                let Some(s) = s else { continue };
                sum[s] += spreads[l as usize];
                count[s] += 1;
            }
        }
        sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelSource {
    Prior(PriorSource),
    /// Quantized true blur std.
    Oracle,
    /// Uniformly random levels from the given seed.
    Random(u64),
}

pub struct RunResult {
    pub losses: Vec<f64>,
    pub test_psnr: f64,
    pub test_ssim: f64,
    /// Per PSF bin, nearest (sharpest) first.
    pub stratum_spread: Vec<f64>,
    pub state: TrainState<f32>,
}

/// Backbone and batch settings of the desk-scale synthetic runs.
pub fn synthetic_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.iters = 1500;
    c.grid_res = 40;
    c.density_rank = 4;
    c.app_rank = 4;
    c.app_dim = 12;
    c.hidden = 16;
    c.dir_freqs = 2;
    c.samples_per_ray = 48;
    c.n_patches = 4;
    c.p = 14;
    c.k = 7;
    c.n_k = 16;
    c.n_skip = 4;
    c.log_every = 100;
    c
}
