//! Random patch sampling and ray-budget accounting.

use rand::Rng;

use crate::camera::Camera;
use crate::error::{invalid, Error, Result};
use crate::raster::Raster;
use crate::real::Real;
use crate::sharpness::{skip_mask, LevelMap};

/// A training view ready for patch sampling.
#[derive(Clone, Debug)]
pub struct TrainView<T> {
    pub name: String,
    pub image: Raster<T>,
    pub camera: Camera,
    pub levels: LevelMap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub view: usize,
    /// Top-left pixel `(h, w)` of the rendered `P x P` block.
    pub origin: (usize, usize),
    pub p: usize,
    /// Seed of the per-ray sample-jitter streams of this patch.
    pub seed: u64,
}

impl PatchSpec {
    /// Top-left pixel of the `P' x P'` target region.
    pub fn target_origin(&self, k: usize) -> (usize, usize) {
        (self.origin.0 + k / 2, self.origin.1 + k / 2)
    }
}

#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub p: usize,
    pub k: usize,
    pub patches: Vec<PatchSpec>,
    /// Per patch, `P' x P'` sharpness levels of the targets (row-major).
    pub levels: Vec<Vec<u32>>,
    pub skip: Vec<Vec<bool>>,
    /// Per patch, the `P' x P' x C` ground-truth crop of the target region.
    pub gt: Vec<Raster<T>>,
}

impl<T> PatchBatch<T> {
    pub fn p_prime(&self) -> usize {
        self.p + 1 - self.k
    }

    /// Number of target pixels `N = patches * P'^2`.
    pub fn n_targets(&self) -> usize {
        self.patches.len() * self.p_prime() * self.p_prime()
    }
}

pub fn check_views<T>(views: &[TrainView<T>], p: usize) -> Result<()> {
    for v in views {
        if v.image.height < p || v.image.width < p {
            return Err(Error::View {
                view: v.name.clone(),
                msg: format!(
                    "image {}x{} is smaller than the {p}x{p} patch",
                    v.image.height, v.image.width
                ),
            });
        }
        if v.levels.height != v.image.height || v.levels.width != v.image.width {
            return Err(Error::View {
                view: v.name.clone(),
                msg: "level map size differs from the image".into(),
            });
        }
    }
    Ok(())
}

/// Builds the batch fields for explicitly chosen patches.
pub fn batch_from_specs<T: Real>(
    views: &[TrainView<T>],
    patches: Vec<PatchSpec>,
    p: usize,
    k: usize,
    n_skip: usize,
) -> Result<PatchBatch<T>> {
    if k == 0 || p < k {
        return Err(invalid(format!("patch size {p} must be at least the kernel size {k}")));
    }
    let pp = p + 1 - k;
    let mut levels = Vec::with_capacity(patches.len());
    let mut skip = Vec::with_capacity(patches.len());
    let mut gt = Vec::with_capacity(patches.len());
    for spec in &patches {
        let view = views
            .get(spec.view)
            .ok_or_else(|| invalid(format!("view {} out of range", spec.view)))?;
        let (h0, w0) = spec.origin;
        if h0 + p > view.image.height || w0 + p > view.image.width {
            return Err(invalid(format!(
                "patch at ({h0},{w0}) leaves the {}x{} image",
                view.image.height, view.image.width
            )));
        }
        let (th, tw) = spec.target_origin(k);
        let mut lv = Vec::with_capacity(pp * pp);
        for i in 0..pp {
            for j in 0..pp {
                lv.push(view.levels.at(th + i, tw + j));
            }
        }
        let lm = LevelMap {
            height: pp,
            width: pp,
            n_levels: view.levels.n_levels,
            levels: lv,
        };
        skip.push(skip_mask(&lm, n_skip));
        levels.push(lm.levels);
        gt.push(view.image.crop(th, tw, pp, pp)?);
    }
    Ok(PatchBatch {
        p,
        k,
        patches,
        levels,
        skip,
        gt,
    })
}

/// `n_patches` independent draws: view uniform with replacement, origin
/// uniform over every position where the patch fits.
pub fn sample_batch<T: Real, R: Rng>(
    rng: &mut R,
    views: &[TrainView<T>],
    n_patches: usize,
    p: usize,
    k: usize,
    n_skip: usize,
) -> Result<PatchBatch<T>> {
    if views.is_empty() {
        return Err(Error::Data("no training views".into()));
    }
    check_views(views, p)?;
    let specs = (0..n_patches)
        .map(|_| {
            let view = rng.gen_range(0..views.len());
            let img = &views[view].image;
            let h = rng.gen_range(0..=img.height - p);
            let w = rng.gen_range(0..=img.width - p);
            PatchSpec {
                view,
                origin: (h, w),
                p,
                seed: rng.gen(),
            }
        })
        .collect();
    batch_from_specs(views, specs, p, k, n_skip)
}

/// Rendered rays per target pixel when `P' x P'` targets share their
/// `K x K` neighborhoods: `(P' + K - 1)^2 / P'^2`.
pub fn rays_per_pixel(p_prime: usize, k: usize) -> f64 {
    let p = (p_prime + k - 1) as f64;
    p * p / (p_prime * p_prime) as f64
}
