//! Synthetic scenes with known, depth-dependent defocus blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{Dataset, Split, View};
use crate::error::{invalid, Error, Result};
use crate::field::Aabb;
use crate::raster::Raster;
use crate::real::Real;
use crate::render::{render_image, RadianceField, RenderOptions};

/// Density and color on a regular grid of nodes spanning the box corners,
/// interpolated trilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseField<T> {
    pub bbox: Aabb<T>,
    pub res: usize,
    pub density: Vec<T>,
    /// `res^3 x 3`.
    pub rgb: Vec<T>,
}

impl<T: Real> DenseField<T> {
    pub fn bake(bbox: Aabb<T>, res: usize, f: impl Fn([f64; 3]) -> (f64, [f64; 3]) + Sync) -> Result<Self> {
        if res < 2 {
            return Err(invalid("dense grid needs at least 2 nodes per axis"));
        }
        let n = res * res * res;
        let mut density = Vec::with_capacity(n);
        let mut rgb = Vec::with_capacity(n * 3);
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    let mut p = [0.0; 3];
                    for (a, idx) in [i, j, k].into_iter().enumerate() {
                        let (lo, hi) = (bbox.min[a].f64(), bbox.max[a].f64());
                        p[a] = lo + (hi - lo) * idx as f64 / (res - 1) as f64;
                    }
                    let (s, c) = f(p);
                    density.push(T::c(s));
                    rgb.extend(c.map(T::c));
                }
            }
        }
        Ok(Self { bbox, res, density, rgb })
    }

    /// Trilinear density and color at an in-box point.
    pub fn at(&self, x: &[T; 3]) -> (T, [T; 3]) {
        let r = self.res;
        let mut i0 = [0usize; 3];
        let mut fr = [T::zero(); 3];
        for a in 0..3 {
            let u = (x[a] - self.bbox.min[a]) / (self.bbox.max[a] - self.bbox.min[a]) * T::c((r - 1) as f64);
            let u = u.max(T::zero()).min(T::c((r - 1) as f64));
            let i = u.floor().to_usize().unwrap_or(0).min(r - 2);
            i0[a] = i;
            fr[a] = u - T::c(i as f64);
        }
        let mut s = T::zero();
        let mut c = [T::zero(); 3];
        for corner in 0..8 {
            let d = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let mut w = T::one();
            for a in 0..3 {
                w *= if d[a] == 1 { fr[a] } else { T::one() - fr[a] };
            }
            if w == T::zero() {
                continue;
            }
            let idx = ((i0[0] + d[0]) * r + i0[1] + d[1]) * r + i0[2] + d[2];
            s += w * self.density[idx];
            for ch in 0..3 {
                c[ch] += w * self.rgb[idx * 3 + ch];
            }
        }
        (s, c)
    }
}

impl<T: Real> RadianceField<T> for DenseField<T> {
    type Ctx = ();

    fn bbox(&self) -> &Aabb<T> {
        &self.bbox
    }

    fn ray_context(&self, _dir: &[T; 3]) {}

    fn sample(&self, x: &[T; 3], _ctx: &mut ()) -> (T, [T; 3]) {
        self.at(x)
    }
}

/// One depth bin of the blur bank; `max = None` is unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfBin {
    pub min: f64,
    pub max: Option<f64>,
    /// Gaussian standard deviation in pixels.
    pub std: f64,
}

impl PsfBin {
    fn contains(&self, d: f64) -> bool {
        d >= self.min && self.max.is_none_or(|m| d < m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub n_blobs: usize,
    pub grid_res: usize,
    /// Blurred training views.
    pub n_views: usize,
    /// Extra sharp views held out for evaluation.
    pub n_test_views: usize,
    pub image_size: usize,
    pub focal: f64,
    pub orbit_radius: f64,
    pub orbit_arc: f64,
    /// Focus each training view on a different depth bin.
    pub refocus: bool,
    /// Angular frequency range of the axis-aligned stripes, radians per unit.
    pub stripe_freq: (f64, f64),
    pub samples_per_ray: usize,
    /// Blur std per depth bin, nearest first.
    pub psf_stds: Vec<f64>,
    /// Interior bin edges (one fewer than stds); equal-count quantiles of
    /// the foreground depths when absent.
    pub psf_edges: Option<Vec<f64>>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_blobs: 10,
            grid_res: 64,
            n_views: 12,
            n_test_views: 4,
            image_size: 64,
            focal: 76.8,
            orbit_radius: 3.2,
            orbit_arc: std::f64::consts::FRAC_PI_2,
            refocus: true,
            stripe_freq: (20.0, 30.0),
            samples_per_ray: 128,
            psf_stds: vec![0.0, 1.5, 3.0],
            psf_edges: None,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.samples_per_ray == 0 || self.n_views == 0 {
            return Err(invalid("image_size, samples_per_ray and n_views must be positive"));
        }
        if self.psf_stds.is_empty() || self.psf_stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("psf_stds must be non-empty and non-negative"));
        }
        if let Some(e) = &self.psf_edges {
            if e.len() + 1 != self.psf_stds.len() || e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(invalid("psf_edges must be increasing with one fewer entry than psf_stds"));
            }
        }
        if !(0.0 <= self.stripe_freq.0 && self.stripe_freq.0 <= self.stripe_freq.1) {
            return Err(invalid("stripe_freq must be an ordered non-negative range"));
        }
        if !(self.orbit_radius > 3f64.sqrt()) {
            return Err(invalid("cameras must orbit outside the scene box"));
        }
        Ok(())
    }

    pub fn far_depth(&self) -> f64 {
        self.orbit_radius + 3f64.sqrt()
    }
}

/// Camera `v` of `n` spread evenly along a slightly wavy arc around the
/// origin, `spec.orbit_arc` radians wide.
pub fn orbit_camera(v: usize, n: usize, spec: &SyntheticSceneSpec) -> Camera {
    let u = v as f64 / n as f64;
    let a = spec.orbit_arc * (u - 0.5);
    let elev = 0.35 * (std::f64::consts::TAU * 3.0 * u).sin();
    let r = spec.orbit_radius;
    let eye = [r * elev.cos() * a.sin(), -r * elev.sin(), -r * elev.cos() * a.cos()];
    let s = spec.image_size;
    Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], spec.focal, s, s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
    /// Stripe wave vector of the surface texture.
    pub wave: [f64; 3],
}

pub const BLOB_DENSITY: f64 = 40.0;

pub fn random_blobs(n: usize, stripe_freq: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<Blob> {
    (0..n)
        .map(|_| {
            let center = [0; 3].map(|_| rng.gen_range(-0.5..0.5));
            let radius = rng.gen_range(0.2..0.38);
            let color = [0; 3].map(|_| rng.gen_range(0.2..0.95));
            let mut wave = [0.0; 3];
            wave[rng.gen_range(0..3)] = rng.gen_range(stripe_freq.0..=stripe_freq.1);
            Blob {
                center,
                radius,
                color,
                wave,
            }
        })
        .collect()
}

/// Opaque emissive balls with striped colors; where balls overlap, the one
/// whose surface is deepest inside wins the color.
pub fn blob_field(blobs: &[Blob], x: [f64; 3]) -> (f64, [f64; 3]) {
    let mut best: Option<(f64, &Blob)> = None;
    for b in blobs {
        let d = (0..3).map(|a| (x[a] - b.center[a]).powi(2)).sum::<f64>().sqrt();
        let inside = 1.0 - d / b.radius;
        if inside > 0.0 && best.is_none_or(|(m, _)| inside > m) {
            best = Some((inside, b));
        }
    }
    match best {
        None => (0.0, [0.0; 3]),
        Some((inside, b)) => {
            let edge = (inside / 0.08).min(1.0);
            let phase: f64 = (0..3).map(|a| b.wave[a] * x[a]).sum();
            let t = 0.5 + 0.5 * phase.sin();
            let shade = 0.3 + 0.7 * t;
            (BLOB_DENSITY * edge, b.color.map(|c| c * shade))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub field: DenseField<f64>,
    pub blobs: Vec<Blob>,
    /// Training cameras first, then the held-out ones.
    pub cameras: Vec<Camera>,
    pub sharp: Vec<Raster<f64>>,
    /// Expected termination depth; far depth where nothing was hit.
    pub depth: Vec<Raster<f64>>,
}

impl SyntheticScene {
    pub fn n_train(&self) -> usize {
        self.spec.n_views
    }
}

pub fn make_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = random_blobs(spec.n_blobs, spec.stripe_freq, &mut rng);
    let field = DenseField::bake(Aabb::cube(1.0), spec.grid_res, |x| blob_field(&blobs, x))?;
    let n_all = spec.n_views + spec.n_test_views;
    // held-out cameras sit halfway between training cameras
    let mut cameras: Vec<Camera> = (0..spec.n_views).map(|v| orbit_camera(2 * v, 2 * spec.n_views, spec)).collect();
    cameras.extend(
        (0..spec.n_test_views).map(|t| orbit_camera(2 * (t * spec.n_views / spec.n_test_views.max(1)) + 1, 2 * spec.n_views, spec)),
    );
    let opts = RenderOptions::new(spec.samples_per_ray);
    let mut sharp = Vec::with_capacity(n_all);
    let mut depth = Vec::with_capacity(n_all);
    for cam in &cameras {
        let (c, d) = render_image(&field, cam, &opts, spec.far_depth())?;
        sharp.push(c);
        depth.push(d);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        field,
        blobs,
        cameras,
        sharp,
        depth,
    })
}

/// Bins partitioning `[0, inf)`: explicit edges, or equal-count quantiles of
/// the depths closer than `far`.
pub fn psf_bank(stds: &[f64], edges: Option<&[f64]>, depths: &[Raster<f64>], far: f64) -> Result<Vec<PsfBin>> {
    if stds.is_empty() {
        return Err(invalid("empty PSF bank"));
    }
    let edges: Vec<f64> = match edges {
        Some(e) => e.to_vec(),
        None => {
            let mut fg: Vec<f64> = depths.iter().flat_map(|d| d.data.iter().copied()).filter(|&d| d < far).collect();
            if fg.is_empty() {
                fg.push(far);
            }
            fg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (1..stds.len()).map(|s| fg[s * fg.len() / stds.len()]).collect()
        }
    };
    let mut bins = Vec::with_capacity(stds.len());
    let mut lo = 0.0;
    for (i, &s) in stds.iter().enumerate() {
        let hi = edges.get(i).copied();
        bins.push(PsfBin { min: lo, max: hi, std: s });
        lo = hi.unwrap_or(lo);
    }
    Ok(bins)
}

/// Reflect-101 index into `[0, n)` for any offset.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Normalized 2D Gaussian of the given std, truncated at `ceil(3 std)`.
pub fn gaussian_psf(std: f64) -> (usize, Vec<f64>) {
    if std == 0.0 {
        return (0, vec![1.0]);
    }
    let r = (3.0 * std).ceil() as usize;
    let k = 2 * r + 1;
    let mut w: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (i, j) = ((idx / k) as f64 - r as f64, (idx % k) as f64 - r as f64);
            (-(i * i + j * j) / (2.0 * std * std)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    (r, w)
}

/// Per-pixel blur std from the depth map.
pub fn blur_std_map(depth: &Raster<f64>, bank: &[PsfBin]) -> Result<Raster<f64>> {
    let mut out = Raster::new(depth.height, depth.width, 1);
    for (o, &d) in out.data.iter_mut().zip(&depth.data) {
        let bin = bank
            .iter()
            .find(|b| b.contains(d))
            .ok_or_else(|| Error::Data(format!("depth {d} is not covered by the PSF bank")))?;
        *o = bin.std;
    }
    Ok(out)
}

/// Each output pixel gathers its mirror-padded neighborhood weighted by the
/// Gaussian of its own depth bin.
pub fn synth_blur(sharp: &[Raster<f64>], depth: &[Raster<f64>], bank: &[PsfBin]) -> Result<Vec<Raster<f64>>> {
    if sharp.len() != depth.len() {
        return Err(Error::Shape("one depth map per view is required".into()));
    }
    let psfs: Vec<(usize, Vec<f64>)> = bank.iter().map(|b| gaussian_psf(b.std)).collect();
    sharp
        .iter()
        .zip(depth)
        .map(|(img, d)| {
            if (d.height, d.width) != (img.height, img.width) {
                return Err(Error::Shape("depth map size differs from the image".into()));
            }
            let (h, w, ch) = (img.height, img.width, img.channels);
            let mut out = Raster::new(h, w, ch);
            for y in 0..h {
                for x in 0..w {
                    let dv = d.get(y, x, 0);
                    let b = bank
                        .iter()
                        .position(|b| b.contains(dv))
                        .ok_or_else(|| Error::Data(format!("depth {dv} is not covered by the PSF bank")))?;
                    let (r, ref ker) = psfs[b];
                    let k = 2 * r + 1;
                    for i in 0..k {
                        let sy = mirror(y as isize + i as isize - r as isize, h);
                        for j in 0..k {
                            let sx = mirror(x as isize + j as isize - r as isize, w);
                            let wt = ker[i * k + j];
                            for c in 0..ch {
                                let at = out.idx(y, x, c);
                                out.data[at] += wt * img.get(sy, sx, c);
                            }
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// The bank seen by a view focused on bin `focus`: bin `i` takes the std of
/// bin `|i - focus|`.
pub fn refocus(bank: &[PsfBin], focus: usize) -> Vec<PsfBin> {
    bank.iter()
        .enumerate()
        .map(|(i, b)| PsfBin {
            std: bank[i.abs_diff(focus)].std,
            ..b.clone()
        })
        .collect()
}

pub struct TrainingBlur {
    /// Depth bins with the stds of a view focused on the nearest bin.
    pub bank: Vec<PsfBin>,
    pub view_banks: Vec<Vec<PsfBin>>,
    pub blurred: Vec<Raster<f64>>,
    /// True blur std per pixel.
    pub std_maps: Vec<Raster<f64>>,
}

/// Blurs the training views of `scene`. With `spec.refocus` view `v` is
/// focused on depth bin `v mod bins`, otherwise every view uses the bank
/// as given.
pub fn blur_training_views(scene: &SyntheticScene) -> Result<TrainingBlur> {
    let spec = &scene.spec;
    let n = spec.n_views;
    let bank = psf_bank(&spec.psf_stds, spec.psf_edges.as_deref(), &scene.depth[..n], spec.far_depth())?;
    let view_banks: Vec<Vec<PsfBin>> = (0..n)
        .map(|v| if spec.refocus { refocus(&bank, v % bank.len()) } else { bank.clone() })
        .collect();
    let mut blurred = Vec::with_capacity(n);
    let mut std_maps = Vec::with_capacity(n);
    for v in 0..n {
        let depth = std::slice::from_ref(&scene.depth[v]);
        blurred.extend(synth_blur(std::slice::from_ref(&scene.sharp[v]), depth, &view_banks[v])?);
        std_maps.push(blur_std_map(&scene.depth[v], &view_banks[v])?);
    }
    Ok(TrainingBlur {
        bank,
        view_banks,
        blurred,
        std_maps,
    })
}

/// Blurred training views, sharp held-out views, depth maps and the true
/// blur as a defocus map (std / max std), ready to be saved as a dataset.
pub fn synthetic_dataset(scene: &SyntheticScene) -> Result<(Dataset<f64>, TrainingBlur)> {
    let spec = &scene.spec;
    let n = spec.n_views;
    let blur = blur_training_views(scene)?;
    let max_std = spec.psf_stds.iter().copied().fold(0.0, f64::max);
    let mut views = Vec::with_capacity(scene.cameras.len());
    for (v, cam) in scene.cameras.iter().enumerate() {
        let train = v < n;
        let defocus = if train {
            let mut m = blur.std_maps[v].clone();
            if max_std > 0.0 {
                m.data.iter_mut().for_each(|s| *s /= max_std);
            }
            Some(m)
        } else {
            None
        };
        views.push(View {
            file: format!("{:03}.png", v),
            split: if train { Split::Train } else { Split::Test },
            image: if train { blur.blurred[v].clone() } else { scene.sharp[v].clone() },
            camera: cam.clone(),
            defocus,
            depth: Some(scene.depth[v].clone()),
        });
    }
    Ok((Dataset { views }, blur))
}
