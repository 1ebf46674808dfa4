//! Stratified sampling along rays and emission–absorption compositing.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{generate_ray, Camera};
use crate::error::{invalid, Error, Result};
use crate::field::{encode_direction_into, Aabb, FieldModel, PointScratch};
use crate::raster::Raster;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: [T; 3],
    pub direction: [T; 3],
    pub t_near: T,
    pub t_far: T,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: [T; 3], direction: [T; 3], t_near: T, t_far: T) -> Result<Self> {
        let n = direction.iter().map(|&v| v * v).sum::<T>().sqrt();
        if (n - T::one()).abs() > T::c(1e-6) {
            return Err(invalid(format!("ray direction has norm {n}")));
        }
        if !(t_near < t_far) {
            return Err(invalid("ray requires t_near < t_far"));
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: T) -> [T; 3] {
        std::array::from_fn(|a| self.origin[a] + self.direction[a] * t)
    }

    /// The portion of the ray inside `bbox`, or `None` on a miss.
    pub fn clip(&self, bbox: &Aabb<T>) -> Option<Self> {
        let (t0, t1) = bbox.intersect(&self.origin, &self.direction)?;
        let t0 = t0.max(self.t_near);
        let t1 = t1.min(self.t_far);
        (t1 > t0).then(|| Self {
            t_near: t0,
            t_far: t1,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples<T> {
    pub t: Vec<T>,
    pub positions: Vec<[T; 3]>,
    pub delta: Vec<T>,
}

/// `n_samples` depths, one per uniform bin of `[t_near, t_far]`: bin
/// midpoints, or one uniform draw per bin when `jitter` is given.
pub fn sample_along_ray<T: Real, R: Rng>(
    ray: &Ray<T>,
    n_samples: usize,
    jitter: Option<&mut R>,
) -> Result<RaySamples<T>> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let bin = (ray.t_far - ray.t_near) / T::c(n_samples as f64);
    let mut t = Vec::with_capacity(n_samples);
    match jitter {
        Some(rng) => {
            for q in 0..n_samples {
                let u: f64 = rng.gen();
                t.push(ray.t_near + (T::c(q as f64) + T::c(u)) * bin);
            }
        }
        None => {
            for q in 0..n_samples {
                t.push(ray.t_near + (T::c(q as f64) + T::c(0.5)) * bin);
            }
        }
    }
    let mut delta = Vec::with_capacity(n_samples);
    for q in 0..n_samples {
        let next = if q + 1 < n_samples { t[q + 1] } else { ray.t_far };
        delta.push(next - t[q]);
    }
    let positions = t.iter().map(|&tq| ray.at(tq)).collect();
    Ok(RaySamples { t, positions, delta })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: [T; 3],
    pub weights: Vec<T>,
    pub t_final: T,
}

/// `w_q = T_q (1 - exp(-sigma_q delta_q))`, `C = sum w_q c_q` over a black
/// background.
pub fn composite<T: Real>(sigma: &[T], rgb: &[[T; 3]], delta: &[T]) -> Result<Composite<T>> {
    if sigma.len() != rgb.len() || sigma.len() != delta.len() {
        return Err(Error::Shape(format!(
            "composite inputs disagree: {} sigma, {} rgb, {} delta",
            sigma.len(),
            rgb.len(),
            delta.len()
        )));
    }
    if sigma.iter().any(|&s| s < T::zero()) || delta.iter().any(|&d| d < T::zero()) {
        return Err(invalid("composite requires non-negative sigma and delta"));
    }
    Ok(composite_unchecked(sigma, rgb, delta))
}

pub(crate) fn composite_unchecked<T: Real>(sigma: &[T], rgb: &[[T; 3]], delta: &[T]) -> Composite<T> {
    let mut color = [T::zero(); 3];
    let mut weights = Vec::with_capacity(sigma.len());
    let mut optical = T::zero();
    for q in 0..sigma.len() {
        let tq = (-optical).exp();
        let sd = sigma[q] * delta[q];
        let w = tq * -(-sd).exp_m1();
        for c in 0..3 {
            color[c] += w * rgb[q][c];
        }
        weights.push(w);
        optical += sd;
    }
    Composite {
        color,
        weights,
        t_final: (-optical).exp(),
    }
}

/// Gradients of `dot(dcolor, C)` with respect to each `sigma_q` and `c_q`.
pub fn composite_backward<T: Real>(
    sigma: &[T],
    rgb: &[[T; 3]],
    delta: &[T],
    weights: &[T],
    dcolor: &[T; 3],
) -> (Vec<T>, Vec<[T; 3]>) {
    let n = sigma.len();
    let mut dsigma = vec![T::zero(); n];
    let mut drgb = vec![[T::zero(); 3]; n];
    // suffix = sum_{p > q} w_p <g, c_p>
    let mut suffix = T::zero();
    let mut optical: T = sigma.iter().zip(delta).map(|(&s, &d)| s * d).sum();
    for q in (0..n).rev() {
        let gc = dcolor[0] * rgb[q][0] + dcolor[1] * rgb[q][1] + dcolor[2] * rgb[q][2];
        // transmittance just past sample q
        let t_next = (-optical).exp();
        dsigma[q] = delta[q] * (t_next * gc - suffix);
        drgb[q] = [
            weights[q] * dcolor[0],
            weights[q] * dcolor[1],
            weights[q] * dcolor[2],
        ];
        suffix += weights[q] * gc;
        optical -= sigma[q] * delta[q];
    }
    (dsigma, drgb)
}

/// Anything that yields density and color at a point.
pub trait RadianceField<T: Real>: Sync {
    /// Per-ray state (direction encoding, scratch buffers).
    type Ctx;

    fn bbox(&self) -> &Aabb<T>;

    fn ray_context(&self, dir: &[T; 3]) -> Self::Ctx;

    fn sample(&self, x: &[T; 3], ctx: &mut Self::Ctx) -> (T, [T; 3]);
}

pub struct ModelCtx<T> {
    enc: Vec<T>,
    scratch: PointScratch<T>,
}

impl<T: Real> RadianceField<T> for FieldModel<T> {
    type Ctx = ModelCtx<T>;

    fn bbox(&self) -> &Aabb<T> {
        FieldModel::bbox(self)
    }

    fn ray_context(&self, dir: &[T; 3]) -> ModelCtx<T> {
        let mut enc = Vec::new();
        encode_direction_into(dir, self.head.dir_freqs, &mut enc);
        ModelCtx {
            enc,
            scratch: self.scratch(),
        }
    }

    fn sample(&self, x: &[T; 3], ctx: &mut ModelCtx<T>) -> (T, [T; 3]) {
        self.query_with(x, &ctx.enc, &mut ctx.scratch)
    }
}

/// Counts rays handed to the renderer.
#[derive(Debug, Default)]
pub struct RayMeter(AtomicU64);

impl RayMeter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions<'a> {
    pub n_samples: usize,
    /// When set, per-bin jitter drawn from a stream keyed by pixel index.
    pub jitter_seed: Option<u64>,
    pub meter: Option<&'a RayMeter>,
}

impl<'a> RenderOptions<'a> {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            jitter_seed: None,
            meter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayOutput<T> {
    pub color: [T; 3],
    pub t_final: T,
    /// `sum w_q t_q / sum w_q`, or `None` when no weight was deposited.
    pub depth: Option<T>,
}

/// Samples for the in-box part of a camera ray; `None` when the ray misses.
pub fn ray_samples<T: Real>(
    bbox: &Aabb<T>,
    ray: &Ray<T>,
    n_samples: usize,
    jitter: Option<(u64, u64)>,
) -> Result<Option<(Ray<T>, RaySamples<T>)>> {
    let Some(clipped) = ray.clip(bbox) else {
        return Ok(None);
    };
    let samples = match jitter {
        Some((seed, stream)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            sample_along_ray(&clipped, n_samples, Some(&mut rng))?
        }
        None => sample_along_ray::<T, ChaCha8Rng>(&clipped, n_samples, None)?,
    };
    Ok(Some((clipped, samples)))
}

/// Queries the field at every sample; samples that fall outside the box
/// (rounding at the faces) get zero density.
pub fn query_samples<T: Real, F: RadianceField<T>>(
    field: &F,
    dir: &[T; 3],
    samples: &RaySamples<T>,
) -> (Vec<T>, Vec<[T; 3]>) {
    let mut ctx = field.ray_context(dir);
    let bbox = field.bbox();
    let mut sigma = Vec::with_capacity(samples.t.len());
    let mut rgb = Vec::with_capacity(samples.t.len());
    for p in &samples.positions {
        if bbox.contains(p) {
            let (s, c) = field.sample(p, &mut ctx);
            sigma.push(s);
            rgb.push(c);
        } else {
            sigma.push(T::zero());
            rgb.push([T::zero(); 3]);
        }
    }
    (sigma, rgb)
}

pub fn render_ray<T: Real, F: RadianceField<T>>(
    field: &F,
    ray: &Ray<T>,
    n_samples: usize,
    jitter: Option<(u64, u64)>,
) -> Result<RayOutput<T>> {
    let Some((clipped, samples)) = ray_samples(field.bbox(), ray, n_samples, jitter)? else {
        return Ok(RayOutput {
            color: [T::zero(); 3],
            t_final: T::one(),
            depth: None,
        });
    };
    let (sigma, rgb) = query_samples(field, &clipped.direction, &samples);
    let comp = composite_unchecked(&sigma, &rgb, &samples.delta);
    let wsum: T = comp.weights.iter().copied().sum();
    let depth = (wsum > T::zero()).then(|| {
        comp.weights
            .iter()
            .zip(&samples.t)
            .map(|(&w, &t)| w * t)
            .sum::<T>()
            / wsum
    });
    Ok(RayOutput {
        color: comp.color,
        t_final: comp.t_final,
        depth,
    })
}

/// Renders the `p x p` block of pixels whose top-left corner is `origin`,
/// one ray per pixel center.
pub fn render_patch<T: Real, F: RadianceField<T>>(
    field: &F,
    camera: &Camera,
    origin: (usize, usize),
    p: usize,
    opts: &RenderOptions,
) -> Result<Raster<T>> {
    let (h0, w0) = origin;
    if p == 0 || h0 + p > camera.height || w0 + p > camera.width {
        return Err(invalid(format!(
            "patch of size {p} at ({h0},{w0}) does not fit a {}x{} image",
            camera.height, camera.width
        )));
    }
    let mut out = Raster::new(p, p, 3);
    for i in 0..p {
        for j in 0..p {
            let (h, w) = (h0 + i, w0 + j);
            let ray = generate_ray::<T>(camera, h, w);
            let jitter = opts
                .jitter_seed
                .map(|s| (s, (h * camera.width + w) as u64));
            let r = render_ray(field, &ray, opts.n_samples, jitter)?;
            let k = out.idx(i, j, 0);
            out.data[k..k + 3].copy_from_slice(&r.color);
        }
    }
    if let Some(m) = opts.meter {
        m.add((p * p) as u64);
    }
    Ok(out)
}

/// Full-image render; rows run in parallel. Returns color and expected
/// termination depth (`far_depth` where nothing was hit).
pub fn render_image<T: Real, F: RadianceField<T>>(
    field: &F,
    camera: &Camera,
    opts: &RenderOptions,
    far_depth: T,
) -> Result<(Raster<T>, Raster<T>)> {
    let (hh, ww) = (camera.height, camera.width);
    let rows: Vec<Result<(Vec<T>, Vec<T>)>> = (0..hh)
        .into_par_iter()
        .map(|h| {
            let mut color = Vec::with_capacity(ww * 3);
            let mut depth = Vec::with_capacity(ww);
            for w in 0..ww {
                let ray = generate_ray::<T>(camera, h, w);
                let jitter = opts.jitter_seed.map(|s| (s, (h * ww + w) as u64));
                let r = render_ray(field, &ray, opts.n_samples, jitter)?;
                color.extend_from_slice(&r.color);
                depth.push(r.depth.unwrap_or(far_depth));
            }
            Ok((color, depth))
        })
        .collect();
    let mut color = Vec::with_capacity(hh * ww * 3);
    let mut depth = Vec::with_capacity(hh * ww);
    for r in rows {
        let (c, d) = r?;
        color.extend(c);
        depth.extend(d);
    }
    if let Some(m) = opts.meter {
        m.add((hh * ww) as u64);
    }
    Ok((
        Raster::from_vec(hh, ww, 3, color)?,
        Raster::from_vec(hh, ww, 1, depth)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray01() -> Ray<f64> {
        Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap()
    }

    #[test]
    fn midpoints_and_truncated_last_delta() {
        let s = sample_along_ray::<f64, ChaCha8Rng>(&ray01(), 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.delta, vec![0.25, 0.25, 0.25, 0.125]);
        assert_eq!(s.positions[2], [0.0, 0.0, 0.625]);
    }

    #[test]
    fn single_sample() {
        let r = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 2.0, 4.0).unwrap();
        let s = sample_along_ray::<f64, ChaCha8Rng>(&r, 1, None).unwrap();
        assert_eq!(s.t, vec![3.0]);
        assert_eq!(s.delta, vec![1.0]);
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(sample_along_ray::<f64, ChaCha8Rng>(&ray01(), 0, None).is_err());
    }

    #[test]
    fn jitter_stays_in_bins_and_centers_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let draws = 1000;
        let mut mean = vec![0.0; n];
        for _ in 0..draws {
            let s = sample_along_ray(&ray01(), n, Some(&mut rng)).unwrap();
            for q in 0..n {
                let lo = q as f64 / n as f64;
                assert!(s.t[q] >= lo && s.t[q] <= lo + 1.0 / n as f64);
                assert!(s.delta[q] > 0.0 || q == n - 1);
                mean[q] += s.t[q] / draws as f64;
            }
        }
        // uniform on a bin of width b has std b / sqrt(12)
        let b = 1.0 / n as f64;
        let se = b / 12f64.sqrt() / (draws as f64).sqrt();
        for (q, m) in mean.iter().enumerate() {
            let center = (q as f64 + 0.5) * b;
            assert!((m - center).abs() < 3.0 * se, "bin {q}: {m} vs {center}");
        }
    }

    #[test]
    fn empty_space_composites_to_black() {
        let c = composite(&[0.0; 5], &[[0.7; 3]; 5], &[0.1; 5]).unwrap();
        assert_eq!(c.color, [0.0; 3]);
        assert!(c.weights.iter().all(|&w| w == 0.0));
        assert_eq!(c.t_final, 1.0);
    }

    #[test]
    fn opaque_first_sample_wins() {
        let rgb: [[f64; 3]; 2] = [[0.2, 0.4, 0.6], [1.0, 1.0, 1.0]];
        let c = composite(&[1e6, 3.0], &rgb, &[1.0, 1.0]).unwrap();
        for k in 0..3 {
            assert!((c.color[k] - rgb[0][k]).abs() < 1e-6);
        }
        assert!((c.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ln2_pair() {
        let l = std::f64::consts::LN_2;
        let rgb = [[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]];
        let c = composite(&[l, l], &rgb, &[1.0, 1.0]).unwrap();
        assert!((c.weights[0] - 0.5).abs() < 1e-12);
        assert!((c.weights[1] - 0.25).abs() < 1e-12);
        assert!((c.t_final - 0.25).abs() < 1e-12);
        assert!((c.color[0] - 0.5).abs() < 1e-12);
        assert!((c.color[1] - 0.25).abs() < 1e-12);
        assert!((c.color[2] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn composite_rejects_negative_inputs() {
        assert!(composite(&[-1.0], &[[0.0; 3]], &[1.0]).is_err());
        assert!(composite(&[1.0], &[[0.0; 3]], &[-1.0]).is_err());
        assert!(composite(&[1.0, 2.0], &[[0.0; 3]], &[1.0]).is_err());
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = 6;
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
            let rgb: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen())).collect();
            let g: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let f = |s: &[f64], c: &[[f64; 3]]| {
                let o = composite(s, c, &delta).unwrap().color;
                g[0] * o[0] + g[1] * o[1] + g[2] * o[2]
            };
            let base = composite(&sigma, &rgb, &delta).unwrap();
            let (ds, dc) = composite_backward(&sigma, &rgb, &delta, &base.weights, &g);
            let h = 1e-6;
            for q in 0..n {
                let mut sp = sigma.clone();
                let mut sm = sigma.clone();
                sp[q] += h;
                sm[q] -= h;
                let fd = (f(&sp, &rgb) - f(&sm, &rgb)) / (2.0 * h);
                assert!((fd - ds[q]).abs() < 1e-7, "{fd} vs {}", ds[q]);
                for k in 0..3 {
                    let mut cp = rgb.clone();
                    let mut cm = rgb.clone();
                    cp[q][k] += h;
                    cm[q][k] -= h;
                    let fd = (f(&sigma, &cp) - f(&sigma, &cm)) / (2.0 * h);
                    assert!((fd - dc[q][k]).abs() < 1e-7);
                }
            }
        }
    }
}
