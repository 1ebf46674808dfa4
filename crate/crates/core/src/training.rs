//! Joint optimization of the field, the kernel grid and the per-view response
//! curves.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{generate_ray, Camera};
use crate::error::{invalid, Error, Result};
use crate::field::{encode_direction, Aabb, ColorHead, FieldModel, FieldShape, PointScratch, VmGrid};
use crate::kernels::{
    apply_skip, convolve, convolve_backward, crop, init_gaussian, lookup, normalize,
    normalize_backward, target_block, BlurKernelGrid, KernelStack, KernelWeights,
};
use crate::raster::Raster;
use crate::real::{sigmoid, softplus, Real};
use crate::render::{composite_backward, composite_unchecked, ray_samples, RayMeter, RaySamples};
use crate::sampler::{sample_batch, PatchBatch, TrainView};

/// Lower bound of the effective response exponent.
pub const GAMMA_FLOOR: f64 = 0.2;

/// Patches per parallel work unit. Fixed so that the gradient reduction
/// order does not depend on the thread count.
const PATCH_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(invalid(format!("precision must be 32 or 64, got {s:?}"))),
        }
    }
}

/// How the blurred estimate is formed from the clean render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// Learnable kernel grid indexed by view and sharpness level.
    Learned,
    /// No blur model: the clean render is compared directly.
    None,
    /// Per pixel, the Gaussian from a fixed bank that best explains the
    /// capture (not learnable).
    FixedBank,
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelMode::Learned => "learned",
            KernelMode::None => "none",
            KernelMode::FixedBank => "fixed-bank",
        })
    }
}

impl FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(KernelMode::Learned),
            "none" => Ok(KernelMode::None),
            "fixed-bank" => Ok(KernelMode::FixedBank),
            _ => Err(invalid(format!("unknown kernel_mode {s:?}"))),
        }
    }
}

/// Standard deviations (pixels) of the fixed Gaussian bank.
pub const FIXED_BANK_STDS: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr_field: f64,
    /// Field learning rate multiplier reached at the last iteration.
    pub lr_decay: f64,
    pub lr_kernel: f64,
    pub lr_crf: f64,
    pub n_patches: usize,
    pub p: usize,
    pub k: usize,
    pub n_k: usize,
    pub n_skip: usize,
    pub samples_per_ray: usize,
    pub jitter: bool,
    pub seed: u64,
    pub precision: Precision,
    pub preset: String,
    pub grid_res: usize,
    pub density_rank: usize,
    pub app_rank: usize,
    pub app_dim: usize,
    pub hidden: usize,
    pub dir_freqs: usize,
    pub density_shift: f64,
    pub init_scale: f64,
    pub half_extent: f64,
    pub kernel_channels: usize,
    /// Initial Gaussian std of the kernels; `K / 6` when unset.
    pub kernel_sigma0: Option<f64>,
    pub kernel_mode: KernelMode,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 5000,
            lr_field: 0.02,
            lr_decay: 0.1,
            lr_kernel: 0.05,
            lr_crf: 0.005,
            n_patches: 28,
            p: 22,
            k: 11,
            n_k: 400,
            n_skip: 100,
            samples_per_ray: 64,
            jitter: true,
            seed: 0,
            precision: Precision::F32,
            preset: "desk".into(),
            grid_res: 64,
            density_rank: 8,
            app_rank: 8,
            app_dim: 27,
            hidden: 64,
            dir_freqs: 4,
            density_shift: -1.0,
            init_scale: 0.1,
            half_extent: 1.0,
            kernel_channels: 3,
            kernel_sigma0: None,
            kernel_mode: KernelMode::Learned,
            log_every: 100,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(format!("bad value {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_preset(name)?;
        Ok(c)
    }

    fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {}
            "full" => {
                self.iters = 30000;
                self.grid_res = 300;
                self.density_rank = 16;
                self.app_rank = 48;
                self.hidden = 128;
                self.samples_per_ray = 256;
            }
            "tiny" => {
                self.iters = 200;
                self.grid_res = 8;
                self.density_rank = 2;
                self.app_rank = 2;
                self.app_dim = 6;
                self.hidden = 8;
                self.dir_freqs = 1;
                self.samples_per_ray = 8;
                self.n_patches = 2;
                self.p = 7;
                self.k = 3;
                self.n_k = 4;
                self.n_skip = 1;
            }
            _ => return Err(invalid(format!("unknown preset {name:?}"))),
        }
        self.preset = name.into();
        Ok(())
    }

    /// Sets one field by its config-file name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "iters" => self.iters = parse(key, v)?,
            "lr_field" => self.lr_field = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_kernel" => self.lr_kernel = parse(key, v)?,
            "lr_crf" => self.lr_crf = parse(key, v)?,
            "n_patches" => self.n_patches = parse(key, v)?,
            "P" | "p" => self.p = parse(key, v)?,
            "K" | "k" => self.k = parse(key, v)?,
            "N_k" | "n_k" => self.n_k = parse(key, v)?,
            "n_skip" => self.n_skip = parse(key, v)?,
            "samples_per_ray" => self.samples_per_ray = parse(key, v)?,
            "jitter" => self.jitter = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "preset" => self.apply_preset(v)?,
            "grid_res" => self.grid_res = parse(key, v)?,
            "density_rank" => self.density_rank = parse(key, v)?,
            "app_rank" => self.app_rank = parse(key, v)?,
            "app_dim" => self.app_dim = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "dir_freqs" => self.dir_freqs = parse(key, v)?,
            "density_shift" => self.density_shift = parse(key, v)?,
            "init_scale" => self.init_scale = parse(key, v)?,
            "half_extent" => self.half_extent = parse(key, v)?,
            "kernel_channels" => self.kernel_channels = parse(key, v)?,
            "kernel_sigma0" => self.kernel_sigma0 = Some(parse(key, v)?),
            "kernel_mode" => self.kernel_mode = v.parse()?,
            "log_every" => self.log_every = parse(key, v)?,
            other => return Err(invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment). A `preset` line is
    /// applied before every other key regardless of its position.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.apply_preset(p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Inverse of `from_kv`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("preset", self.preset.clone());
        put("iters", self.iters.to_string());
        put("lr_field", self.lr_field.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("lr_kernel", self.lr_kernel.to_string());
        put("lr_crf", self.lr_crf.to_string());
        put("n_patches", self.n_patches.to_string());
        put("P", self.p.to_string());
        put("K", self.k.to_string());
        put("N_k", self.n_k.to_string());
        put("n_skip", self.n_skip.to_string());
        put("samples_per_ray", self.samples_per_ray.to_string());
        put("jitter", self.jitter.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.to_string());
        put("grid_res", self.grid_res.to_string());
        put("density_rank", self.density_rank.to_string());
        put("app_rank", self.app_rank.to_string());
        put("app_dim", self.app_dim.to_string());
        put("hidden", self.hidden.to_string());
        put("dir_freqs", self.dir_freqs.to_string());
        put("density_shift", self.density_shift.to_string());
        put("init_scale", self.init_scale.to_string());
        put("half_extent", self.half_extent.to_string());
        put("kernel_channels", self.kernel_channels.to_string());
        if let Some(s0) = self.kernel_sigma0 {
            put("kernel_sigma0", s0.to_string());
        }
        put("kernel_mode", self.kernel_mode.to_string());
        put("log_every", self.log_every.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iters", self.iters),
            ("n_patches", self.n_patches),
            ("P", self.p),
            ("K", self.k),
            ("N_k", self.n_k),
            ("samples_per_ray", self.samples_per_ray),
            ("grid_res", self.grid_res),
            ("density_rank", self.density_rank),
            ("app_rank", self.app_rank),
            ("app_dim", self.app_dim),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.grid_res < 2 {
            return Err(invalid("grid_res must be at least 2"));
        }
        if self.k % 2 == 0 {
            return Err(invalid(format!("K = {} must be odd", self.k)));
        }
        if self.p < self.k {
            return Err(invalid(format!("P = {} is smaller than K = {}", self.p, self.k)));
        }
        if self.n_skip > self.n_k {
            return Err(invalid(format!("n_skip = {} exceeds N_k = {}", self.n_skip, self.n_k)));
        }
        if !(self.kernel_channels == 1 || self.kernel_channels == 3) {
            return Err(invalid("kernel_channels must be 1 or 3"));
        }
        let rates = [self.lr_field, self.lr_kernel, self.lr_crf];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || !(self.lr_decay > 0.0) {
            return Err(invalid("learning rates must be finite and non-negative"));
        }
        if !(self.half_extent > 0.0) {
            return Err(invalid("half_extent must be positive"));
        }
        Ok(())
    }

    pub fn p_prime(&self) -> usize {
        self.p + 1 - self.k
    }

    pub fn field_shape(&self) -> FieldShape {
        FieldShape {
            res: [self.grid_res; 3],
            density_ranks: [self.density_rank; 3],
            app_ranks: [self.app_rank; 3],
            app_dim: self.app_dim,
            hidden: self.hidden,
            dir_freqs: self.dir_freqs,
            density_shift: self.density_shift,
            init_scale: self.init_scale,
            half_extent: self.half_extent,
        }
    }

    pub fn sigma0(&self) -> f64 {
        self.kernel_sigma0.unwrap_or(self.k as f64 / 6.0)
    }

    /// Field learning rate at iteration `iter` (exponential decay to
    /// `lr_decay * lr_field` at `iters`).
    pub fn field_lr_at(&self, iter: u64) -> f64 {
        self.lr_field * self.lr_decay.powf(iter as f64 / self.iters as f64)
    }
}

/// `softplus(g) + 0.2`.
pub fn effective_gamma<T: Real>(g: T) -> T {
    softplus(g) + T::c(GAMMA_FLOOR)
}

/// Raw parameter giving an effective exponent of one.
pub fn crf_identity_param() -> f64 {
    (1.0 - GAMMA_FLOOR).exp_m1().ln()
}

/// `x^gamma` on `[0, 1]`; inputs outside are clamped first.
pub fn crf_apply<T: Real>(x: T, gamma: T) -> T {
    let x = x.max(T::zero()).min(T::one());
    if x == T::zero() {
        T::zero()
    } else {
        x.powf(gamma)
    }
}

/// Mean squared difference over every pixel and channel of the batch.
pub fn loss_recon<T: Real>(blurred: &[Raster<T>], gt: &[Raster<T>]) -> Result<T> {
    if blurred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} estimates against {} references",
            blurred.len(),
            gt.len()
        )));
    }
    let mut sse = T::zero();
    let mut n = 0usize;
    for (a, b) in blurred.iter().zip(gt) {
        if !a.same_shape(b) {
            return Err(Error::Shape(format!(
                "{}x{}x{} against {}x{}x{}",
                a.height, a.width, a.channels, b.height, b.width, b.channels
            )));
        }
        for (&x, &y) in a.data.iter().zip(&b.data) {
            sse += (x - y) * (x - y);
        }
        n += a.data.len();
    }
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    Ok(sse / T::c(n as f64))
}

/// Every learnable quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub field: FieldModel<T>,
    pub kernels: BlurKernelGrid<T>,
    /// Raw per-view response parameters `g_v`.
    pub crf: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Field,
    Kernel,
    Crf,
}

pub const KERNEL_TENSOR: &str = "kernels";
pub const CRF_TENSOR: &str = "crf";

pub fn tensor_group(name: &str) -> Group {
    match name {
        KERNEL_TENSOR => Group::Kernel,
        CRF_TENSOR => Group::Crf,
        _ => Group::Field,
    }
}

impl<T: Real> Params<T> {
    pub fn init(cfg: &TrainConfig, n_views: usize) -> Result<Self> {
        cfg.validate()?;
        if n_views == 0 {
            return Err(Error::Data("no training views".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let field = FieldModel::random(&cfg.field_shape(), &mut rng)?;
        let kernels = init_gaussian(n_views, cfg.n_k, cfg.k, cfg.kernel_channels, cfg.sigma0())?;
        let crf = vec![T::c(crf_identity_param()); n_views];
        Ok(Self { field, kernels, crf })
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = self.field.tensors();
        out.push((KERNEL_TENSOR.into(), self.kernels.shape(), &self.kernels.values));
        out.push((CRF_TENSOR.into(), vec![self.crf.len()], &self.crf));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = self.field.tensors_mut();
        out.push(&mut self.kernels.values);
        out.push(&mut self.crf);
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            field: self.field.zeros_like(),
            kernels: self.kernels.zeros_like(),
            crf: vec![T::zero(); self.crf.len()],
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Params<U> {
        let c3 = |v: &[T; 3]| [U::c(v[0].f64()), U::c(v[1].f64()), U::c(v[2].f64())];
        let bbox = Aabb {
            min: c3(&self.field.bbox().min),
            max: c3(&self.field.bbox().max),
        };
        let grid = |g: &VmGrid<T>| VmGrid::<U>::zeros(bbox.clone(), g.res, g.ranks).expect("valid grid");
        let h = &self.field.head;
        let mut out = Params {
            field: FieldModel {
                density: grid(&self.field.density),
                appearance: grid(&self.field.appearance),
                basis: vec![U::zero(); self.field.basis.len()],
                head: ColorHead::zeros(h.feature_dim, h.dir_freqs, h.hidden),
                density_shift: U::c(self.field.density_shift.f64()),
            },
            kernels: BlurKernelGrid {
                n_img: self.kernels.n_img,
                n_levels: self.kernels.n_levels,
                k: self.kernels.k,
                channels: self.kernels.channels,
                values: Vec::new(),
            },
            crf: Vec::new(),
        };
        let src: Vec<&[T]> = self.tensors().into_iter().map(|t| t.2).collect();
        for (dst, s) in out.tensors_mut().into_iter().zip(src) {
            *dst = s.iter().map(|v| U::c(v.f64())).collect();
        }
        out
    }

    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.2.iter().any(|v| !v.is_finite()))
            .map(|t| t.0)
    }
}

/// Parameters plus Adam moments and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub params: Params<T>,
    pub m: Params<T>,
    pub v: Params<T>,
    pub iter: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig, n_views: usize) -> Result<Self> {
        let params = Params::init(&config, n_views)?;
        let m = params.zeros_like();
        let v = params.zeros_like();
        Ok(Self {
            config,
            params,
            m,
            v,
            iter: 0,
        })
    }

    /// Batch for the current iteration, drawn from a stream keyed by
    /// `(seed, iter)` so that resumed runs see the same batches.
    pub fn next_batch(&self, views: &[TrainView<T>]) -> Result<PatchBatch<T>> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(self.iter + 1);
        sample_batch(&mut rng, views, c.n_patches, c.p, c.k, c.n_skip)
    }

    fn adam_update(&mut self, grad: &Params<T>) {
        let t = (self.iter + 1) as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let lr_field = self.config.field_lr_at(self.iter);
        let (b1, b2, eps) = (T::c(ADAM_BETA1), T::c(ADAM_BETA2), T::c(ADAM_EPS));
        let groups: Vec<Group> = self.params.tensors().iter().map(|t| tensor_group(&t.0)).collect();
        let grads: Vec<&[T]> = grad.tensors().into_iter().map(|t| t.2).collect();
        let ps = self.params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, m), v), g), group) in ps.into_iter().zip(ms).zip(vs).zip(grads).zip(groups) {
            let lr = match group {
                Group::Field => lr_field,
                Group::Kernel => self.config.lr_kernel,
                Group::Crf => self.config.lr_crf,
            };
            let (step, c2) = (T::c(lr / bc1), T::c(1.0 / bc2));
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                if lr != 0.0 {
                    p[i] -= step * m[i] / ((v[i] * c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Forward state of one camera ray kept for the reverse pass.
struct RayTape<T> {
    samples: RaySamples<T>,
    inside: Vec<bool>,
    sigma: Vec<T>,
    rgb: Vec<[T; 3]>,
    weights: Vec<T>,
    /// Appearance components, head input and hidden activations of every
    /// in-box sample, concatenated.
    acts: Vec<T>,
}

fn trace<T: Real>(
    field: &FieldModel<T>,
    camera: &Camera,
    (h, w): (usize, usize),
    n_samples: usize,
    jitter: Option<u64>,
    record: bool,
    scratch: &mut PointScratch<T>,
) -> Result<(Option<RayTape<T>>, [T; 3])> {
    let ray = generate_ray::<T>(camera, h, w);
    let jitter = jitter.map(|s| (s, (h * camera.width + w) as u64));
    let Some((clipped, samples)) = ray_samples(field.bbox(), &ray, n_samples, jitter)? else {
        return Ok((None, [T::zero(); 3]));
    };
    let enc = encode_direction(&clipped.direction, field.head.dir_freqs);
    let n = samples.t.len();
    let mut inside = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut rgb = Vec::with_capacity(n);
    let act_len = scratch.comps.len() + scratch.input.len() + scratch.hidden.len();
    let mut acts = Vec::with_capacity(if record { n * act_len } else { 0 });
    for x in &samples.positions {
        if field.bbox().contains(x) {
            let (s, c) = field.query_with(x, &enc, scratch);
            if record {
                acts.extend_from_slice(&scratch.comps);
                acts.extend_from_slice(&scratch.input);
                acts.extend_from_slice(&scratch.hidden);
            }
            inside.push(true);
            sigma.push(s);
            rgb.push(c);
        } else {
            inside.push(false);
            sigma.push(T::zero());
            rgb.push([T::zero(); 3]);
        }
    }
    let comp = composite_unchecked(&sigma, &rgb, &samples.delta);
    let color = comp.color;
    Ok((
        Some(RayTape {
            samples,
            inside,
            sigma,
            rgb,
            weights: comp.weights,
            acts,
        }),
        color,
    ))
}

fn trace_backward<T: Real>(
    field: &FieldModel<T>,
    tape: &RayTape<T>,
    dcolor: &[T; 3],
    scratch: &mut PointScratch<T>,
    grad: &mut FieldModel<T>,
) {
    let (dsigma, drgb) =
        composite_backward(&tape.sigma, &tape.rgb, &tape.samples.delta, &tape.weights, dcolor);
    let (nc, ni) = (scratch.comps.len(), scratch.input.len());
    let act_len = nc + ni + scratch.hidden.len();
    let mut slot = 0;
    for q in 0..tape.sigma.len() {
        if !tape.inside[q] {
            continue;
        }
        let a = &tape.acts[slot * act_len..(slot + 1) * act_len];
        slot += 1;
        let zero = dsigma[q] == T::zero() && drgb[q].iter().all(|&v| v == T::zero());
        if zero {
            continue;
        }
        scratch.comps.copy_from_slice(&a[..nc]);
        scratch.input.copy_from_slice(&a[nc..nc + ni]);
        scratch.hidden.copy_from_slice(&a[nc + ni..]);
        let x = &tape.samples.positions[q];
        field.backward_with(x, &tape.rgb[q], dsigma[q], &drgb[q], scratch, grad);
    }
}

/// Normalized kernels of a fixed Gaussian bank, one per std, single channel.
pub fn gaussian_bank<T: Real>(stds: &[f64], k: usize) -> KernelStack<T> {
    let r = (k / 2) as isize;
    let mut data = Vec::with_capacity(stds.len() * k * k);
    for &s in stds {
        let mut ker: Vec<f64> = (0..k * k)
            .map(|idx| {
                let (i, j) = ((idx / k) as isize - r, (idx % k) as isize - r);
                if s == 0.0 {
                    f64::from(i == 0 && j == 0)
                } else {
                    (-((i * i + j * j) as f64) / (2.0 * s * s)).exp()
                }
            })
            .collect();
        let sum: f64 = ker.iter().sum();
        ker.iter_mut().for_each(|v| *v /= sum);
        data.extend(ker.into_iter().map(T::c));
    }
    KernelStack {
        n: stds.len(),
        k,
        channels: 1,
        data,
    }
}

fn fixed_bank_weights<T: Real>(
    clean: &Raster<T>,
    gt: &Raster<T>,
    k: usize,
) -> Result<KernelWeights<T>> {
    let bank = gaussian_bank::<T>(&FIXED_BANK_STDS, k);
    let windows = crop(clean, k)?;
    let pp = windows.p_prime;
    let n = pp * pp;
    let mut candidates = Vec::with_capacity(bank.n);
    for b in 0..bank.n {
        let stack = KernelStack {
            n,
            k,
            channels: 1,
            data: bank.kernel(b).repeat(n),
        };
        candidates.push(convolve(&windows, &KernelWeights(stack))?);
    }
    let mut data = Vec::with_capacity(n * k * k);
    for t in 0..n {
        let err = |c: &Raster<T>| -> T {
            (0..gt.channels)
                .map(|ch| {
                    let d = c.data[t * gt.channels + ch] - gt.data[t * gt.channels + ch];
                    d * d
                })
                .sum()
        };
        let mut best = 0;
        for b in 1..bank.n {
            if err(&candidates[b]) < err(&candidates[best]) {
                best = b;
            }
        }
        data.extend_from_slice(bank.kernel(best));
    }
    Ok(KernelWeights(KernelStack {
        n,
        k,
        channels: 1,
        data,
    }))
}

/// Intermediate images of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchForward<T> {
    /// `P x P` clean render.
    pub clean: Raster<T>,
    /// `P' x P'` blurred estimate before the response curve.
    pub blurred: Raster<T>,
    /// Response-curve output compared with the ground truth.
    pub output: Raster<T>,
}

struct Blur<T> {
    /// Softmax weights before skipping (learned mode only).
    normalized: Option<KernelWeights<T>>,
    applied: KernelWeights<T>,
}

fn blur_weights<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
    idx: usize,
    clean: &Raster<T>,
) -> Result<Blur<T>> {
    let spec = &batch.patches[idx];
    let pp = batch.p_prime();
    match cfg.kernel_mode {
        KernelMode::Learned => {
            let (th, tw) = spec.target_origin(batch.k);
            let targets = target_block(th, tw, pp, pp);
            let raw = lookup(&params.kernels, &views[spec.view].levels, spec.view, &targets)?;
            let normalized = normalize(&raw);
            let applied = apply_skip(&normalized, &batch.skip[idx])?;
            Ok(Blur {
                normalized: Some(normalized),
                applied,
            })
        }
        KernelMode::None => Ok(Blur {
            normalized: None,
            applied: KernelWeights(KernelStack::delta(pp * pp, batch.k, 1)),
        }),
        KernelMode::FixedBank => Ok(Blur {
            normalized: None,
            applied: fixed_bank_weights(clean, &batch.gt[idx], batch.k)?,
        }),
    }
}

/// Sparse kernel-grid gradient of one patch: `(row offset, values)`.
type KernelGrad<T> = Vec<(usize, Vec<T>)>;

struct PatchOut<T> {
    sse: T,
    kernel: KernelGrad<T>,
    crf: (usize, T),
}

#[allow(clippy::too_many_arguments)]
fn patch_pass<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
    idx: usize,
    inv_n: T,
    scratch: &mut PointScratch<T>,
    field_grad: Option<&mut FieldModel<T>>,
) -> Result<(PatchOut<T>, PatchForward<T>)> {
    let spec = &batch.patches[idx];
    let view = views
        .get(spec.view)
        .ok_or_else(|| invalid(format!("view {} out of range", spec.view)))?;
    let camera = &view.camera;
    let (p, k) = (batch.p, batch.k);
    let (h0, w0) = spec.origin;
    if h0 + p > camera.height || w0 + p > camera.width {
        return Err(invalid(format!("patch at ({h0},{w0}) leaves the image")));
    }
    let field = &params.field;
    let jitter = cfg.jitter.then_some(spec.seed);
    let want_grad = field_grad.is_some();

    let mut tapes = Vec::with_capacity(if want_grad { p * p } else { 0 });
    let mut clean = Raster::new(p, p, 3);
    for i in 0..p {
        for j in 0..p {
            let (tape, color) = trace(
                field,
                camera,
                (h0 + i, w0 + j),
                cfg.samples_per_ray,
                jitter,
                want_grad,
                scratch,
            )?;
            let at = clean.idx(i, j, 0);
            clean.data[at..at + 3].copy_from_slice(&color);
            if want_grad {
                tapes.push(tape);
            }
        }
    }

    let blur = blur_weights(params, cfg, views, batch, idx, &clean)?;
    let windows = crop(&clean, k)?;
    let blurred = convolve(&windows, &blur.applied)?;
    let gamma = effective_gamma(params.crf[spec.view]);
    let gt = &batch.gt[idx];
    let mut output = Raster::new(blurred.height, blurred.width, 3);
    let mut sse = T::zero();
    let mut dblur = Raster::new(blurred.height, blurred.width, 3);
    let mut dgamma = T::zero();
    for (e, &x) in blurred.data.iter().enumerate() {
        let y = crf_apply(x, gamma);
        output.data[e] = y;
        let r = y - gt.data[e];
        sse += r * r;
        if x > T::zero() {
            let dy = T::c(2.0) * r * inv_n;
            dgamma += dy * y * x.min(T::one()).ln();
            if x < T::one() {
                dblur.data[e] = dy * gamma * y / x;
            }
        }
    }
    let fwd = PatchForward {
        clean,
        blurred,
        output,
    };
    let mut out = PatchOut {
        sse,
        kernel: Vec::new(),
        crf: (spec.view, dgamma * sigmoid(params.crf[spec.view])),
    };
    let Some(field_grad) = field_grad else {
        return Ok((out, fwd));
    };

    let (dclean, mut dw) = convolve_backward(&fwd.clean, &blur.applied, &dblur);
    if let Some(normalized) = &blur.normalized {
        let row = params.kernels.row_len();
        for (t, &skip) in batch.skip[idx].iter().enumerate() {
            if skip {
                dw[t * row..(t + 1) * row].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let draw = normalize_backward(normalized, &dw);
        let mut rows: Vec<(usize, Vec<T>)> = Vec::new();
        for (t, (&skip, &level)) in batch.skip[idx].iter().zip(&batch.levels[idx]).enumerate() {
            if skip {
                continue;
            }
            let off = params.kernels.row_offset(spec.view, level as usize);
            let g = &draw[t * row..(t + 1) * row];
            match rows.iter_mut().find(|(o, _)| *o == off) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
                None => rows.push((off, g.to_vec())),
            }
        }
        out.kernel = rows;
    }

    for (pix, tape) in tapes.iter().enumerate() {
        let Some(tape) = tape else { continue };
        let d = dclean.pixel(pix / p, pix % p);
        let dcolor = [d[0], d[1], d[2]];
        if dcolor.iter().all(|&v| v == T::zero()) {
            continue;
        }
        trace_backward(field, tape, &dcolor, scratch, field_grad);
    }
    Ok((out, fwd))
}

/// Intermediate images of every patch of the batch (no gradients).
pub fn forward_batch<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
) -> Result<Vec<PatchForward<T>>> {
    let mut scratch = params.field.scratch();
    (0..batch.patches.len())
        .map(|i| patch_pass(params, cfg, views, batch, i, T::one(), &mut scratch, None).map(|r| r.1))
        .collect()
}

fn check_batch<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
) -> Result<()> {
    if batch.patches.is_empty() {
        return Err(invalid("empty batch"));
    }
    if batch.k != cfg.k || batch.p != cfg.p {
        return Err(invalid(format!(
            "batch of P={} K={} does not match the config (P={} K={})",
            batch.p, batch.k, cfg.p, cfg.k
        )));
    }
    if params.crf.len() != views.len() || params.kernels.n_img != views.len() {
        return Err(Error::Shape(format!(
            "parameters cover {} views, the data has {}",
            params.crf.len(),
            views.len()
        )));
    }
    Ok(())
}

fn batch_pass<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
    meter: Option<&RayMeter>,
    want_grad: bool,
) -> Result<(T, Option<Params<T>>)> {
    check_batch(params, cfg, views, batch)?;
    let pp = batch.p_prime();
    let inv_n = T::one() / T::c((batch.patches.len() * pp * pp * 3) as f64);
    let idx: Vec<usize> = (0..batch.patches.len()).collect();
    let chunks: Vec<Result<(Vec<PatchOut<T>>, Option<FieldModel<T>>)>> = idx
        .par_chunks(PATCH_CHUNK)
        .map(|chunk| {
            let mut scratch = params.field.scratch();
            let mut fg = want_grad.then(|| params.field.zeros_like());
            let mut outs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (o, _) = patch_pass(params, cfg, views, batch, i, inv_n, &mut scratch, fg.as_mut())?;
                outs.push(o);
            }
            Ok((outs, fg))
        })
        .collect();
    if let Some(m) = meter {
        m.add((batch.patches.len() * batch.p * batch.p) as u64);
    }

    let mut sse = T::zero();
    let mut grad = want_grad.then(|| params.zeros_like());
    let mut field_acc: Option<FieldModel<T>> = None;
    for c in chunks {
        let (outs, fg) = c?;
        for o in outs {
            sse += o.sse;
            if let Some(g) = grad.as_mut() {
                for (off, vals) in o.kernel {
                    g.kernels.values[off..off + vals.len()]
                        .iter_mut()
                        .zip(vals)
                        .for_each(|(a, v)| *a += v);
                }
                g.crf[o.crf.0] += o.crf.1;
            }
        }
        if let Some(fg) = fg {
            match field_acc.as_mut() {
                Some(acc) => acc.add_assign(&fg),
                None => field_acc = Some(fg),
            }
        }
    }
    if let (Some(g), Some(f)) = (grad.as_mut(), field_acc) {
        let src: Vec<Vec<T>> = f.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        for (dst, s) in g.field.tensors_mut().into_iter().zip(src) {
            *dst = s;
        }
    }
    Ok((sse * inv_n, grad))
}

/// Loss of a batch without gradients.
pub fn batch_loss<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
) -> Result<T> {
    batch_pass(params, cfg, views, batch, None, false).map(|r| r.0)
}

/// Loss and its gradient with respect to every parameter.
pub fn batch_loss_and_grad<T: Real>(
    params: &Params<T>,
    cfg: &TrainConfig,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
    meter: Option<&RayMeter>,
) -> Result<(T, Params<T>)> {
    let (loss, grad) = batch_pass(params, cfg, views, batch, meter, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// One optimization step on `batch`; returns the loss before the update.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    views: &[TrainView<T>],
    batch: &PatchBatch<T>,
    meter: Option<&RayMeter>,
) -> Result<T> {
    let (loss, grad) = batch_loss_and_grad(&state.params, &state.config, views, batch, meter)?;
    let bad_grad = grad.first_non_finite();
    if !loss.is_finite() || bad_grad.is_some() {
        let what = match (state.params.first_non_finite(), bad_grad) {
            (Some(p), _) => p,
            (None, Some(g)) => format!("gradient of {g}"),
            (None, None) => "loss (rendered patches)".into(),
        };
        return Err(Error::NonFinite(format!("{what} at iteration {}", state.iter)));
    }
    state.adam_update(&grad);
    state.iter += 1;
    Ok(loss)
}

/// Append-only CSV training log.
pub struct TrainLog {
    file: File,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,loss,wall_time_s,rays";

    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            writeln!(file, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn record(&mut self, iter: u64, loss: f64, wall: f64, rays: u64) -> Result<()> {
        writeln!(self.file, "{iter},{loss},{wall:.3},{rays}").map_err(|e| Error::io("training log", e))
    }
}

/// Runs `n_steps` steps from the current state and returns the loss stream.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    views: &[TrainView<T>],
    n_steps: usize,
    mut log: Option<&mut TrainLog>,
    meter: Option<&RayMeter>,
) -> Result<Vec<f64>> {
    let start = Instant::now();
    let mut losses = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let batch = state.next_batch(views)?;
        let loss = train_step(state, views, &batch, meter)?.f64();
        losses.push(loss);
        let every = state.config.log_every.max(1) as u64;
        if let Some(log) = log.as_deref_mut() {
            if state.iter % every == 0 || state.iter == 1 {
                let rays = meter.map_or(0, |m| m.get());
                log.record(state.iter, loss, start.elapsed().as_secs_f64(), rays)?;
            }
        }
    }
    Ok(losses)
}
