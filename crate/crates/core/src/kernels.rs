//! Learnable blur-kernel grid: direct per-pixel lookup by sharpness group,
//! softmax normalization, skip substitution, and the per-pixel blur
//! convolution of a rendered clean patch.

use crate::error::{invalid, Error, Result};
use crate::raster::Raster;
use crate::real::Real;
use crate::sharpness::LevelMap;

/// Raw kernel values of shape `n_img x n_levels x k x k x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernelGrid<T> {
    pub n_img: usize,
    pub n_levels: usize,
    pub k: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> BlurKernelGrid<T> {
    pub fn zeros(n_img: usize, n_levels: usize, k: usize, channels: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(invalid(format!("kernel width must be odd, got {k}")));
        }
        if n_img == 0 || n_levels == 0 || channels == 0 {
            return Err(invalid("kernel grid dimensions must be positive"));
        }
        Ok(Self {
            n_img,
            n_levels,
            k,
            channels,
            values: vec![T::zero(); n_img * n_levels * k * k * channels],
        })
    }

    pub fn row_len(&self) -> usize {
        self.k * self.k * self.channels
    }

    #[inline]
    pub fn row_offset(&self, view: usize, level: usize) -> usize {
        (view * self.n_levels + level) * self.row_len()
    }

    pub fn row(&self, view: usize, level: usize) -> &[T] {
        let o = self.row_offset(view, level);
        &self.values[o..o + self.row_len()]
    }

    pub fn row_mut(&mut self, view: usize, level: usize) -> &mut [T] {
        let o = self.row_offset(view, level);
        let n = self.row_len();
        &mut self.values[o..o + n]
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n_img, self.n_levels, self.k, self.k, self.channels]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![T::zero(); self.values.len()],
            ..*self
        }
    }
}

/// Every kernel set to the log-density of an isotropic Gaussian with std
/// `sigma0`, so the softmax-normalized kernel is that Gaussian exactly.
pub fn init_gaussian<T: Real>(
    n_img: usize,
    n_levels: usize,
    k: usize,
    channels: usize,
    sigma0: f64,
) -> Result<BlurKernelGrid<T>> {
    let mut g = BlurKernelGrid::zeros(n_img, n_levels, k, channels)?;
    if !(sigma0 > 0.0) {
        return Err(invalid("initial kernel std must be positive"));
    }
    let r = (k / 2) as f64;
    let mut proto = Vec::with_capacity(g.row_len());
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            let v = -(di * di + dj * dj) / (2.0 * sigma0 * sigma0);
            proto.extend(std::iter::repeat(T::c(v)).take(channels));
        }
    }
    for row in g.values.chunks_mut(proto.len()) {
        row.copy_from_slice(&proto);
    }
    Ok(g)
}

/// `n` kernels of `k x k x channels`, one per target pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelStack<T> {
    pub n: usize,
    pub k: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> KernelStack<T> {
    pub fn kernel(&self, t: usize) -> &[T] {
        let n = self.k * self.k * self.channels;
        &self.data[t * n..(t + 1) * n]
    }

    /// `(i, j, c)` entry of kernel `t`.
    #[inline]
    pub fn at(&self, t: usize, i: usize, j: usize, c: usize) -> T {
        self.data[((t * self.k + i) * self.k + j) * self.channels + c]
    }

    /// Kernels that pass the center pixel through unchanged.
    pub fn delta(n: usize, k: usize, channels: usize) -> Self {
        let mut data = vec![T::zero(); n * k * k * channels];
        let c0 = (k / 2 * k + k / 2) * channels;
        for t in 0..n {
            for c in 0..channels {
                data[t * k * k * channels + c0 + c] = T::one();
            }
        }
        Self {
            n,
            k,
            channels,
            data,
        }
    }
}

/// Normalized per-target kernels: every `k x k` slice sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights<T>(pub KernelStack<T>);

/// Raw kernels for each target pixel: `raw[t] = B[view, L[target t]]`.
pub fn lookup<T: Real>(
    grid: &BlurKernelGrid<T>,
    levels: &LevelMap,
    view: usize,
    targets: &[(usize, usize)],
) -> Result<KernelStack<T>> {
    if view >= grid.n_img {
        return Err(invalid(format!(
            "view {view} out of range for {} kernel sets",
            grid.n_img
        )));
    }
    let n = grid.row_len();
    let mut data = Vec::with_capacity(targets.len() * n);
    for &(h, w) in targets {
        if h >= levels.height || w >= levels.width {
            return Err(invalid(format!("target ({h},{w}) outside the level map")));
        }
        let l = levels.at(h, w) as usize;
        if l >= grid.n_levels {
            return Err(Error::Data(format!(
                "level {l} at ({h},{w}) exceeds the {} kernel groups (stale level cache?)",
                grid.n_levels
            )));
        }
        data.extend_from_slice(grid.row(view, l));
    }
    Ok(KernelStack {
        n: targets.len(),
        k: grid.k,
        channels: grid.channels,
        data,
    })
}

/// Row-major coordinates of the `rows x cols` block at `(h0, w0)`.
pub fn target_block(h0: usize, w0: usize, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (h0 + i, w0 + j)))
        .collect()
}

/// Softmax over each `k x k` window, independently per channel.
pub fn normalize<T: Real>(raw: &KernelStack<T>) -> KernelWeights<T> {
    let (kk, ch) = (raw.k * raw.k, raw.channels);
    let mut data = raw.data.clone();
    for kern in data.chunks_mut(kk * ch) {
        for c in 0..ch {
            let mx = (0..kk).map(|i| kern[i * ch + c]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for i in 0..kk {
                let e = (kern[i * ch + c] - mx).exp();
                kern[i * ch + c] = e;
                s += e;
            }
            for i in 0..kk {
                kern[i * ch + c] /= s;
            }
        }
    }
    KernelWeights(KernelStack { data, ..*raw })
}

/// `d raw` from `d weights` through the per-window softmax.
pub fn normalize_backward<T: Real>(w: &KernelWeights<T>, dw: &[T]) -> Vec<T> {
    let s = &w.0;
    let (kk, ch) = (s.k * s.k, s.channels);
    let mut out = vec![T::zero(); s.data.len()];
    for t in 0..s.n {
        let base = t * kk * ch;
        for c in 0..ch {
            let dot: T = (0..kk)
                .map(|i| s.data[base + i * ch + c] * dw[base + i * ch + c])
                .sum();
            for i in 0..kk {
                let k = base + i * ch + c;
                out[k] = s.data[k] * (dw[k] - dot);
            }
        }
    }
    out
}

/// Replaces the kernels of masked targets with the center delta.
pub fn apply_skip<T: Real>(w: &KernelWeights<T>, mask: &[bool]) -> Result<KernelWeights<T>> {
    let s = &w.0;
    if mask.len() != s.n {
        return Err(Error::Shape(format!(
            "skip mask has {} entries for {} kernels",
            mask.len(),
            s.n
        )));
    }
    let mut out = s.clone();
    let n = s.k * s.k * s.channels;
    let delta = KernelStack::<T>::delta(1, s.k, s.channels).data;
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out.data[t * n..(t + 1) * n].copy_from_slice(&delta);
    }
    Ok(KernelWeights(out))
}

/// Stride-1 `k x k` windows of a `P x P x C` patch.
#[derive(Clone, Debug, PartialEq)]
pub struct CroppedPatch<T> {
    pub p_prime: usize,
    pub k: usize,
    pub channels: usize,
    /// `P' x P' x k x k x C`.
    pub data: Vec<T>,
}

impl<T: Real> CroppedPatch<T> {
    #[inline]
    pub fn at(&self, h: usize, w: usize, i: usize, j: usize, c: usize) -> T {
        let k = self.k;
        self.data[((((h * self.p_prime + w) * k + i) * k + j) * self.channels) + c]
    }
}

pub fn crop<T: Real>(clean: &Raster<T>, k: usize) -> Result<CroppedPatch<T>> {
    let p = clean.height;
    if clean.width != p {
        return Err(Error::Shape("clean patch must be square".into()));
    }
    if k == 0 || p < k {
        return Err(invalid(format!("patch size {p} is smaller than kernel {k}")));
    }
    let pp = p - k + 1;
    let ch = clean.channels;
    let mut data = Vec::with_capacity(pp * pp * k * k * ch);
    for h in 0..pp {
        for w in 0..pp {
            for i in 0..k {
                let row = clean.idx(h + i, w, 0);
                data.extend_from_slice(&clean.data[row..row + k * ch]);
            }
        }
    }
    Ok(CroppedPatch {
        p_prime: pp,
        k,
        channels: ch,
        data,
    })
}

fn check_conv_shapes<T: Real>(windows: &CroppedPatch<T>, w: &KernelStack<T>) -> Result<()> {
    let n = windows.p_prime * windows.p_prime;
    if w.n != n || w.k != windows.k || !(w.channels == windows.channels || w.channels == 1) {
        return Err(Error::Shape(format!(
            "{} kernels of {}x{}x{} against {n} windows of {}x{}x{}",
            w.n, w.k, w.k, w.channels, windows.k, windows.k, windows.channels
        )));
    }
    Ok(())
}

/// `I_b[h, w] = sum_{i,j} window[h, w, i, j] * weight[h, w, i, j]` per
/// channel. Single-channel kernels are shared across image channels.
pub fn convolve<T: Real>(windows: &CroppedPatch<T>, w: &KernelWeights<T>) -> Result<Raster<T>> {
    let ws = &w.0;
    check_conv_shapes(windows, ws)?;
    let (pp, ch, kk) = (windows.p_prime, windows.channels, windows.k * windows.k);
    let wc = ws.channels;
    let mut out = Raster::new(pp, pp, ch);
    for t in 0..pp * pp {
        let win = &windows.data[t * kk * ch..(t + 1) * kk * ch];
        let ker = &ws.data[t * kk * wc..(t + 1) * kk * wc];
        for c in 0..ch {
            let kc = if wc == 1 { 0 } else { c };
            let mut s = T::zero();
            for i in 0..kk {
                s += win[i * ch + c] * ker[i * wc + kc];
            }
            out.data[t * ch + c] = s;
        }
    }
    Ok(out)
}

/// Gradients of `sum(dout * I_b)` w.r.t. the clean patch (`P x P x C`) and
/// the normalized weights.
pub fn convolve_backward<T: Real>(
    clean: &Raster<T>,
    w: &KernelWeights<T>,
    dout: &Raster<T>,
) -> (Raster<T>, Vec<T>) {
    let ws = &w.0;
    let (k, ch, wc) = (ws.k, clean.channels, ws.channels);
    let pp = dout.height;
    let mut dclean = Raster::new(clean.height, clean.width, ch);
    let mut dw = vec![T::zero(); ws.data.len()];
    for h in 0..pp {
        for x in 0..pp {
            let t = h * pp + x;
            for c in 0..ch {
                let g = dout.get(h, x, c);
                if g == T::zero() {
                    continue;
                }
                let kc = if wc == 1 { 0 } else { c };
                for i in 0..k {
                    for j in 0..k {
                        let wi = ((t * k + i) * k + j) * wc + kc;
                        let ci = clean.idx(h + i, x + j, c);
                        dw[wi] += g * clean.data[ci];
                        dclean.data[ci] += g * ws.data[wi];
                    }
                }
            }
        }
    }
    (dclean, dw)
}

/// Mean squared distance of kernel mass from the center, averaged over
/// channels: the spread of a normalized kernel.
pub fn kernel_spread<T: Real>(kernel: &[T], k: usize, channels: usize) -> f64 {
    let r = (k / 2) as f64;
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            for c in 0..channels {
                s += kernel[(i * k + j) * channels + c].f64() * d2;
            }
        }
    }
    s / channels as f64
}
