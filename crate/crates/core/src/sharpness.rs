//! Focus measures, external defocus/depth maps, and quantization of
//! sharpness into per-pixel group indices.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{invalid, Error, Result};
use crate::raster::Raster;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSource {
    Sml,
    Tenengrad,
    External,
}

impl fmt::Display for PriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorSource::Sml => "sml",
            PriorSource::Tenengrad => "tenengrad",
            PriorSource::External => "external",
        })
    }
}

impl FromStr for PriorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sml" => Ok(PriorSource::Sml),
            "tenengrad" => Ok(PriorSource::Tenengrad),
            "external" => Ok(PriorSource::External),
            _ => Err(invalid(format!("unknown sharpness prior `{s}`"))),
        }
    }
}

/// Per-pixel sharpness of one view; larger means sharper.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessMap<T> {
    pub values: Raster<T>,
    pub source: PriorSource,
}

/// Per-pixel sharpness group in `[0, n_levels)`; higher is sharper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelMap {
    pub height: usize,
    pub width: usize,
    pub n_levels: usize,
    pub levels: Vec<u32>,
}

impl LevelMap {
    #[inline]
    pub fn at(&self, h: usize, w: usize) -> u32 {
        self.levels[h * self.width + w]
    }
}

/// Pixel fetch with point-symmetric reflection across the border pixel,
/// `I(-k) = 2 I(0) - I(k)`, so affine images stay affine after padding.
/// Rows are reflected first, then columns.
#[inline]
fn fetch_odd<T: Real>(img: &Raster<T>, y: isize, x: isize) -> T {
    odd_2d(img, y, x, img.height as isize, img.width as isize)
}

fn odd_2d<T: Real>(img: &Raster<T>, y: isize, x: isize, hh: isize, ww: isize) -> T {
    if y < 0 {
        let a = odd_2d(img, 0, x, hh, ww);
        let b = odd_2d(img, (-y).min(hh - 1), x, hh, ww);
        return a + a - b;
    }
    if y >= hh {
        let a = odd_2d(img, hh - 1, x, hh, ww);
        let b = odd_2d(img, (2 * (hh - 1) - y).max(0), x, hh, ww);
        return a + a - b;
    }
    if x < 0 {
        let a = img.get(y as usize, 0, 0);
        let b = img.get(y as usize, (-x).min(ww - 1) as usize, 0);
        return a + a - b;
    }
    if x >= ww {
        let a = img.get(y as usize, (ww - 1) as usize, 0);
        let b = img.get(y as usize, (2 * (ww - 1) - x).max(0) as usize, 0);
        return a + a - b;
    }
    img.get(y as usize, x as usize, 0)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
#[inline]
fn reflect101(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Sum of `measure` over a `window x window` neighborhood, mirrored at borders.
fn window_sum<T: Real>(measure: &Raster<T>, window: usize) -> Raster<T> {
    let r = (window / 2) as isize;
    let (hh, ww) = (measure.height as isize, measure.width as isize);
    let mut out = Raster::new(measure.height, measure.width, 1);
    for y in 0..hh {
        for x in 0..ww {
            let mut s = T::zero();
            for dy in -r..=r {
                let yy = reflect101(y + dy, hh);
                for dx in -r..=r {
                    s += measure.get(yy, reflect101(x + dx, ww), 0);
                }
            }
            out.set(y as usize, x as usize, 0, s);
        }
    }
    out
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(invalid(format!("focus window must be odd, got {window}")));
    }
    Ok(())
}

/// Windowed sum of the modified Laplacian
/// `|2I - I(x-s) - I(x+s)| + |2I - I(y-s) - I(y+s)|`.
pub fn sml_map<T: Real>(image: &Raster<T>, step: usize, window: usize) -> Result<SharpnessMap<T>> {
    check_window(window)?;
    if step == 0 {
        return Err(invalid("modified Laplacian step must be positive"));
    }
    let gray = image.to_gray();
    let s = step as isize;
    let mut ml = Raster::new(gray.height, gray.width, 1);
    for y in 0..gray.height as isize {
        for x in 0..gray.width as isize {
            let c = fetch_odd(&gray, y, x);
            let two = c + c;
            let lx = (two - fetch_odd(&gray, y, x - s) - fetch_odd(&gray, y, x + s)).abs();
            let ly = (two - fetch_odd(&gray, y - s, x) - fetch_odd(&gray, y + s, x)).abs();
            ml.set(y as usize, x as usize, 0, lx + ly);
        }
    }
    Ok(SharpnessMap {
        values: window_sum(&ml, window),
        source: PriorSource::Sml,
    })
}

/// Windowed sum of the squared 3x3 Sobel gradient magnitude.
pub fn tenengrad_map<T: Real>(image: &Raster<T>, window: usize) -> Result<SharpnessMap<T>> {
    check_window(window)?;
    let gray = image.to_gray();
    let mut mag = Raster::new(gray.height, gray.width, 1);
    let two = T::c(2.0);
    for y in 0..gray.height as isize {
        for x in 0..gray.width as isize {
            let p = |dy: isize, dx: isize| fetch_odd(&gray, y + dy, x + dx);
            let gx = p(-1, 1) + two * p(0, 1) + p(1, 1) - p(-1, -1) - two * p(0, -1) - p(1, -1);
            let gy = p(1, -1) + two * p(1, 0) + p(1, 1) - p(-1, -1) - two * p(-1, 0) - p(-1, 1);
            mag.set(y as usize, x as usize, 0, gx * gx + gy * gy);
        }
    }
    Ok(SharpnessMap {
        values: window_sum(&mag, window),
        source: PriorSource::Tenengrad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExternalKind {
    /// Larger means blurrier; inverted on load.
    Defocus,
    Depth,
}

/// Reads a single-channel 8- or 16-bit image scaled to `[0, 1]`.
/// Defocus maps come back inverted (`1 - defocus`).
pub fn load_external_map<T: Real>(
    path: &Path,
    kind: ExternalKind,
    expect: Option<(usize, usize)>,
    view: &str,
) -> Result<Raster<T>> {
    let view_err = |msg: String| Error::View {
        view: view.to_string(),
        msg,
    };
    let img = image::open(path)
        .map_err(|e| view_err(format!("cannot read {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if let Some((eh, ew)) = expect {
        if (eh, ew) != (h, w) {
            return Err(view_err(format!(
                "{} is {h}x{w}, expected {eh}x{ew}",
                path.display()
            )));
        }
    }
    let vals: Vec<T> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| T::c(v as f64 / 255.0)).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| T::c(v as f64 / 65535.0))
            .collect(),
        _ => {
            return Err(view_err(format!(
                "{} must be a single-channel 8- or 16-bit image",
                path.display()
            )))
        }
    };
    let mut r = Raster::from_vec(h, w, 1, vals)?;
    if kind == ExternalKind::Defocus {
        r.data.iter_mut().for_each(|v| *v = T::one() - *v);
    }
    Ok(r)
}

/// Writes values in `[0, 1]` as a 16-bit single-channel PNG.
pub fn save_map_u16<T: Real>(path: &Path, map: &Raster<T>) -> Result<()> {
    let buf: Vec<u16> = map
        .data
        .iter()
        .map(|v| (v.f64().clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, buf)
            .ok_or_else(|| Error::Shape("map buffer size".into()))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

fn level_of<T: Real>(v: T, lo: T, hi: T, n_levels: usize) -> u32 {
    if !(hi > lo) {
        return 0;
    }
    let u = (v - lo) / (hi - lo) * T::c(n_levels as f64);
    let l = u.floor().to_usize().unwrap_or(0);
    l.min(n_levels - 1) as u32
}

/// Uniform bins over the view's `[min, max]`; a constant map is all level 0.
pub fn quantize<T: Real>(map: &SharpnessMap<T>, n_levels: usize) -> Result<LevelMap> {
    if n_levels == 0 {
        return Err(invalid("n_levels must be at least 1"));
    }
    let v = &map.values;
    let (lo, hi) = v
        .data
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(a, b), &x| (a.min(x), b.max(x)));
    Ok(LevelMap {
        height: v.height,
        width: v.width,
        n_levels,
        levels: v.data.iter().map(|&x| level_of(x, lo, hi, n_levels)).collect(),
    })
}

/// Segment index per pixel from `n_segments` equal-mass depth bins.
pub fn depth_segments<T: Real>(depth: &Raster<T>, n_segments: usize) -> Vec<usize> {
    let mut sorted: Vec<T> = depth.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let cuts: Vec<T> = (1..n_segments).map(|s| sorted[s * n / n_segments]).collect();
    depth
        .data
        .iter()
        .map(|&d| cuts.iter().take_while(|&&c| d >= c).count())
        .collect()
}

/// Quantizes independently inside each depth segment, each with its own
/// min/max, so every segment spans the whole level range.
pub fn depth_segmented_quantize<T: Real>(
    map: &SharpnessMap<T>,
    depth: Option<&Raster<T>>,
    n_segments: usize,
    n_levels: usize,
) -> Result<LevelMap> {
    let depth = depth.ok_or_else(|| {
        invalid("depth-segmented quantization needs a depth map; use plain quantize without one")
    })?;
    if n_levels == 0 || n_segments == 0 {
        return Err(invalid("n_levels and n_segments must be at least 1"));
    }
    let v = &map.values;
    if depth.height != v.height || depth.width != v.width {
        return Err(Error::Shape(format!(
            "depth map {}x{} vs sharpness map {}x{}",
            depth.height, depth.width, v.height, v.width
        )));
    }
    let seg = depth_segments(depth, n_segments);
    let mut lo = vec![T::infinity(); n_segments];
    let mut hi = vec![T::neg_infinity(); n_segments];
    for (&x, &s) in v.data.iter().zip(&seg) {
        lo[s] = lo[s].min(x);
        hi[s] = hi[s].max(x);
    }
    Ok(LevelMap {
        height: v.height,
        width: v.width,
        n_levels,
        levels: v
            .data
            .iter()
            .zip(&seg)
            .map(|(&x, &s)| level_of(x, lo[s], hi[s], n_levels))
            .collect(),
    })
}

/// True where the pixel belongs to one of the `n_skip` sharpest groups.
pub fn skip_mask(levels: &LevelMap, n_skip: usize) -> Vec<bool> {
    let n_skip = n_skip.min(levels.n_levels) as u32;
    let cut = levels.n_levels as u32 - n_skip;
    levels.levels.iter().map(|&l| l >= cut).collect()
}

/// Metadata stored next to cached level maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelCacheInfo {
    pub n_levels: usize,
    pub source: String,
    pub segments: usize,
}

pub const LEVEL_SIDECAR: &str = "levels.txt";

pub fn write_level_map(path: &Path, levels: &LevelMap) -> Result<()> {
    if levels.n_levels > u16::MAX as usize + 1 {
        return Err(invalid("level maps are stored as 16-bit; n_levels too large"));
    }
    let buf: Vec<u16> = levels.levels.iter().map(|&l| l as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(levels.width as u32, levels.height as u32, buf)
            .ok_or_else(|| Error::Shape("level buffer size".into()))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_level_map(path: &Path, n_levels: usize) -> Result<LevelMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let levels: Vec<u32> = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        _ => return Err(Error::Data(format!("{}: not a level map", path.display()))),
    };
    if let Some(bad) = levels.iter().find(|&&l| l as usize >= n_levels) {
        return Err(Error::Data(format!(
            "{}: level {bad} out of range for {n_levels} groups (stale cache?)",
            path.display()
        )));
    }
    Ok(LevelMap {
        height: h,
        width: w,
        n_levels,
        levels,
    })
}

pub fn write_level_sidecar(dir: &Path, info: &LevelCacheInfo) -> Result<()> {
    let p = dir.join(LEVEL_SIDECAR);
    let text = format!(
        "n_levels={}\nsource={}\nsegments={}\n",
        info.n_levels, info.source, info.segments
    );
    fs::write(&p, text).map_err(|e| Error::io(p, e))
}

pub fn read_level_sidecar(dir: &Path) -> Result<LevelCacheInfo> {
    let p = dir.join(LEVEL_SIDECAR);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut info = LevelCacheInfo {
        n_levels: 0,
        source: String::new(),
        segments: 1,
    };
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        match k.trim() {
            "n_levels" => {
                info.n_levels = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad n_levels", p.display())))?
            }
            "source" => info.source = v.trim().to_string(),
            "segments" => {
                info.segments = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad segments", p.display())))?
            }
            _ => {}
        }
    }
    if info.n_levels == 0 {
        return Err(Error::Data(format!("{}: missing n_levels", p.display())));
    }
    Ok(info)
}
