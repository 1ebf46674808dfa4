//! Image folders with per-image poses, and the sharpness preprocessing that
//! turns training views into level maps.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{invalid, Error, Result};
use crate::raster::Raster;
use crate::real::Real;
use crate::sampler::TrainView;
use crate::sharpness::{
    depth_segmented_quantize, load_external_map, quantize, read_level_map, read_level_sidecar,
    save_map_u16, sml_map, tenengrad_map, write_level_map, write_level_sidecar, ExternalKind,
    LevelCacheInfo, LevelMap, PriorSource, SharpnessMap,
};

pub const POSES_FILE: &str = "poses.json";
pub const IMAGES_DIR: &str = "images";
pub const DEFOCUS_DIR: &str = "defocus";
pub const DEPTH_DIR: &str = "depth";
pub const LEVELS_DIR: &str = "levels";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(invalid(format!("split must be train or test, got {s:?}"))),
        }
    }
}

/// One entry of `poses.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub file: String,
    #[serde(default = "default_split")]
    pub split: Split,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world, row-major.
    pub c2w: [[f64; 4]; 4],
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub frames: Vec<PoseEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View<T> {
    pub file: String,
    pub split: Split,
    pub image: Raster<T>,
    pub camera: Camera,
    /// External defocus map as stored (larger is blurrier).
    pub defocus: Option<Raster<T>>,
    pub depth: Option<Raster<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub views: Vec<View<T>>,
}

pub fn read_rgb<T: Real>(path: &Path) -> Result<Raster<T>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| T::c(v as f64 / 255.0)).collect();
    Raster::from_vec(h, w, 3, data)
}

pub fn write_rgb<T: Real>(path: &Path, image: &Raster<T>) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Shape("expected a 3-channel image".into()));
    }
    let buf: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(image.width as u32, image.height as u32, buf)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

impl<T: Real> Dataset<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let poses_path = dir.join(POSES_FILE);
        let text = fs::read_to_string(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
        let poses: PoseFile = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", poses_path.display())))?;
        let by_file: HashMap<&str, &PoseEntry> = poses.frames.iter().map(|f| (f.file.as_str(), f)).collect();

        let img_dir = dir.join(IMAGES_DIR);
        let mut files: Vec<String> = fs::read_dir(&img_dir)
            .map_err(|e| Error::io(&img_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no images in {}", img_dir.display())));
        }
        for f in &files {
            if !by_file.contains_key(f.as_str()) {
                return Err(Error::Data(format!("missing poses entry for image {f}")));
            }
        }
        let present: std::collections::HashSet<&str> = files.iter().map(String::as_str).collect();
        if let Some(f) = poses.frames.iter().find(|f| !present.contains(f.file.as_str())) {
            return Err(Error::Data(format!("poses entry {} has no image", f.file)));
        }

        let views: Vec<Result<View<T>>> = poses
            .frames
            .par_iter()
            .map(|entry| {
                let image = read_rgb::<T>(&img_dir.join(&entry.file))?;
                let camera = Camera {
                    fx: entry.fx,
                    fy: entry.fy,
                    cx: entry.cx,
                    cy: entry.cy,
                    c2w: entry.c2w,
                    height: image.height,
                    width: image.width,
                };
                camera.validate().map_err(|e| Error::View {
                    view: entry.file.clone(),
                    msg: e.to_string(),
                })?;
                let dims = Some((image.height, image.width));
                let aux = |sub: &str, kind: ExternalKind| -> Result<Option<Raster<T>>> {
                    let p = dir.join(sub).join(&entry.file);
                    if !p.is_file() {
                        return Ok(None);
                    }
                    let mut m = load_external_map::<T>(&p, kind, dims, &entry.file)?;
                    if kind == ExternalKind::Defocus {
                        m.data.iter_mut().for_each(|v| *v = T::one() - *v);
                    }
                    Ok(Some(m))
                };
                Ok(View {
                    file: entry.file.clone(),
                    split: entry.split,
                    defocus: aux(DEFOCUS_DIR, ExternalKind::Defocus)?,
                    depth: aux(DEPTH_DIR, ExternalKind::Depth)?,
                    image,
                    camera,
                })
            })
            .collect();
        let views = views.into_iter().collect::<Result<Vec<_>>>()?;
        let ds = Self { views };
        ds.check_train_sizes()?;
        Ok(ds)
    }

    fn check_train_sizes(&self) -> Result<()> {
        let mut size = None;
        for v in self.views.iter().filter(|v| v.split == Split::Train) {
            let s = (v.image.height, v.image.width);
            match size {
                None => size = Some(s),
                Some(s0) if s0 != s => {
                    return Err(Error::View {
                        view: v.file.clone(),
                        msg: format!("is {}x{}, other training views are {}x{}", s.0, s.1, s0.0, s0.1),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Writes images as 8-bit PNG, auxiliary maps as 16-bit PNG and the
    /// pose file. Depth maps are divided by `depth_scale` to fit `[0, 1]`.
    pub fn save(&self, dir: &Path, depth_scale: f64) -> Result<()> {
        for sub in [IMAGES_DIR, DEFOCUS_DIR, DEPTH_DIR] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut frames = Vec::with_capacity(self.views.len());
        for v in &self.views {
            write_rgb(&dir.join(IMAGES_DIR).join(&v.file), &v.image)?;
            if let Some(d) = &v.defocus {
                save_map_u16(&dir.join(DEFOCUS_DIR).join(&v.file), d)?;
            }
            if let Some(d) = &v.depth {
                let mut scaled = d.clone();
                scaled.data.iter_mut().for_each(|x| *x = T::c(x.f64() / depth_scale));
                save_map_u16(&dir.join(DEPTH_DIR).join(&v.file), &scaled)?;
            }
            let c = &v.camera;
            frames.push(PoseEntry {
                file: v.file.clone(),
                split: v.split,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                c2w: c.c2w,
            });
        }
        let p = dir.join(POSES_FILE);
        let text = serde_json::to_string_pretty(&PoseFile { frames })
            .map_err(|e| Error::Data(format!("cannot encode poses: {e}")))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &View<T>> {
        self.views.iter().filter(move |v| v.split == split)
    }
}

/// How per-pixel sharpness is obtained during preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorOptions {
    pub source: PriorSource,
    pub n_levels: usize,
    /// Depth segments; 1 disables segmentation.
    pub depth_segments: usize,
    pub sml_step: usize,
    pub window: usize,
}

impl PriorOptions {
    pub fn new(source: PriorSource, n_levels: usize) -> Self {
        Self {
            source,
            n_levels,
            depth_segments: 1,
            sml_step: 1,
            window: 5,
        }
    }
}

pub fn sharpness_of<T: Real>(view: &View<T>, opts: &PriorOptions) -> Result<SharpnessMap<T>> {
    let gray = view.image.to_gray();
    match opts.source {
        PriorSource::Sml => sml_map(&gray, opts.sml_step, opts.window),
        PriorSource::Tenengrad => tenengrad_map(&gray, opts.window),
        PriorSource::External => {
            let d = view.defocus.as_ref().ok_or_else(|| Error::View {
                view: view.file.clone(),
                msg: "external prior requested but no defocus map is present".into(),
            })?;
            let mut values = d.clone();
            values.data.iter_mut().for_each(|v| *v = T::one() - *v);
            Ok(SharpnessMap {
                values,
                source: PriorSource::External,
            })
        }
    }
}

pub fn levels_of<T: Real>(view: &View<T>, opts: &PriorOptions) -> Result<LevelMap> {
    let map = sharpness_of(view, opts)?;
    if opts.depth_segments > 1 {
        let depth = view.depth.as_ref().ok_or_else(|| Error::View {
            view: view.file.clone(),
            msg: "depth segmentation requested but no depth map is present".into(),
        })?;
        depth_segmented_quantize(&map, Some(depth), opts.depth_segments, opts.n_levels)
    } else {
        quantize(&map, opts.n_levels)
    }
}

/// Level maps for every training view, written to `<dir>/levels/` with a
/// sidecar describing how they were made.
pub fn preprocess<T: Real>(dir: &Path, data: &Dataset<T>, opts: &PriorOptions) -> Result<Vec<LevelMap>> {
    let out = dir.join(LEVELS_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let train: Vec<&View<T>> = data.split(Split::Train).collect();
    let maps: Vec<LevelMap> = train
        .par_iter()
        .map(|v| levels_of(v, opts))
        .collect::<Result<Vec<_>>>()?;
    for (v, m) in train.iter().zip(&maps) {
        write_level_map(&level_path(dir, &v.file), m)?;
    }
    write_level_sidecar(
        &out,
        &LevelCacheInfo {
            n_levels: opts.n_levels,
            source: opts.source.to_string(),
            segments: opts.depth_segments,
        },
    )?;
    Ok(maps)
}

fn level_path(dir: &Path, file: &str) -> PathBuf {
    let stem = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dir.join(LEVELS_DIR).join(format!("{stem}.png"))
}

/// Training views with their cached level maps; the cache must have been
/// built for `n_levels` groups.
pub fn train_views<T: Real>(dir: &Path, data: &Dataset<T>, n_levels: usize) -> Result<Vec<TrainView<T>>> {
    let info = read_level_sidecar(&dir.join(LEVELS_DIR))
        .map_err(|e| Error::Data(format!("no level cache, run preprocess first ({e})")))?;
    if info.n_levels != n_levels {
        return Err(Error::Data(format!(
            "level cache was built for N_k = {}, config asks for {n_levels}; rerun preprocess",
            info.n_levels
        )));
    }
    data.split(Split::Train)
        .map(|v| {
            let levels = read_level_map(&level_path(dir, &v.file), n_levels)?;
            if (levels.height, levels.width) != (v.image.height, v.image.width) {
                return Err(Error::View {
                    view: v.file.clone(),
                    msg: "cached level map size differs from the image".into(),
                });
            }
            Ok(TrainView {
                name: v.file.clone(),
                image: v.image.clone(),
                camera: v.camera.clone(),
                levels,
            })
        })
        .collect()
}
