//! Pinhole cameras and primary-ray generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::render::Ray;

/// Pinhole camera with an OpenCV-style frame (`+z` forward, `+y` down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rigid transform, row-major.
    pub c2w: [[f64; 4]; 4],
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Data("focal lengths must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Data("image size must be non-zero".into()));
        }
        let r = &self.c2w;
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                dev += (dot - want) * (dot - want);
            }
        }
        if dev.sqrt() >= 1e-5 {
            return Err(Error::Data(format!(
                "camera rotation is not orthonormal (|R^T R - I| = {:.3e})",
                dev.sqrt()
            )));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate
    /// world up direction.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        height: usize,
        width: usize,
    ) -> Self {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let norm = |a: [f64; 3]| {
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            [a[0] / n, a[1] / n, a[2] / n]
        };
        let z = norm(sub(target, eye));
        let x = norm(cross(z, up));
        // image y points down
        let y = cross(z, x);
        let c2w = [
            [x[0], y[0], z[0], eye[0]],
            [x[1], y[1], z[1], eye[1]],
            [x[2], y[2], z[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            c2w,
            height,
            width,
        }
    }

    /// Unit world-space direction through the center of pixel `(h, w)`.
    pub fn direction(&self, h: usize, w: usize) -> [f64; 3] {
        let dc = [
            (w as f64 + 0.5 - self.cx) / self.fx,
            (h as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ];
        let r = &self.c2w;
        let mut d = [0.0; 3];
        for (i, v) in d.iter_mut().enumerate() {
            *v = r[i][0] * dc[0] + r[i][1] * dc[1] + r[i][2] * dc[2];
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

/// Ray from the camera center through the center of pixel `(h, w)`;
/// the depth range is unbounded until clipped against a bounding box.
pub fn generate_ray<T: Real>(camera: &Camera, h: usize, w: usize) -> Ray<T> {
    let o = camera.position();
    let d = camera.direction(h, w);
    Ray {
        origin: o.map(T::c),
        direction: d.map(T::c),
        t_near: T::zero(),
        t_far: T::infinity(),
    }
}
