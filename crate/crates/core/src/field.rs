//! Vector–matrix decomposed density and appearance grids, the color head,
//! and point queries.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::real::{sigmoid, softplus, Real};

/// Axis-aligned world-space bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Real> Aabb<T> {
    pub fn new(min: [T; 3], max: [T; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite() {
                return Err(invalid(format!(
                    "bounding box extent along axis {a} must be positive and finite"
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        let h = T::c(half);
        Self {
            min: [-h; 3],
            max: [h; 3],
        }
    }

    pub fn contains(&self, p: &[T; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: [T; 3]) -> [T; 3] {
        let mut q = p;
        for a in 0..3 {
            q[a] = q[a].max(self.min[a]).min(self.max[a]);
        }
        q
    }

    /// Slab test; returns the parametric entry/exit distances clipped to `t >= 0`.
    pub fn intersect(&self, origin: &[T; 3], dir: &[T; 3]) -> Option<(T, T)> {
        let mut t0 = T::zero();
        let mut t1 = T::infinity();
        for a in 0..3 {
            if dir[a] == T::zero() {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = T::one() / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// The two axes spanned by the plane paired with line axis `a`.
#[inline]
pub const fn plane_axes(a: usize) -> (usize, usize) {
    match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Cell index and blend fraction of a point along each grid axis.
#[derive(Clone, Copy, Debug, Default)]
pub struct GridCoord<T> {
    pub i0: [usize; 3],
    pub frac: [T; 3],
}

/// One 3D grid factored as a sum of (line ∘ plane) products along each axis.
///
/// `lines[a]` holds `ranks[a]` vectors of length `res[a]`; `planes[a]` holds
/// `ranks[a]` matrices over the two remaining axes (row-major, lower axis
/// first). Node `i` sits at `min + i / (res - 1) * extent`.
#[derive(Clone, Debug, PartialEq)]
pub struct VmGrid<T> {
    pub bbox: Aabb<T>,
    pub res: [usize; 3],
    pub ranks: [usize; 3],
    pub lines: [Vec<T>; 3],
    pub planes: [Vec<T>; 3],
}

impl<T: Real> VmGrid<T> {
    pub fn zeros(bbox: Aabb<T>, res: [usize; 3], ranks: [usize; 3]) -> Result<Self> {
        Self::check_dims(&res, &ranks)?;
        let lines = std::array::from_fn(|a| vec![T::zero(); ranks[a] * res[a]]);
        let planes = std::array::from_fn(|a| {
            let (b, c) = plane_axes(a);
            vec![T::zero(); ranks[a] * res[b] * res[c]]
        });
        Ok(Self {
            bbox,
            res,
            ranks,
            lines,
            planes,
        })
    }

    /// Gaussian-free init: every stored value uniform in `[-scale, scale]`.
    pub fn random<R: Rng>(
        bbox: Aabb<T>,
        res: [usize; 3],
        ranks: [usize; 3],
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut g = Self::zeros(bbox, res, ranks)?;
        for v in g.lines.iter_mut().chain(g.planes.iter_mut()) {
            for x in v.iter_mut() {
                *x = T::c(rng.gen_range(-scale..=scale));
            }
        }
        Ok(g)
    }

    pub fn from_parts(
        bbox: Aabb<T>,
        res: [usize; 3],
        ranks: [usize; 3],
        lines: [Vec<T>; 3],
        planes: [Vec<T>; 3],
    ) -> Result<Self> {
        Self::check_dims(&res, &ranks)?;
        for a in 0..3 {
            let (b, c) = plane_axes(a);
            if lines[a].len() != ranks[a] * res[a] {
                return Err(Error::Shape(format!(
                    "line stack {a} has {} values, expected {}",
                    lines[a].len(),
                    ranks[a] * res[a]
                )));
            }
            if planes[a].len() != ranks[a] * res[b] * res[c] {
                return Err(Error::Shape(format!(
                    "plane stack {a} has {} values, expected {}",
                    planes[a].len(),
                    ranks[a] * res[b] * res[c]
                )));
            }
        }
        Ok(Self {
            bbox,
            res,
            ranks,
            lines,
            planes,
        })
    }

    fn check_dims(res: &[usize; 3], ranks: &[usize; 3]) -> Result<()> {
        if res.iter().any(|&r| r < 2) {
            return Err(invalid("grid resolution must be at least 2 per axis"));
        }
        if ranks.iter().any(|&r| r < 1) {
            return Err(invalid("rank counts must be at least 1"));
        }
        Ok(())
    }

    pub fn total_rank(&self) -> usize {
        self.ranks.iter().sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bbox: self.bbox.clone(),
            res: self.res,
            ranks: self.ranks,
            lines: std::array::from_fn(|a| vec![T::zero(); self.lines[a].len()]),
            planes: std::array::from_fn(|a| vec![T::zero(); self.planes[a].len()]),
        }
    }

    /// Interpolation coordinates of an in-box point. Callers must have
    /// checked containment.
    #[inline]
    pub fn coord(&self, p: &[T; 3]) -> GridCoord<T> {
        let mut c = GridCoord {
            i0: [0; 3],
            frac: [T::zero(); 3],
        };
        for a in 0..3 {
            let n = self.res[a] - 1;
            let u = (p[a] - self.bbox.min[a]) / (self.bbox.max[a] - self.bbox.min[a])
                * T::c(n as f64);
            let u = u.max(T::zero()).min(T::c(n as f64));
            let i = u.floor().to_usize().unwrap_or(0).min(n - 1);
            c.i0[a] = i;
            c.frac[a] = u - T::c(i as f64);
        }
        c
    }

    #[inline]
    fn line_at(&self, a: usize, r: usize, c: &GridCoord<T>) -> T {
        let base = r * self.res[a] + c.i0[a];
        let f = c.frac[a];
        let v = &self.lines[a];
        v[base] * (T::one() - f) + v[base + 1] * f
    }

    #[inline]
    fn plane_at(&self, a: usize, r: usize, c: &GridCoord<T>) -> T {
        let (b, d) = plane_axes(a);
        let nd = self.res[d];
        let m = &self.planes[a];
        let row = r * self.res[b] + c.i0[b];
        let k = row * nd + c.i0[d];
        let (fb, fd) = (c.frac[b], c.frac[d]);
        let top = m[k] * (T::one() - fd) + m[k + 1] * fd;
        let bot = m[k + nd] * (T::one() - fd) + m[k + nd + 1] * fd;
        top * (T::one() - fb) + bot * fb
    }

    /// Writes one value per axis-rank component (`x` ranks, then `y`, then `z`).
    pub fn components_at(&self, c: &GridCoord<T>, out: &mut [T]) {
        let mut o = 0;
        for a in 0..3 {
            for r in 0..self.ranks[a] {
                out[o] = self.line_at(a, r, c) * self.plane_at(a, r, c);
                o += 1;
            }
        }
    }

    pub fn sum_at(&self, c: &GridCoord<T>) -> T {
        let mut s = T::zero();
        for a in 0..3 {
            for r in 0..self.ranks[a] {
                s += self.line_at(a, r, c) * self.plane_at(a, r, c);
            }
        }
        s
    }

    /// Accumulates `d out / d values` for per-component upstream gradients.
    pub fn backward_components(&self, c: &GridCoord<T>, dout: &[T], grad: &mut VmGrid<T>) {
        let mut o = 0;
        for a in 0..3 {
            let (b, d) = plane_axes(a);
            let nd = self.res[d];
            for r in 0..self.ranks[a] {
                let g = dout[o];
                o += 1;
                if g == T::zero() {
                    continue;
                }
                let lv = self.line_at(a, r, c);
                let pv = self.plane_at(a, r, c);

                let gl = g * pv;
                let base = r * self.res[a] + c.i0[a];
                let fa = c.frac[a];
                grad.lines[a][base] += gl * (T::one() - fa);
                grad.lines[a][base + 1] += gl * fa;

                let gp = g * lv;
                let k = (r * self.res[b] + c.i0[b]) * nd + c.i0[d];
                let (fb, fd) = (c.frac[b], c.frac[d]);
                let gm = &mut grad.planes[a];
                gm[k] += gp * (T::one() - fb) * (T::one() - fd);
                gm[k + 1] += gp * (T::one() - fb) * fd;
                gm[k + nd] += gp * fb * (T::one() - fd);
                gm[k + nd + 1] += gp * fb * fd;
            }
        }
    }

    pub fn backward_sum(&self, c: &GridCoord<T>, dout: T, grad: &mut VmGrid<T>) {
        let d = vec![dout; self.total_rank()];
        self.backward_components(c, &d, grad);
    }
}

/// Sum of all decomposed components at a world-space point.
pub fn vm_eval<T: Real>(grid: &VmGrid<T>, x: &[T; 3]) -> Result<T> {
    if !grid.bbox.contains(x) {
        return Err(Error::OutOfBox {
            point: [x[0].f64(), x[1].f64(), x[2].f64()],
        });
    }
    Ok(grid.sum_at(&grid.coord(x)))
}

/// Per-component values at a world-space point.
pub fn vm_components<T: Real>(grid: &VmGrid<T>, x: &[T; 3]) -> Result<Vec<T>> {
    if !grid.bbox.contains(x) {
        return Err(Error::OutOfBox {
            point: [x[0].f64(), x[1].f64(), x[2].f64()],
        });
    }
    let mut out = vec![T::zero(); grid.total_rank()];
    grid.components_at(&grid.coord(x), &mut out);
    Ok(out)
}

pub fn encoding_len(n_freq: usize) -> usize {
    3 + 6 * n_freq
}

/// `[d, sin(2^k π d), cos(2^k π d), ...]` for `k = 0..n_freq`.
pub fn encode_direction<T: Real>(d: &[T; 3], n_freq: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(encoding_len(n_freq));
    encode_direction_into(d, n_freq, &mut out);
    out
}

pub fn encode_direction_into<T: Real>(d: &[T; 3], n_freq: usize, out: &mut Vec<T>) {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    debug_assert!(
        (norm - T::one()).abs() < T::c(1e-4),
        "direction is not unit length: |d| = {norm}"
    );
    let d = if (norm - T::one()).abs() > T::c(1e-6) && norm > T::zero() {
        [d[0] / norm, d[1] / norm, d[2] / norm]
    } else {
        *d
    };
    out.clear();
    out.extend_from_slice(&d);
    let mut scale = T::PI();
    for _ in 0..n_freq {
        out.extend(d.iter().map(|&v| (v * scale).sin()));
        out.extend(d.iter().map(|&v| (v * scale).cos()));
        scale = scale + scale;
    }
}

/// Two dense layers: `[features, encoded direction] -> hidden (ReLU) -> rgb (logistic)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHead<T> {
    pub feature_dim: usize,
    pub dir_freqs: usize,
    pub hidden: usize,
    /// `hidden x in_dim`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `3 x hidden`, row-major.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> ColorHead<T> {
    pub fn in_dim(&self) -> usize {
        self.feature_dim + encoding_len(self.dir_freqs)
    }

    pub fn zeros(feature_dim: usize, dir_freqs: usize, hidden: usize) -> Self {
        let in_dim = feature_dim + encoding_len(dir_freqs);
        Self {
            feature_dim,
            dir_freqs,
            hidden,
            w1: vec![T::zero(); hidden * in_dim],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); 3 * hidden],
            b2: vec![T::zero(); 3],
        }
    }

    pub fn random<R: Rng>(feature_dim: usize, dir_freqs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut h = Self::zeros(feature_dim, dir_freqs, hidden);
        let in_dim = h.in_dim();
        let s1 = (6.0 / (in_dim + hidden) as f64).sqrt();
        let s2 = (6.0 / (hidden + 3) as f64).sqrt();
        h.w1.iter_mut()
            .for_each(|w| *w = T::c(rng.gen_range(-s1..=s1)));
        h.w2.iter_mut()
            .for_each(|w| *w = T::c(rng.gen_range(-s2..=s2)));
        h
    }

    /// Forward pass; `hidden_out` receives post-ReLU activations.
    pub fn forward(&self, input: &[T], hidden_out: &mut [T]) -> [T; 3] {
        let n = self.in_dim();
        debug_assert_eq!(input.len(), n);
        for (k, h) in hidden_out.iter_mut().enumerate().take(self.hidden) {
            let row = &self.w1[k * n..(k + 1) * n];
            let s = row.iter().zip(input).fold(self.b1[k], |acc, (&w, &x)| acc + w * x);
            *h = s.max(T::zero());
        }
        let mut rgb = [T::zero(); 3];
        for (ch, out) in rgb.iter_mut().enumerate() {
            let row = &self.w2[ch * self.hidden..(ch + 1) * self.hidden];
            let s = row
                .iter()
                .zip(&hidden_out[..self.hidden])
                .fold(self.b2[ch], |acc, (&w, &h)| acc + w * h);
            *out = sigmoid(s);
        }
        rgb
    }

    /// Backward pass from `d loss / d rgb`; accumulates weight gradients
    /// into `grad` and writes `d loss / d input[..feature_dim]` to `dfeat`.
    pub fn backward(
        &self,
        input: &[T],
        hidden: &[T],
        rgb: &[T; 3],
        drgb: &[T; 3],
        grad: &mut ColorHead<T>,
        dfeat: &mut [T],
        dhidden: &mut [T],
    ) {
        let n = self.in_dim();
        let h = self.hidden;
        dhidden[..h].iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..3 {
            let dz = drgb[ch] * rgb[ch] * (T::one() - rgb[ch]);
            if dz == T::zero() {
                continue;
            }
            grad.b2[ch] += dz;
            for k in 0..h {
                grad.w2[ch * h + k] += dz * hidden[k];
                dhidden[k] += dz * self.w2[ch * h + k];
            }
        }
        dfeat[..self.feature_dim]
            .iter_mut()
            .for_each(|v| *v = T::zero());
        for k in 0..h {
            if hidden[k] <= T::zero() {
                continue;
            }
            let dk = dhidden[k];
            grad.b1[k] += dk;
            let row = &mut grad.w1[k * n..(k + 1) * n];
            for (g, &x) in row.iter_mut().zip(input) {
                *g += dk * x;
            }
            let wrow = &self.w1[k * n..k * n + self.feature_dim];
            for (df, &w) in dfeat.iter_mut().zip(wrow) {
                *df += dk * w;
            }
        }
    }
}

/// Density and color at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample<T> {
    pub sigma: T,
    pub rgb: [T; 3],
}

/// Architecture knobs of the learnable field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldShape {
    pub res: [usize; 3],
    pub density_ranks: [usize; 3],
    pub app_ranks: [usize; 3],
    pub app_dim: usize,
    pub hidden: usize,
    pub dir_freqs: usize,
    pub density_shift: f64,
    pub init_scale: f64,
    pub half_extent: f64,
}

impl Default for FieldShape {
    fn default() -> Self {
        Self {
            res: [64; 3],
            density_ranks: [8; 3],
            app_ranks: [8; 3],
            app_dim: 27,
            hidden: 64,
            dir_freqs: 4,
            density_shift: -1.0,
            init_scale: 0.1,
            half_extent: 1.0,
        }
    }
}

/// Density grid, appearance grid with its linear feature basis, and the
/// color head.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel<T> {
    pub density: VmGrid<T>,
    pub appearance: VmGrid<T>,
    /// `app_dim x appearance.total_rank()`, row-major.
    pub basis: Vec<T>,
    pub head: ColorHead<T>,
    /// Constant added to the density pre-activation.
    pub density_shift: T,
}

impl<T: Real> FieldModel<T> {
    pub fn random<R: Rng>(shape: &FieldShape, rng: &mut R) -> Result<Self> {
        let bbox = Aabb::cube(shape.half_extent);
        let density = VmGrid::random(
            bbox.clone(),
            shape.res,
            shape.density_ranks,
            shape.init_scale,
            rng,
        )?;
        let appearance =
            VmGrid::random(bbox, shape.res, shape.app_ranks, shape.init_scale, rng)?;
        let r = appearance.total_rank();
        let s = (6.0 / (r + shape.app_dim) as f64).sqrt();
        let basis = (0..shape.app_dim * r)
            .map(|_| T::c(rng.gen_range(-s..=s)))
            .collect();
        let head = ColorHead::random(shape.app_dim, shape.dir_freqs, shape.hidden, rng);
        Ok(Self {
            density,
            appearance,
            basis,
            head,
            density_shift: T::c(shape.density_shift),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            density: self.density.zeros_like(),
            appearance: self.appearance.zeros_like(),
            basis: vec![T::zero(); self.basis.len()],
            head: ColorHead::zeros(self.head.feature_dim, self.head.dir_freqs, self.head.hidden),
            density_shift: self.density_shift,
        }
    }

    pub fn bbox(&self) -> &Aabb<T> {
        &self.density.bbox
    }

    /// All learnable tensors with stable names, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for (tag, g) in [("density", &self.density), ("appearance", &self.appearance)] {
            for a in 0..3 {
                let (b, c) = plane_axes(a);
                out.push((
                    format!("{tag}.line{a}"),
                    vec![g.ranks[a], g.res[a]],
                    &g.lines[a],
                ));
                out.push((
                    format!("{tag}.plane{a}"),
                    vec![g.ranks[a], g.res[b], g.res[c]],
                    &g.planes[a],
                ));
            }
        }
        out.push((
            "basis".into(),
            vec![self.head.feature_dim, self.appearance.total_rank()],
            &self.basis,
        ));
        let h = &self.head;
        out.push(("head.w1".into(), vec![h.hidden, h.in_dim()], &h.w1));
        out.push(("head.b1".into(), vec![h.hidden], &h.b1));
        out.push(("head.w2".into(), vec![3, h.hidden], &h.w2));
        out.push(("head.b2".into(), vec![3], &h.b2));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for g in [&mut self.density, &mut self.appearance] {
            let VmGrid { lines, planes, .. } = g;
            for (l, p) in lines.iter_mut().zip(planes.iter_mut()) {
                out.push(l);
                out.push(p);
            }
        }
        out.push(&mut self.basis);
        let h = &mut self.head;
        out.push(&mut h.w1);
        out.push(&mut h.b1);
        out.push(&mut h.w2);
        out.push(&mut h.b2);
        out
    }

    /// Scratch buffers for one point query.
    pub fn scratch(&self) -> PointScratch<T> {
        PointScratch {
            comps: vec![T::zero(); self.appearance.total_rank()],
            input: vec![T::zero(); self.head.in_dim()],
            hidden: vec![T::zero(); self.head.hidden],
            dfeat: vec![T::zero(); self.head.feature_dim],
            dhidden: vec![T::zero(); self.head.hidden],
            dcomps: vec![T::zero(); self.appearance.total_rank()],
        }
    }

    /// Query at an in-box point given the precomputed direction encoding.
    /// Fills `s.input` / `s.hidden` for a subsequent backward call.
    pub fn query_with(&self, x: &[T; 3], dir_enc: &[T], s: &mut PointScratch<T>) -> (T, [T; 3]) {
        let dc = self.density.coord(x);
        let pre = self.density.sum_at(&dc) + self.density_shift;
        let sigma = softplus(pre);

        let ac = self.appearance.coord(x);
        self.appearance.components_at(&ac, &mut s.comps);
        let r = s.comps.len();
        let f = self.head.feature_dim;
        for i in 0..f {
            let row = &self.basis[i * r..(i + 1) * r];
            s.input[i] = row.iter().zip(&s.comps).map(|(&w, &c)| w * c).sum();
        }
        s.input[f..].copy_from_slice(dir_enc);
        let rgb = self.head.forward(&s.input, &mut s.hidden);
        (sigma, rgb)
    }

    /// Backward for one point; `s` must hold the state left by `query_with`
    /// at the same point.
    pub fn backward_with(
        &self,
        x: &[T; 3],
        rgb: &[T; 3],
        dsigma: T,
        drgb: &[T; 3],
        s: &mut PointScratch<T>,
        grad: &mut FieldModel<T>,
    ) {
        let dc = self.density.coord(x);
        if dsigma != T::zero() {
            let pre = self.density.sum_at(&dc) + self.density_shift;
            // softplus' = logistic
            let dpre = dsigma * sigmoid(pre);
            self.density.backward_sum(&dc, dpre, &mut grad.density);
        }
        if drgb.iter().all(|&v| v == T::zero()) {
            return;
        }
        self.head.backward(
            &s.input,
            &s.hidden,
            rgb,
            drgb,
            &mut grad.head,
            &mut s.dfeat,
            &mut s.dhidden,
        );
        let r = s.comps.len();
        s.dcomps.iter_mut().for_each(|v| *v = T::zero());
        for (i, &df) in s.dfeat.iter().enumerate() {
            if df == T::zero() {
                continue;
            }
            let row = i * r;
            for j in 0..r {
                grad.basis[row + j] += df * s.comps[j];
                s.dcomps[j] += df * self.basis[row + j];
            }
        }
        let ac = self.appearance.coord(x);
        self.appearance
            .backward_components(&ac, &s.dcomps, &mut grad.appearance);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &FieldModel<T>) {
        let src: Vec<&[T]> = other.tensors().into_iter().map(|t| t.2).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(d, &v)| *d += v);
        }
    }
}

pub struct PointScratch<T> {
    pub comps: Vec<T>,
    pub input: Vec<T>,
    pub hidden: Vec<T>,
    dfeat: Vec<T>,
    dhidden: Vec<T>,
    dcomps: Vec<T>,
}

/// Full point query: `sigma = softplus(density + shift)`,
/// `rgb = head(basis · appearance components, encode(d))`.
pub fn query_point<T: Real>(model: &FieldModel<T>, x: &[T; 3], d: &[T; 3]) -> Result<FieldSample<T>> {
    if !model.bbox().contains(x) {
        return Err(Error::OutOfBox {
            point: [x[0].f64(), x[1].f64(), x[2].f64()],
        });
    }
    let enc = encode_direction(d, model.head.dir_freqs);
    let mut s = model.scratch();
    let (sigma, rgb) = model.query_with(x, &enc, &mut s);
    Ok(FieldSample { sigma, rgb })
}
