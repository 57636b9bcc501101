//! Resampling, padding, cropping, normalization and Gaussian softening.
//!
//! Bilinear resampling follows the half-pixel (`align_corners=False`)
//! convention: output pixel `i` samples source coordinate
//! `(i + 0.5) * in/out - 0.5`, clamped at the edges. With `antialias` set, a
//! downscale uses a triangle filter widened by the scale factor and
//! renormalized over the in-range taps; upscales are unaffected by the flag.
//! Nearest resampling uses the legacy `floor(i * in/out)` index.

use std::rc::Rc;

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Default ε of [`minmax_normalize`].
pub const NORM_EPS: f64 = 1e-8;

/// Per-output-index taps of a 1-D linear resampling.
#[derive(Clone, Debug)]
pub struct Resampler<T> {
    in_len: usize,
    starts: Vec<usize>,
    weights: Vec<Vec<T>>,
}

impl<T: Real> Resampler<T> {
    /// Half-pixel bilinear taps for `in_len -> out_len`.
    pub fn bilinear(in_len: usize, out_len: usize, antialias: bool) -> Result<Self> {
        if in_len == 0 || out_len == 0 {
            return Err(Error::Config(format!(
                "resize extents must be positive, got {in_len} -> {out_len}"
            )));
        }
        let scale = in_len as f64 / out_len as f64;
        let mut starts = Vec::with_capacity(out_len);
        let mut weights = Vec::with_capacity(out_len);
        if antialias && scale > 1.0 {
            let support = scale;
            let inv = 1.0 / scale;
            for i in 0..out_len {
                let center = scale * (i as f64 + 0.5);
                let lo = ((center - support + 0.5) as i64).max(0) as usize;
                let hi = ((center + support + 0.5) as i64).min(in_len as i64) as usize;
                let mut w: Vec<f64> = (lo..hi)
                    .map(|j| {
                        let x = ((j as f64 - center + 0.5) * inv).abs();
                        if x < 1.0 {
                            1.0 - x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                if total != 0.0 {
                    w.iter_mut().for_each(|x| *x /= total);
                }
                starts.push(lo);
                weights.push(w.into_iter().map(T::lit).collect());
            }
        } else {
            for i in 0..out_len {
                let src = (scale * (i as f64 + 0.5) - 0.5).max(0.0);
                let i0 = (src as usize).min(in_len - 1);
                let lambda = src - i0 as f64;
                if i0 + 1 < in_len {
                    starts.push(i0);
                    weights.push(vec![T::lit(1.0 - lambda), T::lit(lambda)]);
                } else {
                    starts.push(in_len - 1);
                    weights.push(vec![T::one()]);
                }
            }
        }
        Ok(Self {
            in_len,
            starts,
            weights,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.starts.len()
    }

    /// `(source index, weight)` pairs feeding output index `o`.
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let start = self.starts[o];
        self.weights[o]
            .iter()
            .enumerate()
            .map(move |(k, &w)| (start + k, w))
    }
}

/// Multi-channel grid in `[C,H,W]` row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> GridMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "grid extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(contract(
                "grid",
                format!("{channels}x{height}x{width} grid needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Single-channel grid.
    pub fn plane(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w] => Self::new(1, h, w, t.data().to_vec()),
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(contract("grid", format!("cannot view shape {:?} as a grid", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([self.channels, self.height, self.width], self.data.clone())
            .expect("grid invariant")
    }
}

/// Extents after scaling the long side of `h × w` to `long`: `floor(x·α + 0.5)`
/// with `α = long / max(h, w)`.
pub fn long_side_extents(h: usize, w: usize, long: usize) -> (usize, usize) {
    let alpha = long as f64 / h.max(w) as f64;
    let round = |x: usize| ((x as f64 * alpha + 0.5).floor() as usize).max(1);
    (round(h), round(w))
}

pub fn bilinear_resize<T: Real>(m: &GridMap<T>, out_h: usize, out_w: usize, antialias: bool) -> Result<GridMap<T>> {
    let rows = Resampler::bilinear(m.height, out_h, antialias)?;
    let cols = Resampler::bilinear(m.width, out_w, antialias)?;
    let data = crate::tensor::resample(&m.data, m.channels, m.height, m.width, &rows, &cols);
    GridMap::new(m.channels, out_h, out_w, data)
}

/// Legacy nearest-neighbour index `min(floor(i · in/out), in - 1)`, evaluated
/// in single precision like the reference framework.
pub fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    if in_len == out_len {
        return i;
    }
    if out_len == 2 * in_len {
        return i >> 1;
    }
    let scale = in_len as f32 / out_len as f32;
    ((i as f32 * scale).floor() as usize).min(in_len - 1)
}

pub fn nearest_resize<T: Real>(m: &GridMap<T>, out_h: usize, out_w: usize) -> Result<GridMap<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize extents must be positive, got {out_h}x{out_w}")));
    }
    let mut data = Vec::with_capacity(m.channels * out_h * out_w);
    for c in 0..m.channels {
        for y in 0..out_h {
            let sy = nearest_index(y, m.height, out_h);
            for x in 0..out_w {
                data.push(m.at(c, sy, nearest_index(x, m.width, out_w)));
            }
        }
    }
    GridMap::new(m.channels, out_h, out_w, data)
}

pub fn crop_top_left<T: Real>(m: &GridMap<T>, h: usize, w: usize) -> Result<GridMap<T>> {
    if h > m.height || w > m.width || h == 0 || w == 0 {
        return Err(contract(
            "crop",
            format!("cannot crop {h}x{w} from {}x{}", m.height, m.width),
        ));
    }
    let mut data = Vec::with_capacity(m.channels * h * w);
    for c in 0..m.channels {
        for y in 0..h {
            let start = (c * m.height + y) * m.width;
            data.extend_from_slice(&m.data[start..start + w]);
        }
    }
    GridMap::new(m.channels, h, w, data)
}

pub fn pad_bottom_right_zero<T: Real>(m: &GridMap<T>, h: usize, w: usize) -> Result<GridMap<T>> {
    if h < m.height || w < m.width {
        return Err(contract(
            "pad",
            format!("cannot pad {}x{} down to {h}x{w}", m.height, m.width),
        ));
    }
    let mut out = GridMap::filled(m.channels, h, w, T::zero());
    for c in 0..m.channels {
        for y in 0..m.height {
            let src = &m.data[(c * m.height + y) * m.width..(c * m.height + y + 1) * m.width];
            out.data[(c * h + y) * w..(c * h + y) * w + m.width].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Scales the long side to `long` (bilinear, antialiased on downscale), then
/// zero-pads bottom/right to `long × long`. Returns the grid and the scaled
/// extents `(h', w')` needed to undo the padding.
pub fn resize_long_side_pad<T: Real>(m: &GridMap<T>, long: usize) -> Result<(GridMap<T>, usize, usize)> {
    if long == 0 {
        return Err(Error::Config("long side target must be positive".into()));
    }
    let (h2, w2) = long_side_extents(m.height, m.width, long);
    let resized = bilinear_resize(m, h2, w2, true)?;
    Ok((pad_bottom_right_zero(&resized, long, long)?, h2, w2))
}

/// Tape version of [`resize_long_side_pad`].
pub fn resize_long_side_pad_var<'t, T: Real>(x: Var<'t, T>, long: usize) -> Result<(Var<'t, T>, usize, usize)> {
    if long == 0 {
        return Err(Error::Config("long side target must be positive".into()));
    }
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (h2, w2) = long_side_extents(h, w, long);
    let rows = Rc::new(Resampler::bilinear(h, h2, true)?);
    let cols = Rc::new(Resampler::bilinear(w, w2, true)?);
    let padded = x.resample(rows, cols)?.pad_bottom_right(long, long)?;
    Ok((padded, h2, w2))
}

/// `(s - min) / (max - min + eps)`; constant input maps to zeros.
pub fn minmax_normalize<T: Real>(v: &[T], eps: T) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = crate::tensor::arg_extrema(v);
    let (min, max) = (v[lo], v[hi]);
    let den = max - min + eps;
    v.iter().map(|&s| (s - min) / den).collect()
}

/// Isotropic Gaussian smoothing parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSpec {
    /// Standard deviation in pixels.
    pub sigma: f64,
    /// Nominal odd kernel extent.
    pub ksize: usize,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            sigma: 7.0,
            ksize: 31,
        }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ksize == 0 || self.ksize % 2 == 0 {
            return Err(Error::Config(format!("gaussian ksize must be odd and positive, got {}", self.ksize)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("gaussian sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Kernel extent and sigma for an `h × w` grid: the extent shrinks to the
    /// largest odd value that fits, and sigma shrinks with it.
    pub fn adapted(&self, h: usize, w: usize) -> (usize, f64) {
        let fit = h.min(w).max(1);
        let largest_odd = if fit % 2 == 1 { fit } else { fit - 1 };
        let k = self.ksize.min(largest_odd);
        (k, self.sigma * k as f64 / self.ksize as f64)
    }

    /// Normalized 1-D kernel of extent `ksize`.
    pub fn kernel_1d(ksize: usize, sigma: f64) -> Vec<f64> {
        let r = (ksize / 2) as f64;
        let mut g: Vec<f64> = (0..ksize)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= total);
        g
    }
}

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian smoothing with reflect boundaries and adaptive sizing.
pub fn gaussian_smooth<T: Real>(m: &GridMap<T>, spec: &GaussianSpec) -> Result<GridMap<T>> {
    spec.validate()?;
    let (k, sigma) = spec.adapted(m.height, m.width);
    let kernel: Vec<T> = GaussianSpec::kernel_1d(k, sigma).into_iter().map(T::lit).collect();
    let r = (k / 2) as isize;
    let (h, w) = (m.height, m.width);
    let mut tmp = vec![T::zero(); m.data.len()];
    let mut out = vec![T::zero(); m.data.len()];
    for c in 0..m.channels {
        let base = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - r, w);
                    acc += kv * m.data[base + y * w + sx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[base + sy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    GridMap::new(m.channels, h, w, out)
}

/// Flag bits of an [`InterpRecord`].
pub const INTERP_ANTIALIAS: u32 = 1;
pub const INTERP_NEAREST: u32 = 2;

/// One case of the `interp_oracle.bin` corpus: a single-channel input and the
/// output a reference resampler produced for it.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpRecord {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub flags: u32,
    pub input: Vec<f32>,
    pub expected: Vec<f32>,
}

impl InterpRecord {
    /// Runs the record's resampling with this crate's kernels.
    pub fn evaluate(&self) -> Result<GridMap<f32>> {
        let m = GridMap::plane(self.in_h, self.in_w, self.input.clone())?;
        if self.flags & INTERP_NEAREST != 0 {
            nearest_resize(&m, self.out_h, self.out_w)
        } else {
            bilinear_resize(&m, self.out_h, self.out_w, self.flags & INTERP_ANTIALIAS != 0)
        }
    }
}

/// Parses little-endian `(u32 in_h, in_w, out_h, out_w, flags, f32 input…, f32 expected…)`
/// records until the end of `bytes`.
pub fn parse_interp_oracle(bytes: &[u8]) -> Result<Vec<InterpRecord>> {
    fn take<'a>(rest: &mut &'a [u8], n: usize, total: usize) -> Result<&'a [u8]> {
        if rest.len() < n {
            let at = total - rest.len();
            return Err(contract("interp_oracle", format!("truncated record at byte {at}")));
        }
        let (head, tail) = rest.split_at(n);
        *rest = tail;
        Ok(head)
    }
    fn floats(chunk: &[u8]) -> Vec<f32> {
        chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect()
    }
    let total = bytes.len();
    let mut rest = bytes;
    let mut records = Vec::new();
    while !rest.is_empty() {
        let mut head = [0usize; 5];
        for h in head.iter_mut() {
            *h = u32::from_le_bytes(take(&mut rest, 4, total)?.try_into().expect("4 bytes")) as usize;
        }
        let [in_h, in_w, out_h, out_w, flags] = head;
        let input = floats(take(&mut rest, in_h * in_w * 4, total)?);
        let expected = floats(take(&mut rest, out_h * out_w * 4, total)?);
        records.push(InterpRecord {
            in_h,
            in_w,
            out_h,
            out_w,
            flags: flags as u32,
            input,
            expected,
        });
    }
    Ok(records)
}
