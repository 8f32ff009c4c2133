//! Dense axis-aligned voxel grids with trilinear interpolation.
//!
//! Values sit on grid nodes; node (i, j, k) lies at
//! `origin + (i, j, k) * spacing` with `spacing = extent / (dims - 1)`.
//! Sampling outside the domain clamps to the edge, and the spatial gradient
//! of the clamped interpolant is zero along any clamped axis.
//!
//! Storage is `f32` (matching the on-disk format); all interpolation and
//! gradient arithmetic is `f64`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::Vec3;
use thiserror::Error;

pub const GRID_MAGIC: &[u8; 8] = b"EIKGRID1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad grid file {path}: {detail}")]
    Malformed { path: String, detail: String },
}

/// Receiver for sparse gradient contributions to stored grid values.
pub trait GradSink {
    fn add(&mut self, index: u32, value: f64);
}

/// Sparse gradient contributions as (linear value index, d loss / d value)
/// pairs; indices repeat and are merged by the consumer.
pub type GradEntries = Vec<(u32, f64)>;

impl GradSink for GradEntries {
    #[inline]
    fn add(&mut self, index: u32, value: f64) {
        self.push((index, value));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub origin: Vec3,
    pub extent: Vec3,
    pub dims: [usize; 3],
    pub channels: usize,
    pub values: Vec<f32>,
}

/// Resolved interpolation cell for a sample position: base corner, fractional
/// coordinates, and which axes were clamped to the domain edge.
#[derive(Debug, Clone, Copy)]
pub struct CellSample {
    pub base: [usize; 3],
    pub frac: [f64; 3],
    pub clamped: [bool; 3],
}

impl GridField {
    pub fn new(origin: Vec3, extent: Vec3, dims: [usize; 3], channels: usize) -> Self {
        assert!(dims.iter().all(|&d| d >= 2), "dims must be >= 2 per axis");
        assert!(
            extent.iter().all(|&e| e > 0.0),
            "extent must be strictly positive"
        );
        assert!(channels == 1 || channels == 3);
        let n = dims[0] * dims[1] * dims[2] * channels;
        GridField {
            origin,
            extent,
            dims,
            channels,
            values: vec![0.0; n],
        }
    }

    pub fn constant(origin: Vec3, extent: Vec3, dims: [usize; 3], channels: usize, v: f32) -> Self {
        let mut g = Self::new(origin, extent, dims, channels);
        g.values.fill(v);
        g
    }

    #[inline]
    pub fn spacing(&self) -> Vec3 {
        Vec3::new(
            self.extent.x / (self.dims[0] - 1) as f64,
            self.extent.y / (self.dims[1] - 1) as f64,
            self.extent.z / (self.dims[2] - 1) as f64,
        )
    }

    #[inline]
    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.spacing();
        self.origin + Vec3::new(i as f64 * s.x, j as f64 * s.y, k as f64 * s.z)
    }

    #[inline]
    pub fn value_index(&self, i: usize, j: usize, k: usize, c: usize) -> usize {
        c + self.channels * (i + self.dims[0] * (j + self.dims[1] * k))
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Fills node values from a function of world position (single channel).
    pub fn fill_scalar(&mut self, f: impl Fn(Vec3) -> f64) {
        assert_eq!(self.channels, 1);
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let idx = self.value_index(i, j, k, 0);
                    self.values[idx] = f(self.node_pos(i, j, k)) as f32;
                }
            }
        }
    }

    /// Fills node values from a function of world position (three channels).
    pub fn fill_rgb(&mut self, f: impl Fn(Vec3) -> Vec3) {
        assert_eq!(self.channels, 3);
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let v = f(self.node_pos(i, j, k));
                    for c in 0..3 {
                        let idx = self.value_index(i, j, k, c);
                        self.values[idx] = v[c] as f32;
                    }
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Maps a world position to its interpolation cell (clamp-to-edge).
    #[inline]
    pub fn locate(&self, p: Vec3) -> CellSample {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut clamped = [false; 3];
        let s = self.spacing();
        for a in 0..3 {
            let n = self.dims[a];
            let mut u = (p[a] - self.origin[a]) / s[a];
            if u <= 0.0 {
                clamped[a] = u < 0.0;
                u = 0.0;
            } else if u >= (n - 1) as f64 {
                clamped[a] = u > (n - 1) as f64;
                u = (n - 1) as f64;
            }
            let i = (u.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        CellSample {
            base,
            frac,
            clamped,
        }
    }

    /// Linear value indices of the cell's 8 corners for one channel, in
    /// (x, y, z) bit order: corner k has offsets (k&1, k>>1&1, k>>2&1).
    #[inline]
    pub fn corner_indices(&self, cell: &CellSample, channel: usize) -> [usize; 8] {
        let [i, j, k] = cell.base;
        let mut out = [0usize; 8];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.value_index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1), channel);
        }
        out
    }

    /// Trilinear corner weights in the same corner order as [`corner_indices`].
    #[inline]
    pub fn corner_weights(cell: &CellSample) -> [f64; 8] {
        let [fx, fy, fz] = cell.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let mut w = [0.0; 8];
        for (c, slot) in w.iter_mut().enumerate() {
            *slot = wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1];
        }
        w
    }

    /// Per-corner gradients of the interpolant w.r.t. world position. Zero on
    /// clamped axes, where the clamped interpolant is constant.
    #[inline]
    pub fn corner_weight_gradients(&self, cell: &CellSample) -> [Vec3; 8] {
        let [fx, fy, fz] = cell.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let d = [-1.0, 1.0];
        let s = self.spacing();
        let gx = if cell.clamped[0] { 0.0 } else { 1.0 / s.x };
        let gy = if cell.clamped[1] { 0.0 } else { 1.0 / s.y };
        let gz = if cell.clamped[2] { 0.0 } else { 1.0 / s.z };
        let mut out = [Vec3::zeros(); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            *slot = Vec3::new(
                d[bx] * wy[by] * wz[bz] * gx,
                wx[bx] * d[by] * wz[bz] * gy,
                wx[bx] * wy[by] * d[bz] * gz,
            );
        }
        out
    }

    #[inline]
    pub fn sample_scalar(&self, p: Vec3) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let cell = self.locate(p);
        let idx = self.corner_indices(&cell, 0);
        let w = Self::corner_weights(&cell);
        let mut acc = 0.0;
        for c in 0..8 {
            acc += w[c] * self.values[idx[c]] as f64;
        }
        acc
    }

    #[inline]
    pub fn sample_rgb(&self, p: Vec3) -> Vec3 {
        debug_assert_eq!(self.channels, 3);
        let cell = self.locate(p);
        let w = Self::corner_weights(&cell);
        let mut acc = Vec3::zeros();
        for ch in 0..3 {
            let idx = self.corner_indices(&cell, ch);
            let mut v = 0.0;
            for c in 0..8 {
                v += w[c] * self.values[idx[c]] as f64;
            }
            acc[ch] = v;
        }
        acc
    }

    /// Corner-difference gradient of one cell: exact zeros for constant
    /// fields (the weight-gradient form leaves rounding residue).
    #[inline]
    fn cell_gradient(&self, cell: &CellSample, v: &[f64; 8]) -> Vec3 {
        let [fx, fy, fz] = cell.frac;
        let s = self.spacing();
        let gx = if cell.clamped[0] { 0.0 } else { 1.0 / s.x };
        let gy = if cell.clamped[1] { 0.0 } else { 1.0 / s.y };
        let gz = if cell.clamped[2] { 0.0 } else { 1.0 / s.z };
        Vec3::new(
            gx * ((1.0 - fy) * (1.0 - fz) * (v[1] - v[0])
                + fy * (1.0 - fz) * (v[3] - v[2])
                + (1.0 - fy) * fz * (v[5] - v[4])
                + fy * fz * (v[7] - v[6])),
            gy * ((1.0 - fx) * (1.0 - fz) * (v[2] - v[0])
                + fx * (1.0 - fz) * (v[3] - v[1])
                + (1.0 - fx) * fz * (v[6] - v[4])
                + fx * fz * (v[7] - v[5])),
            gz * ((1.0 - fx) * (1.0 - fy) * (v[4] - v[0])
                + fx * (1.0 - fy) * (v[5] - v[1])
                + (1.0 - fx) * fy * (v[6] - v[2])
                + fx * fy * (v[7] - v[3])),
        )
    }

    #[inline]
    fn cell_values(&self, cell: &CellSample, channel: usize) -> [f64; 8] {
        let idx = self.corner_indices(cell, channel);
        let mut v = [0.0; 8];
        for c in 0..8 {
            v[c] = self.values[idx[c]] as f64;
        }
        v
    }

    /// Analytic spatial gradient of the trilinear interpolant; piecewise
    /// constant along each axis within a cell.
    #[inline]
    pub fn gradient_scalar(&self, p: Vec3) -> Vec3 {
        debug_assert_eq!(self.channels, 1);
        let cell = self.locate(p);
        let v = self.cell_values(&cell, 0);
        self.cell_gradient(&cell, &v)
    }

    /// Scalar sample and gradient in one cell resolution.
    #[inline]
    pub fn sample_and_gradient_scalar(&self, p: Vec3) -> (f64, Vec3) {
        debug_assert_eq!(self.channels, 1);
        let cell = self.locate(p);
        let v = self.cell_values(&cell, 0);
        let w = Self::corner_weights(&cell);
        let mut value = 0.0;
        for c in 0..8 {
            value += w[c] * v[c];
        }
        (value, self.cell_gradient(&cell, &v))
    }

    /// Per-channel spatial gradients of a 3-channel grid.
    #[inline]
    pub fn gradient_rgb(&self, p: Vec3) -> [Vec3; 3] {
        debug_assert_eq!(self.channels, 3);
        let cell = self.locate(p);
        let mut out = [Vec3::zeros(); 3];
        for (ch, slot) in out.iter_mut().enumerate() {
            let v = self.cell_values(&cell, ch);
            *slot = self.cell_gradient(&cell, &v);
        }
        out
    }

    /// Reverse-mode derivative of [`sample_scalar`] w.r.t. stored values:
    /// pushes `upstream * w_c` onto the enclosing cell's 8 corners.
    #[inline]
    pub fn vjp_sample_scalar(&self, p: Vec3, upstream: f64, sink: &mut impl GradSink) {
        debug_assert_eq!(self.channels, 1);
        if upstream == 0.0 {
            return;
        }
        let cell = self.locate(p);
        let idx = self.corner_indices(&cell, 0);
        let w = Self::corner_weights(&cell);
        for c in 0..8 {
            sink.add(idx[c] as u32, upstream * w[c]);
        }
    }

    #[inline]
    pub fn vjp_sample_rgb(&self, p: Vec3, upstream: Vec3, sink: &mut impl GradSink) {
        debug_assert_eq!(self.channels, 3);
        let cell = self.locate(p);
        let w = Self::corner_weights(&cell);
        for ch in 0..3 {
            if upstream[ch] == 0.0 {
                continue;
            }
            let idx = self.corner_indices(&cell, ch);
            for c in 0..8 {
                sink.add(idx[c] as u32, upstream[ch] * w[c]);
            }
        }
    }

    /// Reverse-mode derivative of [`gradient_scalar`] w.r.t. stored values:
    /// pushes `upstream . grad(w_c)` onto the 8 corners.
    #[inline]
    pub fn vjp_gradient_scalar(&self, p: Vec3, upstream: Vec3, sink: &mut impl GradSink) {
        debug_assert_eq!(self.channels, 1);
        let cell = self.locate(p);
        let idx = self.corner_indices(&cell, 0);
        let wg = self.corner_weight_gradients(&cell);
        for c in 0..8 {
            sink.add(idx[c] as u32, upstream.dot(&wg[c]));
        }
    }

    /// Writes the grid in the `EIKGRID1` binary layout: 8-byte magic, then
    /// little-endian u32 channels, u32 nx/ny/nz, f64x3 origin, f64x3 extent,
    /// then f32 values x-fastest and channel-interleaved.
    pub fn write_file(&self, path: &Path) -> Result<(), GridError> {
        let mut bytes = Vec::with_capacity(8 + 4 * 4 + 48 + self.values.len() * 4);
        bytes.extend_from_slice(GRID_MAGIC);
        bytes.write_all(&(self.channels as u32).to_le_bytes()).unwrap();
        for d in self.dims {
            bytes.write_all(&(d as u32).to_le_bytes()).unwrap();
        }
        for a in 0..3 {
            bytes.write_all(&self.origin[a].to_le_bytes()).unwrap();
        }
        for a in 0..3 {
            bytes.write_all(&self.extent[a].to_le_bytes()).unwrap();
        }
        for v in &self.values {
            bytes.write_all(&v.to_le_bytes()).unwrap();
        }
        fs::write(path, bytes).map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self, GridError> {
        let bytes = fs::read(path).map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let pstr = path.display().to_string();
        let bad = |detail: String| GridError::Malformed {
            path: pstr.clone(),
            detail,
        };
        if bytes.len() < 8 + 16 + 48 {
            return Err(bad("file shorter than header".into()));
        }
        if &bytes[0..8] != GRID_MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[0..8])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let channels = u32_at(8) as usize;
        let dims = [u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
        if channels != 1 && channels != 3 {
            return Err(bad(format!("channels {channels} not in {{1,3}}")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(bad(format!("dims {dims:?} below 2")));
        }
        let origin = Vec3::new(f64_at(24), f64_at(32), f64_at(40));
        let extent = Vec3::new(f64_at(48), f64_at(56), f64_at(64));
        if !(extent.x > 0.0 && extent.y > 0.0 && extent.z > 0.0) {
            return Err(bad(format!("non-positive extent {extent:?}")));
        }
        let count = dims[0] * dims[1] * dims[2] * channels;
        let payload = &bytes[72..];
        if payload.len() != count * 4 {
            return Err(bad(format!(
                "payload {} bytes, expected {}",
                payload.len(),
                count * 4
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(GridField {
            origin,
            extent,
            dims,
            channels,
            values,
        })
    }
}
