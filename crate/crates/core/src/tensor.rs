//! Dense tensor containers shared by the simulation, reconstruction and
//! diffusion modules.
//!
//! Layout is always row-major with the innermost axis last; volumes use the
//! (depth, height, width) axis order and diffraction stacks use
//! (scan_y, scan_x, detector_y, detector_x).

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types the numerical kernels are generic over.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + Default
    + std::fmt::Display
    + std::iter::Sum
{
    const DTYPE: DType;

    fn of(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("f64 conversion")
    }
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
}
impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

/// Real 3D tensor in (depth, height, width) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vol<T> {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Vol<T> {
    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Vol { d, h, w, data: vec![T::zero(); d * h * w] }
    }

    pub fn from_vec(d: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != d * h * w {
            return Err(CoreError::ShapeMismatch(format!(
                "volume {}x{}x{} needs {} elements, got {}",
                d,
                h,
                w,
                d * h * w,
                data.len()
            )));
        }
        Ok(Vol { d, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> T {
        self.data[(d * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn at_mut(&mut self, d: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[(d * self.h + h) * self.w + w]
    }

    /// Borrow one depth slice as a contiguous (h*w) block.
    pub fn slice(&self, d: usize) -> &[T] {
        let n = self.h * self.w;
        &self.data[d * n..(d + 1) * n]
    }

    pub fn slice_mut(&mut self, d: usize) -> &mut [T] {
        let n = self.h * self.w;
        &mut self.data[d * n..(d + 1) * n]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Vol<U> {
        Vol { d: self.d, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Complex 2D field (height, width), used for probe and per-slice wavefields.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> Field<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Field { h, w, data: vec![Complex::new(T::zero(), T::zero()); h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != h * w {
            return Err(CoreError::ShapeMismatch(format!(
                "field {}x{} needs {} elements, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(Field { h, w, data })
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> Complex<T> {
        self.data[h * self.w + w]
    }

    #[inline]
    pub fn at_mut(&mut self, h: usize, w: usize) -> &mut Complex<T> {
        &mut self.data[h * self.w + w]
    }

    /// Total intensity sum |f|^2, accumulated in f64.
    pub fn intensity_sum(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr().f64()).sum()
    }
}

/// Real 4D detector stack over a 2D scan grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack4<T> {
    pub ny: usize,
    pub nx: usize,
    pub ky: usize,
    pub kx: usize,
    pub data: Vec<T>,
}

impl<T: Real> Stack4<T> {
    pub fn zeros(ny: usize, nx: usize, ky: usize, kx: usize) -> Self {
        Stack4 { ny, nx, ky, kx, data: vec![T::zero(); ny * nx * ky * kx] }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.ny, self.nx, self.ky, self.kx)
    }

    pub fn n_patterns(&self) -> usize {
        self.ny * self.nx
    }

    pub fn pattern_len(&self) -> usize {
        self.ky * self.kx
    }

    /// Detector pattern for the flattened scan index (row-major over the scan grid).
    pub fn pattern(&self, idx: usize) -> &[T] {
        let n = self.pattern_len();
        &self.data[idx * n..(idx + 1) * n]
    }

    pub fn pattern_mut(&mut self, idx: usize) -> &mut [T] {
        let n = self.pattern_len();
        &mut self.data[idx * n..(idx + 1) * n]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Stack4<U> {
        Stack4 {
            ny: self.ny,
            nx: self.nx,
            ky: self.ky,
            kx: self.kx,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Voxel pitch in angstroms, (depth, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pitch {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl Pitch {
    pub fn new(dz: f64, dy: f64, dx: f64) -> Result<Self> {
        if dz <= 0.0 || dy <= 0.0 || dx <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "pitch components must be positive, got ({dz}, {dy}, {dx})"
            )));
        }
        Ok(Pitch { dz, dy, dx })
    }

    /// Reference sampling used by the dataset pipeline.
    pub fn reference() -> Self {
        Pitch { dz: 1.6, dy: 0.2, dx: 0.2 }
    }
}

/// Scaled scattering potential in radians of phase change per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialVolume<T> {
    pub vol: Vol<T>,
    pub pitch: Pitch,
    /// 1.0 for physical units; the training rescale factor otherwise.
    pub rescale_factor: f64,
}

impl<T: Real> PotentialVolume<T> {
    pub fn new(vol: Vol<T>, pitch: Pitch) -> Self {
        PotentialVolume { vol, pitch, rescale_factor: 1.0 }
    }

    pub fn zeros(d: usize, h: usize, w: usize, pitch: Pitch) -> Self {
        Self::new(Vol::zeros(d, h, w), pitch)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.vol.dims()
    }
}

/// Measured or simulated detector intensities over the scan grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionStack<T> {
    pub stack: Stack4<T>,
    /// Scan step in angstroms.
    pub scan_step: f64,
    /// Detector pixel pitch in reciprocal angstroms.
    pub detector_pitch: f64,
}

impl<T: Real> DiffractionStack<T> {
    pub fn new(stack: Stack4<T>, scan_step: f64, detector_pitch: f64) -> Result<Self> {
        if stack.data.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(CoreError::InvalidArgument(
                "diffraction stack entries must be finite and nonnegative".into(),
            ));
        }
        Ok(DiffractionStack { stack, scan_step, detector_pitch })
    }
}

/// Min-max normalization to [0, 1]; constant volumes map to all zeros.
pub fn instance_normalize<T: Real>(v: &PotentialVolume<T>) -> PotentialVolume<T> {
    let lo = v.vol.min();
    let hi = v.vol.max();
    let range = hi - lo;
    let vol = if range > T::zero() {
        v.vol.map(|x| (x - lo) / range)
    } else {
        Vol::zeros(v.vol.d, v.vol.h, v.vol.w)
    };
    PotentialVolume { vol, pitch: v.pitch, rescale_factor: v.rescale_factor }
}

/// Sum over the depth axis, yielding an (h, w) image.
pub fn depth_sum<T: Real>(v: &Vol<T>) -> Vec<T> {
    let n = v.h * v.w;
    let mut out = vec![T::zero(); n];
    for d in 0..v.d {
        let sl = v.slice(d);
        for (o, &s) in out.iter_mut().zip(sl) {
            *o += s;
        }
    }
    out
}
