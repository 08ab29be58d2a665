//! Minimal neural-network layer library with hand-written reverse-mode
//! gradients. Layers operate on single examples; batching happens one
//! level up so every op stays deterministic.

pub mod layers;

use crate::error::{CoreError, Result};
use crate::tensor::Real;

/// Feature map (channels, depth, height, width) for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<T> {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Feat { c, d, h, w, data: vec![T::zero(); c * d * h * w] }
    }

    pub fn from_vec(c: usize, d: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * d * h * w {
            return Err(CoreError::ShapeMismatch(format!(
                "feat {c}x{d}x{h}x{w} needs {} elements, got {}",
                c * d * h * w,
                data.len()
            )));
        }
        Ok(Feat { c, d, h, w, data })
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Concatenate along the channel axis.
    pub fn concat(&self, other: &Feat<T>) -> Feat<T> {
        assert_eq!((self.d, self.h, self.w), (other.d, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Feat { c: self.c + other.c, d: self.d, h: self.h, w: self.w, data }
    }

    /// Split the leading `c0` channels off; inverse of `concat`.
    pub fn split(&self, c0: usize) -> (Feat<T>, Feat<T>) {
        let n = self.voxels();
        let a = Feat {
            c: c0,
            d: self.d,
            h: self.h,
            w: self.w,
            data: self.data[..c0 * n].to_vec(),
        };
        let b = Feat {
            c: self.c - c0,
            d: self.d,
            h: self.h,
            w: self.w,
            data: self.data[c0 * n..].to_vec(),
        };
        (a, b)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Opaque handle into a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat registry of every parameter tensor in a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "parameter shape/data mismatch");
        self.tensors.push(ParamTensor { name: name.into(), shape, data });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Gradient buffers mirroring a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads { data: store.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect() }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    /// Elementwise accumulate another gradient set.
    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|a| a.iter())
            .map(|v| {
                let f = v.f64();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Variance-scaled uniform init (fan-in), the default for conv and linear
/// weights that are not zero-initialized.
pub fn kaiming_uniform<T: Real>(rng: &mut impl rand::Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
}
