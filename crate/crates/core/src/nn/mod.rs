//! A small CPU neural-network engine: named parameter tensors, the handful of
//! layers an image-to-image encoder-decoder needs, hand-written backward
//! passes and Adam.
//!
//! Everything is generic over [`Real`] so models can be instantiated in `f64`
//! for finite-difference gradient checks and in `f32` for training.

mod adam;
mod fit;
mod ops;
mod unet;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use fit::{fit, EpochEnd, FitConfig};
pub use ops::gemm;
pub use unet::{noise_features, UNet, UNetConfig, UNetTrace};

use crate::{Error, Result};

/// Floating-point element type of a model.
pub trait Real: Float + Default + Debug + AddAssign + MulAssign + Send + Sync + 'static {
    /// Checkpoint dtype tag.
    const DTYPE: DType;

    /// `C = alpha·A·B + beta·C` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("float converts to f64")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $dtype:expr) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, rsa, csa));
                assert!(b.len() as isize >= span(k, n, rsb, csb));
                assert!(c.len() as isize >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every strided access by the
                // slice lengths; strides are non-negative by construction in
                // `ops::gemm`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, DType::F32);
impl_real!(f64, matrixmultiply::dgemm, DType::F64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A named dense tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }
}

/// Ordered collection of named tensors; used for weights, gradients and
/// optimizer moments alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn empty() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, param: Param<T>) -> usize {
        self.params.push(param);
        self.params.len() - 1
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param::zeros(p.name.clone(), &p.shape))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.params.iter().flat_map(|p| p.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.params.iter_mut().flat_map(|p| p.data.iter_mut())
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter sets differ in layout".into()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter sets differ in layout".into()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a = *b;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
