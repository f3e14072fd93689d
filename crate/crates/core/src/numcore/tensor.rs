//! Dense row-major tensors over f32/f64 with a live-byte allocation counter
//! (the memory proxy reported by the bench commands).

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicUsize, Ordering};

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

fn track_alloc(bytes: usize) {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

fn track_free(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

pub fn live_tensor_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

pub fn peak_tensor_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Reset the peak counter to the current live level.
pub fn reset_peak_tensor_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Element type for all tensor math. Geometry stays in f64; network forward
/// passes run in f32 with f64 reserved for gradient verification.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64_(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        track_alloc(self.data.len() * std::mem::size_of::<F>());
        Self { shape: self.shape.clone(), data: self.data.clone() }
    }
}

impl<F: Scalar> Drop for Tensor<F> {
    fn drop(&mut self) {
        track_free(self.data.len() * std::mem::size_of::<F>());
    }
}

impl<F: Scalar> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("zero-length dimension"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {n} elements, got {}",
                shape,
                data.len()
            )));
        }
        track_alloc(data.len() * std::mem::size_of::<F>());
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Construction with NaN/Inf rejection.
    pub fn new_checked(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::shape("non-finite entry rejected in checked mode"));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![F::zero(); n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("full: valid shape")
    }

    pub fn scalar(v: F) -> Self {
        Self::new(&[1], vec![v]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when the tensor is viewed as (outer, last_dim).
    pub fn outer(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Self::new(
            &self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::new(&self.shape, self.data.iter().map(|x| x.to_f64_()).collect()).unwrap()
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor::new(&self.shape, self.data.iter().map(|x| x.to_f64_() as f32).collect()).unwrap()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::new(&self.shape, self.data.iter().map(|x| G::from_f64_(x.to_f64_())).collect())
            .unwrap()
    }
}
