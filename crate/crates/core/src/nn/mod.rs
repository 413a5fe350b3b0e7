//! Minimal layer library with hand-written backward passes.
//!
//! Layers cache what their backward pass needs during `forward` and
//! accumulate parameter gradients in `backward`. Every layer is used at most
//! once per forward pass, so the cache lives inside the layer. Networks are
//! generic over [`Real`]: training runs in `f32`, gradient checks in `f64`.

mod adam;
mod layers;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, ConvTranspose2x2, Linear, MaxPool2, Relu};
pub use ops::{
    concat_channels, global_avg_pool, global_avg_pool_backward, sigmoid, split_channels,
};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// How a forward pass treats batch statistics and caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, caches for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
    /// Running statistics with caches, for gradients of a frozen network.
    EvalTrace,
}

impl Mode {
    pub fn caches(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// A named tensor owned by a layer: trainable weights, or buffers such as
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<F>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialisation for a layer with the given fan-in.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z * std)
        });
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Named access to every tensor a network owns.
pub trait Parameterized<F: Real> {
    fn params(&self) -> Vec<(String, &Param<F>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params() {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn prefixed<'a, P>(
    prefix: &str,
    items: Vec<(String, P)>,
) -> impl Iterator<Item = (String, P)> + 'a
where
    P: 'a,
{
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, p)| (format!("{prefix}.{n}"), p))
}
