//! The fixed two-conv / two-fc network, its parameters and plain SGD.
//!
//! Spatial arithmetic for the default architecture (valid convolutions,
//! 2x2 max-pooling):
//!
//! ```text
//! input 1x28x28 -> conv1 5x5 -> 16x24x24 -> relu -> pool -> 16x12x12
//!               -> conv2 5x5 -> 32x8x8   -> relu -> pool -> 32x4x4 (512)
//!               -> fc1 512->64 -> relu  (embedding)
//!               -> fc2 64->10           (logits)
//! ```

mod linalg;
mod model;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use model::{embed, forward, head, loss_and_grads};

/// Shape description of the network. Input is always single-channel and square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_side: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub pool: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            input_side: 28,
            conv1_channels: 16,
            conv1_kernel: 5,
            conv2_channels: 32,
            conv2_kernel: 5,
            pool: 2,
            embed_dim: 64,
            classes: 10,
        }
    }
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_side", self.input_side),
            ("conv1_channels", self.conv1_channels),
            ("conv1_kernel", self.conv1_kernel),
            ("conv2_channels", self.conv2_channels),
            ("conv2_kernel", self.conv2_kernel),
            ("pool", self.pool),
            ("embed_dim", self.embed_dim),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("arch field {name} must be positive")));
        }
        if self.conv1_kernel > self.input_side {
            return Err(Error::invalid("conv1 kernel larger than input"));
        }
        if !self.conv1_out().is_multiple_of(self.pool) {
            return Err(Error::invalid("conv1 output not divisible by pool size"));
        }
        if self.conv2_kernel > self.pool1_side() {
            return Err(Error::invalid("conv2 kernel larger than its input"));
        }
        if !self.conv2_out().is_multiple_of(self.pool) {
            return Err(Error::invalid("conv2 output not divisible by pool size"));
        }
        Ok(())
    }

    pub fn conv1_out(&self) -> usize {
        self.input_side - self.conv1_kernel + 1
    }

    pub fn pool1_side(&self) -> usize {
        self.conv1_out() / self.pool
    }

    pub fn conv2_out(&self) -> usize {
        self.pool1_side() - self.conv2_kernel + 1
    }

    pub fn pool2_side(&self) -> usize {
        self.conv2_out() / self.pool
    }

    /// Width of the flattened conv features feeding fc1.
    pub fn flat_dim(&self) -> usize {
        self.conv2_channels * self.pool2_side() * self.pool2_side()
    }

    pub fn input_len(&self) -> usize {
        self.input_side * self.input_side
    }

    /// Shapes of the eight parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (c1, k1, c2, k2) = (
            self.conv1_channels,
            self.conv1_kernel,
            self.conv2_channels,
            self.conv2_kernel,
        );
        vec![
            vec![c1, 1, k1, k1],
            vec![c1],
            vec![c2, c1, k2, k2],
            vec![c2],
            vec![self.embed_dim, self.flat_dim()],
            vec![self.embed_dim],
            vec![self.classes, self.embed_dim],
            vec![self.classes],
        ]
    }
}

pub(crate) const CONV1_W: usize = 0;
pub(crate) const CONV1_B: usize = 1;
pub(crate) const CONV2_W: usize = 2;
pub(crate) const CONV2_B: usize = 3;
pub(crate) const FC1_W: usize = 4;
pub(crate) const FC1_B: usize = 5;
pub(crate) const FC2_W: usize = 6;
pub(crate) const FC2_B: usize = 7;

/// Index of the first decision-layer tensor; everything before it is the
/// feature extractor.
pub const HEAD_START: usize = FC2_W;

/// Position of the classifier bias in [`ModelParams::tensors`].
pub const FC2_B_INDEX: usize = FC2_B;

/// Layer tensors ordered conv1.w, conv1.b, conv2.w, conv2.b, fc1.w, fc1.b, fc2.w, fc2.b.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ModelArch,
    tensors: Vec<Tensor>,
}

/// Gradient of a scalar loss with respect to every entry of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

fn check_shapes(arch: &ModelArch, tensors: &[Tensor]) -> Result<()> {
    let shapes = arch.param_shapes();
    if tensors.len() != shapes.len() {
        return Err(Error::invalid(format!(
            "expected {} parameter tensors, got {}",
            shapes.len(),
            tensors.len()
        )));
    }
    for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
        if t.shape() != s.as_slice() {
            return Err(Error::invalid(format!(
                "parameter tensor {i} has shape {:?}, expected {s:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

impl ModelParams {
    pub fn from_tensors(arch: ModelArch, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        check_shapes(&arch, &tensors)?;
        Ok(ModelParams { arch, tensors })
    }

    pub fn zeros(arch: ModelArch) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.param_shapes().into_iter().map(Tensor::zeros).collect();
        Ok(ModelParams { arch, tensors })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Feature-extractor tensors (conv1, conv2, fc1).
    pub fn extractor(&self) -> &[Tensor] {
        &self.tensors[..HEAD_START]
    }

    /// Decision-layer tensors (fc2).
    pub fn head(&self) -> &[Tensor] {
        &self.tensors[HEAD_START..]
    }

    pub fn head_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors[HEAD_START..]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Little-endian bytes of every scalar in storage order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub(crate) fn congruent(&self, other_arch: &ModelArch) -> Result<()> {
        if &self.arch != other_arch {
            return Err(Error::invalid("parameter sets belong to different architectures"));
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Gradients { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Seeded initialisation: weights uniform in `±sqrt(1/fan_in)`, biases zero.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_ins = [
        arch.conv1_kernel * arch.conv1_kernel,
        arch.conv1_channels * arch.conv2_kernel * arch.conv2_kernel,
        arch.flat_dim(),
        arch.embed_dim,
    ];
    let mut params = ModelParams::zeros(*arch)?;
    for (layer, fan_in) in fan_ins.iter().enumerate() {
        let bound = (1.0 / *fan_in as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
        for w in params.tensors[2 * layer].data_mut() {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Plain SGD: `p <- p - lr * g` for every scalar.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f32) -> Result<ModelParams> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    check_shapes(&params.arch, &grads.tensors)?;
    let mut next = params.clone();
    for (p, g) in next.tensors.iter_mut().zip(&grads.tensors) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    if !next.is_finite() {
        return Err(Error::invalid("SGD step produced non-finite parameters"));
    }
    Ok(next)
}
