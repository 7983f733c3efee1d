use rand::Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Shape, Tensor};

/// Convolution parameters: weight `(out, in, kh, kw)`, bias `(1, out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Zero-initialised layer.
    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(shape_err("ConvSpec", "kernel sizes must be >= 1"));
        }
        if stride == 0 {
            return Err(shape_err("ConvSpec", "stride must be >= 1"));
        }
        Ok(Self {
            weight: Tensor::zeros(Shape::new(out_ch, in_ch, kernel.0, kernel.1)),
            bias: Tensor::zeros(Shape::new(1, out_ch, 1, 1)),
            stride,
            padding,
        })
    }

    /// Uniform fan-in initialisation in `±gain·sqrt(3 / fan_in)`, zero bias.
    /// A zero gain gives an all-zero layer.
    pub fn random<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(gain >= 0.0 && gain.is_finite()) {
            return Err(arg_err(
                "ConvSpec::random",
                "gain must be finite and non-negative",
            ));
        }
        let mut s = Self::zeros(in_ch, out_ch, kernel, stride, padding)?;
        if gain == 0.0 {
            return Ok(s);
        }
        let bound = gain * (3.0 / (in_ch * kernel.0 * kernel.1) as f64).sqrt();
        for w in s.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        Ok(s)
    }

    /// `1×1` layer whose weight is the identity matrix.
    pub fn identity(channels: usize) -> Self {
        let mut s = Self::zeros(channels, channels, (1, 1), 1, 0).expect("valid");
        for c in 0..channels {
            s.weight.set(c, c, 0, 0, 1.0);
        }
        s
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().height, self.weight.shape().width)
    }

    /// Registers the weights on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConv {
        let (weight, bias) = if trainable {
            (g.leaf(self.weight.clone()), g.leaf(self.bias.clone()))
        } else {
            (
                g.constant(self.weight.clone()),
                g.constant(self.bias.clone()),
            )
        };
        BoundConv {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// A [`ConvSpec`] whose tensors live on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl BoundConv {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.stride, self.padding)
    }

    pub fn apply_aligned(&self, g: &mut Graph, x: Var, offsets: Var) -> Result<Var> {
        g.align_conv(
            x,
            self.weight,
            self.bias,
            offsets,
            self.stride,
            self.padding,
        )
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}
