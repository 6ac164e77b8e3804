//! Convolution + folded-normalization blocks and the per-forward trace.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{affine_norm, conv2d, relu_inplace, Tensor};

/// Shapes of named intermediates and convolution counts per module, recorded
/// during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub shapes: Vec<(String, Vec<usize>)>,
    pub conv_calls: BTreeMap<String, usize>,
}

impl ForwardTrace {
    pub fn record(&mut self, name: impl Into<String>, t: &Tensor) {
        self.shapes.push((name.into(), t.shape().to_vec()));
    }

    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.shapes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }

    pub fn convs(&self, module: &str) -> usize {
        self.conv_calls.get(module).copied().unwrap_or(0)
    }

    fn count(&mut self, module: &str) {
        *self.conv_calls.entry(module.to_string()).or_default() += 1;
    }
}

/// Convolution followed by a per-channel affine and optional ReLU; borrows
/// its parameters from a weight archive.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a [f32],
    /// `None` skips the affine step (plain convolution)
    pub affine: Option<(&'a [f32], &'a [f32])>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub relu: bool,
}

impl ConvBn<'_> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn forward(&self, x: &Tensor, trace: &mut ForwardTrace, module: &str) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "{module}: input has {c} channels, layer expects {}",
                self.in_channels()
            )));
        }
        trace.count(module);
        let mut y = conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)?;
        if let Some((scale, shift)) = self.affine {
            y = affine_norm(&y, scale, shift)?;
        }
        if self.relu {
            relu_inplace(&mut y);
        }
        Ok(y)
    }
}
