//! Single-stage dilated temporal convolution backbone.
//!
//! A 1x1 projection into the hidden width, a stack of residual blocks
//! whose dilation doubles per layer, and a softmax classification head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_hidden: usize,
    pub num_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d_hidden: 64, num_layers: 10 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "backbone d_hidden and num_layers must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Frames an output position can see: 2^(num_layers+1) - 1.
    pub fn receptive_field(&self) -> usize {
        (1 << (self.num_layers + 1)) - 1
    }
}

struct DilatedBlock<T: Scalar> {
    dilation: usize,
    conv_w: Parameter<T>,
    conv_b: Parameter<T>,
    point_w: Parameter<T>,
    point_b: Parameter<T>,
}

impl<T: Scalar> DilatedBlock<T> {
    fn new(prefix: &str, d: usize, dilation: usize, rng: &mut SplitMix64) -> Self {
        DilatedBlock {
            dilation,
            conv_w: Parameter::uniform(format!("{prefix}.conv.w"), vec![3, d, d], 3 * d, rng),
            conv_b: Parameter::zeros(format!("{prefix}.conv.b"), vec![d]),
            point_w: Parameter::uniform(format!("{prefix}.point.w"), vec![d, d], d, rng),
            point_b: Parameter::zeros(format!("{prefix}.point.b"), vec![d]),
        }
    }

    fn forward(&self, h: &Tensor<T>) -> Tensor<T> {
        let z = h
            .conv1d(self.conv_w.tensor(), Some(self.conv_b.tensor()), self.dilation)
            .relu()
            .matmul(self.point_w.tensor())
            .add_row_broadcast(self.point_b.tensor());
        h.add(&z)
    }
}

pub struct Backbone<T: Scalar> {
    d_in: usize,
    num_classes: usize,
    in_w: Parameter<T>,
    in_b: Parameter<T>,
    blocks: Vec<DilatedBlock<T>>,
    out_w: Parameter<T>,
    out_b: Parameter<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(
        d_in: usize,
        num_classes: usize,
        cfg: &BackboneConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let d = cfg.d_hidden;
        Backbone {
            d_in,
            num_classes,
            in_w: Parameter::uniform("backbone.in.w", vec![d_in, d], d_in, rng),
            in_b: Parameter::zeros("backbone.in.b", vec![d]),
            blocks: (0..cfg.num_layers)
                .map(|k| DilatedBlock::new(&format!("backbone.block{k}"), d, 1 << k, rng))
                .collect(),
            out_w: Parameter::uniform("backbone.out.w", vec![d, num_classes], d, rng),
            out_b: Parameter::zeros("backbone.out.b", vec![num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Frame features (T x d_in) to per-frame class likelihoods (T x C).
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (_, d) = x.dims2("backbone input");
        assert_eq!(d, self.d_in, "feature width {} does not match d_in {}", d, self.d_in);
        let mut h = x.matmul(self.in_w.tensor()).add_row_broadcast(self.in_b.tensor());
        for block in &self.blocks {
            h = block.forward(&h);
        }
        h.matmul(self.out_w.tensor())
            .add_row_broadcast(self.out_b.tensor())
            .softmax_rows()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut ps = vec![&self.in_w, &self.in_b];
        for b in &self.blocks {
            ps.extend([&b.conv_w, &b.conv_b, &b.point_w, &b.point_b]);
        }
        ps.extend([&self.out_w, &self.out_b]);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = vec![&mut self.in_w, &mut self.in_b];
        for b in &mut self.blocks {
            ps.extend([&mut b.conv_w, &mut b.conv_b, &mut b.point_w, &mut b.point_b]);
        }
        ps.extend([&mut self.out_w, &mut self.out_b]);
        ps
    }
}
