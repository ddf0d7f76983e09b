//! Full network: dilated temporal convolution trunk followed by graph
//! refinement stages, one exchange-detection head per stage.

use crate::backbone::{Backbone, BackboneConfig};
use crate::dtgrm::{DtgrmConfig, DtgrmStage};
use crate::optim::Parameter;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::selfsup::ExchangeHead;
use crate::tensor::Tensor;

pub struct Model<T: Scalar> {
    d_in: usize,
    num_classes: usize,
    backbone: Backbone<T>,
    stages: Vec<DtgrmStage<T>>,
    exchange_heads: Vec<ExchangeHead<T>>,
}

/// One forward pass over a sequence.
pub struct ModelOutputs<T: Scalar> {
    /// Class likelihoods per stage: the trunk's come first, then each
    /// refinement stage's in order. Always `num_stages + 1` entries.
    pub predictions: Vec<Tensor<T>>,
    /// Final hidden state of each refinement stage, in stage order.
    pub hiddens: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        d_in: usize,
        num_classes: usize,
        backbone_cfg: &BackboneConfig,
        dtgrm_cfg: &DtgrmConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let backbone = Backbone::new(d_in, num_classes, backbone_cfg, rng);
        let stages = (0..dtgrm_cfg.num_stages)
            .map(|s| DtgrmStage::new(&format!("stage{s}"), num_classes, dtgrm_cfg, rng))
            .collect();
        let exchange_heads = (0..dtgrm_cfg.num_stages)
            .map(|s| ExchangeHead::new(&format!("exchange{s}"), dtgrm_cfg.d_hidden, rng))
            .collect();
        Model {
            d_in,
            num_classes,
            backbone,
            stages,
            exchange_heads,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn exchange_heads(&self) -> &[ExchangeHead<T>] {
        &self.exchange_heads
    }

    /// Trunk likelihoods, then each stage refining its predecessor's.
    pub fn forward(&self, x: &Tensor<T>) -> ModelOutputs<T> {
        let mut predictions = Vec::with_capacity(self.stages.len() + 1);
        let mut hiddens = Vec::with_capacity(self.stages.len());
        let mut y = self.backbone.forward(x);
        predictions.push(y.clone());
        for stage in &self.stages {
            let (refined, h) = stage.forward(&y);
            predictions.push(refined.clone());
            hiddens.push(h);
            y = refined;
        }
        ModelOutputs {
            predictions,
            hiddens,
        }
    }

    /// Per-stage frame-exchange likelihoods for a pass's hidden states.
    pub fn exchange_scores(&self, hiddens: &[Tensor<T>]) -> Vec<Tensor<T>> {
        assert_eq!(
            hiddens.len(),
            self.exchange_heads.len(),
            "one hidden state per exchange head"
        );
        self.exchange_heads
            .iter()
            .zip(hiddens)
            .map(|(head, h)| head.forward(h))
            .collect()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut ps = self.backbone.params();
        for stage in &self.stages {
            ps.extend(stage.params());
        }
        for head in &self.exchange_heads {
            ps.extend(head.params());
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = self.backbone.params_mut();
        for stage in &mut self.stages {
            ps.extend(stage.params_mut());
        }
        for head in &mut self.exchange_heads {
            ps.extend(head.params_mut());
        }
        ps
    }
}
