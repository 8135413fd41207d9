use rand_chacha::ChaCha8Rng;

use super::ops::Affine;
use super::params::{LayerPartition, ParamStore, StoreBuilder};
use super::{dense_input, gaussian_init, Features, ModelConfig, Net};
use crate::error::Result;

/// Multinomial logistic regression: a single ranked layer, an empty
/// (identity) preamble and an empty head.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearSoftmax {
    layer: Affine,
}

impl LinearSoftmax {
    pub fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Self, ParamStore, LayerPartition) {
        let (d, c) = (cfg.input_dim, cfg.output_dim());
        let mut b = StoreBuilder::default();
        b.begin_group("preamble");
        b.begin_group("layer0");
        let w = b.push("layer0.weight", &[d, c], gaussian_init(rng, d * c, (1.0 / d as f64).sqrt()));
        let bias = b.push("layer0.bias", &[c], vec![0.0; c]);
        b.begin_group("head");
        let (store, part) = b.finish();
        let layer = Affine { w, b: bias, inp: d, out: c };
        (LinearSoftmax { layer }, store, part)
    }
}

impl Net for LinearSoftmax {
    type Tape = Vec<f64>;

    fn forward(&self, p: &[f64], x: &Features) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = dense_input(x, self.layer.inp)?.to_vec();
        Ok((self.layer.forward(p, &x, 1), x))
    }

    fn backward(&self, p: &[f64], x: &Vec<f64>, d_out: &[f64], grad: &mut [f64]) {
        self.layer.backward(p, x, d_out, 1, grad);
    }
}
