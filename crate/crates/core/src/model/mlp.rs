use rand_chacha::ChaCha8Rng;

use super::ops::Affine;
use super::params::{LayerPartition, ParamStore, StoreBuilder};
use super::{dense_input, gaussian_init, Features, ModelConfig, Net};
use crate::error::Result;

/// Output scale of each residual block relative to a unit-variance init.
const BLOCK_OUT_SCALE: f64 = 0.2;
const BLOCK_IN_SCALE: f64 = 0.2;

/// Residual tanh MLP.
///
/// `h0 = x·W_in + b` (preamble), then for each block
/// `h ← h + tanh(h·A + a)·B + b` (one ranked group per block), then a
/// linear head.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TinyMlp {
    input: Affine,
    blocks: Vec<(Affine, Affine)>,
    head: Affine,
}

pub(crate) struct MlpTape {
    x: Vec<f64>,
    /// Residual stream entering each block, plus the final stream.
    stream: Vec<Vec<f64>>,
    /// tanh activations inside each block.
    act: Vec<Vec<f64>>,
}

impl TinyMlp {
    pub fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Self, ParamStore, LayerPartition) {
        let (d, h, c) = (cfg.input_dim, cfg.hidden_width, cfg.output_dim());
        let hs = (1.0 / h as f64).sqrt();
        let mut b = StoreBuilder::default();
        b.begin_group("input");
        let iw = b.push("input.weight", &[d, h], gaussian_init(rng, d * h, (1.0 / d as f64).sqrt()));
        let ib = b.push("input.bias", &[h], vec![0.0; h]);
        let input = Affine { w: iw, b: ib, inp: d, out: h };
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            b.begin_group(format!("block{l}"));
            let aw = b.push(format!("block{l}.inner.weight"), &[h, h], gaussian_init(rng, h * h, BLOCK_IN_SCALE * hs));
            let ab = b.push(format!("block{l}.inner.bias"), &[h], vec![0.0; h]);
            let ow = b.push(
                format!("block{l}.outer.weight"),
                &[h, h],
                gaussian_init(rng, h * h, BLOCK_OUT_SCALE * hs),
            );
            let ob = b.push(format!("block{l}.outer.bias"), &[h], vec![0.0; h]);
            blocks.push((
                Affine { w: aw, b: ab, inp: h, out: h },
                Affine { w: ow, b: ob, inp: h, out: h },
            ));
        }
        b.begin_group("head");
        let hw = b.push("head.weight", &[h, c], gaussian_init(rng, h * c, hs));
        let hb = b.push("head.bias", &[c], vec![0.0; c]);
        let head = Affine { w: hw, b: hb, inp: h, out: c };
        let (store, part) = b.finish();
        (TinyMlp { input, blocks, head }, store, part)
    }
}

impl Net for TinyMlp {
    type Tape = MlpTape;

    fn forward(&self, p: &[f64], x: &Features) -> Result<(Vec<f64>, MlpTape)> {
        let x = dense_input(x, self.input.inp)?.to_vec();
        let mut h = self.input.forward(p, &x, 1);
        let mut stream = Vec::with_capacity(self.blocks.len() + 1);
        let mut act = Vec::with_capacity(self.blocks.len());
        for (inner, outer) in &self.blocks {
            let a: Vec<f64> = inner.forward(p, &h, 1).into_iter().map(f64::tanh).collect();
            let delta = outer.forward(p, &a, 1);
            let next: Vec<f64> = h.iter().zip(&delta).map(|(u, v)| u + v).collect();
            stream.push(h);
            act.push(a);
            h = next;
        }
        let out = self.head.forward(p, &h, 1);
        stream.push(h);
        Ok((out, MlpTape { x, stream, act }))
    }

    fn backward(&self, p: &[f64], t: &MlpTape, d_out: &[f64], grad: &mut [f64]) {
        let mut dh = self.head.backward(p, &t.stream[self.blocks.len()], d_out, 1, grad);
        for (l, (inner, outer)) in self.blocks.iter().enumerate().rev() {
            let da = outer.backward(p, &t.act[l], &dh, 1, grad);
            let dz: Vec<f64> = da.iter().zip(&t.act[l]).map(|(g, a)| g * (1.0 - a * a)).collect();
            let dx = inner.backward(p, &t.stream[l], &dz, 1, grad);
            for (u, v) in dh.iter_mut().zip(dx) {
                *u += v;
            }
        }
        self.input.backward(p, &t.x, &dh, 1, grad);
    }
}
