use rand_chacha::ChaCha8Rng;

use super::ops::{softmax_in_place, Affine, LayerNorm, LnCache};
use super::params::{LayerPartition, ParamStore, StoreBuilder};
use super::{gaussian_init, Features, ModelConfig, Net, PAD_TOKEN};
use crate::error::{input_err, Result};

/// Pre-norm encoder block: single-head self-attention followed by a tanh
/// feed-forward, each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln2: LayerNorm,
    ff1: Affine,
    ff2: Affine,
}

/// Token + position embeddings (preamble), `L` encoder blocks (one ranked
/// group each), then final layer norm, mean pooling over non-pad positions
/// and a linear classifier (head).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TinyTransformer {
    vocab: usize,
    max_len: usize,
    dim: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    cls: Affine,
}

struct BlockTape {
    a: Vec<f64>,
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    mixed: Vec<f64>,
    b: Vec<f64>,
    ln2: LnCache,
    z: Vec<f64>,
}

pub(crate) struct TransformerTape {
    /// (token id, position) of every non-pad slot.
    slots: Vec<(usize, usize)>,
    blocks: Vec<BlockTape>,
    ln_f: LnCache,
    pooled: Vec<f64>,
}

fn layer_norm(b: &mut StoreBuilder, name: &str, d: usize) -> LayerNorm {
    let gain = b.push(format!("{name}.gain"), &[d], vec![1.0; d]);
    let bias = b.push(format!("{name}.bias"), &[d], vec![0.0; d]);
    LayerNorm { gain, bias, dim: d }
}

fn affine(b: &mut StoreBuilder, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize) -> Affine {
    let w = b.push(
        format!("{name}.weight"),
        &[inp, out],
        gaussian_init(rng, inp * out, (1.0 / inp as f64).sqrt()),
    );
    let bias = b.push(format!("{name}.bias"), &[out], vec![0.0; out]);
    Affine { w, b: bias, inp, out }
}

impl TinyTransformer {
    pub fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Self, ParamStore, LayerPartition) {
        let (v, t, d, c) = (cfg.vocab_size, cfg.max_seq_len, cfg.hidden_width, cfg.output_dim());
        let f = 2 * d;
        let mut b = StoreBuilder::default();
        b.begin_group("embeddings");
        let tok_emb = b.push("embed.token", &[v, d], gaussian_init(rng, v * d, 1.0));
        let pos_emb = b.push("embed.position", &[t, d], gaussian_init(rng, t * d, 0.5));
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            b.begin_group(format!("block{l}"));
            let p = format!("block{l}");
            blocks.push(Block {
                ln1: layer_norm(&mut b, &format!("{p}.ln1"), d),
                q: affine(&mut b, rng, &format!("{p}.attn.query"), d, d),
                k: affine(&mut b, rng, &format!("{p}.attn.key"), d, d),
                v: affine(&mut b, rng, &format!("{p}.attn.value"), d, d),
                o: affine(&mut b, rng, &format!("{p}.attn.output"), d, d),
                ln2: layer_norm(&mut b, &format!("{p}.ln2"), d),
                ff1: affine(&mut b, rng, &format!("{p}.ffn.inner"), d, f),
                ff2: affine(&mut b, rng, &format!("{p}.ffn.outer"), f, d),
            });
        }
        b.begin_group("head");
        let ln_f = layer_norm(&mut b, "head.ln", d);
        let cls = affine(&mut b, rng, "head.classifier", d, c);
        let (store, part) = b.finish();
        let net = TinyTransformer {
            vocab: v,
            max_len: t,
            dim: d,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            cls,
        };
        (net, store, part)
    }

    fn slots(&self, x: &Features) -> Result<Vec<(usize, usize)>> {
        let tokens = match x {
            Features::Tokens(t) => t,
            Features::Dense(_) => return Err(input_err("transformer given dense input")),
        };
        if tokens.len() > self.max_len {
            return Err(input_err(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.max_len
            )));
        }
        let mut slots = Vec::with_capacity(tokens.len());
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.vocab {
                return Err(input_err(format!("token id {tok} >= vocab size {}", self.vocab)));
            }
            if tok != PAD_TOKEN {
                slots.push((tok as usize, pos));
            }
        }
        if slots.is_empty() {
            return Err(input_err("sequence has no non-pad tokens"));
        }
        Ok(slots)
    }
}

impl Block {
    fn forward(&self, p: &[f64], x: &[f64], n: usize, d: usize) -> (Vec<f64>, BlockTape) {
        let (a, ln1) = self.ln1.forward(p, x, n);
        let q = self.q.forward(p, &a, n);
        let k = self.k.forward(p, &a, n);
        let v = self.v.forward(p, &a, n);
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                attn[i * n + j] = scale
                    * (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>();
            }
            softmax_in_place(&mut attn[i * n..(i + 1) * n]);
        }
        let mut mixed = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                let w = attn[i * n + j];
                for c in 0..d {
                    mixed[i * d + c] += w * v[j * d + c];
                }
            }
        }
        let o = self.o.forward(p, &mixed, n);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(u, w)| u + w).collect();
        let (b, ln2) = self.ln2.forward(p, &x1, n);
        let z: Vec<f64> = self.ff1.forward(p, &b, n).into_iter().map(f64::tanh).collect();
        let f = self.ff2.forward(p, &z, n);
        let x2: Vec<f64> = x1.iter().zip(&f).map(|(u, w)| u + w).collect();
        let tape = BlockTape { a, ln1, q, k, v, attn, mixed, b, ln2, z };
        (x2, tape)
    }

    fn backward(&self, p: &[f64], t: &BlockTape, dx2: Vec<f64>, n: usize, d: usize, grad: &mut [f64]) -> Vec<f64> {
        let mut dx1 = dx2;
        let dz = self.ff2.backward(p, &t.z, &dx1, n, grad);
        let du: Vec<f64> = dz.iter().zip(&t.z).map(|(g, z)| g * (1.0 - z * z)).collect();
        let db = self.ff1.backward(p, &t.b, &du, n, grad);
        let dln2 = self.ln2.backward(p, &t.ln2, &db, n, grad);
        dx1.iter_mut().zip(dln2).for_each(|(u, w)| *u += w);

        let dmixed = self.o.backward(p, &t.mixed, &dx1, n, grad);
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                let dp: f64 = (0..d).map(|c| dmixed[i * d + c] * t.v[j * d + c]).sum();
                ds[i * n + j] = dp;
                dot += t.attn[i * n + j] * dp;
                let w = t.attn[i * n + j];
                for c in 0..d {
                    dv[j * d + c] += w * dmixed[i * d + c];
                }
            }
            for j in 0..n {
                ds[i * n + j] = t.attn[i * n + j] * (ds[i * n + j] - dot);
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                let s = ds[i * n + j] * scale;
                if s == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dq[i * d + c] += s * t.k[j * d + c];
                    dk[j * d + c] += s * t.q[i * d + c];
                }
            }
        }
        let mut da = self.q.backward(p, &t.a, &dq, n, grad);
        for part in [self.k.backward(p, &t.a, &dk, n, grad), self.v.backward(p, &t.a, &dv, n, grad)] {
            da.iter_mut().zip(part).for_each(|(u, w)| *u += w);
        }
        let dln1 = self.ln1.backward(p, &t.ln1, &da, n, grad);
        dx1.iter_mut().zip(dln1).for_each(|(u, w)| *u += w);
        dx1
    }
}

impl Net for TinyTransformer {
    type Tape = TransformerTape;

    fn forward(&self, p: &[f64], x: &Features) -> Result<(Vec<f64>, TransformerTape)> {
        let slots = self.slots(x)?;
        let (n, d) = (slots.len(), self.dim);
        let mut h = vec![0.0; n * d];
        for (r, &(tok, pos)) in slots.iter().enumerate() {
            for c in 0..d {
                h[r * d + c] = p[self.tok_emb + tok * d + c] + p[self.pos_emb + pos * d + c];
            }
        }
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, tape) = block.forward(p, &h, n, d);
            tapes.push(tape);
            h = next;
        }
        let (y, ln_f) = self.ln_f.forward(p, &h, n);
        let mut pooled = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                pooled[c] += y[r * d + c];
            }
        }
        pooled.iter_mut().for_each(|v| *v /= n as f64);
        let out = self.cls.forward(p, &pooled, 1);
        Ok((out, TransformerTape { slots, blocks: tapes, ln_f, pooled }))
    }

    fn backward(&self, p: &[f64], t: &TransformerTape, d_out: &[f64], grad: &mut [f64]) {
        let (n, d) = (t.slots.len(), self.dim);
        let dpooled = self.cls.backward(p, &t.pooled, d_out, 1, grad);
        let mut dy = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                dy[r * d + c] = dpooled[c] / n as f64;
            }
        }
        let mut dh = self.ln_f.backward(p, &t.ln_f, &dy, n, grad);
        for (block, tape) in self.blocks.iter().zip(&t.blocks).rev() {
            dh = block.backward(p, tape, dh, n, d, grad);
        }
        for (r, &(tok, pos)) in t.slots.iter().enumerate() {
            for c in 0..d {
                grad[self.tok_emb + tok * d + c] += dh[r * d + c];
                grad[self.pos_emb + pos * d + c] += dh[r * d + c];
            }
        }
    }
}
