//! Block arithmetic: AdaLN modulation, joint attention, MLP.

use super::config::Variant;
use super::weights::{StreamWeights, MODULATION_CHUNKS};
use super::Engine;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const LN_EPS: f32 = 1e-6;

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn gelu(x: f32) -> f32 {
    // tanh approximation
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Parameter-free layer norm over the channel axis, then `(1 + scale) * h + shift`.
fn modulated_norm(x: &Matrix, shift: &[f32], scale: &[f32]) -> Matrix {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * (1.0 + scale[c]) + shift[c];
        }
    }
    out
}

/// `silu(cond) · W`, split into `chunks` vectors of length `D`.
fn modulation(cond: &[f32], w: &Matrix, chunks: usize) -> Result<Vec<Vec<f32>>> {
    let act: Vec<f32> = cond.iter().map(|&c| silu(c)).collect();
    let row = Matrix::from_vec(1, act.len(), act)?.matmul(w)?;
    let d = w.cols() / chunks;
    Ok(row.as_slice().chunks(d).map(<[f32]>::to_vec).collect())
}

fn add_gated(x: &mut Matrix, branch: &Matrix, gate: &[f32]) {
    for r in 0..x.rows() {
        let b = branch.row(r);
        for (c, v) in x.row_mut(r).iter_mut().enumerate() {
            *v += gate[c] * b[c];
        }
    }
}

fn mlp(h: &Matrix, w: &StreamWeights) -> Result<Matrix> {
    let mut hidden = h.matmul(&w.mlp_in)?;
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    hidden.matmul(&w.mlp_out)
}

/// Multi-head softmax attention of every query row over every key row.
fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Matrix {
    let n = q.rows();
    let d = q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut logits = vec![0.0f32; n];
    for h in 0..heads {
        let span = h * hd..(h + 1) * hd;
        for i in 0..n {
            let qi = &q.row(i)[span.clone()];
            let mut max = f32::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k.row(j)[span.clone()];
                *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(*l);
            }
            let mut denom = 0.0f32;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            let o = &mut out.row_mut(i)[span.clone()];
            for (j, &p) in logits.iter().enumerate() {
                let w = p / denom;
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[span.clone()]) {
                    *oc += w * vc;
                }
            }
        }
    }
    out
}

struct StreamMods {
    shift1: Vec<f32>,
    scale1: Vec<f32>,
    gate1: Vec<f32>,
    shift2: Vec<f32>,
    scale2: Vec<f32>,
    gate2: Vec<f32>,
}

fn stream_mods(cond: &[f32], w: &StreamWeights) -> Result<StreamMods> {
    let mut m = modulation(cond, &w.modulation, MODULATION_CHUNKS)?.into_iter();
    let mut next = || m.next().unwrap_or_default();
    Ok(StreamMods {
        shift1: next(),
        scale1: next(),
        gate1: next(),
        shift2: next(),
        scale2: next(),
        gate2: next(),
    })
}

/// Joint attention over `[image; encoder]` with per-stream projections,
/// followed by per-stream MLPs. `streams` pairs each token group with the
/// weights that process it.
fn joint_block(streams: &[(&Matrix, &StreamWeights)], cond: &[f32], heads: usize) -> Result<Vec<Matrix>> {
    let mods = streams
        .iter()
        .map(|(_, w)| stream_mods(cond, w))
        .collect::<Result<Vec<_>>>()?;

    let mut q = Matrix::zeros(0, 0);
    let mut k = Matrix::zeros(0, 0);
    let mut v = Matrix::zeros(0, 0);
    for ((x, w), m) in streams.iter().zip(&mods) {
        let h = modulated_norm(x, &m.shift1, &m.scale1);
        q = q.vstack(&h.matmul(&w.wq)?)?;
        k = k.vstack(&h.matmul(&w.wk)?)?;
        v = v.vstack(&h.matmul(&w.wv)?)?;
    }
    let mut attn = attention(&q, &k, &v, heads);

    let mut outputs = Vec::with_capacity(streams.len());
    for ((x, w), m) in streams.iter().zip(&mods) {
        let (mine, rest) = attn.split_rows(x.rows());
        attn = rest;
        let mut x = (*x).clone();
        add_gated(&mut x, &mine.matmul(&w.wo)?, &m.gate1);
        let h = modulated_norm(&x, &m.shift2, &m.scale2);
        add_gated(&mut x, &mlp(&h, w)?, &m.gate2);
        outputs.push(x);
    }
    Ok(outputs)
}

impl Engine {
    /// Applies block `layer` to the image and encoder hidden states.
    ///
    /// `x_img` must have `N_I` rows; `x_enc` may have any number of rows
    /// (zero reduces the block to image-only self-attention). `cond` is
    /// the conditioning vector from [`Engine::condition`].
    pub fn forward_block(
        &self,
        layer: usize,
        x_img: &Matrix,
        x_enc: &Matrix,
        cond: &[f32],
    ) -> Result<(Matrix, Matrix)> {
        let cfg = &self.config;
        let d = cfg.width;
        if layer >= cfg.depth {
            return Err(Error::Range(format!("layer {layer} >= depth {}", cfg.depth)));
        }
        if x_img.shape() != (cfg.image_tokens(), d) {
            return Err(Error::Shape(format!(
                "image stream is {:?}, expected {:?}",
                x_img.shape(),
                (cfg.image_tokens(), d)
            )));
        }
        if x_enc.rows() > 0 && x_enc.cols() != d {
            return Err(Error::Shape(format!(
                "encoder stream has {} channels, expected {d}",
                x_enc.cols()
            )));
        }
        if cond.len() != d {
            return Err(Error::Shape(format!(
                "conditioning vector has length {}, expected {d}",
                cond.len()
            )));
        }
        if !x_img.is_finite() || !x_enc.is_finite() || cond.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input to block {layer}")));
        }
        let x_enc_owned;
        let x_enc = if x_enc.rows() == 0 {
            x_enc_owned = Matrix::zeros(0, d);
            &x_enc_owned
        } else {
            x_enc
        };

        let w = &self.weights.blocks[layer];
        let (mut img, enc) = match cfg.variant {
            Variant::DualStream => {
                let mut out =
                    joint_block(&[(x_img, &w.image), (x_enc, &w.encoder)], cond, cfg.heads)?;
                let enc = out.pop().unwrap_or_else(|| Matrix::zeros(0, d));
                (out.pop().unwrap_or_else(|| Matrix::zeros(0, d)), enc)
            }
            Variant::SingleStream => {
                let joint = x_img.vstack(x_enc)?;
                let out = joint_block(&[(&joint, &w.image)], cond, cfg.heads)?;
                out[0].split_rows(x_img.rows())
            }
        };

        if let Some(plant) = &cfg.plant {
            let all: Vec<usize>;
            let tokens = match &plant.tokens {
                Some(t) => t.as_slice(),
                None => {
                    all = (0..img.rows()).collect();
                    &all
                }
            };
            for &n in tokens {
                for &c in &plant.channels {
                    img.set(n, c, img.get(n, c) + plant.amplitude);
                }
            }
        }

        if !img.is_finite() || !enc.is_finite() {
            return Err(Error::Numeric(format!("block {layer} produced non-finite output")));
        }
        Ok((img, enc))
    }

    /// Conditioning vector for time `t`: sinusoidal features through a
    /// two-layer SiLU MLP.
    pub fn condition(&self, t: f32) -> Vec<f32> {
        let d = self.config.width;
        let half = d / 2;
        let mut feats = vec![0.0f32; d];
        let arg = f64::from(t) * 1000.0;
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            feats[j] = (arg * freq).cos() as f32;
            feats[half + j] = (arg * freq).sin() as f32;
        }
        let w = &self.weights;
        let row = |v: Vec<f32>| Matrix::from_vec(1, d, v).expect("length is width");
        let mut h = row(feats).matmul(&w.time_in).expect("time_in is D×D");
        h.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
        h.matmul(&w.time_out).expect("time_out is D×D").into_vec()
    }

    /// Projects a latent into the image stream and adds positional embeddings.
    pub fn embed_image(&self, latent: &Matrix) -> Result<Matrix> {
        let expect = (self.config.image_tokens(), self.config.width);
        if latent.shape() != expect {
            return Err(Error::Shape(format!(
                "latent is {:?}, expected {expect:?}",
                latent.shape()
            )));
        }
        let mut x = latent.matmul(&self.weights.latent_in)?;
        for (v, p) in x.as_mut_slice().iter_mut().zip(self.weights.image_pos.as_slice()) {
            *v += p;
        }
        Ok(x)
    }

    /// Looks up prompt token embeddings and adds positional embeddings.
    pub fn embed_prompt(&self, prompt: &[u32]) -> Result<Matrix> {
        let cfg = &self.config;
        if prompt.len() != cfg.encoder_len {
            return Err(Error::Shape(format!(
                "prompt has {} tokens, expected {}",
                prompt.len(),
                cfg.encoder_len
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::Range(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        let w = &self.weights;
        Ok(Matrix::from_fn(prompt.len(), cfg.width, |n, c| {
            w.token_embed.get(prompt[n] as usize, c) + w.encoder_pos.get(n, c)
        }))
    }

    /// Velocity prediction from the final image hidden state.
    pub fn velocity(&self, x_img: &Matrix, cond: &[f32]) -> Result<Matrix> {
        let mods = modulation(cond, &self.weights.final_modulation, 2)?;
        let h = modulated_norm(x_img, &mods[0], &mods[1]);
        h.matmul(&self.weights.final_proj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EngineConfig, EngineWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn small() -> EngineConfig {
        EngineConfig {
            depth: 3,
            width: 8,
            heads: 2,
            latent_h: 2,
            latent_w: 2,
            encoder_len: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let cfg = small();
        let mut w = EngineWeights::seeded(&cfg);
        w.zero_blocks();
        let engine = Engine::from_weights(cfg, w).unwrap();
        let xi = random(4, 8, 1);
        let xe = random(4, 8, 2);
        let cond = engine.condition(0.5);
        let (yi, ye) = engine.forward_block(1, &xi, &xe, &cond).unwrap();
        assert!(yi.bit_eq(&xi));
        assert!(ye.bit_eq(&xe));
    }

    #[test]
    fn shapes_preserved() {
        for variant in [Variant::DualStream, Variant::SingleStream] {
            let cfg = EngineConfig { variant, ..small() };
            let engine = Engine::new(cfg).unwrap();
            let xi = random(4, 8, 3);
            let xe = random(4, 8, 4);
            let (yi, ye) = engine.forward_block(0, &xi, &xe, &engine.condition(1.0)).unwrap();
            assert_eq!(yi.shape(), (4, 8));
            assert_eq!(ye.shape(), (4, 8));
            assert!(yi.is_finite() && ye.is_finite());
        }
    }

    #[test]
    fn encoder_permutation_equivariance() {
        // Oracle: permute the encoder rows of the input, run the block, and
        // compare with the unpermuted output permuted explicitly.
        let engine = Engine::new(small()).unwrap();
        let xi = random(4, 8, 5);
        let xe = random(4, 8, 6);
        let perm = [2usize, 0, 3, 1];
        let xe_perm = Matrix::from_fn(4, 8, |r, c| xe.get(perm[r], c));
        let cond = engine.condition(0.25);
        let (yi, ye) = engine.forward_block(2, &xi, &xe, &cond).unwrap();
        let (yi_p, ye_p) = engine.forward_block(2, &xi, &xe_perm, &cond).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((ye_p.get(r, c) - ye.get(perm[r], c)).abs() < 1e-5);
            }
        }
        for (a, b) in yi.as_slice().iter().zip(yi_p.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_encoder_is_image_self_attention() {
        // With zero encoder tokens the dual-stream block equals the
        // single-stream block when encoder parameters are irrelevant and
        // image parameters are shared.
        let cfg = small();
        let dual = Engine::new(cfg.clone()).unwrap();
        let single = Engine::new(EngineConfig {
            variant: Variant::SingleStream,
            ..cfg
        })
        .unwrap();
        let xi = random(4, 8, 7);
        let empty = Matrix::zeros(0, 8);
        let cond = dual.condition(0.75);
        let (a, ea) = dual.forward_block(0, &xi, &empty, &cond).unwrap();
        let (b, eb) = single.forward_block(0, &xi, &empty, &cond).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ea.rows(), 0);
        assert_eq!(eb.rows(), 0);
    }

    #[test]
    fn shape_and_numeric_errors() {
        let engine = Engine::new(small()).unwrap();
        let cond = engine.condition(0.5);
        let bad = random(3, 8, 1);
        let xe = random(4, 8, 2);
        assert!(matches!(
            engine.forward_block(0, &bad, &xe, &cond),
            Err(Error::Shape(_))
        ));
        let mut nan = random(4, 8, 1);
        nan.set(0, 0, f32::NAN);
        assert!(matches!(
            engine.forward_block(0, &nan, &xe, &cond),
            Err(Error::Numeric(_))
        ));
    }
}
