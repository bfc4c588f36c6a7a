//! Seeded parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::EngineConfig;
use crate::tensor::Matrix;

/// Expansion factor of the MLP hidden layer.
pub const MLP_RATIO: usize = 4;

/// Number of modulation vectors per stream: shift/scale/gate for the
/// attention branch, then the same for the MLP branch.
pub const MODULATION_CHUNKS: usize = 6;

/// Parameters owned by one stream of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    /// `D × 6D` projection of the conditioning vector.
    pub modulation: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `D × 4D`.
    pub mlp_in: Matrix,
    /// `4D × D`.
    pub mlp_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub image: StreamWeights,
    /// Unused by the single-stream variant.
    pub encoder: StreamWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineWeights {
    pub time_in: Matrix,
    pub time_out: Matrix,
    pub latent_in: Matrix,
    pub image_pos: Matrix,
    pub token_embed: Matrix,
    pub encoder_pos: Matrix,
    pub blocks: Vec<BlockWeights>,
    /// `D × 2D` shift/scale for the output norm.
    pub final_modulation: Matrix,
    /// `D × D` projection from hidden state to velocity.
    pub final_proj: Matrix,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f32 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }

    /// Normal with standard deviation `1/sqrt(fan_in)`.
    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f32).sqrt())
    }

    fn stream(&mut self, d: usize) -> StreamWeights {
        StreamWeights {
            modulation: self.linear(d, MODULATION_CHUNKS * d),
            wq: self.linear(d, d),
            wk: self.linear(d, d),
            wv: self.linear(d, d),
            wo: self.linear(d, d),
            mlp_in: self.linear(d, MLP_RATIO * d),
            mlp_out: self.linear(MLP_RATIO * d, d),
        }
    }
}

impl EngineWeights {
    /// Draws every parameter from a ChaCha8 stream seeded by `config.seed`,
    /// in a fixed order.
    pub fn seeded(config: &EngineConfig) -> Self {
        let d = config.width;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let time_in = init.linear(d, d);
        let time_out = init.linear(d, d);
        let latent_in = init.linear(d, d);
        let image_pos = init.normal(config.image_tokens(), d, 1.0);
        let token_embed = init.normal(config.vocab, d, 1.0);
        let encoder_pos = init.normal(config.encoder_len, d, 1.0);
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                image: init.stream(d),
                encoder: init.stream(d),
            })
            .collect();
        let final_modulation = init.linear(d, 2 * d);
        let final_proj = init.linear(d, d);
        Self {
            time_in,
            time_out,
            latent_in,
            image_pos,
            token_embed,
            encoder_pos,
            blocks,
            final_modulation,
            final_proj,
        }
    }

    /// Zeroes every block's branch parameters so each block is the identity.
    pub fn zero_blocks(&mut self) {
        for block in &mut self.blocks {
            for s in [&mut block.image, &mut block.encoder] {
                for m in [
                    &mut s.modulation,
                    &mut s.wq,
                    &mut s.wk,
                    &mut s.wv,
                    &mut s.wo,
                    &mut s.mlp_in,
                    &mut s.mlp_out,
                ] {
                    m.as_mut_slice().fill(0.0);
                }
            }
        }
    }

    pub(crate) fn shapes_match(&self, config: &EngineConfig) -> Option<String> {
        let d = config.width;
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            (m.shape() != shape).then(|| format!("{name} is {:?}, expected {shape:?}", m.shape()))
        };
        let mut checks = vec![
            expect("time_in", &self.time_in, (d, d)),
            expect("time_out", &self.time_out, (d, d)),
            expect("latent_in", &self.latent_in, (d, d)),
            expect("image_pos", &self.image_pos, (config.image_tokens(), d)),
            expect("token_embed", &self.token_embed, (config.vocab, d)),
            expect("encoder_pos", &self.encoder_pos, (config.encoder_len, d)),
            expect("final_modulation", &self.final_modulation, (d, 2 * d)),
            expect("final_proj", &self.final_proj, (d, d)),
        ];
        if self.blocks.len() != config.depth {
            checks.push(Some(format!(
                "{} blocks, expected {}",
                self.blocks.len(),
                config.depth
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, s) in [("image", &b.image), ("encoder", &b.encoder)] {
                let p = |n: &str| format!("blocks[{i}].{tag}.{n}");
                checks.extend([
                    expect(&p("modulation"), &s.modulation, (d, MODULATION_CHUNKS * d)),
                    expect(&p("wq"), &s.wq, (d, d)),
                    expect(&p("wk"), &s.wk, (d, d)),
                    expect(&p("wv"), &s.wv, (d, d)),
                    expect(&p("wo"), &s.wo, (d, d)),
                    expect(&p("mlp_in"), &s.mlp_in, (d, MLP_RATIO * d)),
                    expect(&p("mlp_out"), &s.mlp_out, (MLP_RATIO * d, d)),
                ]);
            }
        }
        checks.into_iter().flatten().next()
    }
}
