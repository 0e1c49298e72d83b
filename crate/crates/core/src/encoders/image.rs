use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Block, BoundBlock, BoundLinear, EncoderConfig, Linear};
use crate::error::{Error, Result};
use crate::numerics::{fingerprint, Real, Tape, Tensor, Var};

/// Frozen token-grid encoder: positional encodings, transformer blocks,
/// mean pooling, a linear head and L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder<T: Real = f32> {
    tokens: usize,
    input_dim: usize,
    positions: Tensor<T>,
    blocks: Vec<Block<T>>,
    head: Linear<T>,
    seed: u64,
}

/// Encoder weights recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundImageEncoder {
    positions: Var,
    blocks: Vec<BoundBlock>,
    head: BoundLinear,
}

impl<T: Real> ImageEncoder<T> {
    pub fn new(config: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.image_seed);
        let positions = Tensor::randn(&[config.tokens, config.input_dim], config.position_std, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block::random(config.input_dim, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let head = Linear::random(config.input_dim, config.embed_dim, &mut rng);
        Self { tokens: config.tokens, input_dim: config.input_dim, positions, blocks, head, seed: config.image_seed }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cast<U: Real>(&self) -> ImageEncoder<U> {
        ImageEncoder {
            tokens: self.tokens,
            input_dim: self.input_dim,
            positions: self.positions.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            head: self.head.cast(),
            seed: self.seed,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundImageEncoder {
        BoundImageEncoder {
            positions: tape.constant(&self.positions),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            head: BoundLinear { weight: tape.constant(&self.head.weight), bias: tape.constant(&self.head.bias) },
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut all = vec![&self.positions];
        for b in &self.blocks {
            all.extend(b.tensors());
        }
        all.extend(self.head.tensors());
        fingerprint(&all)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens != [self.tokens, self.input_dim] {
            return Err(Error::contract(
                "encode_image",
                format!("tokens {tokens:?} do not match encoder [{}, {}]", self.tokens, self.input_dim),
            ));
        }
        Ok(())
    }

    /// Unit-norm embedding of one token grid, on a throwaway tape.
    pub fn encode(&self, tokens: &Tensor<T>, prompt: Option<&[T]>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(tokens);
        let p = prompt.map(|p| tape.constant_vec(p.to_vec()));
        let f = bound.encode(&mut tape, self, x, p)?;
        Ok(tape.value(f).to_vec())
    }
}

impl BoundImageEncoder {
    /// `prompt`, when given, is added to every token row before the first
    /// block.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        encoder: &ImageEncoder<T>,
        tokens: Var,
        prompt: Option<Var>,
    ) -> Result<Var> {
        encoder.check_tokens(tape.shape(tokens))?;
        let mut x = tokens;
        if let Some(p) = prompt {
            if tape.value(p).len() != encoder.input_dim {
                return Err(Error::contract(
                    "encode_image",
                    format!("prompt {:?} does not match input dim {}", tape.shape(p), encoder.input_dim),
                ));
            }
            x = tape.add_row(x, p)?;
        }
        x = tape.add(x, self.positions)?;
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        let pooled = tape.mean(x, 0)?;
        let e = self.head.forward(tape, pooled)?;
        Ok(tape.normalize(e))
    }
}

/// Mean over token rows of the raw input grid.
pub fn pooled_raw_feature<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    tape.mean(tokens, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_norm, Tensor};
    use rand::SeedableRng;

    fn setup() -> (ImageEncoder<f32>, ChaCha8Rng) {
        (ImageEncoder::new(&EncoderConfig::default()), ChaCha8Rng::seed_from_u64(77))
    }

    #[test]
    fn zero_prompt_matches_no_prompt() {
        let (enc, mut rng) = setup();
        for _ in 0..5 {
            let x = Tensor::randn(&[16, 64], 1.0, &mut rng);
            assert_eq!(enc.encode(&x, None).unwrap(), enc.encode(&x, Some(&[0.0; 64])).unwrap());
        }
    }

    #[test]
    fn output_is_unit_norm_and_deterministic() {
        let (enc, mut rng) = setup();
        for _ in 0..20 {
            let x = Tensor::randn(&[16, 64], 1.0, &mut rng);
            let p = Tensor::<f32>::randn(&[64], 0.5, &mut rng);
            let a = enc.encode(&x, Some(p.data())).unwrap();
            assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
            let again = ImageEncoder::<f32>::new(&EncoderConfig::default()).encode(&x, Some(p.data())).unwrap();
            assert_eq!(a, again);
        }
    }

    #[test]
    fn distinct_prompts_give_distinct_outputs() {
        let (enc, mut rng) = setup();
        let mut same = 0;
        for _ in 0..100 {
            let x = Tensor::randn(&[16, 64], 1.0, &mut rng);
            let p = Tensor::<f32>::randn(&[64], 0.3, &mut rng);
            let q = Tensor::<f32>::randn(&[64], 0.3, &mut rng);
            if enc.encode(&x, Some(p.data())).unwrap() == enc.encode(&x, Some(q.data())).unwrap() {
                same += 1;
            }
        }
        assert_eq!(same, 0);
    }

    #[test]
    fn token_order_matters() {
        let (enc, mut rng) = setup();
        for _ in 0..10 {
            let x = Tensor::<f32>::randn(&[16, 64], 1.0, &mut rng);
            let mut y = x.clone();
            let (r0, r1) = (x.row(0).to_vec(), x.row(1).to_vec());
            y.row_mut(0).copy_from_slice(&r1);
            y.row_mut(1).copy_from_slice(&r0);
            assert_ne!(enc.encode(&x, None).unwrap(), enc.encode(&y, None).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_is_a_contract_violation() {
        let (enc, mut rng) = setup();
        let x = Tensor::randn(&[16, 64], 1.0, &mut rng);
        assert_eq!(enc.encode(&x, Some(&[0.0; 3])).unwrap_err().category(), "contract");
        let bad = Tensor::randn(&[8, 64], 1.0, &mut rng);
        assert_eq!(enc.encode(&bad, None).unwrap_err().category(), "contract");
    }

    #[test]
    fn pooled_raw_feature_examples() {
        let mut t = Tape::<f32>::new();
        let rows = t.constant(&Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let p = pooled_raw_feature(&mut t, rows).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0]);

        let zeros = t.constant(&Tensor::zeros(&[4, 3]));
        let p = pooled_raw_feature(&mut t, zeros).unwrap();
        assert_eq!(t.value(p), &[0.0; 3]);

        let x = Tensor::<f32>::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = Tensor::<f32>::matrix(3, 2, vec![5.0, 6.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let (vx, vy) = (t.constant(&x), t.constant(&y));
        let (px, py) = (pooled_raw_feature(&mut t, vx).unwrap(), pooled_raw_feature(&mut t, vy).unwrap());
        assert_eq!(t.value(px), t.value(py));
    }
}
