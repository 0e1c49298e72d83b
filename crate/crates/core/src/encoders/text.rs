use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Block, BoundBlock, BoundLinear, EncoderConfig, Linear};
use crate::error::{Error, Result};
use crate::numerics::{fingerprint, Real, Tape, Tensor, Var};

/// Fixed tokens standing for the words of "A photo of".
pub const PREFIX_TOKENS: usize = 3;

/// Token sequence `prefix, class, context_1..context_N` per (class, domain).
///
/// Only `domain_context` (`[domains, N, text_dim]`) is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTemplate<T: Real = f32> {
    pub prefix: Tensor<T>,
    pub class_embeddings: Tensor<T>,
    pub domain_context: Tensor<T>,
}

impl<T: Real> SemanticTemplate<T> {
    pub fn num_classes(&self) -> usize {
        self.class_embeddings.shape()[0]
    }

    pub fn num_domains(&self) -> usize {
        self.domain_context.shape()[0]
    }

    pub fn context_len(&self) -> usize {
        self.domain_context.shape()[1]
    }

    pub fn seq_len(&self) -> usize {
        PREFIX_TOKENS + 1 + self.context_len()
    }
}

/// Frozen text transformer over the semantic template.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder<T: Real = f32> {
    pub template: SemanticTemplate<T>,
    positions: Tensor<T>,
    blocks: Vec<Block<T>>,
    head: Linear<T>,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct BoundTextEncoder {
    prefix: Var,
    classes: Var,
    context: Var,
    positions: Var,
    blocks: Vec<BoundBlock>,
    head: BoundLinear,
    context_len: usize,
}

impl BoundTextEncoder {
    /// The tape var holding the flattened `[domains * N, text_dim]` context.
    pub fn context(&self) -> Var {
        self.context
    }

    /// Swaps in another flattened `[domains * N, D_txt]` context.
    pub fn with_context(self, context: Var) -> Self {
        Self { context, ..self }
    }
}

impl<T: Real> TextEncoder<T> {
    pub fn new(config: &EncoderConfig, num_classes: usize, num_domains: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.text_seed);
        let dt = config.text_dim;
        let prefix = Tensor::randn(&[PREFIX_TOKENS, dt], 1.0, &mut rng);
        let class_embeddings = Tensor::randn(&[num_classes, dt], 1.0, &mut rng);
        let domain_context = Tensor::randn(&[num_domains, config.context_len, dt], 0.02, &mut rng);
        let seq = PREFIX_TOKENS + 1 + config.context_len;
        let positions = Tensor::randn(&[seq, dt], 0.1, &mut rng);
        let blocks = (0..config.layers).map(|_| Block::random(dt, config.heads, config.ff_hidden, &mut rng)).collect();
        let head = Linear::random(dt, config.embed_dim, &mut rng);
        Self {
            template: SemanticTemplate { prefix, class_embeddings, domain_context },
            positions,
            blocks,
            head,
            seed: config.text_seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cast<U: Real>(&self) -> TextEncoder<U> {
        TextEncoder {
            template: SemanticTemplate {
                prefix: self.template.prefix.cast(),
                class_embeddings: self.template.class_embeddings.cast(),
                domain_context: self.template.domain_context.cast(),
            },
            positions: self.positions.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            head: self.head.cast(),
            seed: self.seed,
        }
    }

    /// Fingerprint of everything except `domain_context`.
    pub fn frozen_fingerprint(&self) -> String {
        let mut all = vec![&self.template.prefix, &self.template.class_embeddings, &self.positions];
        for b in &self.blocks {
            all.extend(b.tensors());
        }
        all.extend(self.head.tensors());
        fingerprint(&all)
    }

    /// Records the encoder; `domain_context` takes part in differentiation
    /// when the tensor is flagged `requires_grad`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundTextEncoder> {
        let t = &self.template;
        let flat = t.domain_context.clone().reshape(vec![t.num_domains() * t.context_len(), t.prefix.shape()[1]])?;
        let mut flat = flat;
        flat.set_requires_grad(t.domain_context.requires_grad());
        Ok(BoundTextEncoder {
            prefix: tape.constant(&t.prefix),
            classes: tape.constant(&t.class_embeddings),
            context: tape.leaf(&flat),
            positions: tape.constant(&self.positions),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            head: BoundLinear { weight: tape.constant(&self.head.weight), bias: tape.constant(&self.head.bias) },
            context_len: t.context_len(),
        })
    }

    /// Unit-norm text feature for one (class, domain), on a throwaway tape.
    pub fn encode(&self, class_id: usize, domain_id: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let f = bound.encode(&mut tape, self, class_id, domain_id)?;
        Ok(tape.value(f).to_vec())
    }

    /// Like [`TextEncoder::encode`], but refuses labels outside the
    /// training label sets. The text branch has no meaning for them.
    pub fn encode_seen(&self, class_id: usize, domain_id: usize, seen_classes: &[usize], seen_domains: &[usize]) -> Result<Vec<T>> {
        if !seen_classes.contains(&class_id) || !seen_domains.contains(&domain_id) {
            return Err(Error::Misuse(format!(
                "text features requested for unseen label (class {class_id}, domain {domain_id})"
            )));
        }
        self.encode(class_id, domain_id)
    }
}

impl BoundTextEncoder {
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, encoder: &TextEncoder<T>, class_id: usize, domain_id: usize) -> Result<Var> {
        let t = &encoder.template;
        if class_id >= t.num_classes() || domain_id >= t.num_domains() {
            return Err(Error::contract(
                "encode_text",
                format!("label ({class_id}, {domain_id}) outside [{}, {}]", t.num_classes(), t.num_domains()),
            ));
        }
        let class_row = tape.gather_rows(self.classes, &[class_id])?;
        let rows: Vec<usize> = (domain_id * self.context_len..(domain_id + 1) * self.context_len).collect();
        let context = tape.gather_rows(self.context, &rows)?;
        let seq = tape.concat(&[self.prefix, class_row, context], 0)?;
        let mut x = tape.add(seq, self.positions)?;
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        let last = tape.shape(x)[0] - 1;
        let read = tape.gather_rows(x, &[last])?;
        let read = tape.reshape(read, vec![t.prefix.shape()[1]])?;
        let e = self.head.forward(tape, read)?;
        Ok(tape.normalize(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_norm;

    fn encoder() -> TextEncoder<f64> {
        TextEncoder::new(&EncoderConfig::default(), 5, 3)
    }

    #[test]
    fn unit_norm_and_sequence_length() {
        let enc = encoder();
        assert_eq!(enc.template.seq_len(), 3 + 1 + 4);
        for c in 0..5 {
            for d in 0..3 {
                assert!((l2_norm(&enc.encode(c, d).unwrap()) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_context_rows_make_domains_interchangeable() {
        let mut enc = encoder();
        let (n, dt) = (enc.template.context_len(), enc.template.prefix.shape()[1]);
        let first: Vec<f64> = enc.template.domain_context.data()[..n * dt].to_vec();
        for d in 1..3 {
            enc.template.domain_context.data_mut()[d * n * dt..(d + 1) * n * dt].copy_from_slice(&first);
        }
        assert_eq!(enc.encode(2, 0).unwrap(), enc.encode(2, 2).unwrap());
    }

    #[test]
    fn gradients_reach_context_only() {
        let mut enc = encoder();
        enc.template.domain_context.set_requires_grad(true);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape).unwrap();
        let f = bound.encode(&mut tape, &enc, 1, 2).unwrap();
        let s = tape.pick(f, 0).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(bound.classes).is_none());
        assert!(g.get(bound.prefix).is_none());
        let ctx = g.get(bound.context).unwrap();
        let (n, dt) = (enc.template.context_len(), 32);
        // only the rows of domain 2 move
        assert!(ctx[..2 * n * dt].iter().all(|&x| x == 0.0));
        assert!(ctx[2 * n * dt..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn unseen_labels_are_misuse() {
        let enc = encoder();
        assert_eq!(enc.encode_seen(4, 0, &[0, 1], &[0]).unwrap_err().category(), "misuse");
        assert!(enc.encode_seen(1, 0, &[0, 1], &[0]).is_ok());
        assert_eq!(enc.encode(9, 0).unwrap_err().category(), "contract");
    }
}
