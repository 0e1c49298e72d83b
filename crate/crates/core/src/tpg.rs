//! Target prompt generation: attention over masked prompt banks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{pooled_raw_feature, BoundLinear, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::prompts::{BoundPromptBank, PromptBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpgConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub key_dim: usize,
}

impl Default for TpgConfig {
    fn default() -> Self {
        Self { hidden: 64, feature_dim: 32, key_dim: 16 }
    }
}

/// Feature encoder `g`, query and key maps.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPromptGenerator<T: Real = f32> {
    pub g_in: Linear<T>,
    pub g_out: Linear<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    /// Feed the domain mixture into the class slot of the projection and
    /// the class mixture into the domain slot.
    pub crossed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundTpg {
    g_in: BoundLinear,
    g_out: BoundLinear,
    query: BoundLinear,
    key: BoundLinear,
    crossed: bool,
}

/// Result of one attention read.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    /// Weight per bank row; exactly zero at excluded rows.
    pub weights: Vec<T>,
    /// `sum_j weights[j] * bank[j]`, shape `[m]`.
    pub mixture: Var,
}

/// Everything produced for one sample.
#[derive(Debug, Clone)]
pub struct Generated<T> {
    pub prompt: Var,
    pub domain: Attention<T>,
    pub class: Attention<T>,
}

impl<T: Real> TargetPromptGenerator<T> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        prompt_dim: usize,
        config: &TpgConfig,
        crossed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if config.hidden == 0 || config.feature_dim == 0 || config.key_dim == 0 {
            return Err(Error::Config("tpg dimensions must be at least 1".into()));
        }
        Ok(Self {
            g_in: Linear::random(input_dim, config.hidden, rng),
            g_out: Linear::random(config.hidden, config.feature_dim, rng),
            query: Linear::random(config.feature_dim, config.key_dim, rng),
            key: Linear::random(prompt_dim, config.key_dim, rng),
            crossed,
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        let [a, b] = self.g_in.tensors();
        let [c, d] = self.g_out.tensors();
        let [e, f] = self.query.tensors();
        let [g, h] = self.key.tensors();
        [a, b, c, d, e, f, g, h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        let [a, b] = self.g_in.tensors_mut();
        let [c, d] = self.g_out.tensors_mut();
        let [e, f] = self.query.tensors_mut();
        let [g, h] = self.key.tensors_mut();
        [a, b, c, d, e, f, g, h]
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn cast<U: Real>(&self) -> TargetPromptGenerator<U> {
        TargetPromptGenerator {
            g_in: self.g_in.cast(),
            g_out: self.g_out.cast(),
            query: self.query.cast(),
            key: self.key.cast(),
            crossed: self.crossed,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundTpg {
        BoundTpg {
            g_in: self.g_in.bind(tape),
            g_out: self.g_out.bind(tape),
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            crossed: self.crossed,
        }
    }

    /// Prompt for one token grid, off any caller tape. Nothing is masked.
    pub fn generate(&self, bank: &PromptBank<T>, tokens: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(tokens);
        let banks = frozen_bank(&mut tape, bank);
        let none_d = vec![false; bank.num_domains()];
        let none_c = vec![false; bank.num_classes()];
        let out = bound.generate(&mut tape, &banks, x, &none_c, &none_d)?;
        Ok(tape.value(out.prompt).to_vec())
    }
}

/// Records `U`, `V` and the projection as constants.
pub fn frozen_bank<T: Real>(tape: &mut Tape<T>, bank: &PromptBank<T>) -> BoundPromptBank {
    BoundPromptBank {
        u: tape.constant(&bank.u),
        v: tape.constant(&bank.v),
        projection: BoundLinear {
            weight: tape.constant(&bank.projection.weight),
            bias: tape.constant(&bank.projection.bias),
        },
    }
}

impl BoundTpg {
    /// Parameter vars in the order of [`TargetPromptGenerator::tensors`].
    /// Rebuilds a generator from variables in `vars()` order.
    pub fn from_vars(v: [Var; 8], crossed: bool) -> Self {
        let l = |i: usize| BoundLinear { weight: v[2 * i], bias: v[2 * i + 1] };
        Self { g_in: l(0), g_out: l(1), query: l(2), key: l(3), crossed }
    }

    pub fn vars(&self) -> [Var; 8] {
        let l = [self.g_in, self.g_out, self.query, self.key];
        [l[0].weight, l[0].bias, l[1].weight, l[1].bias, l[2].weight, l[2].bias, l[3].weight, l[3].bias]
    }

    /// `I_g = g(pooled tokens)`. The pooled feature is standardized first so
    /// the perceptron sees unit-scale input whatever the data scale.
    pub fn feature<T: Real>(&self, tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
        let pooled = pooled_raw_feature(tape, tokens)?;
        let pooled = tape.layer_norm(pooled);
        let h = self.g_in.forward(tape, pooled)?;
        let h = tape.relu(h);
        self.g_out.forward(tape, h)
    }

    /// Scaled dot-product read of `bank` with rows in `excluded` removed from
    /// the softmax support.
    pub fn attend<T: Real>(&self, tape: &mut Tape<T>, feature: Var, bank: Var, excluded: &[bool]) -> Result<Attention<T>> {
        let rows = tape.shape(bank)[0];
        if excluded.len() != rows {
            return Err(Error::contract("attend", format!("mask of length {} for {rows} rows", excluded.len())));
        }
        let keep: Vec<usize> = (0..rows).filter(|&i| !excluded[i]).collect();
        if keep.is_empty() {
            return Err(Error::Infeasible(format!("every one of the {rows} bank rows is masked")));
        }
        let masked = tape.mask_rows(bank, excluded)?;
        let support = tape.gather_rows(masked, &keep)?;
        let q = self.query.forward(tape, feature)?;
        // keys read standardized rows: prompt rows start near N(0, 0.02^2)
        // and would otherwise give nearly equal logits
        let standardized = tape.layer_norm(support);
        let k = self.key.forward(tape, standardized)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let dk = tape.value(q).len();
        let logits = tape.scale(logits, T::of(1.0 / (dk as f64).sqrt()));
        let w = tape.softmax(logits)?;
        let mixture = tape.matmul(w, support)?;
        let mut weights = vec![T::zero(); rows];
        for (&i, &x) in keep.iter().zip(tape.value(w)) {
            weights[i] = x;
        }
        Ok(Attention { weights, mixture })
    }

    /// Attends over both masked banks and projects the mixtures through the
    /// phase-1 projection, class part first.
    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bank: &BoundPromptBank,
        tokens: Var,
        exclude_classes: &[bool],
        exclude_domains: &[bool],
    ) -> Result<Generated<T>> {
        let f = self.feature(tape, tokens)?;
        let domain = self.attend(tape, f, bank.u, exclude_domains)?;
        let class = self.attend(tape, f, bank.v, exclude_classes)?;
        let prompt = if self.crossed {
            bank.project(tape, domain.mixture, class.mixture)?
        } else {
            bank.project(tape, class.mixture, domain.mixture)?
        };
        Ok(Generated { prompt, domain, class })
    }
}
