//! Domain and class prompt bank with momentum copies.

use rand::Rng;

use crate::encoders::{BoundLinear, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Learnable prompts `U` (one row per seen domain) and `V` (one row per seen
/// class), their momentum twins, and the shared projection into the image
/// encoder's token space.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T: Real = f32> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub u_m: Tensor<T>,
    pub v_m: Tensor<T>,
    pub projection: Linear<T>,
    pub momentum_rate: f64,
}

/// Live bank tensors recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundPromptBank {
    pub u: Var,
    pub v: Var,
    pub projection: BoundLinear,
}

pub(crate) fn check_rate(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("momentum rate {alpha} outside (0, 1]")));
    }
    Ok(())
}

impl<T: Real> PromptBank<T> {
    pub fn new<R: Rng + ?Sized>(
        domains: usize,
        classes: usize,
        prompt_dim: usize,
        input_dim: usize,
        momentum_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_rate(momentum_rate)?;
        if domains == 0 || classes == 0 || prompt_dim == 0 {
            return Err(Error::Config("prompt bank needs at least one domain, class and channel".into()));
        }
        let u = Tensor::randn(&[domains, prompt_dim], 0.02, rng);
        let v = Tensor::randn(&[classes, prompt_dim], 0.02, rng);
        let mut weight = Tensor::randn(&[2 * prompt_dim, input_dim], 0.01, rng);
        for i in 0..(2 * prompt_dim).min(input_dim) {
            weight.data_mut()[i * input_dim + i] += T::one();
        }
        let projection = Linear { weight, bias: Tensor::zeros(&[input_dim]) };
        Ok(Self { u_m: u.clone(), v_m: v.clone(), u, v, projection, momentum_rate })
    }

    pub fn num_domains(&self) -> usize {
        self.u.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.v.rows()
    }

    pub fn prompt_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.bias.len()
    }

    pub fn cast<U: Real>(&self) -> PromptBank<U> {
        PromptBank {
            u: self.u.cast(),
            v: self.v.cast(),
            u_m: self.u_m.cast(),
            v_m: self.v_m.cast(),
            projection: self.projection.cast(),
            momentum_rate: self.momentum_rate,
        }
    }

    /// Flags `U`, `V` and the projection as trainable.
    pub fn set_trainable(&mut self, flag: bool) {
        self.u.set_requires_grad(flag);
        self.v.set_requires_grad(flag);
        self.projection.weight.set_requires_grad(flag);
        self.projection.bias.set_requires_grad(flag);
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundPromptBank {
        BoundPromptBank { u: tape.leaf(&self.u), v: tape.leaf(&self.v), projection: self.projection.bind(tape) }
    }

    fn check_index(&self, class: usize, domain: usize) -> Result<()> {
        if class >= self.num_classes() || domain >= self.num_domains() {
            return Err(Error::contract(
                "select_prompt",
                format!("(class {class}, domain {domain}) outside bank [{}, {}]", self.num_classes(), self.num_domains()),
            ));
        }
        Ok(())
    }

    /// `projection(concat(V[class], U[domain]))` computed off-tape. Indices
    /// are positions within the seen label lists.
    pub fn select_prompt(&self, class: usize, domain: usize, use_momentum: bool) -> Result<Vec<T>> {
        self.check_index(class, domain)?;
        let (u, v) = if use_momentum { (&self.u_m, &self.v_m) } else { (&self.u, &self.v) };
        let mut joined = v.row(class).to_vec();
        joined.extend_from_slice(u.row(domain));
        Ok(self.project(&joined))
    }

    /// Applies the projection to a `[2m]` vector.
    pub fn project(&self, joined: &[T]) -> Vec<T> {
        let w = &self.projection.weight;
        let cols = w.cols();
        let mut out = self.projection.bias.data().to_vec();
        for (i, &x) in joined.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += x * wij;
            }
        }
        debug_assert_eq!(out.len(), cols);
        out
    }

    /// Prompt built from the row means of `U` and `V`, used where no label is
    /// known and no generator is trained.
    pub fn uniform_prompt(&self) -> Vec<T> {
        let mean_rows = |t: &Tensor<T>| -> Vec<T> {
            let n = T::of(t.rows() as f64);
            (0..t.cols()).map(|j| (0..t.rows()).map(|i| t.row(i)[j]).sum::<T>() / n).collect()
        };
        let mut joined = mean_rows(&self.v);
        joined.extend(mean_rows(&self.u));
        self.project(&joined)
    }

    /// `theta_m <- (1 - alpha) theta_m + alpha theta` for both banks.
    pub fn momentum_update(&mut self) -> Result<()> {
        check_rate(self.momentum_rate)?;
        let a = T::of(self.momentum_rate);
        let keep = T::one() - a;
        for (m, live) in [(&mut self.u_m, &self.u), (&mut self.v_m, &self.v)] {
            if m.shape() != live.shape() {
                return Err(Error::shapes("momentum_update", m.shape(), live.shape()));
            }
            for (x, &y) in m.data_mut().iter_mut().zip(live.data()) {
                *x = keep * *x + a * y;
            }
        }
        Ok(())
    }
}

impl BoundPromptBank {
    /// Differentiable counterpart of [`PromptBank::select_prompt`] on the
    /// live prompts.
    pub fn select<T: Real>(&self, tape: &mut Tape<T>, class: usize, domain: usize) -> Result<Var> {
        let (nc, nd) = (tape.shape(self.v)[0], tape.shape(self.u)[0]);
        if class >= nc || domain >= nd {
            return Err(Error::contract(
                "select_prompt",
                format!("(class {class}, domain {domain}) outside bank [{nc}, {nd}]"),
            ));
        }
        let vc = tape.gather_rows(self.v, &[class])?;
        let ud = tape.gather_rows(self.u, &[domain])?;
        self.project(tape, vc, ud)
    }

    /// Projects a class part and a domain part, each `[m]` or `[1, m]`.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, class_part: Var, domain_part: Var) -> Result<Var> {
        let m = tape.value(class_part).len();
        let a = tape.reshape(class_part, vec![m])?;
        let b = tape.reshape(domain_part, vec![tape.value(domain_part).len()])?;
        let joined = tape.concat(&[a, b], 0)?;
        self.projection.forward(tape, joined)
    }
}

/// Zeroes the rows flagged in `excluded`; all other rows are copied bit for
/// bit.
pub fn mask_out<T: Real>(matrix: &Tensor<T>, excluded: &[bool]) -> Result<Tensor<T>> {
    if matrix.shape().len() != 2 || matrix.rows() != excluded.len() {
        return Err(Error::contract(
            "mask_out",
            format!("mask of length {} for shape {:?}", excluded.len(), matrix.shape()),
        ));
    }
    let mut out = matrix.clone();
    out.set_requires_grad(false);
    for (i, &gone) in excluded.iter().enumerate() {
        if gone {
            out.row_mut(i).iter_mut().for_each(|x| *x = T::zero());
        }
    }
    Ok(out)
}

/// One-hot exclusion mask of length `n`.
pub fn one_hot(n: usize, index: usize) -> Vec<bool> {
    (0..n).map(|i| i == index).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(alpha: f64) -> PromptBank<f64> {
        PromptBank::new(3, 4, 2, 6, alpha, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn concatenation_puts_class_first() {
        let mut b = bank(0.001);
        b.v.row_mut(1).copy_from_slice(&[1.0, 0.0]);
        b.u.row_mut(2).copy_from_slice(&[0.0, 1.0]);
        let mut w = Tensor::zeros(&[4, 6]);
        for i in 0..4 {
            w.data_mut()[i * 6 + i] = 1.0;
        }
        b.projection = Linear { weight: w, bias: Tensor::zeros(&[6]) };
        let p = b.select_prompt(1, 2, false).unwrap();
        assert_eq!(&p[..4], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(&p[4..], &[0.0, 0.0]);
    }

    #[test]
    fn momentum_matches_live_at_init() {
        let b = bank(0.001);
        for c in 0..4 {
            for d in 0..3 {
                assert_eq!(b.select_prompt(c, d, true).unwrap(), b.select_prompt(c, d, false).unwrap());
            }
        }
    }

    #[test]
    fn tape_and_plain_selection_agree() {
        let b = bank(0.001);
        let mut tape = Tape::new();
        let bound = b.bind(&mut tape);
        let p = bound.select(&mut tape, 2, 1).unwrap();
        let plain = b.select_prompt(2, 1, false).unwrap();
        for (x, y) in tape.value(p).iter().zip(&plain) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_copies_get_no_gradient() {
        let mut b = bank(0.001);
        b.set_trainable(true);
        let mut tape = Tape::new();
        let bound = b.bind(&mut tape);
        let um = tape.leaf(&b.u_m);
        let p = bound.select(&mut tape, 0, 0).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(um).is_none());
        assert!(g.get(bound.u).is_some());
    }

    #[test]
    fn momentum_rate_examples() {
        let mut b = bank(1.0);
        b.u.data_mut().iter_mut().for_each(|x| *x += 1.0);
        b.momentum_update().unwrap();
        assert_eq!(b.u_m, b.u);

        let mut b = bank(0.001);
        b.u_m.data_mut().iter_mut().for_each(|x| *x = 1.0);
        b.u.data_mut().iter_mut().for_each(|x| *x = 0.0);
        b.momentum_update().unwrap();
        assert!(b.u_m.data().iter().all(|&x| (x - 0.999).abs() < 1e-15));

        b.momentum_rate = 0.0;
        assert_eq!(b.momentum_update().unwrap_err().category(), "config");
        b.momentum_rate = 1.5;
        assert_eq!(b.momentum_update().unwrap_err().category(), "config");
    }

    #[test]
    fn out_of_range_selection() {
        let b = bank(0.5);
        assert_eq!(b.select_prompt(4, 0, false).unwrap_err().category(), "contract");
        assert_eq!(b.select_prompt(0, 3, true).unwrap_err().category(), "contract");
    }

    #[test]
    fn mask_out_examples() {
        let m = Tensor::<f64>::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = mask_out(&m, &[false, true, false]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        assert_eq!(mask_out(&m, &[false; 3]).unwrap(), m);
        assert!(mask_out(&m, &[true; 3]).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(mask_out(&m, &[true; 2]).unwrap_err().category(), "contract");
    }

    proptest! {
        #[test]
        fn selection_is_affine(seed in 0u64..1000, lambda in -3.0f64..3.0) {
            let mut b = bank(0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.projection.bias = Tensor::randn(&[6], 1.0, &mut rng);
            let base = b.select_prompt(1, 1, false).unwrap();
            b.v.row_mut(1).iter_mut().for_each(|x| *x *= lambda);
            b.u.row_mut(1).iter_mut().for_each(|x| *x *= lambda);
            let scaled = b.select_prompt(1, 1, false).unwrap();
            for ((s, a), bias) in scaled.iter().zip(&base).zip(b.projection.bias.data()) {
                prop_assert!((s - (lambda * (a - bias) + bias)).abs() < 1e-12);
            }
        }

        #[test]
        fn mask_out_keeps_other_rows(seed in 0u64..1000, mask in proptest::collection::vec(any::<bool>(), 5)) {
            let m = Tensor::<f32>::randn(&[5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let out = mask_out(&m, &mask).unwrap();
            for (i, &gone) in mask.iter().enumerate() {
                if gone {
                    prop_assert!(out.row(i).iter().all(|&x| x == 0.0));
                } else {
                    let same = out.row(i).iter().zip(m.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
            }
        }
    }
}
