//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
pub mod io;
mod real;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn sq_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn l2_norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// SHA-256 over shapes and values, for frozen-weight audits.
pub fn fingerprint<T: Real>(tensors: &[&Tensor<T>]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in tensors {
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.f64().to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Unit-length copy of `a`; the flag is `false` for a zero vector, which is
/// returned unchanged.
pub fn normalized<T: Real>(a: &[T]) -> (Vec<T>, bool) {
    let n = l2_norm(a);
    if n > T::zero() {
        (a.iter().map(|&x| x / n).collect(), true)
    } else {
        (a.to_vec(), false)
    }
}
