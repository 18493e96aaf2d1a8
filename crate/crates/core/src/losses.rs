//! Cosine pair loss and two-class cross-entropy.
//!
//! The pair loss is `1 - cos(x1, x2)` for a same-utterance pair (label +1)
//! and `max(0, cos(x1, x2))` for a different-utterance pair (label -1).
//! There is no margin on the negative branch.

use thiserror::Error;

use crate::nn::{Real, Tensor4};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("degenerate embedding: vector {which} has zero norm")]
    Degenerate { which: usize },
    #[error("embedding lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("batch of {rows} embeddings cannot hold {pairs} pairs")]
    BatchShape { rows: usize, pairs: usize },
    #[error("non-finite logits")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Norms below this are treated as zero.
const NORM_EPS: f64 = 1e-12;

/// Pair label: +1 same utterance, -1 different utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn value(self) -> i8 {
        match self {
            PairLabel::Same => 1,
            PairLabel::Different => -1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            1 => Some(PairLabel::Same),
            -1 => Some(PairLabel::Different),
            _ => None,
        }
    }
}

/// Two classes of the countermeasure. Class index 0 is bona fide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Bonafide,
    Spoof,
}

impl Class {
    pub fn index(self) -> usize {
        match self {
            Class::Bonafide => 0,
            Class::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Bonafide => "bonafide",
            Class::Spoof => "spoof",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bonafide" => Some(Class::Bonafide),
            "spoof" => Some(Class::Spoof),
            _ => None,
        }
    }
}

fn norms<T: Real>(x1: &[T], x2: &[T]) -> Result<(f64, f64, f64)> {
    if x1.len() != x2.len() {
        return Err(LossError::LengthMismatch(x1.len(), x2.len()));
    }
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for (a, b) in x1.iter().zip(x2) {
        let (a, b) = (a.f64(), b.f64());
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    let (n1, n2) = (n1.sqrt(), n2.sqrt());
    if n1 < NORM_EPS {
        return Err(LossError::Degenerate { which: 1 });
    }
    if n2 < NORM_EPS {
        return Err(LossError::Degenerate { which: 2 });
    }
    Ok((dot, n1, n2))
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine<T: Real>(x1: &[T], x2: &[T]) -> Result<f64> {
    let (dot, n1, n2) = norms(x1, x2)?;
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLossOutput<T> {
    pub loss: f64,
    pub cosine: f64,
    pub grad_x1: Vec<T>,
    pub grad_x2: Vec<T>,
}

pub fn pair_loss<T: Real>(x1: &[T], x2: &[T], label: PairLabel) -> Result<PairLossOutput<T>> {
    let (dot, n1, n2) = norms(x1, x2)?;
    let cos = (dot / (n1 * n2)).clamp(-1.0, 1.0);
    let (loss, dcos) = match label {
        PairLabel::Same => (1.0 - cos, -1.0),
        PairLabel::Different if cos > 0.0 => (cos, 1.0),
        PairLabel::Different => (0.0, 0.0),
    };
    let grad = |own: &[T], other: &[T], own_norm: f64| -> Vec<T> {
        if dcos == 0.0 {
            return vec![T::zero(); own.len()];
        }
        // d cos / d own = other / (|own||other|) - cos * own / |own|^2
        let inv = 1.0 / (n1 * n2);
        let self_term = cos / (own_norm * own_norm);
        own.iter()
            .zip(other)
            .map(|(a, b)| T::of(dcos * (b.f64() * inv - self_term * a.f64())))
            .collect()
    };
    Ok(PairLossOutput {
        loss,
        cosine: cos,
        grad_x1: grad(x1, x2, n1),
        grad_x2: grad(x2, x1, n2),
    })
}

/// Mean pair loss over a batch whose first half holds the `a` segments and
/// second half the `b` segments, in matching order. Returns the loss and
/// its gradient with respect to the embeddings.
pub fn pair_loss_batch<T: Real>(embeddings: &Tensor4<T>, labels: &[PairLabel]) -> Result<(f64, Tensor4<T>)> {
    let rows = embeddings.batch();
    let pairs = labels.len();
    if pairs == 0 || rows != 2 * pairs {
        return Err(LossError::BatchShape { rows, pairs });
    }
    let mut grad = Tensor4::zeros(embeddings.dims());
    let dim = embeddings.item_len();
    let scale = 1.0 / pairs as f64;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let out = pair_loss(embeddings.item(i), embeddings.item(i + pairs), label)?;
        total += out.loss;
        let g = grad.data_mut();
        for (slot, v) in g[i * dim..(i + 1) * dim].iter_mut().zip(&out.grad_x1) {
            *slot = T::of(v.f64() * scale);
        }
        let j = i + pairs;
        for (slot, v) in g[j * dim..(j + 1) * dim].iter_mut().zip(&out.grad_x2) {
            *slot = T::of(v.f64() * scale);
        }
    }
    Ok((total * scale, grad))
}

/// Softmax cross-entropy on two logits, in log-sum-exp form. The gradient
/// is `softmax - onehot`.
pub fn cross_entropy<T: Real>(logits: &[T], class: Class) -> Result<(f64, [T; 2])> {
    if logits.len() != 2 {
        return Err(LossError::LengthMismatch(logits.len(), 2));
    }
    let z = [logits[0].f64(), logits[1].f64()];
    if !(z[0].is_finite() && z[1].is_finite()) {
        return Err(LossError::NonFinite);
    }
    let k = class.index();
    let other = 1 - k;
    // loss = log(1 + exp(z_o - z_k)), evaluated without cancellation
    let d = z[other] - z[k];
    let loss = if d > 0.0 { d + (-d).exp().ln_1p() } else { d.exp().ln_1p() };
    // softmax probability of the wrong class
    let p_other = if d > 0.0 { 1.0 / (1.0 + (-d).exp()) } else { d.exp() / (1.0 + d.exp()) };
    let mut grad = [T::zero(); 2];
    grad[k] = T::of(-p_other);
    grad[other] = T::of(p_other);
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch of `(N, 1, 1, 2)` logits.
pub fn cross_entropy_batch<T: Real>(logits: &Tensor4<T>, classes: &[Class]) -> Result<(f64, Tensor4<T>)> {
    let n = logits.batch();
    if n != classes.len() || logits.item_len() != 2 {
        return Err(LossError::BatchShape { rows: n, pairs: classes.len() });
    }
    let mut grad = Tensor4::zeros(logits.dims());
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &class) in classes.iter().enumerate() {
        let (loss, g) = cross_entropy(logits.item(i), class)?;
        total += loss;
        grad.data_mut()[2 * i] = T::of(g[0].f64() * scale);
        grad.data_mut()[2 * i + 1] = T::of(g[1].f64() * scale);
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3f64, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap() - SQRT_HALF).abs() < 1e-15);
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]), Err(LossError::Degenerate { which: 1 }));
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 0.0]), Err(LossError::Degenerate { which: 2 }));
    }

    #[test]
    fn pair_loss_examples() {
        let same = pair_loss(&[0.5f64, 1.5, -1.0], &[0.5, 1.5, -1.0], PairLabel::Same).unwrap();
        assert!(same.loss.abs() < 1e-15);
        let neg = pair_loss(&[1.0f64, 0.0], &[-0.5, 3f64.sqrt() / 2.0], PairLabel::Different).unwrap();
        assert!((neg.cosine + 0.5).abs() < 1e-12);
        assert_eq!(neg.loss, 0.0);
        assert!(neg.grad_x1.iter().chain(&neg.grad_x2).all(|&g| g == 0.0));
        let hinge = pair_loss(&[1.0f64, 0.0], &[1.0, 1.0], PairLabel::Different).unwrap();
        assert!((hinge.loss - SQRT_HALF).abs() < 1e-15);
        let ortho = pair_loss(&[1.0f64, 0.0], &[0.0, 1.0], PairLabel::Different).unwrap();
        assert_eq!(ortho.loss, 0.0);
        assert!(ortho.grad_x1.iter().all(|&g| g == 0.0));
        assert!(pair_loss(&[0.0f64; 3], &[1.0; 3], PairLabel::Same).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        for class in [Class::Bonafide, Class::Spoof] {
            let (l, g) = cross_entropy(&[0.0f64, 0.0], class).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((g[0] + g[1]).abs() < 1e-15);
        }
        let (l, g) = cross_entropy(&[10.0f64, -10.0], Class::Bonafide).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((l - want).abs() < 1e-18, "{l} vs {want}");
        assert!((l - 2.06e-9).abs() < 1e-11);
        assert!((g[0] + g[1]).abs() < 1e-15);
        assert!(cross_entropy(&[f64::NAN, 0.0], Class::Spoof).is_err());
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += eps;
        m[i] -= eps;
        (f(&p) - f(&m)) / (2.0 * eps)
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2)
    }

    proptest! {
        #[test]
        fn pair_loss_gradient_matches_finite_differences(
            x1 in vec_strategy(5), x2 in vec_strategy(5), same in any::<bool>()
        ) {
            let label = if same { PairLabel::Same } else { PairLabel::Different };
            let out = pair_loss(&x1, &x2, label).unwrap();
            // central differences straddling the hinge are not informative
            prop_assume!(same || out.cosine.abs() > 1e-3);
            for i in 0..5 {
                let n1 = central_diff(|v| pair_loss(v, &x2, label).unwrap().loss, &x1, i, 1e-5);
                let n2 = central_diff(|v| pair_loss(&x1, v, label).unwrap().loss, &x2, i, 1e-5);
                let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                prop_assert!(rel(out.grad_x1[i], n1) < 1e-6, "x1[{}]: {} vs {}", i, out.grad_x1[i], n1);
                prop_assert!(rel(out.grad_x2[i], n2) < 1e-6, "x2[{}]: {} vs {}", i, out.grad_x2[i], n2);
            }
        }

        #[test]
        fn cross_entropy_gradient_matches_finite_differences(
            z in prop::collection::vec(-8.0f64..8.0, 2), spoof in any::<bool>()
        ) {
            let class = if spoof { Class::Spoof } else { Class::Bonafide };
            let (_, g) = cross_entropy(&z, class).unwrap();
            for i in 0..2 {
                let n = central_diff(|v| cross_entropy(v, class).unwrap().0, &z, i, 1e-5);
                prop_assert!((g[i] - n).abs() / g[i].abs().max(n.abs()).max(1e-6) < 1e-6);
            }
        }

        #[test]
        fn pair_loss_is_symmetric_bounded_and_scale_free(
            x1 in vec_strategy(8), x2 in vec_strategy(8), same in any::<bool>(),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let label = if same { PairLabel::Same } else { PairLabel::Different };
            let l = pair_loss(&x1, &x2, label).unwrap().loss;
            let upper = if same { 2.0 } else { 1.0 };
            prop_assert!((0.0..=upper).contains(&l), "loss {} outside [0, {}]", l, upper);
            prop_assert!((l - pair_loss(&x2, &x1, label).unwrap().loss).abs() < 1e-12);
            let (a, b) = (10f64.powf(a), 10f64.powf(b));
            let s1: Vec<f64> = x1.iter().map(|v| v * a).collect();
            let s2: Vec<f64> = x2.iter().map(|v| v * b).collect();
            prop_assert!((l - pair_loss(&s1, &s2, label).unwrap().loss).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_reduction_is_mean() {
        let e = Tensor4::from_vec([4, 1, 1, 2], vec![1.0f64, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 2.0]);
        let labels = [PairLabel::Different, PairLabel::Same];
        let (loss, grad) = pair_loss_batch(&e, &labels).unwrap();
        let a = pair_loss(&[1.0f64, 0.0], &[1.0, 1.0], labels[0]).unwrap();
        let b = pair_loss(&[1.0f64, 1.0], &[0.0, 2.0], labels[1]).unwrap();
        assert!((loss - (a.loss + b.loss) / 2.0).abs() < 1e-15);
        assert!((grad.item(0)[0] - a.grad_x1[0] / 2.0).abs() < 1e-15);
        assert!((grad.item(3)[1] - b.grad_x2[1] / 2.0).abs() < 1e-15);
        assert!(pair_loss_batch(&e, &[PairLabel::Same]).is_err());
    }
}
