//! Contextual inter-modal attention between two modality encodings of the
//! same video, and the self-attention variant used for uni-modal models.
//!
//! For encodings `X`, `Y` (both `u x d`):
//!
//! ```text
//! M1 = X Yᵀ          M2 = Y Xᵀ
//! N1 = softmax(M1)   N2 = softmax(M2)     (row-wise)
//! O1 = N1 Y          O2 = N2 X
//! A1 = O1 ⊙ X        A2 = O2 ⊙ Y
//! output = [A1, A2]  (u x 2d)
//! ```
//!
//! There is no scaling of the matching matrices and no masking: every
//! utterance attends over all utterances of its video, itself included.

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

/// All intermediate tensors of one attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPair {
    pub m1: Tensor,
    pub m2: Tensor,
    pub n1: Tensor,
    pub n2: Tensor,
    pub o1: Tensor,
    pub o2: Tensor,
    pub a1: Tensor,
    pub a2: Tensor,
    pub output: Tensor,
}

/// Graph handles for an attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub m1: Var,
    pub m2: Var,
    pub n1: Var,
    pub n2: Var,
    pub o1: Var,
    pub o2: Var,
    pub a1: Var,
    pub a2: Var,
    pub output: Var,
}

impl AttentionVars {
    pub fn record(&self, g: &Graph) -> AttentionPair {
        AttentionPair {
            m1: g.value(self.m1).clone(),
            m2: g.value(self.m2).clone(),
            n1: g.value(self.n1).clone(),
            n2: g.value(self.n2).clone(),
            o1: g.value(self.o1).clone(),
            o2: g.value(self.o2).clone(),
            a1: g.value(self.a1).clone(),
            a2: g.value(self.a2).clone(),
            output: g.value(self.output).clone(),
        }
    }
}

pub fn cim_attention_graph(g: &mut Graph, x: Var, y: Var) -> Result<AttentionVars> {
    let (xs, ys) = (g.shape(x), g.shape(y));
    if xs != ys {
        return Err(TensorError::Shape {
            op: "cim_attention",
            left: xs,
            right: ys,
        });
    }
    if xs.0 == 0 {
        return Err(TensorError::Invalid {
            op: "cim_attention",
            msg: "empty utterance sequence".into(),
        });
    }
    let yt = g.transpose(y);
    let xt = g.transpose(x);
    let m1 = g.matmul(x, yt)?;
    let m2 = g.matmul(y, xt)?;
    let n1 = g.row_softmax(m1)?;
    let n2 = g.row_softmax(m2)?;
    let o1 = g.matmul(n1, y)?;
    let o2 = g.matmul(n2, x)?;
    let a1 = g.mul(o1, x)?;
    let a2 = g.mul(o2, y)?;
    let output = g.concat_cols(&[a1, a2])?;
    Ok(AttentionVars {
        m1,
        m2,
        n1,
        n2,
        o1,
        o2,
        a1,
        a2,
        output,
    })
}

/// Self-attention over one modality: the inter-modal block with both
/// arguments set to the same encoding.
pub fn self_attention_graph(g: &mut Graph, x: Var) -> Result<AttentionVars> {
    cim_attention_graph(g, x, x)
}

pub fn cim_attention(x: &Tensor, y: &Tensor) -> Result<AttentionPair> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    Ok(cim_attention_graph(&mut g, xv, yv)?.record(&g))
}

pub fn self_attention(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = self_attention_graph(&mut g, xv)?;
    Ok(g.value(vars.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &[&[f64]], tol: f64) {
        let b = Tensor::from_rows(b).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b) < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn hand_worked_two_utterance_case() {
        let x = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
        let y = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        let p = cim_attention(&x, &y).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        close(&p.m1, &[&[1.0, 1.0], &[0.0, 0.0]], 1e-12);
        close(&p.n1, &[&[0.5, 0.5], &[0.5, 0.5]], 1e-12);
        close(&p.o1, &[&[1.0], &[1.0]], 1e-12);
        close(&p.a1, &[&[1.0], &[0.0]], 1e-12);
        close(&p.m2, &[&[1.0, 0.0], &[1.0, 0.0]], 1e-12);
        close(&p.n2, &[&[hi, lo], &[hi, lo]], 1e-12);
        close(&p.o2, &[&[hi], &[hi]], 1e-12);
        close(&p.a2, &[&[hi], &[hi]], 1e-12);
        close(&p.output, &[&[1.0, hi], &[0.0, hi]], 1e-12);
        assert!((hi - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn equal_inputs_give_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(4, 3, 1.0, &mut rng);
        let p = cim_attention(&x, &x).unwrap();
        assert_eq!(p.m1, p.m2);
        assert_eq!(p.n1, p.n2);
        assert_eq!(p.a1, p.a2);
        let s = self_attention(&x).unwrap();
        assert_eq!(s, p.output);
        assert_eq!(s.slice_cols(0, 3), s.slice_cols(3, 6));
    }

    #[test]
    fn single_utterance_is_pure_gating() {
        let x = Tensor::from_rows(&[[0.5, -2.0, 3.0]]).unwrap();
        let y = Tensor::from_rows(&[[4.0, 1.0, -1.0]]).unwrap();
        let p = cim_attention(&x, &y).unwrap();
        assert_eq!(p.n1, Tensor::scalar(1.0));
        assert_eq!(p.n2, Tensor::scalar(1.0));
        assert_eq!(p.a1, x.hadamard(&y).unwrap());
        let s = self_attention(&x).unwrap();
        let sq = x.hadamard(&x).unwrap();
        assert_eq!(s, Tensor::concat_cols(&[&sq, &sq]).unwrap());
    }

    #[test]
    fn swap_and_transpose_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Tensor::uniform(5, 3, 2.0, &mut rng);
            let y = Tensor::uniform(5, 3, 2.0, &mut rng);
            let xy = cim_attention(&x, &y).unwrap();
            let yx = cim_attention(&y, &x).unwrap();
            assert_eq!(xy.m2, xy.m1.transpose());
            assert_eq!(yx.a1, xy.a2);
            assert_eq!(yx.a2, xy.a1);
            assert_eq!(yx.n1, xy.n2);
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(cim_attention(&Tensor::zeros(3, 2), &Tensor::zeros(3, 3)).is_err());
        assert!(cim_attention(&Tensor::zeros(3, 2), &Tensor::zeros(2, 2)).is_err());
        assert!(cim_attention(&Tensor::zeros(0, 2), &Tensor::zeros(0, 2)).is_err());
    }

    #[test]
    fn block_gradient_check() {
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = 1 + (seed as usize % 4);
            let d = 1 + (seed as usize % 3);
            let inputs = vec![
                Tensor::uniform(u, d, 2.0, &mut rng),
                Tensor::uniform(u, d, 2.0, &mut rng),
                Tensor::uniform(u, 2 * d, 1.0, &mut rng),
            ];
            let err = grad_check(
                |g, xs| {
                    let a = cim_attention_graph(g, xs[0], xs[1])?;
                    let w = g.mul(a.output, xs[2])?;
                    Ok(g.sum(w))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }
}
