//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Compare the reverse-mode gradient of a scalar-valued map against central
/// finite differences at perturbation `eps`. Returns the max relative error
/// over coordinates (absolute error where both gradients are below 1e-8).
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.leaf(x);
    let out = f(&mut g, xid)?;
    g.backward(out)?;
    let analytic = g.grad(xid).to_vec();

    let eval = |values: &[f64], f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor::from_vec(x.shape.clone(), values.to_vec())?;
        let xid = g.leaf(&t);
        let out = f(&mut g, xid)?;
        Ok(g.value_scalar(out))
    };

    let mut max_err = 0.0f64;
    let mut values = x.values.clone();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let plus = eval(&values, &mut f)?;
        values[i] = orig - eps;
        let minus = eval(&values, &mut f)?;
        values[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic[i];
        let denom = fd.abs().max(an.abs());
        let err = if denom < 1e-8 {
            (fd - an).abs()
        } else {
            (fd - an).abs() / denom
        };
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |g, xid| {
                let sq = g.mul(xid, xid)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {}", err);

        // analytic gradient is [2, 4]
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let sq = g.mul(xid, xid).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert!((g.grad(xid)[0] - 2.0).abs() < 1e-12);
        assert!((g.grad(xid)[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let c = g.scale(xid, 0.0);
        let s = g.sum(c);
        g.backward(s).unwrap();
        let norm: f64 = g.grad(xid).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-10);
    }

    #[test]
    fn two_layer_network_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = Tensor::randn(vec![4, 6], 0.5, &mut rng);
        let w2 = Tensor::randn(vec![6, 1], 0.5, &mut rng);
        let x = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        // check gradient wrt the input of a small MLP
        let err = finite_difference_check(
            |g, xid| {
                let w1n = g.leaf(&w1);
                let w2n = g.leaf(&w2);
                let h = g.matmul(xid, w1n)?;
                let h = g.gelu(h);
                let o = g.matmul(h, w2n)?;
                Ok(g.sum(o))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {}", err);
    }

    #[test]
    fn matmul_gradient_matches_fd_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let a = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let err = finite_difference_check(
            |g, aid| {
                let bn = g.leaf(&b);
                let c = g.matmul(aid, bn)?;
                Ok(g.sum(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let gain = Tensor::randn(vec![8], 0.3, &mut rng);
        let bias = Tensor::randn(vec![8], 0.3, &mut rng);
        let err = finite_difference_check(
            |g, xid| {
                let gn = g.leaf(&gain);
                let bn = g.leaf(&bias);
                let y = g.layer_norm(xid, gn, bn, 1e-5)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {}", err);
    }
}
