//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates forward values, so it stays independent of the
//! backward implementation it is used to verify. All checks run at 64-bit.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// Default perturbation for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Builds a scalar loss from leaves registered on the graph in input order.
pub trait LossFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<T: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> LossFn for T {}

/// Evaluate the scalar loss at the given input values.
pub fn eval_loss(inputs: &[Tensor<f64>], f: &impl LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Central finite-difference gradient of the loss w.r.t. every input element.
pub fn finite_difference(
    inputs: &[Tensor<f64>],
    h: f64,
    f: &impl LossFn,
) -> Result<Vec<Tensor<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let (r, c) = input.shape();
        let mut grad = Tensor::zeros(r, c);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].as_mut_slice()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].as_mut_slice()[i] -= h;
            let fp = eval_loss(&plus, f)?;
            let fm = eval_loss(&minus, f)?;
            grad.as_mut_slice()[i] = (fp - fm) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Analytic gradients via one reverse sweep.
pub fn analytic(inputs: &[Tensor<f64>], f: &impl LossFn) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect())
}

/// Worst relative disagreement between two gradient sets. Tiny absolute
/// differences (below 1e-9) count as exact so that zero gradients compare
/// cleanly against finite-difference noise.
pub fn max_rel_err(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.as_slice().iter().zip(tb.as_slice()) {
            let diff = (x - y).abs();
            if diff < 1e-9 {
                continue;
            }
            let rel = diff / (x.abs() + y.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Run analytic-vs-central-difference comparison; returns the max relative
/// error across all inputs.
pub fn check(inputs: &[Tensor<f64>], h: f64, f: impl LossFn) -> Result<f64> {
    let an = analytic(inputs, &f)?;
    let fd = finite_difference(inputs, h, &f)?;
    Ok(max_rel_err(&an, &fd))
}

/// Deterministic tensor of pseudo-random values in roughly [-1, 1].
pub fn well_spread(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    use rand::{Rng as _, SeedableRng as _};
    let mut rng = super::Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data)
}

#[allow(unused)]
fn _scalar_assert<S: Scalar>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Rng;
    use rand::SeedableRng as _;

    /// Contract a matrix output against fixed coefficients so the loss is a
    /// scalar with a distinct sensitivity per output element.
    fn contract(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
        let (r, c) = g.shape(out);
        let coeffs = g.constant(well_spread(r, c, seed));
        let prod = g.mul(out, coeffs)?;
        Ok(g.sum(prod))
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let inputs = [well_spread(3, 4, 1), well_spread(4, 2, 2)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y, 3)
        })
        .unwrap();
        assert!(err < 1e-6, "matmul rel err {}", err);
    }

    #[test]
    fn transposed_matmul_layouts_match_finite_differences() {
        let inputs = [well_spread(3, 4, 4), well_spread(5, 4, 5)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            contract(g, y, 6)
        })
        .unwrap();
        assert!(err < 1e-6, "matmul_nt rel err {}", err);

        let inputs = [well_spread(4, 3, 7), well_spread(4, 5, 8)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let y = g.matmul_tn(v[0], v[1])?;
            contract(g, y, 9)
        })
        .unwrap();
        assert!(err < 1e-6, "matmul_tn rel err {}", err);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let inputs = [well_spread(3, 5, 11), well_spread(3, 5, 12)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let s = g.add(v[0], v[1])?;
            let s = g.scale(s, -1.7);
            let m = g.mul(s, v[1])?;
            let e = g.gelu(m);
            contract(g, e, 13)
        })
        .unwrap();
        assert!(err < 1e-4, "elementwise rel err {}", err);
    }

    #[test]
    fn add_bias_and_scalar_gate_match_finite_differences() {
        let inputs = [well_spread(4, 3, 14), well_spread(1, 3, 15), well_spread(1, 1, 16)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let b = g.add_bias(v[0], v[1])?;
            let s = g.scale_by_scalar(b, v[2])?;
            contract(g, s, 17)
        })
        .unwrap();
        assert!(err < 1e-6, "add_bias/gate rel err {}", err);
    }

    #[test]
    fn row_softmax_gradient_matches_finite_differences() {
        let inputs = [well_spread(2, 5, 18)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let p = g.row_softmax(v[0], None)?;
            contract(g, p, 19)
        })
        .unwrap();
        assert!(err < 1e-6, "row_softmax rel err {}", err);
    }

    #[test]
    fn masked_row_softmax_gradient_matches_finite_differences() {
        let inputs = [well_spread(3, 4, 20)];
        let mut mask = Tensor::zeros(3, 4);
        mask.set(0, 2, f64::mask_neg());
        mask.set(1, 0, f64::mask_neg());
        mask.set(1, 3, f64::mask_neg());
        let err = check(&inputs, DEFAULT_H, move |g, v| {
            let p = g.row_softmax(v[0], Some(&mask))?;
            contract(g, p, 21)
        })
        .unwrap();
        assert!(err < 1e-6, "masked row_softmax rel err {}", err);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let inputs = [well_spread(3, 6, 22), well_spread(1, 6, 23), well_spread(1, 6, 24)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            contract(g, y, 25)
        })
        .unwrap();
        assert!(err < 1e-6, "layer_norm rel err {}", err);
    }

    #[test]
    fn gather_rows_gradient_matches_finite_differences() {
        let inputs = [well_spread(6, 3, 26)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let y = g.gather_rows(v[0], &[0, 3, 3, 5])?;
            contract(g, y, 27)
        })
        .unwrap();
        assert!(err < 1e-6, "gather_rows rel err {}", err);
    }

    #[test]
    fn slice_and_concat_gradients_match_finite_differences() {
        let inputs = [well_spread(4, 6, 28), well_spread(2, 6, 29)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let top = g.slice_rows(v[0], 1, 2)?;
            let cat = g.concat_rows(&[top, v[1]])?;
            let left = g.slice_cols(cat, 0, 3)?;
            let right = g.slice_cols(cat, 3, 3)?;
            let back = g.concat_cols(&[right, left])?;
            contract(g, back, 30)
        })
        .unwrap();
        assert!(err < 1e-6, "slice/concat rel err {}", err);
    }

    #[test]
    fn weighted_cross_entropy_gradient_matches_finite_differences() {
        let inputs = [well_spread(2, 7, 31)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            g.weighted_cross_entropy(v[0], &[3, 6], &[1.0, 0.25])
        })
        .unwrap();
        assert!(err < 1e-6, "weighted CE rel err {}", err);
    }

    #[test]
    fn dropout_gradient_matches_finite_differences_under_fixed_seed() {
        let inputs = [well_spread(4, 5, 32)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let mut rng = Rng::seed_from_u64(99);
            let d = g.dropout(v[0], 0.3, &mut rng, true)?;
            contract(g, d, 33)
        })
        .unwrap();
        assert!(err < 1e-6, "dropout rel err {}", err);
    }

    #[test]
    fn composite_matmul_softmax_ce_matches_finite_differences() {
        let inputs = [well_spread(3, 4, 34), well_spread(4, 5, 35)];
        let err = check(&inputs, DEFAULT_H, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            g.weighted_cross_entropy(h, &[0, 2, 4], &[1.0, 1.0, 0.5])
        })
        .unwrap();
        assert!(err < 1e-5, "composite rel err {}", err);
    }
}
