//! Central finite-difference check of tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error floor used in the denominator.
const REL_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient of `f` at `params` against central
/// differences and returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape with every parameter registered as a trainable
/// leaf (in order) and must return a scalar loss on that tape.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_three_params() {
        let p = [Tensor::vector(vec![0.3, -1.2, 2.5])];
        let err = finite_diff_check(&p, DEFAULT_EPS, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            Ok(t.scale(s, 1.5))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, vec![3, 4]);
        let b = random(&mut rng, vec![4, 2]);
        let w = random(&mut rng, vec![3, 2]);
        let err = finite_diff_check(&[a, b], DEFAULT_EPS, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let wv = t.constant(w.clone());
            let cw = t.mul(c, wv)?;
            Ok(t.sum(cw))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dense_relu_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, vec![5, 6]);
        let w = random(&mut rng, vec![4, 6]);
        let b = random(&mut rng, vec![4]);
        let err = finite_diff_check(&[w, b], DEFAULT_EPS, |t, v| {
            let xv = t.constant(x.clone());
            let h = t.matmul_bt(xv, v[0])?;
            let h = t.add_bias(h, v[1])?;
            let h = t.relu(h);
            let sq = t.mul(h, h)?;
            Ok(t.mean(sq))
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_op_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, vec![4, 3]);
        let y = random(&mut rng, vec![4, 3]);
        let c = random(&mut rng, vec![4, 1]);
        let err = finite_diff_check(&[x, y, c], DEFAULT_EPS, |t, v| {
            let a = t.tanh(v[0]);
            let b = t.sigmoid(v[1]);
            let ab = t.mul(a, b)?;
            let s = t.add(ab, v[0])?;
            let sc = t.mul_col(s, v[2])?;
            let cat = t.concat_cols(&[sc, v[1]])?;
            let tr = t.transpose(cat);
            let tt = t.transpose(tr);
            let sm = t.softmax(tt);
            let col = t.column(sm, 2)?;
            let lg = t.log(col);
            let row = t.transpose(sm);
            let first = t.column(row, 0)?;
            let p = t.transpose(first);
            let p = t.softmax(p);
            let n = t.nll(p, 1, 1e-12)?;
            let m = t.mean(lg);
            let out = t.add(m, n)?;
            Ok(t.scale(out, -0.7))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
