//! Central finite-difference gradient verification.

use crate::error::{Result, SsomError};
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

const REL_FLOOR: f64 = 1e-8;

/// Max relative error between the tape gradient of `f` and central finite
/// differences, over every component of every input.
///
/// `f` must build a scalar from the given leaves on the given tape and must
/// be independent of any state other than its inputs.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Id]) -> Result<Id>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(SsomError::Contract(format!(
            "grad_check eps must be in (0, 1e-3], got {eps}"
        )));
    }
    let tape = Tape::new();
    let ids: Vec<Id> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = f(&tape, &ids)?;
    if !tape.value(out).is_scalar() {
        return Err(SsomError::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| tape.grad(*id).expect("leaf marked requires_grad"))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let ids: Vec<Id> = xs.iter().map(|x| t.leaf(x, false)).collect();
        Ok(t.value(f(&t, &ids)?).item())
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Id) -> Result<Id>,
{
    grad_check_multi(|t, ids| f(t, ids[0]), std::slice::from_ref(x), eps)
}

/// Finite-difference checks over every differentiable operator plus the
/// composite losses, on small random inputs. Returns (name, max rel err).
pub fn standard_suite(eps: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rand_t = |shape: Vec<usize>, lo: f64, hi: f64| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("finite random data")
    };

    let a = rand_t(vec![3, 4], -1.0, 1.0);
    let b = rand_t(vec![4, 2], -1.0, 1.0);
    let sq = rand_t(vec![3, 3], -1.0, 1.0);
    let sq2 = rand_t(vec![3, 3], -1.0, 1.0);
    let row = rand_t(vec![1, 3], -1.0, 1.0);
    let lam = rand_t(vec![3], -1.0, 1.0);
    let gain = rand_t(vec![3], 0.5, 1.5);
    let bias = rand_t(vec![3], -0.5, 0.5);
    let probs = rand_t(vec![2, 4], 0.05, 0.95);
    let target = Tensor::new(vec![2, 4], (0..8).map(|i| f64::from(i % 3 == 0)).collect())?;

    let mut out = Vec::new();
    out.push((
        "matmul",
        grad_check_multi(|t, ids| t.sum(t.matmul(ids[0], ids[1])?), &[a.clone(), b.clone()], eps)?,
    ));
    out.push((
        "add_sub_mul",
        grad_check_multi(
            |t, ids| {
                let s = t.add(ids[0], ids[1])?;
                let d = t.sub(s, ids[1])?;
                t.sum(t.mul(d, ids[0])?)
            },
            &[sq.clone(), sq2.clone()],
            eps,
        )?,
    ));
    out.push((
        "scale_mean",
        grad_check(|t, id| t.mean(t.scale(id, 1.7)?), &a, eps)?,
    ));
    out.push((
        "sigmoid",
        grad_check(|t, id| t.sum(t.sigmoid(id)?), &sq, eps)?,
    ));
    out.push(("gelu", grad_check(|t, id| t.sum(t.gelu(id)?), &sq, eps)?));
    out.push((
        "log",
        grad_check(|t, id| t.sum(t.log(id)?), &probs, eps)?,
    ));
    out.push((
        "transpose",
        grad_check(|t, id| t.sum(t.mul(t.transpose(id)?, t.transpose(id)?)?), &a, eps)?,
    ));
    out.push((
        "softmax_rows",
        grad_check_multi(
            |t, ids| t.sum(t.mul(t.softmax_rows(ids[0])?, ids[1])?),
            &[sq.clone(), sq2.clone()],
            eps,
        )?,
    ));
    out.push((
        "layer_norm_rows",
        grad_check_multi(
            |t, ids| t.sum(t.layer_norm_rows(ids[0], ids[1], ids[2])?),
            &[sq.clone(), gain.clone(), bias.clone()],
            eps,
        )?,
    ));
    out.push((
        "scale_rows",
        grad_check_multi(
            |t, ids| t.sum(t.scale_rows(ids[0], ids[1])?),
            &[sq.clone(), lam.clone()],
            eps,
        )?,
    ));
    out.push((
        "add_row_broadcast",
        grad_check_multi(
            |t, ids| t.frobenius_norm_sq(t.add_row_broadcast(ids[0], ids[1])?),
            &[sq.clone(), row.clone()],
            eps,
        )?,
    ));
    out.push((
        "frobenius_norm_sq",
        grad_check(|t, id| t.frobenius_norm_sq(id), &a, eps)?,
    ));
    out.push((
        "div_scalar",
        grad_check_multi(
            |t, ids| {
                let num = t.sum(ids[0])?;
                let den = t.frobenius_norm_sq(ids[1])?;
                t.div_scalar(num, den)
            },
            &[sq.clone(), sq2.clone()],
            eps,
        )?,
    ));
    out.push((
        "patch_unfold",
        grad_check(
            |t, id| t.frobenius_norm_sq(t.patch_unfold(id, 2, 2)?),
            &rand_t(vec![4, 4], -1.0, 1.0),
            eps,
        )?,
    ));
    out.push((
        "bce_loss",
        grad_check_multi(
            |t, ids| {
                let y = t.leaf(&target, false);
                crate::objective::bce_loss(t, ids[0], y)
            },
            std::slice::from_ref(&probs),
            eps,
        )?,
    ));
    out.push((
        "iou_loss",
        grad_check_multi(
            |t, ids| {
                let y = t.leaf(&target, false);
                crate::objective::iou_loss(t, ids[0], y)
            },
            std::slice::from_ref(&probs),
            eps,
        )?,
    ));
    out.push((
        "orthogonality",
        grad_check_multi(
            |t, ids| {
                let trip = crate::adalora::TripletIds {
                    p: ids[0],
                    lambda: ids[1],
                    q: ids[2],
                };
                crate::adalora::orthogonality_regularizer(t, trip, 2)
            },
            &[rand_t(vec![5, 2], -1.0, 1.0), rand_t(vec![2], -1.0, 1.0), rand_t(vec![2, 5], -1.0, 1.0)],
            eps,
        )?,
    ));
    Ok(out)
}
