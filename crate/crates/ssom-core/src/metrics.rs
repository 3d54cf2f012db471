//! Saliency evaluation: F-measure with beta² = 0.3 and mean absolute error,
//! under fixed or adaptive thresholding.

use crate::error::{Result, SsomError};
use crate::model::{predict_logits, SsomModel};
use crate::tape::sigmoid;
use crate::tensor::Tensor;

pub const DEFAULT_BETA_SQ: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    Adaptive,
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdMode::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdMode::Adaptive => write!(f, "adaptive"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub f_beta: f64,
    pub mae: f64,
    pub per_sample: Vec<(String, f64, f64)>,
    pub threshold_mode: ThresholdMode,
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(SsomError::Contract("ground truth mask must be binary {0,1}".into()));
    }
    Ok(())
}

/// F_β with hard counts after binarizing at `threshold`. Conventions:
/// TP = 0 with a nonempty union gives 0; both prediction and ground truth
/// empty gives 1.
pub fn f_beta(pred_map: &Tensor, gt: &Tensor, beta_sq: f64, threshold: f64) -> Result<f64> {
    if pred_map.shape() != gt.shape() {
        return Err(SsomError::ShapeMismatch {
            op: "f_beta",
            left: pred_map.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    check_binary(gt)?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in pred_map.data().iter().zip(gt.data()) {
        let pb = *p >= threshold;
        let gb = *g == 1.0;
        match (pb, gb) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 });
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok((1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall))
}

/// Twice the mean of the prediction, capped at 1.
pub fn adaptive_threshold(pred_map: &Tensor) -> f64 {
    let mean: f64 = pred_map.data().iter().sum::<f64>() / pred_map.len() as f64;
    (2.0 * mean).min(1.0)
}

/// Mean absolute per-pixel difference on the continuous map.
pub fn mae(pred_map: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred_map.shape() != gt.shape() {
        return Err(SsomError::ShapeMismatch {
            op: "mae",
            left: pred_map.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let mut acc = 0.0;
    for (p, g) in pred_map.data().iter().zip(gt.data()) {
        acc += (p - g).abs();
    }
    Ok(acc / pred_map.len() as f64)
}

/// Runs the model over every (id, image, mask) item and aggregates
/// arithmetic means in dataset order.
pub fn evaluate_dataset(
    model: &SsomModel,
    samples: &[(String, Tensor, Tensor)],
    threshold_mode: ThresholdMode,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(SsomError::Data("cannot evaluate an empty dataset".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut f_acc, mut m_acc) = (0.0, 0.0);
    for (id, image, mask) in samples {
        let logits = predict_logits(model, image)?;
        let pred_map = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().map(|v| sigmoid(*v)).collect(),
        )?;
        let threshold = match threshold_mode {
            ThresholdMode::Fixed(t) => t,
            ThresholdMode::Adaptive => adaptive_threshold(&pred_map),
        };
        let f = f_beta(&pred_map, mask, DEFAULT_BETA_SQ, threshold)?;
        let m = mae(&pred_map, mask)?;
        f_acc += f;
        m_acc += m;
        per_sample.push((id.clone(), f, m));
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        f_beta: f_acc / n,
        mae: m_acc / n,
        per_sample,
        threshold_mode,
    })
}

impl EvalReport {
    /// CSV body: `id,f_beta,mae` rows plus a `mean` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,f_beta,mae\n");
        for (id, f, m) in &self.per_sample {
            out.push_str(&format!("{id},{f:.17},{m:.17}\n"));
        }
        out.push_str(&format!("mean,{:.17},{:.17}\n", self.f_beta, self.mae));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mask(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = mask(vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(f_beta(&g, &g, 0.3, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn hand_substitution_case() {
        // Prec=0.8, Rec=0.5: TP=4, FP=1, FN=4
        let gt = mask(vec![1.0; 8].into_iter().chain(vec![0.0; 2]).collect());
        let pred = mask(
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        );
        let f = f_beta(&pred, &gt, 0.3, 0.5).unwrap();
        assert!((f - 0.52 / 0.74).abs() < 1e-9, "f = {f}");
    }

    #[test]
    fn empty_conventions() {
        let zero = mask(vec![0.0; 4]);
        let some = mask(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(f_beta(&zero, &zero, 0.3, 0.5).unwrap(), 1.0);
        assert_eq!(f_beta(&zero, &some, 0.3, 0.5).unwrap(), 0.0);
        assert_eq!(f_beta(&some, &zero, 0.3, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn f_beta_rejects_non_binary_gt() {
        let pred = mask(vec![0.5; 4]);
        let bad = mask(vec![0.5; 4]);
        assert!(f_beta(&pred, &bad, 0.3, 0.5).is_err());
    }

    #[test]
    fn balanced_harmonic_sanity() {
        // beta^2 = 1 and Prec = Rec = v gives F = v: TP=2, FP=2, FN=2 -> v=0.5
        let gt = mask(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let pred = mask(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let f = f_beta(&pred, &gt, 1.0, 0.5).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adaptive_threshold_cases() {
        assert_eq!(adaptive_threshold(&mask(vec![0.25; 4])), 0.5);
        assert_eq!(adaptive_threshold(&mask(vec![0.8; 4])), 1.0);
        assert_eq!(adaptive_threshold(&mask(vec![0.0, 1.0])), 1.0);
    }

    #[test]
    fn mae_cases_and_symmetry() {
        let g = mask(vec![1.0, 0.0, 0.0, 1.0]);
        let p = mask(vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        assert_eq!(mae(&mask(vec![0.0; 4]), &mask(vec![1.0; 4])).unwrap(), 1.0);
        assert_eq!(mae(&p, &g).unwrap(), 0.5);
        assert_eq!(mae(&p, &g).unwrap(), mae(&g, &p).unwrap());
    }

    #[test]
    fn matches_brute_force_counter_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = 64;
            let gt = mask((0..n).map(|_| f64::from(rng.random_bool(0.5))).collect());
            let pred = mask((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
            let threshold = 0.5;
            // brute-force per-pixel counter
            let mut counts = [0u64; 4];
            let mut abs = 0.0;
            for i in 0..n {
                let pb = pred.data()[i] >= threshold;
                let gb = gt.data()[i] == 1.0;
                counts[(pb as usize) * 2 + gb as usize] += 1;
                abs += (pred.data()[i] - gt.data()[i]).abs();
            }
            let (tp, fp, fn_) = (counts[3], counts[2], counts[1]);
            let expected_f = if tp == 0 {
                if fp == 0 && fn_ == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                let prec = tp as f64 / (tp + fp) as f64;
                let rec = tp as f64 / (tp + fn_) as f64;
                1.3 * prec * rec / (0.3 * prec + rec)
            };
            assert_eq!(f_beta(&pred, &gt, 0.3, threshold).unwrap(), expected_f);
            assert_eq!(mae(&pred, &gt).unwrap(), abs / n as f64);
        }
    }
}
