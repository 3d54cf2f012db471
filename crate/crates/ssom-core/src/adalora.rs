//! SVD-triplet adapters with adaptive rank budgeting.
//!
//! Each adapter parameterizes a weight update as ΔW = P·diag(λ)·Q against a
//! frozen base matrix. A global allocator ranks every singular value by
//! magnitude and prunes all but the top `b(t)` under a decaying budget
//! schedule.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SsomError};
use crate::tape::{Id, Tape};
use crate::tensor::{Parameter, Tensor};

pub const INIT_STD: f64 = 0.02;

/// One adapter: left factor P (d×r), singular values λ (length r), right
/// factor Q (r×k), attached to the frozen base named `base_name`.
#[derive(Debug, Clone)]
pub struct SvdTriplet {
    pub p: Parameter,
    pub lambda: Parameter,
    pub q: Parameter,
    pub base_name: String,
    pub rank_cap: usize,
}

impl SvdTriplet {
    /// λ starts at zero so the adapted model reproduces the frozen base
    /// exactly at step 0; P and Q start Gaussian(0, 0.02²).
    pub fn new(base_name: &str, d: usize, k: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if r == 0 || r > d.min(k) / 2 {
            return Err(SsomError::Contract(format!(
                "adapter rank {r} must satisfy 1 <= r <= min({d},{k})/2"
            )));
        }
        let gauss = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| standard_normal(rng) * INIT_STD).collect()
        };
        Ok(SvdTriplet {
            p: Parameter::trainable(format!("{base_name}.adapter.p"), Tensor::matrix(d, r, gauss(rng, d * r))?),
            lambda: Parameter::trainable(format!("{base_name}.adapter.lambda"), Tensor::vector(vec![0.0; r])?),
            q: Parameter::trainable(format!("{base_name}.adapter.q"), Tensor::matrix(r, k, gauss(rng, r * k))?),
            base_name: base_name.to_string(),
            rank_cap: r,
        })
    }

    pub fn nnz(&self) -> usize {
        self.lambda.tensor.data().iter().filter(|v| **v != 0.0).count()
    }
}

/// Box–Muller; two uniform draws per sample keeps the stream deterministic.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tape handles for one triplet's three factors.
#[derive(Debug, Clone, Copy)]
pub struct TripletIds {
    pub p: Id,
    pub lambda: Id,
    pub q: Id,
}

impl SvdTriplet {
    pub fn leaves(&self, tape: &Tape) -> TripletIds {
        TripletIds {
            p: tape.leaf(&self.p.tensor, self.p.trainable),
            lambda: tape.leaf(&self.lambda.tensor, self.lambda.trainable),
            q: tape.leaf(&self.q.tensor, self.q.trainable),
        }
    }
}

/// h = W₀x + P·diag(λ)·Q·x with tokens as columns of x. The d×k increment is
/// never materialized.
pub fn adapted_forward(tape: &Tape, x: Id, w0: Id, triplet: TripletIds) -> Result<Id> {
    let base = tape.matmul(w0, x)?;
    let qx = tape.matmul(triplet.q, x)?;
    let scaled = tape.scale_rows(qx, triplet.lambda)?;
    let delta = tape.matmul(triplet.p, scaled)?;
    tape.add(base, delta)
}

/// Data-level wrapper over [`adapted_forward`] that also enforces the frozen
/// base contract.
pub fn adapted_forward_data(x: &Tensor, w0: &Parameter, triplet: &SvdTriplet) -> Result<Tensor> {
    if !w0.frozen {
        return Err(SsomError::Contract(format!(
            "adapted_forward requires a frozen base, {} is not frozen",
            w0.name
        )));
    }
    let tape = Tape::new();
    let x_id = tape.leaf(x, false);
    let w0_id = tape.leaf(&w0.tensor, false);
    let ids = triplet.leaves(&tape);
    let out = adapted_forward(&tape, x_id, w0_id, ids)?;
    Ok(tape.value(out))
}

/// R(P,Q) = ‖PᵀP − I‖_F² + ‖QQᵀ − I‖_F² with I the r×r identity.
pub fn orthogonality_regularizer(tape: &Tape, triplet: TripletIds, rank: usize) -> Result<Id> {
    let eye = tape.leaf(&Tensor::eye(rank), false);
    let pt = tape.transpose(triplet.p)?;
    let ptp = tape.matmul(pt, triplet.p)?;
    let p_dev = tape.sub(ptp, eye)?;
    let p_term = tape.frobenius_norm_sq(p_dev)?;
    let qt = tape.transpose(triplet.q)?;
    let qqt = tape.matmul(triplet.q, qt)?;
    let q_dev = tape.sub(qqt, eye)?;
    let q_term = tape.frobenius_norm_sq(q_dev)?;
    tape.add(p_term, q_term)
}

/// Budget b(t): plateau at `b_init` through warmup, cubic decay, plateau at
/// `b_target` for the final steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BudgetSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub final_steps: usize,
    pub b_init: usize,
    pub b_target: usize,
}

impl BudgetSchedule {
    pub fn new(
        total_steps: usize,
        warmup_steps: usize,
        final_steps: usize,
        b_init: usize,
        b_target: usize,
    ) -> Result<Self> {
        if warmup_steps + final_steps >= total_steps {
            return Err(SsomError::Contract(format!(
                "warmup {warmup_steps} + final {final_steps} must be < total {total_steps}"
            )));
        }
        if b_target > b_init {
            return Err(SsomError::Contract(format!(
                "b_target {b_target} must not exceed b_init {b_init}"
            )));
        }
        Ok(BudgetSchedule {
            total_steps,
            warmup_steps,
            final_steps,
            b_init,
            b_target,
        })
    }

    pub fn budget_at(&self, t: usize) -> Result<usize> {
        if t > self.total_steps {
            return Err(SsomError::Contract(format!(
                "step {t} outside schedule range 0..={}",
                self.total_steps
            )));
        }
        if t < self.warmup_steps {
            return Ok(self.b_init);
        }
        if t >= self.total_steps - self.final_steps {
            return Ok(self.b_target);
        }
        let span = (self.total_steps - self.warmup_steps - self.final_steps) as f64;
        let frac = 1.0 - (t - self.warmup_steps) as f64 / span;
        let b = self.b_target as f64 + (self.b_init - self.b_target) as f64 * frac.powi(3);
        // round half up
        Ok((b + 0.5).floor() as usize)
    }
}

/// Report of one pruning pass: (triplet index, singular index) pairs, each
/// list in (triplet, index) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub step: usize,
    pub budget: usize,
    pub kept: Vec<(usize, usize)>,
    pub pruned: Vec<(usize, usize)>,
}

/// Global pruning state: ranks every singular value across all triplets and
/// zeroes those outside the top-b(t) by |λ|.
#[derive(Debug, Clone)]
pub struct RankAllocator {
    pub schedule: BudgetSchedule,
    pub step: usize,
}

impl RankAllocator {
    pub fn new(schedule: BudgetSchedule) -> Self {
        RankAllocator { schedule, step: 0 }
    }

    pub fn allocate(&mut self, triplets: &mut [&mut SvdTriplet], t: usize) -> Result<PruneReport> {
        let budget = self.schedule.budget_at(t)?;
        self.step = t;
        let mut scored = importance_scores_of(triplets.iter().map(|tr| &**tr));
        // Highest score first; ties broken toward the lower (triplet, index).
        scored.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("scores are finite")
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let keep_n = budget.min(scored.len());
        let mut kept: Vec<(usize, usize)> = scored[..keep_n].iter().map(|s| (s.0, s.1)).collect();
        let mut pruned: Vec<(usize, usize)> = scored[keep_n..].iter().map(|s| (s.0, s.1)).collect();
        kept.sort_unstable();
        pruned.sort_unstable();
        for &(ti, si) in &pruned {
            triplets[ti].lambda.tensor.data_mut()[si] = 0.0;
        }
        Ok(PruneReport {
            step: t,
            budget,
            kept,
            pruned,
        })
    }
}

/// One (triplet index, singular index, |λ|) entry per singular slot, in
/// triplet order then index order.
pub fn importance_scores(triplets: &[&SvdTriplet]) -> Vec<(usize, usize, f64)> {
    importance_scores_of(triplets.iter().copied())
}

fn importance_scores_of<'a>(
    triplets: impl Iterator<Item = &'a SvdTriplet>,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (ti, tr) in triplets.enumerate() {
        for (si, v) in tr.lambda.tensor.data().iter().enumerate() {
            out.push((ti, si, v.abs()));
        }
    }
    out
}
