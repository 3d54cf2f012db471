//! Training loop: mini-batch sampling, composite loss, grouped parameter
//! updates, singular-value pruning under the budget schedule, logging, and
//! checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::adalora::{orthogonality_regularizer, BudgetSchedule, PruneReport, TripletIds};
use crate::checkpoint::save_full;
use crate::data::{epoch_batches, SaliencySample};
use crate::encoder::Bindings;
use crate::error::{Result, SsomError};
use crate::model::{predict_logits_on, SsomModel};
use crate::objective::total_loss;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub schedule: Option<BudgetSchedule>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 10,
            batch_size: 8,
            lambda_reg: 0.1,
            schedule: None,
            seed: 42,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SsomError::Config("epochs must be >= 1".into()));
        }
        if self.base_lr <= 0.0 || self.lr_decay_factor <= 0.0 || self.batch_size == 0 {
            return Err(SsomError::Config("rates and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every_epochs) as i32)
    }
}

/// Warmup 10%, cubic decay, final plateau 20%, from all slots down to half.
pub fn default_schedule(total_steps: usize, total_slots: usize) -> Result<BudgetSchedule> {
    BudgetSchedule::new(
        total_steps,
        total_steps / 10,
        total_steps / 5,
        total_slots,
        total_slots / 2,
    )
}

/// Adam/SGD with per-parameter moment state keyed by name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Called once per training step, before any parameter update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, data: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in data.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..data.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Ordered events inside one training step, exposed for instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Forward,
    Backward,
    UpdateDecoderPrompt,
    UpdateFactors,
    UpdateLambda,
    Prune,
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub iou: f64,
    pub ortho: f64,
    pub total: f64,
    pub budget: usize,
    pub nnz_lambda: usize,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "step,epoch,lr,bce,iou,ortho,total,budget,nnz_lambda"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.17},{:.17},{:.17},{:.17},{:.17},{},{}",
            self.step, self.epoch, self.lr, self.bce, self.iou, self.ortho, self.total, self.budget, self.nnz_lambda
        )
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub final_checkpoint: PathBuf,
    pub initial_total: f64,
    pub final_total: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub global_step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer.clone());
        Ok(Trainer {
            config,
            optimizer,
            global_step: 0,
        })
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.config.epochs * self.steps_per_epoch(n_samples)
    }

    pub fn train(
        &mut self,
        model: &mut SsomModel,
        samples: &[SaliencySample],
        out_dir: &Path,
    ) -> Result<TrainReport> {
        self.run(model, samples, out_dir, None, &mut |_| {})
    }

    /// Trains up to `stop_at_step` (exclusive), saving a resumable checkpoint
    /// on exit. Resuming from it reproduces an uninterrupted run bit-exactly.
    pub fn train_until(
        &mut self,
        model: &mut SsomModel,
        samples: &[SaliencySample],
        out_dir: &Path,
        stop_at_step: usize,
    ) -> Result<TrainReport> {
        self.run(model, samples, out_dir, Some(stop_at_step), &mut |_| {})
    }

    pub fn train_with_hook(
        &mut self,
        model: &mut SsomModel,
        samples: &[SaliencySample],
        out_dir: &Path,
        hook: &mut dyn FnMut(StepEvent),
    ) -> Result<TrainReport> {
        self.run(model, samples, out_dir, None, hook)
    }

    /// One run of the iterative procedure: forward, loss, backward, grouped
    /// updates, Λ-pruning, logging. Stops at the fixed iteration budget.
    fn run(
        &mut self,
        model: &mut SsomModel,
        samples: &[SaliencySample],
        out_dir: &Path,
        stop_at_step: Option<usize>,
        hook: &mut dyn FnMut(StepEvent),
    ) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(SsomError::Data("training set is empty".into()));
        }
        fs::create_dir_all(out_dir)?;
        let spe = self.steps_per_epoch(samples.len());
        let total_steps = self.total_steps(samples.len());
        if model.allocator.schedule.total_steps != total_steps {
            return Err(SsomError::Contract(format!(
                "allocator schedule covers {} steps but the run has {total_steps}",
                model.allocator.schedule.total_steps
            )));
        }

        let stop = stop_at_step.map_or(total_steps, |s| s.min(total_steps));

        let mut log = fs::File::create(out_dir.join("log.csv"))?;
        writeln!(log, "{}", LogRow::csv_header())?;
        let mut trace = fs::File::create(out_dir.join("rank_trace.tsv"))?;

        let mut rows = Vec::with_capacity(stop.saturating_sub(self.global_step));
        let mut initial_total = f64::NAN;
        let mut last_good: Option<(SsomModel, Optimizer, usize)> = None;

        while self.global_step < stop {
            let t = self.global_step;
            let epoch = t / spe;
            let lr = self.config.lr_at_epoch(epoch);
            let batch = {
                let batches = epoch_batches(samples.len(), self.config.batch_size, self.config.seed, epoch);
                batches[t % spe].clone()
            };

            let step_result = self.step(model, samples, &batch, lr, t, hook);
            let (row, prune) = match step_result {
                Ok((mut row, prune)) => {
                    row.epoch = epoch;
                    row.lr = lr;
                    (row, prune)
                }
                Err(e) => {
                    if let Some((m, o, step)) = last_good.take() {
                        *model = m;
                        self.optimizer = o;
                        self.global_step = step;
                        let path = out_dir.join("last_good.ckpt");
                        save_full(&path, model, &self.config, &self.optimizer, self.global_step)?;
                    }
                    return Err(e);
                }
            };
            if initial_total.is_nan() {
                initial_total = row.total;
            }
            writeln!(log, "{}", row.to_csv())?;
            rows.push(row);
            self.global_step += 1;
            last_good = Some((model.clone(), self.optimizer.clone(), self.global_step));

            let fmt_pairs = |pairs: &[(usize, usize)]| {
                pairs
                    .iter()
                    .map(|(a, b)| format!("{a}.{b}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            writeln!(
                trace,
                "{}\tkept:[{}]\tpruned:[{}]",
                t,
                fmt_pairs(&prune.kept),
                fmt_pairs(&prune.pruned)
            )?;
        }

        let final_path = out_dir.join("final.ckpt");
        save_full(&final_path, model, &self.config, &self.optimizer, self.global_step)?;
        let final_total = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
        Ok(TrainReport {
            rows,
            final_checkpoint: final_path,
            initial_total,
            final_total,
        })
    }

    fn step(
        &mut self,
        model: &mut SsomModel,
        samples: &[SaliencySample],
        batch: &[usize],
        lr: f64,
        t: usize,
        hook: &mut dyn FnMut(StepEvent),
    ) -> Result<(LogRow, PruneReport)> {
        let tape = Tape::new();
        let mut reg = Bindings::default();
        let ids = model.bind(&tape, &mut reg);
        let rank = model.config().adapter_rank;
        let triplet_ids: Vec<TripletIds> = ids
            .encoder
            .blocks
            .iter()
            .flat_map(|b| [b.q_triplet, b.v_triplet])
            .collect();

        hook(StepEvent::Forward);
        let inv_batch = 1.0 / batch.len() as f64;
        let (mut bce_acc, mut iou_acc) = (0.0, 0.0);
        let mut data_term: Option<crate::tape::Id> = None;
        for sample_idx in batch {
            let sample = &samples[*sample_idx];
            let logits = predict_logits_on(&tape, model, &ids, &sample.image, true)?;
            let probs = tape.sigmoid(logits)?;
            let target = tape.leaf(&sample.mask, false);
            // data term only; the regularizer is composed once per step below
            let breakdown = total_loss(&tape, probs, target, &[], 0.0)?;
            bce_acc += breakdown.bce;
            iou_acc += breakdown.iou;
            let contribution = tape.scale(breakdown.total_id, inv_batch)?;
            data_term = Some(match data_term {
                None => contribution,
                Some(acc) => tape.add(acc, contribution)?,
            });
        }
        let data_term = data_term.expect("non-empty batch");
        let mut ortho_id: Option<crate::tape::Id> = None;
        for trip in &triplet_ids {
            let r = orthogonality_regularizer(&tape, *trip, rank)?;
            ortho_id = Some(match ortho_id {
                None => r,
                Some(acc) => tape.add(acc, r)?,
            });
        }
        let ortho_id = ortho_id.expect("model has adapters");
        let ortho = tape.value(ortho_id).item();
        let total_id = tape.add(data_term, tape.scale(ortho_id, self.config.lambda_reg)?)?;
        let total_val = tape.value(total_id).item();

        hook(StepEvent::Backward);
        tape.backward(total_id)?;

        // copy gradients into trainable parameters
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &reg.entries {
            if let Some(g) = tape.grad(*id) {
                grads.insert(name.clone(), g);
            }
        }
        drop(tape);
        model.for_each_param_mut(&mut |p| {
            if p.trainable {
                p.grad = grads.get(&p.name).cloned();
            }
        });

        self.optimizer.begin_step();
        let optimizer = &mut self.optimizer;

        // line 4: decoder and prompt
        hook(StepEvent::UpdateDecoderPrompt);
        model.for_each_param_mut(&mut |p| {
            if p.trainable && (p.name.starts_with("decoder.") || p.name.starts_with("prompt.")) {
                if let Some(g) = p.grad.take() {
                    optimizer.update(&p.name, p.tensor.data_mut(), g.data(), lr);
                }
            }
        });
        // line 5: P and Q factors
        hook(StepEvent::UpdateFactors);
        model.for_each_param_mut(&mut |p| {
            if p.trainable && (p.name.ends_with(".adapter.p") || p.name.ends_with(".adapter.q")) {
                if let Some(g) = p.grad.take() {
                    optimizer.update(&p.name, p.tensor.data_mut(), g.data(), lr);
                }
            }
        });
        // line 6: gradient update of Λ, then pruning
        hook(StepEvent::UpdateLambda);
        model.for_each_param_mut(&mut |p| {
            if p.trainable && p.name.ends_with(".adapter.lambda") {
                if let Some(g) = p.grad.take() {
                    optimizer.update(&p.name, p.tensor.data_mut(), g.data(), lr);
                }
            }
        });
        hook(StepEvent::Prune);
        let prune = model.allocate(t)?;
        let budget = prune.budget;
        let nnz: usize = model.triplets().iter().map(|tr| tr.nnz()).sum();

        Ok((
            LogRow {
                step: t,
                epoch: 0,
                lr,
                bce: bce_acc * inv_batch,
                iou: iou_acc * inv_batch,
                ortho,
                total: total_val,
                budget,
                nnz_lambda: nnz,
            },
            prune,
        ))
    }
}

/// Exact integer parameter census.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub frozen: usize,
    pub trainable: usize,
    pub encoder_total: usize,
    pub encoder_trainable: usize,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn encoder_trainable_fraction(&self) -> f64 {
        self.encoder_trainable as f64 / self.encoder_total as f64
    }
}

pub fn param_report(model: &SsomModel) -> ParamReport {
    let (mut total, mut frozen, mut trainable) = (0, 0, 0);
    model.for_each_param(&mut |p| {
        total += p.tensor.len();
        if p.frozen {
            frozen += p.tensor.len();
        }
        if p.trainable {
            trainable += p.tensor.len();
        }
    });
    let (mut enc_total, mut enc_trainable) = (0, 0);
    model.encoder.for_each_param(&mut |p| {
        enc_total += p.tensor.len();
        if p.trainable {
            enc_trainable += p.tensor.len();
        }
    });
    ParamReport {
        total,
        frozen,
        trainable,
        encoder_total: enc_total,
        encoder_trainable: enc_trainable,
    }
}
