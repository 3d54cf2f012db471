//! End-to-end predictor: frozen encoder with adapters, a learnable saliency
//! prompt, and a small cross-attention mask decoder.

use rand_chacha::ChaCha8Rng;

use crate::adalora::{standard_normal, PruneReport, RankAllocator, SvdTriplet, INIT_STD};
use crate::encoder::{encode_on, Bindings, Encoder, EncoderConfig, EncoderIds};
use crate::error::{Result, SsomError};
use crate::tape::{sigmoid, Id, Tape};
use crate::tensor::{Parameter, Tensor};

/// The learnable embedding standing in for a user prompt; it marks the
/// concept of saliency.
#[derive(Debug, Clone)]
pub struct SaliencyPrompt {
    pub embedding: Parameter,
}

impl SaliencyPrompt {
    pub fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<f64> = (0..n).map(|_| standard_normal(rng) * INIT_STD).collect();
        SaliencyPrompt {
            embedding: Parameter::trainable("prompt.embedding", Tensor::vector(data).expect("finite init")),
        }
    }
}

/// One cross-attention round (prompt query over image tokens) followed by a
/// per-patch linear head that upsamples each token to p² pixel logits.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub ln_gain: Parameter,
    pub ln_bias: Parameter,
    pub out_proj: Parameter,
    pub out_bias: Parameter,
}

impl MaskDecoder {
    pub fn new(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = config.embed_dim;
        let pp = config.patch_size * config.patch_size;
        let gauss = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Result<Tensor> {
            Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| standard_normal(rng) * INIT_STD).collect(),
            )
        };
        Ok(MaskDecoder {
            wq: Parameter::trainable("decoder.cross.wq", gauss(rng, n, n)?),
            wk: Parameter::trainable("decoder.cross.wk", gauss(rng, n, n)?),
            wv: Parameter::trainable("decoder.cross.wv", gauss(rng, n, n)?),
            ln_gain: Parameter::trainable("decoder.ln.gain", Tensor::vector(vec![1.0; n])?),
            ln_bias: Parameter::trainable("decoder.ln.bias", Tensor::zeros(vec![n])),
            // Zero-initialized head behind a fixed gain of n: the model
            // starts at exactly p = 0.5 everywhere, and optimizer steps of
            // size O(lr) translate into O(n·lr) logit movement.
            out_proj: Parameter::trainable("decoder.out_proj", Tensor::zeros(vec![n, pp])),
            out_bias: Parameter::trainable("decoder.out_bias", Tensor::zeros(vec![pp])),
        })
    }
}

pub struct DecoderIds {
    pub wq: Id,
    pub wk: Id,
    pub wv: Id,
    pub ln_gain: Id,
    pub ln_bias: Id,
    pub out_proj: Id,
    pub out_bias: Id,
}

pub struct ModelIds {
    pub encoder: EncoderIds,
    pub prompt: Id,
    pub decoder: DecoderIds,
}

#[derive(Debug, Clone)]
pub struct SsomModel {
    pub encoder: Encoder,
    pub prompt: SaliencyPrompt,
    pub decoder: MaskDecoder,
    pub allocator: RankAllocator,
}

impl SsomModel {
    pub fn new(config: EncoderConfig, allocator: RankAllocator, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(config.clone(), rng)?;
        let prompt = SaliencyPrompt::new(config.embed_dim, rng);
        let decoder = MaskDecoder::new(&config, rng)?;
        Ok(SsomModel {
            encoder,
            prompt,
            decoder,
            allocator,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.encoder.for_each_param(f);
        f(&self.prompt.embedding);
        f(&self.decoder.wq);
        f(&self.decoder.wk);
        f(&self.decoder.wv);
        f(&self.decoder.ln_gain);
        f(&self.decoder.ln_bias);
        f(&self.decoder.out_proj);
        f(&self.decoder.out_bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.for_each_param_mut(f);
        f(&mut self.prompt.embedding);
        f(&mut self.decoder.wq);
        f(&mut self.decoder.wk);
        f(&mut self.decoder.wv);
        f(&mut self.decoder.ln_gain);
        f(&mut self.decoder.ln_bias);
        f(&mut self.decoder.out_proj);
        f(&mut self.decoder.out_bias);
    }

    /// Trainable parameters in deterministic registry order.
    pub fn trainable_parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| {
            if p.trainable {
                out.push(p);
            }
        });
        out
    }

    pub fn bind(&self, tape: &Tape, reg: &mut Bindings) -> ModelIds {
        ModelIds {
            encoder: self.encoder.bind(tape, reg),
            prompt: reg.bind(tape, &self.prompt.embedding),
            decoder: DecoderIds {
                wq: reg.bind(tape, &self.decoder.wq),
                wk: reg.bind(tape, &self.decoder.wk),
                wv: reg.bind(tape, &self.decoder.wv),
                ln_gain: reg.bind(tape, &self.decoder.ln_gain),
                ln_bias: reg.bind(tape, &self.decoder.ln_bias),
                out_proj: reg.bind(tape, &self.decoder.out_proj),
                out_bias: reg.bind(tape, &self.decoder.out_bias),
            },
        }
    }

    /// Runs Λ-pruning across all triplets at step `t`.
    pub fn allocate(&mut self, t: usize) -> Result<PruneReport> {
        let allocator = &mut self.allocator;
        let mut triplets = self.encoder.triplets_mut();
        allocator.allocate(&mut triplets, t)
    }

    pub fn triplets(&self) -> Vec<&SvdTriplet> {
        self.encoder.triplets()
    }
}

/// H×W logit map for one image, recorded on `tape`.
pub fn predict_logits_on(
    tape: &Tape,
    model: &SsomModel,
    ids: &ModelIds,
    image: &Tensor,
    use_adapters: bool,
) -> Result<Id> {
    let cfg = model.config();
    let tokens = encode_on(tape, image, &model.encoder, &ids.encoder, use_adapters)?;
    let dec = &ids.decoder;

    let q_row = tape.matmul(ids.prompt, dec.wq)?; // [1×n]
    let keys = tape.matmul(tokens, dec.wk)?;
    let vals = tape.matmul(tokens, dec.wv)?;
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    let scores = tape.scale(tape.matmul(q_row, tape.transpose(keys)?)?, scale)?;
    let weights = tape.softmax_rows(scores)?;
    let ctx = tape.matmul(weights, vals)?; // [1×n]

    // Additive conditioning: the prompt-attended context is broadcast onto
    // every image token before upsampling.
    let conditioned = tape.add_row_broadcast(tokens, ctx)?;
    let normed = tape.layer_norm_rows(conditioned, dec.ln_gain, dec.ln_bias)?;
    let head = tape.add_row_broadcast(tape.matmul(normed, dec.out_proj)?, dec.out_bias)?;
    let patch_logits = tape.scale(head, cfg.embed_dim as f64)?;
    tape.patch_unfold(patch_logits, cfg.grid(), cfg.patch_size)
}

/// Convenience wrapper over a throwaway tape.
pub fn predict_logits(model: &SsomModel, image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let mut reg = Bindings::default();
    let ids = model.bind(&tape, &mut reg);
    let out = predict_logits_on(&tape, model, &ids, image, true)?;
    Ok(tape.value(out))
}

/// sigmoid(logit) >= threshold -> 1, else 0.
pub fn binarize(logits: &Tensor, threshold: f64) -> Tensor {
    let data: Vec<f64> = logits
        .data()
        .iter()
        .map(|v| if sigmoid(*v) >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("binary data is finite")
}

/// Checks the model's naming invariant: parameter names are unique.
pub fn check_unique_names(model: &SsomModel) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    let mut dup = None;
    model.for_each_param(&mut |p| {
        if !names.insert(p.name.clone()) && dup.is_none() {
            dup = Some(p.name.clone());
        }
    });
    match dup {
        Some(name) => Err(SsomError::Contract(format!("duplicate parameter name {name}"))),
        None => Ok(()),
    }
}
