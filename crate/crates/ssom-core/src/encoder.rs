//! Patchifying transformer image encoder with a frozen base and SVD-triplet
//! adapters on the query and value projections of every block.
//!
//! Token matrices are row-major, one token per row. The attention
//! projections follow the tokens-as-columns convention of
//! [`crate::adalora::adapted_forward`], so the forward transposes around
//! them.

use rand_chacha::ChaCha8Rng;

use crate::adalora::{adapted_forward, standard_normal, SvdTriplet, TripletIds, INIT_STD};
use crate::error::{Result, SsomError};
use crate::tape::{Id, Tape};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub adapter_rank: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            adapter_rank: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(SsomError::Contract(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(SsomError::Contract(format!(
                "head count {} must divide embed dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Total singular-value slots: two adapted projections per block, each
    /// with `adapter_rank` values.
    pub fn adapter_slots(&self) -> usize {
        2 * self.num_blocks * self.adapter_rank
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub mlp_w1: Parameter,
    pub mlp_b1: Parameter,
    pub mlp_w2: Parameter,
    pub mlp_b2: Parameter,
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
    pub q_triplet: SvdTriplet,
    pub v_triplet: SvdTriplet,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_proj: Parameter,
    pub patch_bias: Parameter,
    pub pos_embed: Parameter,
    pub blocks: Vec<TransformerBlock>,
    pub final_gain: Parameter,
    pub final_bias: Parameter,
}

fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| standard_normal(rng) * INIT_STD).collect();
    Tensor::matrix(rows, cols, data).expect("finite gaussian init")
}

impl Encoder {
    /// Base weights drawn once from a seeded Gaussian, then treated as the
    /// frozen "pre-trained" encoder. Adapters start with zero singular
    /// values.
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let n = config.embed_dim;
        let hidden = 4 * n;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let prefix = format!("encoder.block{b}");
            let wq_name = format!("{prefix}.attn.wq");
            let wv_name = format!("{prefix}.attn.wv");
            blocks.push(TransformerBlock {
                wq: Parameter::frozen(wq_name.clone(), gauss_matrix(rng, n, n)),
                wk: Parameter::frozen(format!("{prefix}.attn.wk"), gauss_matrix(rng, n, n)),
                wv: Parameter::frozen(wv_name.clone(), gauss_matrix(rng, n, n)),
                wo: Parameter::frozen(format!("{prefix}.attn.wo"), gauss_matrix(rng, n, n)),
                mlp_w1: Parameter::frozen(format!("{prefix}.mlp.w1"), gauss_matrix(rng, n, hidden)),
                mlp_b1: Parameter::frozen(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![hidden])),
                mlp_w2: Parameter::frozen(format!("{prefix}.mlp.w2"), gauss_matrix(rng, hidden, n)),
                mlp_b2: Parameter::frozen(format!("{prefix}.mlp.b2"), Tensor::zeros(vec![n])),
                ln1_gain: Parameter::frozen(format!("{prefix}.ln1.gain"), Tensor::vector(vec![1.0; n])?),
                ln1_bias: Parameter::frozen(format!("{prefix}.ln1.bias"), Tensor::zeros(vec![n])),
                ln2_gain: Parameter::frozen(format!("{prefix}.ln2.gain"), Tensor::vector(vec![1.0; n])?),
                ln2_bias: Parameter::frozen(format!("{prefix}.ln2.bias"), Tensor::zeros(vec![n])),
                q_triplet: SvdTriplet::new(&wq_name, n, n, config.adapter_rank, rng)?,
                v_triplet: SvdTriplet::new(&wv_name, n, n, config.adapter_rank, rng)?,
            });
        }
        Ok(Encoder {
            patch_proj: Parameter::frozen("encoder.patch_proj", gauss_matrix(rng, config.patch_len(), n)),
            patch_bias: Parameter::frozen("encoder.patch_bias", Tensor::zeros(vec![n])),
            pos_embed: Parameter::frozen("encoder.pos_embed", gauss_matrix(rng, config.token_count(), n)),
            blocks,
            final_gain: Parameter::frozen("encoder.final_norm.gain", Tensor::vector(vec![1.0; n])?),
            final_bias: Parameter::frozen("encoder.final_norm.bias", Tensor::zeros(vec![n])),
            config,
        })
    }

    pub fn triplets(&self) -> Vec<&SvdTriplet> {
        let mut v = Vec::with_capacity(2 * self.blocks.len());
        for b in &self.blocks {
            v.push(&b.q_triplet);
            v.push(&b.v_triplet);
        }
        v
    }

    pub fn triplets_mut(&mut self) -> Vec<&mut SvdTriplet> {
        let mut v = Vec::with_capacity(2 * self.blocks.len());
        for b in &mut self.blocks {
            v.push(&mut b.q_triplet);
            v.push(&mut b.v_triplet);
        }
        v
    }

    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.patch_proj);
        f(&self.patch_bias);
        f(&self.pos_embed);
        for b in &self.blocks {
            f(&b.wq);
            f(&b.wk);
            f(&b.wv);
            f(&b.wo);
            f(&b.mlp_w1);
            f(&b.mlp_b1);
            f(&b.mlp_w2);
            f(&b.mlp_b2);
            f(&b.ln1_gain);
            f(&b.ln1_bias);
            f(&b.ln2_gain);
            f(&b.ln2_bias);
            f(&b.q_triplet.p);
            f(&b.q_triplet.lambda);
            f(&b.q_triplet.q);
            f(&b.v_triplet.p);
            f(&b.v_triplet.lambda);
            f(&b.v_triplet.q);
        }
        f(&self.final_gain);
        f(&self.final_bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.patch_proj);
        f(&mut self.patch_bias);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            f(&mut b.wq);
            f(&mut b.wk);
            f(&mut b.wv);
            f(&mut b.wo);
            f(&mut b.mlp_w1);
            f(&mut b.mlp_b1);
            f(&mut b.mlp_w2);
            f(&mut b.mlp_b2);
            f(&mut b.ln1_gain);
            f(&mut b.ln1_bias);
            f(&mut b.ln2_gain);
            f(&mut b.ln2_bias);
            f(&mut b.q_triplet.p);
            f(&mut b.q_triplet.lambda);
            f(&mut b.q_triplet.q);
            f(&mut b.v_triplet.p);
            f(&mut b.v_triplet.lambda);
            f(&mut b.v_triplet.q);
        }
        f(&mut self.final_gain);
        f(&mut self.final_bias);
    }
}

/// Tape leaves for one block.
pub struct BlockIds {
    pub wq: Id,
    pub wk: Id,
    pub wv: Id,
    pub wo: Id,
    pub mlp_w1: Id,
    pub mlp_b1: Id,
    pub mlp_w2: Id,
    pub mlp_b2: Id,
    pub ln1_gain: Id,
    pub ln1_bias: Id,
    pub ln2_gain: Id,
    pub ln2_bias: Id,
    pub q_triplet: TripletIds,
    pub v_triplet: TripletIds,
}

pub struct EncoderIds {
    pub patch_proj: Id,
    pub patch_bias: Id,
    pub pos_embed: Id,
    pub blocks: Vec<BlockIds>,
    pub final_gain: Id,
    pub final_bias: Id,
}

/// Name → leaf registry for reading gradients back after backward.
#[derive(Default)]
pub struct Bindings {
    pub entries: Vec<(String, Id)>,
}

impl Bindings {
    /// Binds a parameter as a tape leaf. A pre-seeded entry with the same
    /// name is reused instead, which lets callers substitute their own
    /// leaves (e.g. for finite-difference probes over the full graph).
    pub fn bind(&mut self, tape: &Tape, p: &Parameter) -> Id {
        if let Some((_, id)) = self.entries.iter().find(|(name, _)| name == &p.name) {
            return *id;
        }
        let id = tape.leaf(&p.tensor, p.trainable);
        self.entries.push((p.name.clone(), id));
        id
    }

    pub fn seed(&mut self, name: &str, id: Id) {
        self.entries.push((name.to_string(), id));
    }
}

impl Encoder {
    pub fn bind(&self, tape: &Tape, reg: &mut Bindings) -> EncoderIds {
        EncoderIds {
            patch_proj: reg.bind(tape, &self.patch_proj),
            patch_bias: reg.bind(tape, &self.patch_bias),
            pos_embed: reg.bind(tape, &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|blk| BlockIds {
                    wq: reg.bind(tape, &blk.wq),
                    wk: reg.bind(tape, &blk.wk),
                    wv: reg.bind(tape, &blk.wv),
                    wo: reg.bind(tape, &blk.wo),
                    mlp_w1: reg.bind(tape, &blk.mlp_w1),
                    mlp_b1: reg.bind(tape, &blk.mlp_b1),
                    mlp_w2: reg.bind(tape, &blk.mlp_w2),
                    mlp_b2: reg.bind(tape, &blk.mlp_b2),
                    ln1_gain: reg.bind(tape, &blk.ln1_gain),
                    ln1_bias: reg.bind(tape, &blk.ln1_bias),
                    ln2_gain: reg.bind(tape, &blk.ln2_gain),
                    ln2_bias: reg.bind(tape, &blk.ln2_bias),
                    q_triplet: TripletIds {
                        p: reg.bind(tape, &blk.q_triplet.p),
                        lambda: reg.bind(tape, &blk.q_triplet.lambda),
                        q: reg.bind(tape, &blk.q_triplet.q),
                    },
                    v_triplet: TripletIds {
                        p: reg.bind(tape, &blk.v_triplet.p),
                        lambda: reg.bind(tape, &blk.v_triplet.lambda),
                        q: reg.bind(tape, &blk.v_triplet.q),
                    },
                })
                .collect(),
            final_gain: reg.bind(tape, &self.final_gain),
            final_bias: reg.bind(tape, &self.final_bias),
        }
    }
}

/// Extracts non-overlapping p×p×3 patches in raster order, each flattened
/// row-major (pixel-major, RGB interleaved). Pure data movement, no tape.
pub fn extract_patches(image: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    let side = config.image_size;
    if image.shape() != [side, side, 3] {
        return Err(SsomError::Dimension {
            op: "extract_patches",
            got: image.shape().to_vec(),
            expected: format!("[{side}, {side}, 3]"),
        });
    }
    let p = config.patch_size;
    let grid = config.grid();
    let plen = config.patch_len();
    let mut out = Vec::with_capacity(config.token_count() * plen);
    for pr in 0..grid {
        for pc in 0..grid {
            for qr in 0..p {
                for qc in 0..p {
                    let base = ((pr * p + qr) * side + (pc * p + qc)) * 3;
                    out.extend_from_slice(&image.data()[base..base + 3]);
                }
            }
        }
    }
    Tensor::matrix(config.token_count(), plen, out)
}

/// Patch tokens: flattened patches through the frozen projection, plus the
/// frozen positional embedding.
pub fn patchify(tape: &Tape, image: &Tensor, enc: &Encoder, ids: &EncoderIds) -> Result<Id> {
    let patches = extract_patches(image, &enc.config)?;
    let patches_id = tape.leaf(&patches, false);
    let projected = tape.matmul(patches_id, ids.patch_proj)?;
    let biased = tape.add_row_broadcast(projected, ids.patch_bias)?;
    tape.add(biased, ids.pos_embed)
}

/// 0/1 column-selection matrix picking head `h`'s slice of the embedding.
fn head_selector(tape: &Tape, n: usize, head_dim: usize, h: usize) -> Id {
    let mut sel = Tensor::zeros(vec![n, head_dim]);
    for j in 0..head_dim {
        sel.data_mut()[(h * head_dim + j) * head_dim + j] = 1.0;
    }
    tape.leaf(&sel, false)
}

/// Pre-norm block: tokens + Attn(LN1(tokens)), then + MLP(LN2(·)).
/// Q and V projections route through the adapters when `use_adapters`.
pub fn adapted_attention_block(
    tape: &Tape,
    tokens: Id,
    cfg: &EncoderConfig,
    ids: &BlockIds,
    use_adapters: bool,
) -> Result<Id> {
    let n = cfg.embed_dim;
    let hd = cfg.head_dim();

    let ln1 = tape.layer_norm_rows(tokens, ids.ln1_gain, ids.ln1_bias)?;
    let x_cols = tape.transpose(ln1)?;
    let (q_cols, v_cols) = if use_adapters {
        (
            adapted_forward(tape, x_cols, ids.wq, ids.q_triplet)?,
            adapted_forward(tape, x_cols, ids.wv, ids.v_triplet)?,
        )
    } else {
        (tape.matmul(ids.wq, x_cols)?, tape.matmul(ids.wv, x_cols)?)
    };
    let k_cols = tape.matmul(ids.wk, x_cols)?;
    let q_rows = tape.transpose(q_cols)?;
    let k_rows = tape.transpose(k_cols)?;
    let v_rows = tape.transpose(v_cols)?;

    // Scale is 1/sqrt(head_dim), the per-head projection dimension.
    let scale = 1.0 / (hd as f64).sqrt();
    let mut concat: Option<Id> = None;
    for h in 0..cfg.num_heads {
        let sel = head_selector(tape, n, hd, h);
        let q_h = tape.matmul(q_rows, sel)?;
        let k_h = tape.matmul(k_rows, sel)?;
        let v_h = tape.matmul(v_rows, sel)?;
        let scores = tape.scale(tape.matmul(q_h, tape.transpose(k_h)?)?, scale)?;
        let weights = tape.softmax_rows(scores)?;
        let att = tape.matmul(weights, v_h)?;
        let placed = tape.matmul(att, tape.transpose(sel)?)?;
        concat = Some(match concat {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    let concat = concat.expect("at least one head");
    let out_cols = tape.matmul(ids.wo, tape.transpose(concat)?)?;
    let attn_out = tape.transpose(out_cols)?;
    let after_attn = tape.add(tokens, attn_out)?;

    let ln2 = tape.layer_norm_rows(after_attn, ids.ln2_gain, ids.ln2_bias)?;
    let h1 = tape.add_row_broadcast(tape.matmul(ln2, ids.mlp_w1)?, ids.mlp_b1)?;
    let act = tape.gelu(h1)?;
    let h2 = tape.add_row_broadcast(tape.matmul(act, ids.mlp_w2)?, ids.mlp_b2)?;
    tape.add(after_attn, h2)
}

/// Full encoder forward: patchify, every block in order, final layer norm.
pub fn encode_on(
    tape: &Tape,
    image: &Tensor,
    enc: &Encoder,
    ids: &EncoderIds,
    use_adapters: bool,
) -> Result<Id> {
    let mut tokens = patchify(tape, image, enc, ids)?;
    for block_ids in &ids.blocks {
        tokens = adapted_attention_block(tape, tokens, &enc.config, block_ids, use_adapters)?;
    }
    tape.layer_norm_rows(tokens, ids.final_gain, ids.final_bias)
}

/// Convenience: encode on a throwaway tape and return the token matrix.
pub fn encode(image: &Tensor, enc: &Encoder, use_adapters: bool) -> Result<Tensor> {
    let tape = Tape::new();
    let mut reg = Bindings::default();
    let ids = enc.bind(&tape, &mut reg);
    let out = encode_on(&tape, image, enc, &ids, use_adapters)?;
    Ok(tape.value(out))
}
