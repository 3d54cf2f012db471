//! Binary checkpoint format.
//!
//! Layout: magic `SSOM`, format version (u32 LE), header length (u32 LE),
//! UTF-8 JSON header, then a flat payload of f64 little-endian values. The
//! header carries a directory of named tensors with offsets (in f64 units)
//! into the payload; `kind = "full"` checkpoints additionally carry optimizer
//! moments and the training position so a run can resume bit-exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adalora::RankAllocator;
use crate::encoder::EncoderConfig;
use crate::error::{Result, SsomError};
use crate::model::SsomModel;
use crate::tensor::Tensor;
use crate::trainer::{Optimizer, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"SSOM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub encoder_config: EncoderConfig,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub optimizer_step: u64,
    pub directory: Vec<DirEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .header
            .directory
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| SsomError::Checkpoint(format!("missing tensor {name}")))?;
        Tensor::new(e.shape.clone(), self.payload[e.offset..e.offset + e.len].to_vec())
    }
}

fn encode(header: &CheckpointHeader, payload: &[f64]) -> Result<Vec<u8>> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| SsomError::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn collect_params(model: &SsomModel, frozen_only: bool) -> (Vec<DirEntry>, Vec<f64>) {
    let mut directory = Vec::new();
    let mut payload = Vec::new();
    model.for_each_param(&mut |p| {
        if frozen_only && !p.frozen {
            return;
        }
        directory.push(DirEntry {
            name: p.name.clone(),
            offset: payload.len(),
            len: p.tensor.len(),
            shape: p.tensor.shape().to_vec(),
            frozen: p.frozen,
        });
        payload.extend_from_slice(p.tensor.data());
    });
    (directory, payload)
}

/// Frozen backbone weights only: enough to verify or re-seat the base model.
pub fn save_base(path: &Path, model: &SsomModel) -> Result<()> {
    let (directory, payload) = collect_params(model, true);
    let header = CheckpointHeader {
        kind: "base".into(),
        encoder_config: model.config().clone(),
        train_config: None,
        step: 0,
        optimizer_step: 0,
        directory,
    };
    atomic_write(path, &encode(&header, &payload)?)
}

/// Every parameter plus optimizer moments and the training position.
pub fn save_full(
    path: &Path,
    model: &SsomModel,
    config: &TrainConfig,
    optimizer: &Optimizer,
    step: usize,
) -> Result<()> {
    let (mut directory, mut payload) = collect_params(model, false);
    for (name, (m, v)) in &optimizer.moments {
        for (prefix, data) in [("optim.m.", m), ("optim.v.", v)] {
            directory.push(DirEntry {
                name: format!("{prefix}{name}"),
                offset: payload.len(),
                len: data.len(),
                shape: vec![data.len()],
                frozen: false,
            });
            payload.extend_from_slice(data);
        }
    }
    let mut config = config.clone();
    config.schedule = Some(model.allocator.schedule.clone());
    let header = CheckpointHeader {
        kind: "full".into(),
        encoder_config: model.config().clone(),
        train_config: Some(config),
        step: step as u64,
        optimizer_step: optimizer.step,
        directory,
    };
    atomic_write(path, &encode(&header, &payload)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(SsomError::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(SsomError::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(SsomError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| SsomError::Checkpoint(format!("header parse failed: {e}")))?;
    let body = &bytes[12 + header_len..];
    if body.len() % 8 != 0 {
        return Err(SsomError::Checkpoint("payload is not a whole number of f64s".into()));
    }
    let payload: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    // directory must tile the payload exactly, in order
    let mut cursor = 0usize;
    for e in &header.directory {
        if e.offset != cursor {
            return Err(SsomError::Checkpoint(format!(
                "directory entry {} at offset {} but expected {cursor}",
                e.name, e.offset
            )));
        }
        if e.shape.iter().product::<usize>() != e.len {
            return Err(SsomError::Checkpoint(format!(
                "directory entry {} shape/length mismatch",
                e.name
            )));
        }
        cursor += e.len;
    }
    if cursor != payload.len() {
        return Err(SsomError::Checkpoint(format!(
            "payload holds {} values but the directory covers {cursor}",
            payload.len()
        )));
    }
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(SsomError::Checkpoint("payload contains non-finite values".into()));
    }
    Ok(Checkpoint { header, payload })
}

/// Overwrites the frozen parameters of `model` with the base checkpoint
/// contents. The frozen directories must match exactly.
pub fn apply_base(model: &mut SsomModel, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.header.kind != "base" {
        return Err(SsomError::Checkpoint(format!(
            "expected a base checkpoint, found kind {}",
            ckpt.header.kind
        )));
    }
    if &ckpt.header.encoder_config != model.config() {
        return Err(SsomError::Checkpoint("encoder config mismatch".into()));
    }
    let mut frozen_names = Vec::new();
    model.for_each_param(&mut |p| {
        if p.frozen {
            frozen_names.push(p.name.clone());
        }
    });
    let dir_names: Vec<&str> = ckpt.header.directory.iter().map(|e| e.name.as_str()).collect();
    if frozen_names != dir_names {
        return Err(SsomError::Checkpoint(
            "base checkpoint directory does not match the model's frozen parameter set".into(),
        ));
    }
    let mut err = None;
    model.for_each_param_mut(&mut |p| {
        if !p.frozen || err.is_some() {
            return;
        }
        match ckpt.tensor(&p.name) {
            Ok(t) if t.shape() == p.tensor.shape() => p.tensor = t,
            Ok(_) => err = Some(SsomError::Checkpoint(format!("shape mismatch for {}", p.name))),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Rebuilds model and trainer from a full checkpoint, bit-exactly.
pub fn load_full(path: &Path) -> Result<(SsomModel, Trainer)> {
    let ckpt = load(path)?;
    if ckpt.header.kind != "full" {
        return Err(SsomError::Checkpoint(format!(
            "expected a full checkpoint, found kind {}",
            ckpt.header.kind
        )));
    }
    let train_config = ckpt
        .header
        .train_config
        .clone()
        .ok_or_else(|| SsomError::Checkpoint("full checkpoint is missing train config".into()))?;
    let schedule = train_config
        .schedule
        .clone()
        .ok_or_else(|| SsomError::Checkpoint("full checkpoint is missing the budget schedule".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut allocator = RankAllocator::new(schedule);
    allocator.step = ckpt.header.step.saturating_sub(1) as usize;
    let mut model = SsomModel::new(ckpt.header.encoder_config.clone(), allocator, &mut rng)?;

    let mut err = None;
    model.for_each_param_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match ckpt.tensor(&p.name) {
            Ok(t) if t.shape() == p.tensor.shape() => p.tensor = t,
            Ok(_) => err = Some(SsomError::Checkpoint(format!("shape mismatch for {}", p.name))),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    let mut trainer = Trainer::new(train_config)?;
    trainer.global_step = ckpt.header.step as usize;
    trainer.optimizer.step = ckpt.header.optimizer_step;
    for e in &ckpt.header.directory {
        if let Some(name) = e.name.strip_prefix("optim.m.") {
            let m = ckpt.payload[e.offset..e.offset + e.len].to_vec();
            trainer.optimizer.moments.entry(name.to_string()).or_insert_with(|| (Vec::new(), Vec::new())).0 = m;
        } else if let Some(name) = e.name.strip_prefix("optim.v.") {
            let v = ckpt.payload[e.offset..e.offset + e.len].to_vec();
            trainer.optimizer.moments.entry(name.to_string()).or_insert_with(|| (Vec::new(), Vec::new())).1 = v;
        }
    }
    Ok((model, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adalora::BudgetSchedule;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> SsomModel {
        let config = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            adapter_rank: 2,
        };
        let schedule = BudgetSchedule::new(100, 10, 20, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SsomModel::new(config, RankAllocator::new(schedule), &mut rng).unwrap()
    }

    #[test]
    fn base_round_trip_is_bitwise() {
        let model = tiny_model(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        save_base(&path, &model).unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.header.kind, "base");
        let mut other = tiny_model(99); // different frozen weights
        apply_base(&mut other, &ckpt).unwrap();
        let mut names = Vec::new();
        model.for_each_param(&mut |p| names.push(p.name.clone()));
        for name in names {
            let mut want = None;
            let mut got = None;
            model.for_each_param(&mut |p| {
                if p.name == name && p.frozen {
                    want = Some(p.tensor.clone());
                }
            });
            other.for_each_param(&mut |p| {
                if p.name == name && p.frozen {
                    got = Some(p.tensor.clone());
                }
            });
            if let (Some(w), Some(g)) = (want, got) {
                assert!(w.bitwise_eq(&g), "mismatch in {name}");
            }
        }
    }

    #[test]
    fn full_round_trip_restores_everything() {
        let model = tiny_model(23);
        let config = TrainConfig::default();
        let mut optimizer = Optimizer::new(config.optimizer.clone());
        optimizer.begin_step();
        let mut fake = vec![0.5; 8];
        optimizer.update("prompt.embedding", &mut fake, &[0.1; 8], 1e-3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.ckpt");
        save_full(&path, &model, &config, &optimizer, 7).unwrap();
        let (restored, trainer) = load_full(&path).unwrap();

        assert_eq!(trainer.global_step, 7);
        assert_eq!(trainer.optimizer.step, 1);
        let (m, v) = &trainer.optimizer.moments["prompt.embedding"];
        let (m0, v0) = &optimizer.moments["prompt.embedding"];
        assert_eq!(m, m0);
        assert_eq!(v, v0);

        let mut pairs = Vec::new();
        model.for_each_param(&mut |p| pairs.push((p.name.clone(), p.tensor.clone())));
        restored.for_each_param(&mut |p| {
            let (name, want) = pairs.remove(0);
            assert_eq!(name, p.name);
            assert!(want.bitwise_eq(&p.tensor), "mismatch in {}", p.name);
        });
        assert!(pairs.is_empty());
    }

    #[test]
    fn save_is_deterministic() {
        let model = tiny_model(25);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_base(&p1, &model).unwrap();
        save_base(&p2, &model).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let model = tiny_model(27);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_base(&path, &model).unwrap();
        let good = fs::read(&path).unwrap();

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        // bad version
        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        // truncated payload breaks the directory coverage check
        let mut bad = good.clone();
        bad.truncate(good.len() - 8);
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        // ragged tail
        let mut bad = good.clone();
        bad.truncate(good.len() - 3);
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        // non-finite payload value
        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        fs::write(&path, &good).unwrap();
        assert!(load(&path).is_ok());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let model = tiny_model(29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        save_base(&path, &model).unwrap();
        assert!(load_full(&path).is_err());
        let ckpt = load(&path).unwrap();
        let config = TrainConfig::default();
        let optimizer = Optimizer::new(config.optimizer.clone());
        let full_path = dir.path().join("full.ckpt");
        save_full(&full_path, &model, &config, &optimizer, 0).unwrap();
        let full = load(&full_path).unwrap();
        let mut m = tiny_model(29);
        assert!(apply_base(&mut m, &full).is_err());
        assert!(apply_base(&mut m, &ckpt).is_ok());
    }
}
