//! Synthetic saliency corpus generation and bit-exact PPM/PGM file I/O.
//!
//! Every generated image carries one high-contrast ellipse or rectangle on
//! a low-contrast noise background; the mask is the exact rasterization of
//! the shape. All randomness flows from the caller's seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SsomError};
use crate::tensor::Tensor;

/// One dataset item: RGB image in [0,1] and a binary mask.
#[derive(Debug, Clone)]
pub struct SaliencySample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Tab-separated manifest; paths are relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: String,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// netpbm I/O

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(SsomError::Dimension {
            op: "write_ppm",
            got: shape.to_vec(),
            expected: "[H, W, 3]".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    out.extend(image.data().iter().map(|v| quantize(*v)));
    atomic_write(path, &out)
}

/// Binary PGM (P5, maxval 255) holding a {0,255} mask.
pub fn write_pgm_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(SsomError::Dimension {
            op: "write_pgm_mask",
            got: shape.to_vec(),
            expected: "[H, W]".into(),
        });
    }
    if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(SsomError::Data("mask values must be 0 or 1".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(mask.data().iter().map(|v| if *v == 1.0 { 255u8 } else { 0u8 }));
    atomic_write(path, &out)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<PnmHeader> {
    let bad = |msg: &str| SsomError::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(&format!("missing {magic} magic")));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("bad header integer"))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("header not terminated"));
    }
    pos += 1;
    if fields[2] != 255 {
        return Err(bad("maxval must be 255"));
    }
    Ok(PnmHeader {
        width: fields[0],
        height: fields[1],
        data_offset: pos,
    })
}

/// Reads a P6 image back as [H,W,3] floats k/255.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let hdr = parse_pnm_header(&bytes, "P6", path)?;
    let n = hdr.width * hdr.height * 3;
    let payload = &bytes[hdr.data_offset..];
    if payload.len() != n {
        return Err(SsomError::Data(format!(
            "{}: expected {n} payload bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    let data: Vec<f64> = payload.iter().map(|b| *b as f64 / 255.0).collect();
    Tensor::new(vec![hdr.height, hdr.width, 3], data)
}

/// Reads a P5 mask; any gray value other than 0 or 255 is rejected.
pub fn read_pgm_mask(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let hdr = parse_pnm_header(&bytes, "P5", path)?;
    let n = hdr.width * hdr.height;
    let payload = &bytes[hdr.data_offset..];
    if payload.len() != n {
        return Err(SsomError::Data(format!(
            "{}: expected {n} payload bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for b in payload {
        match b {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(SsomError::Data(format!(
                    "{}: non-binary mask value {other}",
                    path.display()
                )))
            }
        }
    }
    Tensor::new(vec![hdr.height, hdr.width], data)
}

// ---------------------------------------------------------------------------
// synthetic generation

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, a, b } => {
                let dx = (px - cx) / a;
                let dy = (py - cy) / b;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px <= x1 && py >= y0 && py <= y1,
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, side: f64) -> Shape {
    if rng.random_bool(0.5) {
        let a = rng.random_range(side * 0.12..side * 0.38);
        let b = rng.random_range(side * 0.12..side * 0.38);
        let cx = rng.random_range(a..side - a);
        let cy = rng.random_range(b..side - b);
        Shape::Ellipse { cx, cy, a, b }
    } else {
        let w = rng.random_range(side * 0.2..side * 0.6);
        let h = rng.random_range(side * 0.2..side * 0.6);
        let x0 = rng.random_range(0.0..side - w);
        let y0 = rng.random_range(0.0..side - h);
        Shape::Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        }
    }
}

/// One channel of the salient color: bright, with random hue. Against the
/// dark near-gray background every salient pixel has a high-contrast margin
/// of at least 0.25 per channel.
fn salient_channel(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.7..1.0)
}

const BACKGROUND_LEVEL: f64 = 0.35;

const MIN_AREA: f64 = 0.05;
const MAX_AREA: f64 = 0.40;

/// Deterministically renders one sample. The mask is the exact point-in-shape
/// rasterization at pixel centers; its area fraction lands in [0.05, 0.40].
pub fn generate_sample(id: &str, image_size: usize, rng: &mut ChaCha8Rng) -> Result<SaliencySample> {
    let side = image_size as f64;
    let n = image_size * image_size;
    let shape = loop {
        let candidate = sample_shape(rng, side);
        let area = (0..n)
            .filter(|i| {
                let (y, x) = (i / image_size, i % image_size);
                candidate.contains(x as f64 + 0.5, y as f64 + 0.5)
            })
            .count() as f64
            / n as f64;
        if (MIN_AREA..=MAX_AREA).contains(&area) {
            break candidate;
        }
    };
    let color = [salient_channel(rng), salient_channel(rng), salient_channel(rng)];
    let noise_amp = rng.random_range(0.02..0.08);

    let mut image = Vec::with_capacity(n * 3);
    let mut mask = Vec::with_capacity(n);
    for y in 0..image_size {
        for x in 0..image_size {
            let inside = shape.contains(x as f64 + 0.5, y as f64 + 0.5);
            mask.push(f64::from(inside));
            for c in color {
                let noise = rng.random_range(-noise_amp..noise_amp);
                let v = if inside { c + noise } else { BACKGROUND_LEVEL + noise };
                image.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(SaliencySample {
        id: id.to_string(),
        image: Tensor::new(vec![image_size, image_size, 3], image)?,
        mask: Tensor::new(vec![image_size, image_size], mask)?,
    })
}

/// Writes `n_samples` PPM/PGM pairs plus a manifest under `out_dir`.
pub fn generate_synthetic(
    out_dir: &Path,
    n_samples: usize,
    image_size: usize,
    seed: u64,
    split: &str,
) -> Result<DatasetManifest> {
    if n_samples == 0 {
        return Err(SsomError::Contract("n_samples must be >= 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let id = format!("{split}{i:05}");
        let sample = generate_sample(&id, image_size, &mut rng)?;
        let image_rel = PathBuf::from(format!("{id}.ppm"));
        let mask_rel = PathBuf::from(format!("{id}_mask.pgm"));
        write_ppm(&out_dir.join(&image_rel), &sample.image)?;
        write_pgm_mask(&out_dir.join(&mask_rel), &sample.mask)?;
        entries.push(ManifestEntry {
            id,
            image_path: image_rel,
            mask_path: mask_rel,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        split: split.to_string(),
        seed,
    };
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.tsv")
    }

    pub fn save(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root);
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            writeln!(f, "# split={}", self.split)?;
            writeln!(f, "# seed={}", self.seed)?;
            for e in &self.entries {
                writeln!(
                    f,
                    "{}\t{}\t{}",
                    e.id,
                    e.image_path.display(),
                    e.mask_path.display()
                )?;
            }
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::manifest_path(root);
        let text = fs::read_to_string(&path)?;
        let mut split = String::from("train");
        let mut seed = 0u64;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# split=") {
                split = rest.to_string();
                continue;
            }
            if let Some(rest) = line.strip_prefix("# seed=") {
                seed = rest
                    .parse()
                    .map_err(|_| SsomError::Data(format!("bad seed line in {}", path.display())))?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(SsomError::Data(format!(
                    "malformed manifest line in {}: {line:?}",
                    path.display()
                )));
            }
            if !seen.insert(parts[0].to_string()) {
                return Err(SsomError::Data(format!("duplicate sample id {}", parts[0])));
            }
            entries.push(ManifestEntry {
                id: parts[0].to_string(),
                image_path: PathBuf::from(parts[1]),
                mask_path: PathBuf::from(parts[2]),
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            split,
            seed,
        })
    }

    /// Loads every listed sample, in manifest order.
    pub fn load_samples(&self) -> Result<Vec<SaliencySample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(SaliencySample {
                    id: e.id.clone(),
                    image: read_ppm(&self.root.join(&e.image_path))?,
                    mask: read_pgm_mask(&self.root.join(&e.mask_path))?,
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// epoch sampling

/// Seeded permutation of 0..n for one epoch. The seed mixes the shuffle seed
/// with the epoch index so resumed runs replay identical orders.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch index lists for one epoch; the last partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = epoch_order(n, shuffle_seed, epoch);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
