//! On-disk formats.
//!
//! Binary containers (checkpoints and inverted latents) share one layout:
//!
//! ```text
//! magic      8 bytes   b"MLCKPT01" or b"MLLATN01"
//! header_len u32 LE
//! header     JSON, header_len bytes
//! payload    f32 LE tensors, in header order, row-major
//! ```
//!
//! Records (manifests, scores, embeddings) are JSON lines. Images are
//! single-channel 16-bit PNGs mapping `[-1, 1]` linearly onto `0..=65535`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentState;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Shape3;
use crate::toy::{ConvEmbedder, DenoiserModel, MadDetector, PatchAutoencoder};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLCKPT01";
pub const LATENT_MAGIC: &[u8; 8] = b"MLLATN01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `denoiser`, `embedder`, `mad` or `autoencoder`.
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Extra construction arguments (image shape, class count, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn write_container(path: &Path, magic: &[u8; 8], header: &impl Serialize, tensors: &[&[f32]]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for t in tensors {
        for &v in *t {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, BufReader<File>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("{} has an unexpected magic number", path.display())));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    Ok((serde_json::from_slice(&json)?, r))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| Error::Format(format!("truncated tensor payload: {e}")))?;
    Ok(out)
}

fn ensure_eof(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(())
}

pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    seed: u64,
    config: &impl Serialize,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_owned(),
        seed,
        config: serde_json::to_value(config)?,
        meta,
        tensors: store
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.to_owned(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let data: Vec<Vec<f32>> = store.iter().map(|(_, v)| v.iter().copied().collect()).collect();
    let refs: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
    write_container(path, CHECKPOINT_MAGIC, &header, &refs)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let (header, mut r): (CheckpointHeader, _) = read_container(path, CHECKPOINT_MAGIC)?;
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let [rows, cols] = t.shape[..] else {
            return Err(Error::Format(format!("tensor {} is not two-dimensional", t.name)));
        };
        let values = read_f32s(&mut r, rows * cols)?;
        let arr = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
        store.add(t.name.clone(), arr);
    }
    ensure_eof(&mut r)?;
    Ok((header, store))
}

fn expect_kind(header: &CheckpointHeader, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    Ok(())
}

fn meta_field<T: DeserializeOwned>(header: &CheckpointHeader, key: &str) -> Result<T> {
    let v = header
        .meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint meta lacks {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn save_denoiser(path: &Path, model: &DenoiserModel) -> Result<()> {
    write_checkpoint(path, "denoiser", model.config.seed, &model.config, serde_json::json!({}), &model.store)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserModel> {
    let (header, store) = read_checkpoint(path)?;
    expect_kind(&header, "denoiser")?;
    let mut model = DenoiserModel::new(serde_json::from_value(header.config)?)?;
    model.store.load_from(&store)?;
    Ok(model)
}

pub fn save_embedder(path: &Path, model: &ConvEmbedder) -> Result<()> {
    let meta = serde_json::json!({ "image_shape": model.image_shape, "n_classes": model.n_classes });
    write_checkpoint(path, "embedder", model.config.seed, &model.config, meta, &model.store)
}

pub fn load_embedder(path: &Path) -> Result<ConvEmbedder> {
    let (header, store) = read_checkpoint(path)?;
    expect_kind(&header, "embedder")?;
    let shape: Shape3 = meta_field(&header, "image_shape")?;
    let n: usize = meta_field(&header, "n_classes")?;
    let mut model = ConvEmbedder::new(serde_json::from_value(header.config)?, shape, n)?;
    model.store.load_from(&store)?;
    Ok(model)
}

pub fn save_mad(path: &Path, model: &MadDetector) -> Result<()> {
    let meta = serde_json::json!({ "image_shape": model.image_shape });
    write_checkpoint(path, "mad", model.config.seed, &model.config, meta, &model.store)
}

pub fn load_mad(path: &Path) -> Result<MadDetector> {
    let (header, store) = read_checkpoint(path)?;
    expect_kind(&header, "mad")?;
    let shape: Shape3 = meta_field(&header, "image_shape")?;
    let mut model = MadDetector::new(serde_json::from_value(header.config)?, shape)?;
    model.store.load_from(&store)?;
    Ok(model)
}

pub fn save_autoencoder(path: &Path, model: &PatchAutoencoder) -> Result<()> {
    let meta = serde_json::json!({ "image_shape": model.image_shape });
    write_checkpoint(path, "autoencoder", model.config.seed, &model.config, meta, &model.store)
}

pub fn load_autoencoder(path: &Path) -> Result<PatchAutoencoder> {
    let (header, store) = read_checkpoint(path)?;
    expect_kind(&header, "autoencoder")?;
    let shape: Shape3 = meta_field(&header, "image_shape")?;
    let mut model = PatchAutoencoder::new(serde_json::from_value(header.config)?, shape)?;
    model.store.load_from(&store)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentEntry {
    id: String,
    timestep: usize,
    shape: Shape3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentHeader {
    entries: Vec<LatentEntry>,
}

/// Inverted latents keyed by source image id.
pub fn write_latents(path: &Path, latents: &[(String, LatentState)]) -> Result<()> {
    let header = LatentHeader {
        entries: latents
            .iter()
            .map(|(id, z)| LatentEntry {
                id: id.clone(),
                timestep: z.timestep,
                shape: z.shape(),
            })
            .collect(),
    };
    let data: Vec<Vec<f32>> = latents.iter().map(|(_, z)| z.values.iter().copied().collect()).collect();
    let refs: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
    write_container(path, LATENT_MAGIC, &header, &refs)
}

pub fn read_latents(path: &Path) -> Result<Vec<(String, LatentState)>> {
    let (header, mut r): (LatentHeader, _) = read_container(path, LATENT_MAGIC)?;
    let mut out = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let values = read_f32s(&mut r, e.shape.len())?;
        let arr = Array3::from_shape_vec(e.shape.dims(), values).map_err(|err| Error::Format(err.to_string()))?;
        out.push((e.id, LatentState::new(e.timestep, arr)?));
    }
    ensure_eof(&mut r)?;
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn to_u16(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

fn from_u16(v: u16) -> f32 {
    v as f32 / 65535.0 * 2.0 - 1.0
}

/// Rounds an image to the values it will have after a PNG round trip.
pub fn quantize_image(image: &Array3<f32>) -> Array3<f32> {
    image.mapv(|v| from_u16(to_u16(v)))
}

pub fn write_png16(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 1 {
        return Err(Error::Param(format!("PNG export supports one channel, got {c}")));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let buf: Vec<u16> = image.iter().map(|&v| to_u16(v)).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png16(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let values: Vec<f32> = img.into_raw().into_iter().map(from_u16).collect();
    Array3::from_shape_vec((1, h as usize, w as usize), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(crate::tensor::hex(&Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian;
    use crate::toy::{DenoiserConfig, EmbedderConfig, MadConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_denoiser() -> DenoiserConfig {
        DenoiserConfig {
            latent: Shape3::new(1, 8, 8),
            patch: 4,
            width: 8,
            depth: 1,
            heads: 2,
            key_dim: 4,
            context_tokens: 2,
            id_dim: 4,
            mlp_ratio: 2,
            seed: 9,
        }
    }

    #[test]
    fn denoiser_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/denoiser.bin");
        let mut model = DenoiserModel::new(tiny_denoiser()).unwrap();
        model.store.get_mut(crate::nn::ParamId(0))[(0, 0)] = 3.25;
        save_denoiser(&path, &model).unwrap();
        let back = load_denoiser(&path).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
        assert!(load_embedder(&path).is_err());
    }

    #[test]
    fn embedder_and_mad_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape3::new(1, 16, 16);
        let cfg = EmbedderConfig { channels: [2, 2, 2], embed_dim: 4, ..EmbedderConfig::default() };
        let e = ConvEmbedder::new(cfg, shape, 3).unwrap();
        save_embedder(&dir.path().join("e.bin"), &e).unwrap();
        let e2 = load_embedder(&dir.path().join("e.bin")).unwrap();
        assert_eq!(e2.store, e.store);
        assert_eq!(e2.n_classes, 3);
        let m = MadDetector::new(MadConfig { channels: [2, 2, 2], ..MadConfig::default() }, shape).unwrap();
        save_mad(&dir.path().join("m.bin"), &m).unwrap();
        assert_eq!(load_mad(&dir.path().join("m.bin")).unwrap().store, m.store);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOTMAGIC\0\0\0\0").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
        let model = DenoiserModel::new(tiny_denoiser()).unwrap();
        save_denoiser(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn latents_round_trip_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lat.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = vec![
            ("a".to_string(), LatentState::new(1000, gaussian(Shape3::new(1, 4, 4), &mut rng)).unwrap()),
            ("b".to_string(), LatentState::new(1000, gaussian(Shape3::new(2, 2, 2), &mut rng)).unwrap()),
        ];
        write_latents(&path, &z).unwrap();
        assert_eq!(read_latents(&path).unwrap(), z);
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(Shape3::new(1, 8, 6), &mut rng).mapv(|v| (v * 0.4).clamp(-1.0, 1.0));
        write_png16(&path, &x).unwrap();
        let back = read_png16(&path).unwrap();
        assert_eq!(back, quantize_image(&x));
        assert!(crate::tensor::mse(&back, &x) < 1e-9);
        assert_eq!(quantize_image(&back), back);
    }

    #[test]
    fn jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = vec![TensorEntry { name: "a".into(), shape: vec![1, 2] }, TensorEntry { name: "b".into(), shape: vec![] }];
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(read_jsonl::<TensorEntry>(&path).unwrap(), recs);
        append_jsonl(&path, &recs[0]).unwrap();
        assert_eq!(read_jsonl::<TensorEntry>(&path).unwrap().len(), 3);
    }
}
