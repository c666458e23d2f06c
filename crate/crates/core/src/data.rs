//! Dataset container format and synthetic data generation.
//!
//! A dataset is a directory holding four files:
//!
//! * `manifest`: `key: value` text (see [`crate::kv`]) with counts,
//!   dimensions, image ids and a byte size plus CRC-32 per blob;
//! * `regions.bin`: region features, little-endian `f32`, image-major,
//!   `images × k × d_raw` values;
//! * `tokens.bin`: every caption's token ids back to back, little-endian `u32`;
//! * `offsets.bin`: little-endian `u64`: `images + 1` caption offsets
//!   followed by `captions + 1` token offsets.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest";
pub const REGIONS_BLOB: &str = "regions.bin";
pub const TOKENS_BLOB: &str = "tokens.bin";
pub const OFFSETS_BLOB: &str = "offsets.bin";
const FORMAT_TAG: &str = "tshsr-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One image's region features and its captions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    /// `[K×D_raw]`.
    pub regions: Tensor,
    pub captions: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub vocab_size: usize,
    pub max_len: usize,
    pub bundles: Vec<FeatureBundle>,
}

/// What a dataset's manifest records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub images: usize,
    pub captions: usize,
    pub tokens: usize,
    pub k: usize,
    pub d_raw: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub image_ids: Vec<String>,
    /// `(blob, byte size, crc32)` for each blob file.
    pub blobs: Vec<(String, u64, u32)>,
}

impl Dataset {
    pub fn num_images(&self) -> usize {
        self.bundles.len()
    }

    pub fn num_captions(&self) -> usize {
        self.bundles.iter().map(|b| b.captions.len()).sum()
    }

    /// `(K, D_raw)` of the first bundle, `(0, 0)` when empty.
    pub fn region_shape(&self) -> (usize, usize) {
        self.bundles
            .first()
            .and_then(|b| b.regions.dims2().ok())
            .unwrap_or((0, 0))
    }

    /// Checks the uniformity and range invariants.
    pub fn validate(&self) -> Result<()> {
        let (k, d) = self.region_shape();
        for b in &self.bundles {
            if b.regions.dims2()? != (k, d) {
                return Err(Error::Dimension(format!(
                    "image `{}` has regions {:?}, expected [{k}, {d}]",
                    b.image_id,
                    b.regions.shape()
                )));
            }
            if b.captions.is_empty() {
                return Err(Error::Input(format!("image `{}` has no captions", b.image_id)));
            }
            if b.image_id.is_empty() || b.image_id.contains([',', '\n', '\r']) {
                return Err(Error::Input(format!(
                    "image id `{}` must be non-empty without commas or newlines",
                    b.image_id
                )));
            }
            for c in &b.captions {
                if c.is_empty() || c.len() > self.max_len {
                    return Err(Error::Input(format!(
                        "image `{}` has a caption of length {} (allowed 1..={})",
                        b.image_id,
                        c.len(),
                        self.max_len
                    )));
                }
                if let Some(bad) = c.iter().find(|&&t| t as usize >= self.vocab_size) {
                    return Err(Error::Input(format!(
                        "image `{}` uses token {bad} outside the vocabulary of {}",
                        b.image_id, self.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every caption flattened, with the index of the image it belongs to.
    pub fn flat_captions(&self) -> (Vec<Vec<u32>>, Vec<usize>) {
        let mut caps = Vec::with_capacity(self.num_captions());
        let mut owner = Vec::with_capacity(self.num_captions());
        for (i, b) in self.bundles.iter().enumerate() {
            for c in &b.captions {
                caps.push(c.clone());
                owner.push(i);
            }
        }
        (caps, owner)
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.bundles.iter().map(|b| b.regions.clone()).collect()
    }

    /// The bundles in `range` as a dataset of their own.
    pub fn subset(&self, range: std::ops::Range<usize>, split: Split) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            bundles: self.bundles[range].to_vec(),
        }
    }
}

fn blob_entry(doc: &mut KvDoc, name: &str, bytes: &[u8]) -> (String, u64, u32) {
    let crc = crc32fast::hash(bytes);
    doc.push(format!("{name}.bytes"), bytes.len().to_string());
    doc.push(format!("{name}.crc32"), format!("{crc:08x}"));
    (name.to_string(), bytes.len() as u64, crc)
}

/// Writes `dataset` into the directory `path` (created if needed).
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<DatasetManifest> {
    dataset.validate()?;
    let (k, d_raw) = dataset.region_shape();

    let mut regions = Vec::with_capacity(dataset.num_images() * k * d_raw * 4);
    let mut tokens = Vec::new();
    let mut caption_offsets = vec![0u64];
    let mut token_offsets = vec![0u64];
    let mut token_count = 0u64;
    for b in &dataset.bundles {
        for &x in b.regions.data() {
            regions.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for c in &b.captions {
            for &t in c {
                tokens.extend_from_slice(&t.to_le_bytes());
            }
            token_count += c.len() as u64;
            token_offsets.push(token_count);
        }
        caption_offsets.push(caption_offsets.last().unwrap() + b.captions.len() as u64);
    }
    let mut offsets = Vec::with_capacity((caption_offsets.len() + token_offsets.len()) * 8);
    for o in caption_offsets.iter().chain(&token_offsets) {
        offsets.extend_from_slice(&o.to_le_bytes());
    }

    let image_ids: Vec<String> = dataset.bundles.iter().map(|b| b.image_id.clone()).collect();
    let mut doc = KvDoc::new();
    doc.push("format", FORMAT_TAG);
    doc.push("version", FORMAT_VERSION.to_string());
    doc.push("name", dataset.name.clone());
    doc.push("split", dataset.split.as_str());
    doc.push("images", dataset.num_images().to_string());
    doc.push("captions", dataset.num_captions().to_string());
    doc.push("tokens", token_count.to_string());
    doc.push("k", k.to_string());
    doc.push("d_raw", d_raw.to_string());
    doc.push("vocab_size", dataset.vocab_size.to_string());
    doc.push("max_len", dataset.max_len.to_string());
    doc.push("image_ids", image_ids.join(","));
    let blobs = vec![
        blob_entry(&mut doc, REGIONS_BLOB, &regions),
        blob_entry(&mut doc, TOKENS_BLOB, &tokens),
        blob_entry(&mut doc, OFFSETS_BLOB, &offsets),
    ];

    fs::create_dir_all(path)?;
    fs::write(path.join(REGIONS_BLOB), &regions)?;
    fs::write(path.join(TOKENS_BLOB), &tokens)?;
    fs::write(path.join(OFFSETS_BLOB), &offsets)?;
    fs::write(path.join(MANIFEST), doc.to_string())?;

    Ok(DatasetManifest {
        name: dataset.name.clone(),
        split: dataset.split,
        images: dataset.num_images(),
        captions: dataset.num_captions(),
        tokens: token_count as usize,
        k,
        d_raw,
        vocab_size: dataset.vocab_size,
        max_len: dataset.max_len,
        image_ids,
        blobs,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path.join(MANIFEST))?;
    let doc = KvDoc::parse(&text).map_err(|e| Error::load(MANIFEST, e.to_string()))?;
    if doc.require("format")? != FORMAT_TAG {
        return Err(Error::load("format", format!("expected `{FORMAT_TAG}`")));
    }
    let version: u32 = doc.require_parsed("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::load("version", format!("unsupported version {version}")));
    }
    let images: usize = doc.require_parsed("images")?;
    let ids_raw = doc.require("image_ids")?;
    let image_ids: Vec<String> = if ids_raw.is_empty() {
        Vec::new()
    } else {
        ids_raw.split(',').map(str::to_string).collect()
    };
    if image_ids.len() != images {
        return Err(Error::load(
            "image_ids",
            format!("{} ids listed for {images} images", image_ids.len()),
        ));
    }
    let mut blobs = Vec::new();
    for name in [REGIONS_BLOB, TOKENS_BLOB, OFFSETS_BLOB] {
        let bytes: u64 = doc.require_parsed(&format!("{name}.bytes"))?;
        let crc_key = format!("{name}.crc32");
        let crc = u32::from_str_radix(doc.require(&crc_key)?, 16)
            .map_err(|_| Error::load(&crc_key, "not a hexadecimal checksum"))?;
        blobs.push((name.to_string(), bytes, crc));
    }
    Ok(DatasetManifest {
        name: doc.require("name")?.to_string(),
        split: doc.require("split")?.parse().map_err(|_| Error::load("split", "unknown split"))?,
        images,
        captions: doc.require_parsed("captions")?,
        tokens: doc.require_parsed("tokens")?,
        k: doc.require_parsed("k")?,
        d_raw: doc.require_parsed("d_raw")?,
        vocab_size: doc.require_parsed("vocab_size")?,
        max_len: doc.require_parsed("max_len")?,
        image_ids,
        blobs,
    })
}

/// Reads a blob after checking its size against what the manifest implies
/// (`expected`) and what it records, then its checksum.
fn read_blob(path: &Path, manifest: &DatasetManifest, name: &str, expected: Option<u64>) -> Result<Vec<u8>> {
    let &(_, recorded, crc) = manifest
        .blobs
        .iter()
        .find(|(n, _, _)| n == name)
        .ok_or_else(|| Error::load(name, "not listed in the manifest"))?;
    let expected = expected.ok_or_else(|| Error::load(name, "manifest counts overflow"))?;
    if recorded != expected {
        return Err(Error::load(
            name,
            format!("manifest records {recorded} bytes but its counts imply {expected}"),
        ));
    }
    let file = path.join(name);
    let actual = fs::metadata(&file)?.len();
    if actual != expected {
        return Err(Error::load(
            name,
            format!("blob is {actual} bytes, expected {expected} (truncated or padded)"),
        ));
    }
    let bytes = fs::read(&file)?;
    if crc32fast::hash(&bytes) != crc {
        return Err(Error::load(name, "checksum mismatch"));
    }
    Ok(bytes)
}

fn checked_bytes(counts: &[usize], width: u64) -> Option<u64> {
    counts
        .iter()
        .try_fold(width, |acc, &c| acc.checked_mul(c as u64))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let m = read_manifest(path)?;
    let regions = read_blob(path, &m, REGIONS_BLOB, checked_bytes(&[m.images, m.k, m.d_raw], 4))?;
    let tokens = read_blob(path, &m, TOKENS_BLOB, checked_bytes(&[m.tokens], 4))?;
    let n_offsets = m.images.checked_add(m.captions).and_then(|n| n.checked_add(2));
    let offsets = read_blob(
        path,
        &m,
        OFFSETS_BLOB,
        n_offsets.and_then(|n| checked_bytes(&[n], 8)),
    )?;

    let offsets: Vec<u64> = offsets
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (caption_offsets, token_offsets) = offsets.split_at(m.images + 1);
    check_offsets(caption_offsets, m.captions as u64, "caption offsets")?;
    check_offsets(token_offsets, m.tokens as u64, "token offsets")?;

    let tokens: Vec<u32> = tokens
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= m.vocab_size) {
        return Err(Error::load(TOKENS_BLOB, format!("token {bad} outside vocab_size {}", m.vocab_size)));
    }
    let floats: Vec<f64> = regions
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();

    let per_image = m.k * m.d_raw;
    let mut bundles = Vec::with_capacity(m.images);
    for (i, id) in m.image_ids.iter().enumerate() {
        let (c0, c1) = (caption_offsets[i] as usize, caption_offsets[i + 1] as usize);
        if c0 == c1 {
            return Err(Error::load(OFFSETS_BLOB, format!("image `{id}` has no captions")));
        }
        let mut captions = Vec::with_capacity(c1 - c0);
        for c in c0..c1 {
            let (t0, t1) = (token_offsets[c] as usize, token_offsets[c + 1] as usize);
            if t0 == t1 || t1 - t0 > m.max_len {
                return Err(Error::load(
                    OFFSETS_BLOB,
                    format!("caption {c} has length {} (allowed 1..={})", t1 - t0, m.max_len),
                ));
            }
            captions.push(tokens[t0..t1].to_vec());
        }
        let regions = Tensor::matrix(m.k, m.d_raw, floats[i * per_image..(i + 1) * per_image].to_vec())
            .map_err(|e| Error::load("k", e.to_string()))?;
        bundles.push(FeatureBundle {
            image_id: id.clone(),
            regions,
            captions,
        });
    }
    Ok(Dataset {
        name: m.name,
        split: m.split,
        vocab_size: m.vocab_size,
        max_len: m.max_len,
        bundles,
    })
}

fn check_offsets(offsets: &[u64], end: u64, what: &str) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&end) {
        return Err(Error::load(OFFSETS_BLOB, format!("{what} do not span 0..{end}")));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::load(OFFSETS_BLOB, format!("{what} are not monotone")));
    }
    Ok(())
}

/// Width of the latent code shared by a synthetic image and its captions.
pub const LATENT_DIM: usize = 8;

/// Parameters of [`gen_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub k: usize,
    pub d_raw: usize,
    /// Maximum caption length; lengths vary between `ceil(len/2)` and `len`.
    pub len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub signal_strength: f64,
    pub captions_per_image: usize,
    /// Multiplies every region feature.
    pub region_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_pairs: 16,
            k: 4,
            d_raw: 8,
            len: 6,
            vocab_size: 50,
            seed: 0,
            signal_strength: 1.0,
            captions_per_image: 1,
            region_scale: 1.0,
        }
    }
}

/// Per-pair latent codes behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticLatents {
    pub image: Vec<Vec<f64>>,
    /// Latent of each image's first caption.
    pub text: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Deterministic synthetic image-caption pairs.
///
/// Each pair draws a shared code `u`; the image side sees
/// `s·u + sqrt(1−s²)·n_img` and each caption `s·u + sqrt(1−s²)·n_txt` with
/// independent noise codes, where `s` is the signal strength. Region `i`
/// is a fixed random linear map of the image code plus small noise, times
/// `region_scale`; token `j` is the vocabulary entry whose prototype best
/// matches a fixed position-specific rotation of the caption code.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    gen_synthetic_with_latents(spec).map(|(d, _)| d)
}

pub fn gen_synthetic_with_latents(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticLatents)> {
    let counts = [
        ("pairs", spec.n_pairs),
        ("k", spec.k),
        ("d_raw", spec.d_raw),
        ("len", spec.len),
        ("vocab_size", spec.vocab_size),
        ("captions_per_image", spec.captions_per_image),
    ];
    if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    let s = spec.signal_strength;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("signal_strength must lie in [0, 1], got {s}")));
    }
    if !(spec.region_scale > 0.0 && spec.region_scale.is_finite()) {
        return Err(Error::Config(format!("region_scale must be positive, got {}", spec.region_scale)));
    }
    let q = LATENT_DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let region_maps: Vec<Vec<f64>> = (0..spec.k)
        .map(|_| normal_vec(&mut rng, spec.d_raw * q, 1.0 / (q as f64).sqrt()))
        .collect();
    let prototypes = normal_vec(&mut rng, spec.vocab_size * q, 1.0);
    let rotations: Vec<Vec<f64>> = (0..spec.len)
        .map(|_| normal_vec(&mut rng, q * q, 1.0 / (q as f64).sqrt()))
        .collect();
    let noise_w = (1.0 - s * s).max(0.0).sqrt();

    let mix = |u: &[f64], n: &[f64]| -> Vec<f64> { u.iter().zip(n).map(|(a, b)| s * a + noise_w * b).collect() };
    let mut bundles = Vec::with_capacity(spec.n_pairs);
    let mut latents = SyntheticLatents {
        image: Vec::new(),
        text: Vec::new(),
    };
    for p in 0..spec.n_pairs {
        let u = normal_vec(&mut rng, q, 1.0);
        let z_img = mix(&u, &normal_vec(&mut rng, q, 1.0));
        let mut regions = Vec::with_capacity(spec.k * spec.d_raw);
        for map in &region_maps {
            for r in 0..spec.d_raw {
                let clean: f64 = (0..q).map(|c| map[r * q + c] * z_img[c]).sum();
                let noisy = spec.region_scale * (clean + 0.1 * rng.sample::<f64, _>(StandardNormal));
                // stored values are exactly representable on disk
                regions.push(noisy as f32 as f64);
            }
        }
        let mut captions = Vec::with_capacity(spec.captions_per_image);
        for c in 0..spec.captions_per_image {
            let z_txt = mix(&u, &normal_vec(&mut rng, q, 1.0));
            if c == 0 {
                latents.text.push(z_txt.clone());
            }
            let len = rng.gen_range(spec.len.div_ceil(2)..=spec.len);
            let caption = (0..len)
                .map(|j| {
                    let rot = &rotations[j];
                    let code: Vec<f64> = (0..q)
                        .map(|a| (0..q).map(|b| rot[a * q + b] * z_txt[b]).sum())
                        .collect();
                    let best = (0..spec.vocab_size)
                        .map(|v| {
                            let score: f64 = (0..q).map(|a| prototypes[v * q + a] * code[a]).sum();
                            (v, score)
                        })
                        .fold((0, f64::NEG_INFINITY), |b, (v, sc)| if sc > b.1 { (v, sc) } else { b });
                    best.0 as u32
                })
                .collect();
            captions.push(caption);
        }
        latents.image.push(z_img);
        bundles.push(FeatureBundle {
            image_id: format!("syn{p:06}"),
            regions: Tensor::matrix(spec.k, spec.d_raw, regions)?,
            captions,
        });
    }
    let dataset = Dataset {
        name: format!("synthetic-s{}", spec.seed),
        split: Split::Train,
        vocab_size: spec.vocab_size,
        max_len: spec.len,
        bundles,
    };
    Ok((dataset, latents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let empty = Dataset {
            name: "empty".into(),
            split: Split::Test,
            vocab_size: 10,
            max_len: 4,
            bundles: Vec::new(),
        };
        let m = write_dataset(&empty, dir.path()).unwrap();
        assert_eq!((m.images, m.captions, m.tokens, m.k, m.d_raw), (0, 0, 0, 0, 0));
        assert_eq!(read_dataset(dir.path()).unwrap(), empty);
    }

    #[test]
    fn single_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset {
            name: "one".into(),
            split: Split::Val,
            vocab_size: 7,
            max_len: 3,
            bundles: vec![FeatureBundle {
                image_id: "img-a".into(),
                regions: Tensor::matrix(2, 4, vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 2.0, -0.75, 8.0]).unwrap(),
                captions: vec![vec![1, 2, 6], vec![0]],
            }],
        };
        write_dataset(&d, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn write_validates_input() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = gen_synthetic(&SyntheticSpec { n_pairs: 2, ..Default::default() }).unwrap();
        d.bundles[1].regions = Tensor::zeros(&[3, 8]).unwrap();
        assert!(write_dataset(&d, dir.path()).is_err());
        let mut d = gen_synthetic(&SyntheticSpec { n_pairs: 2, ..Default::default() }).unwrap();
        d.bundles[0].image_id = "a,b".into();
        assert!(write_dataset(&d, dir.path()).is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec { n_pairs: 5, captions_per_image: 3, ..Default::default() };
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        assert_ne!(a, gen_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap());
        assert_eq!(a.num_captions(), 15);
        a.validate().unwrap();
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        for spec in [
            SyntheticSpec { n_pairs: 0, ..Default::default() },
            SyntheticSpec { k: 0, ..Default::default() },
            SyntheticSpec { signal_strength: 1.5, ..Default::default() },
            SyntheticSpec { signal_strength: -0.1, ..Default::default() },
        ] {
            assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
        }
    }
}
