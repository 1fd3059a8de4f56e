//! Interfaces to external generation and embedding pipelines.
//!
//! * Generation prompts `"{name}, {definition}"` and a JSON-lines manifest
//!   with one record per class for an image-synthesis tool.
//! * A tab-separated lexicon of class names and definitions.
//! * The `FPEB` embedding container: an 18-byte little-endian header
//!   (`"FPEB"`, `u16` version, `u32` feature dim, `u64` sample count)
//!   followed by `sample_count * feature_dim` `f32` values, row-major, plus a
//!   JSON-lines sidecar with `{class_id, origin, split}` per sample.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, EmbeddingSample, Origin, Split};
use crate::error::{Error, FormatError, Result};
use crate::extractor::{DenseLayer, MlpExtractor};
use crate::protocol::{CatalogEntry, ClassCatalog};
use crate::rng::derive_seed;

pub const MAGIC: [u8; 4] = *b"FPEB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;

/// Per-class image counts of the two reference datasets.
pub const CIFAR_IMAGES_PER_CLASS: usize = 500;
pub const IMAGENET_IMAGES_PER_CLASS: usize = 1300;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    /// `"{name}, {definition}"`
    #[default]
    Plain,
    /// `"a photo of a {name}, {definition}"`
    PhotoOf,
}

/// A generation prompt and an optional warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub prompt: String,
    pub warning: Option<String>,
}

pub fn build_generation_prompt(name: &str, definition: &str) -> Result<GenerationPrompt> {
    build_generation_prompt_with(name, definition, PromptTemplate::Plain)
}

pub fn build_generation_prompt_with(name: &str, definition: &str, template: PromptTemplate) -> Result<GenerationPrompt> {
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::Validation("generation prompt needs a class name".into()));
    }
    let definition = definition.trim();
    let warning = definition
        .is_empty()
        .then(|| format!("class {name:?} has no definition; homonyms are not disambiguated"));
    let prompt = match template {
        PromptTemplate::Plain => format!("{name}, {definition}"),
        PromptTemplate::PhotoOf => format!("a photo of a {name}, {definition}"),
    };
    Ok(GenerationPrompt { prompt, warning })
}

/// Split a plain prompt back into `(name, definition)` at the first `", "`.
pub fn split_generation_prompt(prompt: &str) -> Option<(&str, &str)> {
    prompt.split_once(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationPromptSpec {
    pub class_id: ClassId,
    pub name: String,
    pub definition: String,
    pub prompt: String,
    pub n_samples: usize,
    pub guidance_scale: f64,
    pub generation_seed: u64,
}

/// Options for turning catalog entries into generation records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationDefaults {
    pub n_samples: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub template: PromptTemplate,
}

impl GenerationDefaults {
    pub fn cifar() -> Self {
        Self {
            n_samples: CIFAR_IMAGES_PER_CLASS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            template: PromptTemplate::Plain,
        }
    }

    pub fn imagenet() -> Self {
        Self {
            n_samples: IMAGENET_IMAGES_PER_CLASS,
            ..Self::cifar()
        }
    }
}

pub fn prompt_specs(entries: &[CatalogEntry], defaults: &GenerationDefaults) -> Result<Vec<GenerationPromptSpec>> {
    if defaults.n_samples == 0 {
        return Err(Error::Validation("n_samples must be at least 1".into()));
    }
    entries
        .iter()
        .map(|e| {
            let p = build_generation_prompt_with(&e.name, &e.definition, defaults.template)?;
            if let Some(w) = &p.warning {
                log::warn!("{w}");
            }
            Ok(GenerationPromptSpec {
                class_id: e.class_id,
                name: e.name.clone(),
                definition: e.definition.clone(),
                prompt: p.prompt,
                n_samples: defaults.n_samples,
                guidance_scale: defaults.guidance_scale,
                generation_seed: derive_seed(defaults.seed, e.class_id as u64),
            })
        })
        .collect()
}

/// Manifest text: one JSON object per line, fields in declaration order.
pub fn render_manifest(specs: &[GenerationPromptSpec]) -> Result<String> {
    if specs.is_empty() {
        return Err(Error::Validation("manifest needs at least one class".into()));
    }
    let mut out = String::new();
    for s in specs {
        out.push_str(&serde_json::to_string(s).expect("manifest record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_manifest(specs: &[GenerationPromptSpec], path: &Path) -> Result<()> {
    let text = render_manifest(specs)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(text: &str) -> Result<Vec<GenerationPromptSpec>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                FormatError::BadManifest {
                    line: i + 1,
                    reason: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<GenerationPromptSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Parse a `name<TAB>definition` lexicon into a catalog, ids in file order.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_lexicon(text: &str) -> Result<ClassCatalog> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, definition) = line.split_once('\t').ok_or_else(|| FormatError::BadLexicon {
            line: i + 1,
            reason: "expected name<TAB>definition".into(),
        })?;
        entries.push(CatalogEntry {
            class_id: entries.len() as ClassId,
            name: name.trim().to_string(),
            definition: definition.trim().to_string(),
        });
    }
    ClassCatalog::new(entries)
}

pub fn read_lexicon(path: &Path) -> Result<ClassCatalog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexicon(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub version: u16,
    pub feature_dim: u32,
    pub sample_count: u64,
}

impl EmbeddingFileHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.feature_dim.to_le_bytes());
        b[10..18].copy_from_slice(&self.sample_count.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::LengthMismatch {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        Ok(Self {
            version,
            feature_dim: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            sample_count: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
        })
    }

    pub fn payload_len(&self) -> u64 {
        self.sample_count * self.feature_dim as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMetadata {
    pub class_id: ClassId,
    pub origin: Origin,
    pub split: Split,
}

/// Encode samples as container bytes and sidecar text. Values are narrowed
/// to `f32`.
pub fn encode_embeddings(samples: &[EmbeddingSample]) -> Result<(Vec<u8>, String)> {
    let dim = samples.first().map_or(0, EmbeddingSample::dim);
    if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let header = EmbeddingFileHeader {
        version: VERSION,
        feature_dim: dim as u32,
        sample_count: samples.len() as u64,
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + header.payload_len() as usize);
    bytes.extend_from_slice(&header.to_bytes());
    let mut meta = String::new();
    for s in samples {
        for &v in &s.features {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let record = SampleMetadata {
            class_id: s.class_id,
            origin: s.origin,
            split: s.split,
        };
        meta.push_str(&serde_json::to_string(&record).expect("metadata serializes"));
        meta.push('\n');
    }
    Ok((bytes, meta))
}

/// Decode a container and its sidecar. Nothing is returned unless both
/// validate completely.
pub fn decode_embeddings(bytes: &[u8], metadata: &str) -> Result<Vec<EmbeddingSample>> {
    let header = EmbeddingFileHeader::parse(bytes)?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found != header.payload_len() {
        return Err(FormatError::LengthMismatch {
            expected: header.payload_len(),
            found,
        }
        .into());
    }
    let records: Vec<SampleMetadata> = metadata
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FormatError::BadMetadata {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    if records.len() as u64 != header.sample_count {
        return Err(FormatError::CountMismatch {
            metadata: records.len() as u64,
            payload: header.sample_count,
        }
        .into());
    }
    let dim = header.feature_dim as usize;
    let payload = &bytes[HEADER_LEN..];
    Ok(records
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let row = &payload[i * dim * 4..(i + 1) * dim * 4];
            let features = row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            EmbeddingSample::new(features, m.class_id, m.origin, m.split)
        })
        .collect())
}

/// Conventional sidecar location: `emb.fpeb` -> `emb.meta.jsonl`.
pub fn metadata_path_for(data_path: &Path) -> std::path::PathBuf {
    data_path.with_extension("meta.jsonl")
}

pub fn write_embedding_file(data_path: &Path, metadata_path: &Path, samples: &[EmbeddingSample]) -> Result<()> {
    let (bytes, meta) = encode_embeddings(samples)?;
    let mut f = fs::File::create(data_path).map_err(|e| Error::io(data_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(data_path, e))?;
    fs::write(metadata_path, meta).map_err(|e| Error::io(metadata_path, e))
}

pub fn ingest_embedding_file(data_path: &Path, metadata_path: &Path) -> Result<Vec<EmbeddingSample>> {
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let meta = fs::read_to_string(metadata_path).map_err(|e| Error::io(metadata_path, e))?;
    decode_embeddings(&bytes, &meta)
}

/// Sidecar for exported extractor weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct WeightsSidecar {
    layer_dims: Vec<usize>,
}

/// Store extractor parameters as a single-sample container (per layer:
/// weights row-major, then bias) with a `{"layer_dims": [...]}` sidecar.
/// Values are narrowed to `f32`.
pub fn export_extractor(extractor: &MlpExtractor, data_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut flat = Vec::new();
    for l in extractor.layers() {
        for r in 0..l.weights.nrows() {
            flat.extend(l.weights.row(r).iter().copied());
        }
        flat.extend(l.bias.iter().copied());
    }
    let sample = EmbeddingSample::new(flat, 0, Origin::Real, Split::Train);
    let (bytes, _) = encode_embeddings(std::slice::from_ref(&sample))?;
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    let sidecar = WeightsSidecar {
        layer_dims: extractor.layer_dims().to_vec(),
    };
    fs::write(sidecar_path, serde_json::to_string(&sidecar).unwrap()).map_err(|e| Error::io(sidecar_path, e))
}

/// Load weights written by [`export_extractor`] as a trainable extractor.
pub fn import_extractor(data_path: &Path, sidecar_path: &Path) -> Result<MlpExtractor> {
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let header = EmbeddingFileHeader::parse(&bytes)?;
    let sidecar: WeightsSidecar = serde_json::from_str(
        &fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?,
    )
    .map_err(|e| FormatError::BadMetadata {
        line: 1,
        reason: e.to_string(),
    })?;
    let meta = serde_json::to_string(&SampleMetadata {
        class_id: 0,
        origin: Origin::Real,
        split: Split::Train,
    })
    .unwrap();
    if header.sample_count != 1 {
        return Err(FormatError::CountMismatch {
            metadata: 1,
            payload: header.sample_count,
        }
        .into());
    }
    let flat = decode_embeddings(&bytes, &meta)?.remove(0).features;
    let expected: usize = sidecar.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if flat.len() != expected {
        return Err(FormatError::LengthMismatch {
            expected: expected as u64 * 4,
            found: flat.len() as u64 * 4,
        }
        .into());
    }
    let mut it = flat.into_iter();
    let layers = sidecar
        .layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = nalgebra::DMatrix::from_row_iterator(fan_out, fan_in, it.by_ref().take(fan_in * fan_out));
            let bias = nalgebra::DVector::from_iterator(fan_out, it.by_ref().take(fan_out));
            DenseLayer { weights, bias }
        })
        .collect();
    MlpExtractor::from_layers(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_format() {
        let p = build_generation_prompt("crane", "large long-necked wading bird").unwrap();
        assert_eq!(p.prompt, "crane, large long-necked wading bird");
        assert!(p.warning.is_none());
        assert_eq!(
            split_generation_prompt(&p.prompt).unwrap(),
            ("crane", "large long-necked wading bird")
        );
        let rose = build_generation_prompt("rose", "").unwrap();
        assert_eq!(rose.prompt, "rose, ");
        assert!(rose.warning.is_some());
        assert!(matches!(build_generation_prompt(" ", "x"), Err(Error::Validation(_))));
        let photo = build_generation_prompt_with("otter", "aquatic mammal", PromptTemplate::PhotoOf).unwrap();
        assert_eq!(photo.prompt, "a photo of a otter, aquatic mammal");
    }

    #[test]
    fn header_round_trip_and_errors() {
        let h = EmbeddingFileHeader {
            version: VERSION,
            feature_dim: 4,
            sample_count: 3,
        };
        let b = h.to_bytes();
        assert_eq!(&b[..4], b"FPEB");
        assert_eq!(EmbeddingFileHeader::parse(&b).unwrap(), h);
        let mut bad = b;
        bad[0] = b'X';
        assert!(matches!(EmbeddingFileHeader::parse(&bad), Err(FormatError::BadMagic { .. })));
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(
            EmbeddingFileHeader::parse(&v2),
            Err(FormatError::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(
            EmbeddingFileHeader::parse(&b[..10]),
            Err(FormatError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn decode_rejects_truncation_and_count_mismatch() {
        let samples: Vec<_> = (0..3)
            .map(|i| EmbeddingSample::new(vec![i as f64; 4], i, Origin::Real, Split::Test))
            .collect();
        let (bytes, meta) = encode_embeddings(&samples).unwrap();
        assert_eq!(decode_embeddings(&bytes, &meta).unwrap(), samples);
        let err = decode_embeddings(&bytes[..bytes.len() - 2], &meta).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::LengthMismatch { .. })));
        let two_lines: String = meta.lines().take(2).map(|l| format!("{l}\n")).collect();
        let err = decode_embeddings(&bytes, &two_lines).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::CountMismatch {
                metadata: 2,
                payload: 3
            })
        ));
        let err = decode_embeddings(&bytes, "{\"class_id\": 1}\n\n\n").unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::BadMetadata { line: 1, .. })));
    }

    #[test]
    fn lexicon_parsing() {
        let cat = parse_lexicon("# name\tdefinition\napple\tfruit with red or yellow skin\nbear\tlarge heavy mammal\n").unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat.get(1).unwrap().name, "bear");
        assert!(parse_lexicon("apple fruit\n").is_err());
    }

    #[test]
    fn manifest_defaults() {
        let cat = parse_lexicon("apple\tfruit\nbear\tmammal\n").unwrap();
        let cifar = prompt_specs(cat.entries(), &GenerationDefaults::cifar()).unwrap();
        assert!(cifar.iter().all(|s| s.n_samples == 500 && s.guidance_scale == 2.0));
        let imnet = prompt_specs(cat.entries(), &GenerationDefaults::imagenet()).unwrap();
        assert!(imnet.iter().all(|s| s.n_samples == 1300));
        let text = render_manifest(&cifar).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), cifar);
        assert!(text.starts_with("{\"class_id\":0,\"name\":\"apple\",\"definition\":\"fruit\",\"prompt\":\"apple, fruit\""));
        assert!(render_manifest(&[]).is_err());
    }
}
