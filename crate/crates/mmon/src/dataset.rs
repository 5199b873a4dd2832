//! Dataset directories: `manifest.json` (symbolic instances) plus `panels.bin`
//! (rendered rasters).

use mmon_core::model::{Example, ModelError};
use mmon_core::puzzle::{
    derive_seed, encode_meta_target, generate_puzzle, ComponentPanel, Entity, GenerateError,
    MetaTarget,
};
use mmon_core::render::{render_instance, RenderError};
use mmon_core::{
    AttributeKind, Configuration, PanelSymbolic, PuzzleInstance, RuleAnnotation, RuleFamily,
    RuleKind, RuleSpec,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const PANELS_MAGIC: [u8; 4] = *b"RPM1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PANELS_FILE: &str = "panels.bin";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("manifest lists {manifest} instances but panels hold {panels}")]
    CountMismatch { manifest: usize, panels: usize },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Instances together with their rasters, `16 × size × size` bytes each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub size: u32,
    pub instances: Vec<PuzzleInstance>,
    pub rasters: Vec<u8>,
}

impl Dataset {
    pub fn empty(size: u32) -> Self {
        Self {
            size,
            instances: Vec::new(),
            rasters: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    fn stride(&self) -> usize {
        16 * (self.size as usize).pow(2)
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let s = self.stride();
        &self.rasters[i * s..(i + 1) * s]
    }

    pub fn push(&mut self, instance: PuzzleInstance, pixels: &[u8]) {
        debug_assert_eq!(pixels.len(), self.stride());
        self.instances.push(instance);
        self.rasters.extend_from_slice(pixels);
    }

    pub fn example(&self, i: usize) -> Result<Example, ModelError> {
        let inst = &self.instances[i];
        Example::new(
            inst.config,
            self.size as usize,
            self.pixels(i).to_vec(),
            inst.label,
            inst.annotation.clone(),
        )
    }

    pub fn examples(&self) -> Result<Vec<Example>, ModelError> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    /// Appends every instance of `other` (same raster size).
    pub fn extend(&mut self, other: Dataset) {
        assert_eq!(self.size, other.size);
        self.instances.extend(other.instances);
        self.rasters.extend(other.rasters);
    }
}

fn render_one(config: Configuration, seed: u64, size: u32) -> Result<(PuzzleInstance, Vec<u8>), DatasetError> {
    let inst = generate_puzzle(config, seed)?;
    let pixels = render_instance(&inst, size)?
        .into_iter()
        .flat_map(|r| r.data)
        .collect();
    Ok((inst, pixels))
}

/// Instances `start..start+count` of the stream for `config` under `master`,
/// generated in parallel; seeds are `derive_seed(master, index)`.
pub fn generate_range(
    config: Configuration,
    master: u64,
    start: u64,
    count: u64,
    size: u32,
) -> Result<Dataset, DatasetError> {
    let items: Vec<_> = (start..start + count)
        .into_par_iter()
        .map(|i| render_one(config, derive_seed(master, i), size))
        .collect::<Result<_, _>>()?;
    let mut ds = Dataset::empty(size);
    for (inst, px) in items {
        ds.push(inst, &px);
    }
    Ok(ds)
}

/// Walks the stream from `start` and keeps the first `quota` instances whose
/// annotation passes `keep`, scanning at most `limit` indices. Returns the
/// dataset and the first unscanned index.
pub fn generate_filtered(
    config: Configuration,
    master: u64,
    start: u64,
    quota: usize,
    limit: u64,
    size: u32,
    keep: impl Fn(&RuleAnnotation) -> bool + Sync,
) -> Result<(Dataset, u64), DatasetError> {
    let mut ds = Dataset::empty(size);
    let mut next = start;
    let chunk = 256u64;
    while ds.len() < quota && next < start + limit {
        let end = (next + chunk).min(start + limit);
        let items: Vec<_> = (next..end)
            .into_par_iter()
            .map(|i| render_one(config, derive_seed(master, i), size))
            .collect::<Result<_, _>>()?;
        for (k, (inst, px)) in items.into_iter().enumerate() {
            if ds.len() == quota {
                next += k as u64;
                return Ok((ds, next));
            }
            if keep(&inst.annotation) {
                ds.push(inst, &px);
            }
        }
        next = end;
    }
    Ok((ds, next))
}

pub fn encode_panels(ds: &Dataset) -> Result<Vec<u8>, FormatError> {
    let side = u16::try_from(ds.size).map_err(|_| FormatError::Invalid("raster too large".into()))?;
    let count = u32::try_from(ds.len()).map_err(|_| FormatError::Invalid("too many instances".into()))?;
    let mut out = Vec::with_capacity(12 + ds.rasters.len());
    out.extend_from_slice(&PANELS_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&side.to_le_bytes());
    out.extend_from_slice(&side.to_le_bytes());
    out.extend_from_slice(&ds.rasters);
    Ok(out)
}

/// Parses `panels.bin`: returns (count, size, rasters).
pub fn decode_panels(bytes: &[u8]) -> Result<(usize, u32, Vec<u8>), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: 12,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != PANELS_MAGIC {
        return Err(FormatError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    if h != w {
        return Err(FormatError::Invalid(format!("non-square rasters {h}×{w}")));
    }
    let expected = 12 + count * 16 * h * w;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    Ok((count, h as u32, bytes[12..].to_vec()))
}

/// Annotation entry: `[slot, attribute, rule family, parameter]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleEntry(pub u8, pub String, pub String, pub i32);

/// Entity as `[slot, type, size, color]`.
type EntityEntry = [u8; 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub config: String,
    pub seed: u64,
    pub label: u8,
    pub annotation: Vec<RuleEntry>,
    pub meta: Vec<u8>,
    /// Per panel (context then candidates), per component, the entities.
    pub panels: Vec<Vec<Vec<EntityEntry>>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: u32,
    pub count: usize,
    pub instances: Vec<InstanceEntry>,
}

fn entry_of(inst: &PuzzleInstance) -> InstanceEntry {
    InstanceEntry {
        config: inst.config.name().into(),
        seed: inst.seed,
        label: inst.label,
        annotation: inst
            .annotation
            .rules
            .iter()
            .map(|r| {
                RuleEntry(
                    r.component,
                    r.attribute.name().into(),
                    r.rule.family().name().into(),
                    r.rule.param(),
                )
            })
            .collect(),
        meta: inst.meta.bits.to_vec(),
        panels: inst
            .panels()
            .map(|p| {
                p.components
                    .iter()
                    .map(|c| {
                        c.entities
                            .iter()
                            .map(|e| [e.slot, e.shape, e.size, e.color])
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    }
}

fn instance_of(e: &InstanceEntry) -> Result<PuzzleInstance, FormatError> {
    let bad = |m: String| FormatError::Invalid(format!("seed {}: {m}", e.seed));
    let config = Configuration::from_name(&e.config).ok_or_else(|| bad(format!("unknown config {}", e.config)))?;
    let rules = e
        .annotation
        .iter()
        .map(|RuleEntry(slot, attr, family, param)| {
            let attribute = AttributeKind::from_name(attr).ok_or_else(|| bad(format!("attribute {attr}")))?;
            let family = RuleFamily::from_name(family).ok_or_else(|| bad(format!("rule {family}")))?;
            let rule = RuleKind::from_parts(family, *param).ok_or_else(|| bad(format!("parameter {param}")))?;
            Ok(RuleSpec::new(*slot, attribute, rule))
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let annotation = RuleAnnotation { rules };
    if !annotation.is_valid(config) {
        return Err(bad("annotation invalid for configuration".into()));
    }
    let meta = MetaTarget::from_bits(&e.meta).ok_or_else(|| bad("meta-target must be 18 bits".into()))?;
    if meta != encode_meta_target(&annotation) {
        return Err(bad("meta-target disagrees with annotation".into()));
    }
    if e.panels.len() != 16 {
        return Err(bad(format!("{} panels", e.panels.len())));
    }
    let panels: Vec<PanelSymbolic> = e
        .panels
        .iter()
        .map(|comps| PanelSymbolic {
            components: comps
                .iter()
                .map(|ents| ComponentPanel {
                    entities: ents
                        .iter()
                        .map(|&[slot, shape, size, color]| Entity {
                            slot,
                            shape,
                            size,
                            color,
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    if !panels.iter().all(|p| p.is_valid(config)) {
        return Err(bad("panel invalid for configuration".into()));
    }
    if e.label >= 8 {
        return Err(bad(format!("label {}", e.label)));
    }
    let mut it = panels.into_iter();
    let context = std::array::from_fn(|_| it.next().expect("16 panels"));
    let candidates = std::array::from_fn(|_| it.next().expect("16 panels"));
    Ok(PuzzleInstance {
        config,
        context,
        candidates,
        label: e.label,
        annotation,
        meta,
        seed: e.seed,
    })
}

pub fn manifest_of(ds: &Dataset) -> Manifest {
    Manifest {
        size: ds.size,
        count: ds.len(),
        instances: ds.instances.iter().map(entry_of).collect(),
    }
}

/// Reassembles a dataset from a parsed manifest and `panels.bin` bytes.
pub fn dataset_from_parts(manifest: &Manifest, panels: &[u8]) -> Result<Dataset, FormatError> {
    let (count, size, rasters) = decode_panels(panels)?;
    if count != manifest.instances.len() || count != manifest.count {
        return Err(FormatError::CountMismatch {
            manifest: manifest.instances.len(),
            panels: count,
        });
    }
    if count > 0 && size != manifest.size {
        return Err(FormatError::Invalid(format!(
            "manifest size {} but panels are {size}",
            manifest.size
        )));
    }
    let instances = manifest
        .instances
        .iter()
        .map(instance_of)
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        size: manifest.size,
        instances,
        rasters,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec(&manifest_of(ds)).map_err(|source| DatasetError::Json {
        path: mpath.clone(),
        source,
    })?;
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let ppath = dir.join(PANELS_FILE);
    fs::write(&ppath, encode_panels(ds)?).map_err(io_err(&ppath))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: mpath.clone(),
        source,
    })?;
    let ppath = dir.join(PANELS_FILE);
    let panels = fs::read(&ppath).map_err(io_err(&ppath))?;
    Ok(dataset_from_parts(&manifest, &panels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_round_trip() {
        let ds = generate_range(Configuration::Center, 1, 0, 3, 40).unwrap();
        let bytes = encode_panels(&ds).unwrap();
        let (count, size, rasters) = decode_panels(&bytes).unwrap();
        assert_eq!((count, size), (3, 40));
        assert_eq!(rasters, ds.rasters);
    }

    #[test]
    fn manifest_round_trip() {
        let ds = generate_range(Configuration::OutInGrid, 2, 0, 4, 40).unwrap();
        let back = dataset_from_parts(&manifest_of(&ds), &encode_panels(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn filtered_stream_respects_predicate() {
        let (ds, next) = generate_filtered(Configuration::Center, 5, 0, 10, 1000, 40, |a| {
            !a.contains_family(RuleFamily::DistributeThree)
        })
        .unwrap();
        assert_eq!(ds.len(), 10);
        assert!(next >= 10);
        assert!(ds
            .instances
            .iter()
            .all(|i| !i.annotation.contains_family(RuleFamily::DistributeThree)));
    }

    #[test]
    fn bad_panels() {
        assert!(matches!(decode_panels(b"RPM2\0\0\0\0\0\0\0\0"), Err(FormatError::BadMagic(_))));
        assert!(matches!(decode_panels(b"RPM1\x01\0\0\0\x28\0\x28\0"), Err(FormatError::Truncated { .. })));
    }
}
