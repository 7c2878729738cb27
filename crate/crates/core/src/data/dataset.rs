use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClothingState {
    SC,
    CC,
}

impl std::fmt::Display for ClothingState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClothingState::SC => "SC",
            ClothingState::CC => "CC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image_path: String,
    pub identity: usize,
    pub camera: usize,
    pub clothing_id: usize,
    pub split: Split,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainMeta {
    pub name: String,
    pub clothing_state: ClothingState,
    pub num_identities: usize,
    pub image_height: usize,
    pub image_width: usize,
}

/// One lifelong domain: images with identity, camera and clothing labels.
///
/// Immutable after loading. Identities are contiguous from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub clothing_state: ClothingState,
    pub num_identities: usize,
    pub records: Vec<SampleRecord>,
    pub image_height: usize,
    pub image_width: usize,
    pub root: PathBuf,
}

impl DomainDataset {
    pub fn meta(&self) -> DomainMeta {
        DomainMeta {
            name: self.name.clone(),
            clothing_state: self.clothing_state,
            num_identities: self.num_identities,
            image_height: self.image_height,
            image_width: self.image_width,
        }
    }

    /// Indices into `records` for one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width * 3
    }

    /// Checks every record and domain level invariant.
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Schema(format!(
                "{}: num_identities and image dimensions must be positive",
                self.name
            )));
        }
        let mut outfits: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        let mut gallery_ids = BTreeSet::new();
        for r in &self.records {
            if r.identity >= self.num_identities {
                return Err(Error::Schema(format!(
                    "{}: identity {} >= num_identities {}",
                    self.name, r.identity, self.num_identities
                )));
            }
            outfits.entry(r.identity).or_default().insert(r.clothing_id);
            if r.split == Split::Gallery {
                gallery_ids.insert(r.identity);
            }
        }
        let train_ids: BTreeSet<usize> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        if train_ids.len() != self.num_identities {
            return Err(Error::Schema(format!(
                "{}: {} train identities but num_identities is {}",
                self.name,
                train_ids.len(),
                self.num_identities
            )));
        }
        for r in self.records.iter().filter(|r| r.split == Split::Query) {
            if !gallery_ids.contains(&r.identity) {
                return Err(Error::Protocol(format!(
                    "{}: query identity {} has no gallery image",
                    self.name, r.identity
                )));
            }
        }
        match self.clothing_state {
            ClothingState::SC => {
                if let Some((id, set)) = outfits.iter().find(|(_, s)| s.len() > 1) {
                    return Err(Error::Protocol(format!(
                        "{}: SC domain but identity {id} wears {} outfits",
                        self.name,
                        set.len()
                    )));
                }
            }
            ClothingState::CC => {
                if !outfits.values().any(|s| s.len() >= 2) {
                    return Err(Error::Protocol(format!(
                        "{}: CC domain without any clothing change",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Decodes one record's PNG into `H*W*3` floats in `[0, 1]`, row-major HWC.
    pub fn read_image(&self, index: usize) -> Result<Vec<f32>> {
        let record = &self.records[index];
        let path = self.root.join(&record.image_path);
        let file = fs::File::open(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Schema(format!(
                "{}: expected 8-bit RGB, got {:?}/{:?}",
                path.display(),
                info.color_type,
                info.bit_depth
            )));
        }
        if info.width as usize != self.image_width || info.height as usize != self.image_height {
            return Err(Error::Schema(format!(
                "{}: image is {}x{}, domain declares {}x{}",
                path.display(),
                info.height,
                info.width,
                self.image_height,
                self.image_width
            )));
        }
        Ok(buf[..info.buffer_size()]
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect())
    }
}

/// Loads and validates a domain directory (`meta.json` + `manifest.jsonl`).
///
/// Identities are relabeled to `0..N` in ascending order of their raw values.
pub fn load_domain(root: impl AsRef<Path>) -> Result<DomainDataset> {
    let root = root.as_ref();
    let meta_path = root.join(META_FILE);
    let manifest_path = root.join(MANIFEST_FILE);
    let meta_text =
        fs::read_to_string(&meta_path).map_err(|_| Error::MissingFile(meta_path.clone()))?;
    let meta: DomainMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Schema(format!("{}: {e}", meta_path.display())))?;
    let manifest =
        fs::File::open(&manifest_path).map_err(|_| Error::MissingFile(manifest_path.clone()))?;

    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(manifest).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Schema(format!("{}:{}: {e}", manifest_path.display(), lineno + 1))
        })?;
        records.push(record);
    }

    let raw_ids: BTreeSet<usize> = records.iter().map(|r| r.identity).collect();
    let relabel: BTreeMap<usize, usize> = raw_ids
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    for r in &mut records {
        r.identity = relabel[&r.identity];
        let path = root.join(&r.image_path);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
    }

    let dataset = DomainDataset {
        name: meta.name,
        clothing_state: meta.clothing_state,
        num_identities: meta.num_identities,
        records,
        image_height: meta.image_height,
        image_width: meta.image_width,
        root: root.to_path_buf(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `meta.json` and `manifest.jsonl` for a dataset whose images already exist.
pub fn write_domain_files(dataset: &DomainDataset) -> Result<()> {
    fs::create_dir_all(&dataset.root)?;
    let mut meta = serde_json::to_string_pretty(&dataset.meta())?;
    meta.push('\n');
    fs::write(dataset.root.join(META_FILE), meta)?;
    let mut manifest = String::new();
    for r in &dataset.records {
        manifest.push_str(&serde_json::to_string(r)?);
        manifest.push('\n');
    }
    fs::write(dataset.root.join(MANIFEST_FILE), manifest)?;
    Ok(())
}
