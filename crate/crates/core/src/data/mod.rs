//! Dual-caption image records: shard storage, the synthetic probe generator,
//! image resizing and a directory importer.

pub mod image;
pub mod probe;
pub mod shard;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use image::{resize, resize_to, stack_images, Image};
pub use probe::{
    gen_probe_dataset, gen_probe_dataset_with, probe_questions, Color, PlacedShape, ProbeMode, ProbeQuestion, ShapeKind, PROBE_WORDS,
};
pub use shard::{decode_shard, encode_shard, open_shard, read_shard, write_shard, ShardReader};

use crate::error::{Error, Result};

/// Ground truth attached to generated probe records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeMeta {
    /// Class id (`color * 3 + shape`) for single-shape images.
    pub label: Option<u8>,
    pub layout: Vec<PlacedShape>,
}

/// One stored record. The image stays PNG-encoded until decoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionedImage {
    pub id: u64,
    pub png: Vec<u8>,
    pub caption_original: String,
    pub caption_synthetic: String,
    pub meta: Option<ProbeMeta>,
}

/// A decoded record ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub caption_original: String,
    pub caption_synthetic: String,
    pub meta: Option<ProbeMeta>,
}

impl Sample {
    pub fn decode(rec: &CaptionedImage) -> Result<Self> {
        let image = Image::from_png(&rec.png).map_err(|e| Error::Data(format!("record {}: {e}", rec.id)))?;
        Ok(Sample {
            id: rec.id,
            image,
            caption_original: rec.caption_original.clone(),
            caption_synthetic: rec.caption_synthetic.clone(),
            meta: rec.meta.clone(),
        })
    }
}

/// In-memory decoded dataset with a per-resolution image cache.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    cache: Option<(usize, Vec<Image>)>,
}

impl Dataset {
    pub fn from_records(records: &[CaptionedImage]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        let samples = records.iter().map(Sample::decode).collect::<Result<_>>()?;
        Ok(Dataset { samples, cache: None })
    }

    /// Loads and concatenates shard files in the given order.
    pub fn from_shards<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut records = Vec::new();
        for p in paths {
            records.extend(read_shard(p)?);
        }
        Self::from_records(&records)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All images resized to `resolution`; the last resolution is cached.
    pub fn images_at(&mut self, resolution: usize) -> Result<&[Image]> {
        if self.cache.as_ref().map(|c| c.0) != Some(resolution) {
            let imgs = self.samples.iter().map(|s| resize(&s.image, resolution)).collect::<Result<_>>()?;
            self.cache = Some((resolution, imgs));
        }
        Ok(&self.cache.as_ref().expect("cache filled").1)
    }
}

/// Imports `<stem>.png` + `<stem>.txt` (+ optional `<stem>.synthetic.txt`)
/// triples from a directory, sorted by stem. Ids are assigned in that order.
pub fn import_dir(dir: impl AsRef<Path>) -> Result<Vec<CaptionedImage>> {
    let dir = dir.as_ref();
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".png").map(str::to_owned)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("no .png files in {}", dir.display())));
    }
    stems
        .iter()
        .enumerate()
        .map(|(i, stem)| {
            let bytes = std::fs::read(dir.join(format!("{stem}.png")))?;
            let image = Image::from_png(&bytes).map_err(|e| Error::Data(format!("{stem}.png: {e}")))?;
            let original = std::fs::read_to_string(dir.join(format!("{stem}.txt"))).map_err(|e| Error::Data(format!("{stem}.txt: {e}")))?;
            let synthetic_path = dir.join(format!("{stem}.synthetic.txt"));
            let synthetic = if synthetic_path.exists() { std::fs::read_to_string(synthetic_path)? } else { String::new() };
            let original = original.trim().to_owned();
            if original.is_empty() {
                return Err(Error::Data(format!("{stem}.txt is empty")));
            }
            Ok(CaptionedImage {
                id: i as u64,
                png: image.to_png()?,
                caption_original: original,
                caption_synthetic: synthetic.trim().to_owned(),
                meta: None,
            })
        })
        .collect()
}
