use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, PatchGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
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

/// Image geometry expected when decoding corpus images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeometry {
    pub size: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl From<&EncoderConfig> for ImageGeometry {
    fn from(cfg: &EncoderConfig) -> Self {
        Self {
            size: cfg.image_size,
            channels: cfg.channels,
            patch_size: cfg.patch_size,
        }
    }
}

impl Default for ImageGeometry {
    fn default() -> Self {
        (&EncoderConfig::default()).into()
    }
}

/// A classifier-entailed, non-gold image-caption edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakEdge {
    pub image: String,
    pub caption: String,
    pub p_entail: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalCorpus {
    pub images: BTreeMap<String, PatchGrid>,
    pub captions: BTreeMap<String, String>,
    /// Image id → gold caption ids, in stored order.
    pub gold: BTreeMap<String, Vec<String>>,
    pub weak: Vec<WeakEdge>,
    pub split: Split,
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestRecord {
    Split { split: Split },
    Image { id: String, path: String },
    Caption { id: String, text: String },
    Gold { image: String, captions: Vec<String> },
    Weak { image: String, caption: String, p_entail: f64 },
}

impl RetrievalCorpus {
    pub fn new(split: Split) -> Self {
        Self {
            split,
            ..Self::default()
        }
    }

    pub fn is_gold(&self, image: &str, caption: &str) -> bool {
        self.gold.get(image).is_some_and(|c| c.iter().any(|x| x == caption))
    }

    pub fn gold_pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.gold
            .iter()
            .flat_map(|(i, cs)| cs.iter().map(move |c| (i.as_str(), c.as_str())))
    }

    pub fn gold_pair_count(&self) -> usize {
        self.gold.values().map(Vec::len).sum()
    }

    pub fn image(&self, id: &str) -> Result<&PatchGrid> {
        self.images
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown image id `{id}`")))
    }

    pub fn caption(&self, id: &str) -> Result<&str> {
        self.captions
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("unknown caption id `{id}`")))
    }

    /// Image ids whose gold list contains each caption.
    pub fn gold_images_of_caption(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (i, c) in self.gold_pairs() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    /// Referential integrity: gold and weak edges name known ids, gold
    /// lists have no repeats, weak edges are unique and never gold.
    pub fn validate(&self) -> Result<()> {
        for (image, caps) in &self.gold {
            if !self.images.contains_key(image) {
                return Err(Error::Validation(format!("dangling image id `{image}` in gold")));
            }
            let mut seen = BTreeSet::new();
            for c in caps {
                if !self.captions.contains_key(c) {
                    return Err(Error::Validation(format!("dangling caption id `{c}`")));
                }
                if !seen.insert(c) {
                    return Err(Error::Validation(format!("duplicate gold caption `{c}` for image `{image}`")));
                }
            }
        }
        let mut weak_seen = BTreeSet::new();
        for e in &self.weak {
            if !self.images.contains_key(&e.image) {
                return Err(Error::Validation(format!("dangling image id `{}` in weak edge", e.image)));
            }
            if !self.captions.contains_key(&e.caption) {
                return Err(Error::Validation(format!("dangling caption id `{}`", e.caption)));
            }
            if self.is_gold(&e.image, &e.caption) {
                return Err(Error::Validation(format!(
                    "weak edge ({}, {}) duplicates a gold edge",
                    e.image, e.caption
                )));
            }
            if !weak_seen.insert((&e.image, &e.caption)) {
                return Err(Error::Validation(format!("duplicate weak edge ({}, {})", e.image, e.caption)));
            }
        }
        Ok(())
    }

    /// Gold captions of `image_id` joined in stored order with `". "`.
    pub fn merge_premise_captions(&self, image_id: &str) -> Result<String> {
        self.image(image_id)?;
        let caps = self.gold.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
        let texts = caps
            .iter()
            .map(|c| self.caption(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(texts.join(". "))
    }

    /// Manifest records in canonical order, with images at `images/<id>.f32`.
    pub fn manifest_records(&self) -> Vec<ManifestRecord> {
        let mut out = vec![ManifestRecord::Split { split: self.split }];
        out.extend(self.images.keys().map(|id| ManifestRecord::Image {
            id: id.clone(),
            path: format!("images/{id}.f32"),
        }));
        out.extend(self.captions.iter().map(|(id, text)| ManifestRecord::Caption {
            id: id.clone(),
            text: text.clone(),
        }));
        out.extend(self.gold.iter().map(|(image, caps)| ManifestRecord::Gold {
            image: image.clone(),
            captions: caps.clone(),
        }));
        out.extend(self.weak.iter().map(|e| ManifestRecord::Weak {
            image: e.image.clone(),
            caption: e.caption.clone(),
            p_entail: e.p_entail,
        }));
        out
    }

    /// SHA-256 over the canonical manifest and every image's pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for rec in self.manifest_records() {
            h.update(serde_json::to_vec(&rec).expect("serializable"));
            h.update(b"\n");
        }
        for grid in self.images.values() {
            for v in grid.pixels() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_f32_image(path: &Path, geom: ImageGeometry) -> Result<PatchGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = geom.size * geom.size * geom.channels;
    if bytes.len() != n * 4 {
        return Err(Error::Image(format!(
            "{}: {} bytes, expected {} for {}x{}x{}",
            path.display(),
            bytes.len(),
            n * 4,
            geom.size,
            geom.size,
            geom.channels
        )));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    PatchGrid::new(geom.size, geom.size, geom.channels, geom.patch_size, pixels)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn read_png_image(path: &Path, geom: ImageGeometry) -> Result<PatchGrid> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("{}: only 8-bit PNG is supported", path.display())));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Image(format!("{}: unsupported color type {other:?}", path.display())));
        }
    };
    if info.width as usize != geom.size || info.height as usize != geom.size || geom.channels != 3 {
        return Err(Error::Image(format!(
            "{}: {}x{} image does not match configured {}x{}x{}",
            path.display(),
            info.width,
            info.height,
            geom.size,
            geom.size,
            geom.channels
        )));
    }
    let pixels = buf[..info.buffer_size()]
        .chunks_exact(stride)
        .flat_map(|px| px[..3].iter().map(|&b| b as f64 / 255.0))
        .collect();
    PatchGrid::new(geom.size, geom.size, 3, geom.patch_size, pixels)
}

fn load_image(path: &Path, geom: ImageGeometry) -> Result<PatchGrid> {
    if !path.exists() {
        return Err(Error::Validation(format!("missing image file {}", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => read_f32_image(path, geom),
        Some("png") | Some("PNG") => read_png_image(path, geom),
        _ => Err(Error::Image(format!("{}: expected a .png or .f32 file", path.display()))),
    }
}

/// Reads and validates a line-delimited JSON corpus manifest.
pub fn load_corpus(manifest: impl AsRef<Path>, geom: ImageGeometry) -> Result<RetrievalCorpus> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut corpus = RetrievalCorpus::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: manifest.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match rec {
            ManifestRecord::Split { split } => corpus.split = split,
            ManifestRecord::Image { id, path } => {
                if corpus.images.contains_key(&id) {
                    return Err(Error::Validation(format!("duplicate image id `{id}`")));
                }
                let grid = load_image(&base.join(&path), geom)?;
                corpus.images.insert(id, grid);
            }
            ManifestRecord::Caption { id, text } => {
                if corpus.captions.insert(id.clone(), text).is_some() {
                    return Err(Error::Validation(format!("duplicate caption id `{id}`")));
                }
            }
            ManifestRecord::Gold { image, captions } => {
                if corpus.gold.contains_key(&image) {
                    return Err(Error::Validation(format!("duplicate gold record for image `{image}`")));
                }
                corpus.gold.insert(image, captions);
            }
            ManifestRecord::Weak { image, caption, p_entail } => {
                corpus.weak.push(WeakEdge { image, caption, p_entail });
            }
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Writes the manifest plus one `.f32` sidecar per image under
/// `<manifest dir>/images/`.
pub fn save_corpus(corpus: &RetrievalCorpus, manifest: impl AsRef<Path>) -> Result<()> {
    corpus.validate()?;
    let manifest = manifest.as_ref();
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let img_dir = base.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (id, grid) in &corpus.images {
        let path = img_dir.join(format!("{id}.f32"));
        let bytes: Vec<u8> = grid.pixels().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let file = fs::File::create(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut w = BufWriter::new(file);
    for rec in corpus.manifest_records() {
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io(manifest, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(manifest, e))
}
