//! On-disk formats: JSON-lines datasets, TOML run configs, binary
//! checkpoints, a JSON-lines metrics log and SVG figures.
//!
//! Every file written here goes through [`write_atomic`], so a crash never
//! leaves a truncated file behind.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ElementCategory, MapElement, NormalizationFrame, PerceivedTrip, Scene};
use crate::loss::LossWeights;
use crate::model::{FusionModel, ModelConfig, ScoredElement};
use crate::nn::Matrix;
use crate::synth::{generate_scenes, NoiseConfig, SceneConfig};
use crate::trainer::TrainConfig;

pub const DATASET_FORMAT: &str = "mapfuse-dataset";
pub const DATASET_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"MFUSECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a temporary file next to `path`, then renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn format_error(path: &Path, record: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        record,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Deterministic split from the scene id's SHA-256: the first eight bytes
/// as an integer, modulo 100, below `val_percent` goes to validation.
pub fn split_for(scene_id: &str, val_percent: u8) -> Split {
    let digest = Sha256::digest(scene_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    if u64::from_be_bytes(head) % 100 < u64::from(val_percent) {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// SHA-256 (hex) of the generator settings.
    pub config_hash: String,
    pub scene_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: String,
    pub split: Split,
    pub bounds: NormalizationFrame,
    pub gt: Vec<MapElement>,
    pub trips: Vec<PerceivedTrip>,
}

impl SceneRecord {
    pub fn from_scene(scene: &Scene, val_percent: u8) -> Self {
        Self {
            scene_id: scene.scene_id.clone(),
            split: split_for(&scene.scene_id, val_percent),
            bounds: scene.bounds,
            gt: scene.gt_elements.clone(),
            trips: scene.trips.clone(),
        }
    }

    pub fn to_scene(&self) -> Scene {
        Scene {
            scene_id: self.scene_id.clone(),
            bounds: self.bounds,
            gt_elements: self.gt.clone(),
            trips: self.trips.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn new(config_hash: String, records: Vec<SceneRecord>) -> Self {
        Self {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                config_hash,
                scene_count: records.len(),
            },
            records,
        }
    }

    pub fn scenes(&self, split: Option<Split>) -> Vec<Scene> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(SceneRecord::to_scene)
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Streams records; errors name the file and 1-based line.
    pub fn read(path: &Path) -> Result<Dataset> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| format_error(path, 1, "missing header record"))??;
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| format_error(path, 1, e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(format_error(
                path,
                1,
                format!("unsupported format {} version {}", header.format, header.version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let n = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let record: SceneRecord = serde_json::from_str(&line).map_err(|e| format_error(path, n, e.to_string()))?;
            record
                .to_scene()
                .validate()
                .map_err(|e| format_error(path, n, e.to_string()))?;
            records.push(record);
        }
        if records.len() != header.scene_count {
            return Err(format_error(
                path,
                records.len() + 1,
                format!("header announces {} scenes, found {}", header.scene_count, records.len()),
            ));
        }
        Ok(Dataset { header, records })
    }
}

/// Inputs of `generate_scenes`, hashed into the dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene_count: usize,
    pub trips_per_scene: usize,
    /// Percentage of scenes routed to validation by id hash.
    pub val_percent: u8,
    /// Width of rasterized lines in the foreground mask, meters.
    pub seg_line_width: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene_count: 64,
            trips_per_scene: 10,
            val_percent: 20,
            seg_line_width: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.val_percent > 100 {
            return Err(Error::InvalidConfig("val_percent must be at most 100".into()));
        }
        if !(self.seg_line_width.is_finite() && self.seg_line_width > 0.0) {
            return Err(Error::InvalidConfig("seg_line_width must be positive".into()));
        }
        Ok(())
    }
}

pub fn config_hash(scene: &SceneConfig, noise: &NoiseConfig, data: &DataConfig, seed: u64) -> Result<String> {
    let value = serde_json::json!({ "scene": scene, "noise": noise, "data": data, "seed": seed });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

/// Generates scenes and writes them as a dataset file.
pub fn build_dataset(
    path: &Path,
    scene: &SceneConfig,
    noise: &NoiseConfig,
    data: &DataConfig,
    seed: u64,
) -> Result<Dataset> {
    data.validate()?;
    let scenes = generate_scenes(data.scene_count, scene, noise, data.trips_per_scene, seed)?;
    let records = scenes
        .iter()
        .map(|s| SceneRecord::from_scene(s, data.val_percent))
        .collect();
    let dataset = Dataset::new(config_hash(scene, noise, data, seed)?, records);
    dataset.write(path)?;
    Ok(dataset)
}

/// Every knob of a run in one TOML document; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: usize,
    tensors: Vec<TensorInfo>,
}

/// Named parameter tensors with the model configuration and step.
///
/// Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
/// then every tensor's values as little-endian `f64` in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_model(model: &FusionModel, step: usize) -> Self {
        Self {
            config: model.config().clone(),
            step,
            tensors: model
                .params()
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<FusionModel> {
        FusionModel::from_params(self.config, self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorInfo {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let values: usize = self.tensors.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            if data.len() < 8 * n {
                return Err(Error::Checkpoint(format!("tensor {} truncated", info.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            tensors.push((info.name, Matrix::from_vec(info.rows, info.cols, values)));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Append-only JSON-lines log, one record per line.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    /// Starts a fresh log, replacing any previous one.
    pub fn create(path: &Path) -> Result<Self> {
        write_atomic(path, b"")?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &serde_json::Value) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Fused output of one scene, as written by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedMap {
    pub scene_id: String,
    pub bounds: NormalizationFrame,
    pub elements: Vec<ScoredElement>,
}

pub fn write_fused_maps(path: &Path, maps: &[FusedMap]) -> Result<()> {
    let mut out = String::new();
    for m in maps {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_fused_maps(path: &Path) -> Result<Vec<FusedMap>> {
    let reader = BufReader::new(File::open(path)?);
    let mut maps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let map: FusedMap = serde_json::from_str(&line).map_err(|e| format_error(path, i + 1, e.to_string()))?;
        for s in &map.elements {
            s.element.validate().map_err(|e| format_error(path, i + 1, e.to_string()))?;
        }
        maps.push(map);
    }
    Ok(maps)
}

pub fn category_color(category: ElementCategory) -> &'static str {
    match category {
        ElementCategory::LaneDivider => "#1f4fd8",
        ElementCategory::StopLine => "#1a9e3a",
        ElementCategory::Crosswalk => "#d62020",
    }
}

/// Layers drawn by [`render_svg`]; any may be empty.
#[derive(Debug, Clone, Default)]
pub struct SvgLayers<'a> {
    pub gt: &'a [MapElement],
    pub trips: &'a [PerceivedTrip],
    pub prediction: &'a [MapElement],
}

const SVG_SCALE: f64 = 10.0;

fn svg_path(out: &mut String, element: &MapElement, frame: &NormalizationFrame, extra: &str) {
    let mut d = String::new();
    for (i, p) in element.points.iter().enumerate() {
        let x = (p.x - frame.min_x) * SVG_SCALE;
        let y = (frame.max_y - p.y) * SVG_SCALE;
        let _ = write!(d, "{}{x:.2} {y:.2}", if i == 0 { "M" } else { " L" });
    }
    if element.closed {
        d.push_str(" Z");
    }
    let _ = writeln!(
        out,
        "    <path d=\"{d}\" stroke=\"{}\" fill=\"none\" class=\"{}\"{extra}/>",
        category_color(element.category),
        element.category.name()
    );
}

/// Deterministic SVG with one group per layer; y points up.
pub fn render_svg(frame: &NormalizationFrame, layers: &SvgLayers) -> String {
    let (w, h) = (frame.width() * SVG_SCALE, frame.height() * SVG_SCALE);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.2} {h:.2}\" width=\"{w:.0}\" height=\"{h:.0}\">"
    );
    let _ = writeln!(out, "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(out, "  <g id=\"trips\" stroke-width=\"2\" opacity=\"0.3\">");
    for trip in layers.trips {
        for e in &trip.elements {
            svg_path(&mut out, e, frame, &format!(" data-trip=\"{}\"", trip.trip_id));
        }
    }
    let _ = writeln!(out, "  </g>");
    let _ = writeln!(out, "  <g id=\"gt\" stroke-width=\"3\" stroke-dasharray=\"8 6\">");
    for e in layers.gt {
        svg_path(&mut out, e, frame, "");
    }
    let _ = writeln!(out, "  </g>");
    let _ = writeln!(out, "  <g id=\"prediction\" stroke-width=\"4\">");
    for e in layers.prediction {
        svg_path(&mut out, e, frame, "");
    }
    let _ = writeln!(out, "  </g>");
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2D;

    #[test]
    fn checkpoint_round_trip() {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_instance_queries: 2,
            n_point_queries: 3,
            seg_rows: 2,
            seg_cols: 2,
            ffn_dim: 8,
            ..ModelConfig::default()
        };
        let model = FusionModel::new(config, 5).unwrap();
        let ck = Checkpoint::from_model(&model, 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.into_model().unwrap();
        assert_eq!(restored.params(), model.params());

        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage-garbage-garbage").is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let text = RunConfig::default().to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
        assert!(RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_model = 30\nn_heads = 4\n").is_err());
        let partial = RunConfig::from_toml("[train]\ntotal_steps = 5\n").unwrap();
        assert_eq!(partial.train.total_steps, 5);
    }

    #[test]
    fn svg_layers() {
        let frame = NormalizationFrame::centered(60.0).unwrap();
        let empty = render_svg(&frame, &SvgLayers::default());
        assert!(empty.contains("<g id=\"prediction\" stroke-width=\"4\">\n  </g>"));
        let line = MapElement::open(ElementCategory::StopLine, vec![Point2D::new(0.0, 0.0), Point2D::new(1.0, 1.0)]).unwrap();
        let preds = vec![line.clone(), line.clone(), line];
        let svg = render_svg(&frame, &SvgLayers { prediction: &preds, ..Default::default() });
        let layer = svg.split("<g id=\"prediction\"").nth(1).unwrap();
        assert_eq!(layer.matches("<path").count(), 3);
        assert_eq!(svg, render_svg(&frame, &SvgLayers { prediction: &preds, ..Default::default() }));
        assert!(svg.contains("M300.00 300.00 L310.00 290.00"));
    }

    #[test]
    fn split_is_stable() {
        assert_eq!(split_for("scene-a", 0), Split::Train);
        assert_eq!(split_for("scene-a", 100), Split::Val);
        let val = (0..1000).filter(|i| split_for(&format!("s{i}"), 20) == Split::Val).count();
        assert!((150..250).contains(&val), "{val}");
    }
}
