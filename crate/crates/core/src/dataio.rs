//! Dataset manifests, image loading and the synthetic phase-video generator.
//!
//! On disk a dataset is a directory holding `manifest.csv`, `meta.json` and
//! `frames/<video_id>/<frame_index>.png`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngKey;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "meta.json";
const MANIFEST_HEADER: &str = "video_id,frame_index,image_path,label";

/// A single RGB image, `H × W × 3`, values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frame_index: usize,
    /// Relative to the manifest root.
    pub image_path: PathBuf,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the image paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    format_version: u32,
    class_names: Vec<String>,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthSpec>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Distinct video ids in order of first appearance.
    pub fn video_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.video_id.as_str()))
            .map(|e| e.video_id.clone())
            .collect()
    }

    /// Entry indices per video, each list ordered by frame index.
    pub fn frames_by_video(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.entry(e.video_id.clone()).or_default().push(i);
        }
        for idx in out.values_mut() {
            idx.sort_by_key(|&i| self.entries[i].frame_index);
        }
        out
    }

    /// Keeps only the given videos, preserving entry order.
    pub fn restrict_to_videos(&self, videos: &[String]) -> DatasetManifest {
        let keep: HashSet<&str> = videos.iter().map(String::as_str).collect();
        DatasetManifest {
            root: self.root.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(e.video_id.as_str()))
                .cloned()
                .collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 2;
            if e.video_id.is_empty() || e.video_id.contains([',', '\n', '\r', '/']) {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!("invalid video_id {:?}", e.video_id),
                });
            }
            if !seen.insert((e.video_id.as_str(), e.frame_index)) {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!("duplicate frame {} of video {}", e.frame_index, e.video_id),
                });
            }
            if let Some(label) = e.label {
                if label >= self.class_names.len() {
                    return Err(Error::LabelOutOfRange {
                        line,
                        label: label as i64,
                        n_classes: self.class_names.len(),
                    });
                }
            }
        }
        // frame indices per video must be exactly 0..n
        let mut per_video: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            per_video
                .entry(e.video_id.as_str())
                .or_default()
                .push((e.frame_index, i + 2));
        }
        let mut videos: Vec<_> = per_video.into_iter().collect();
        videos.sort_by(|a, b| a.0.cmp(b.0));
        for (video, mut frames) in videos {
            frames.sort_unstable();
            for (expected, &(found, line)) in frames.iter().enumerate() {
                if found != expected {
                    return Err(Error::NonConsecutiveFrames {
                        video_id: video.to_string(),
                        line,
                        expected,
                        found,
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes `manifest.csv` and `meta.json` into `self.root`.
    pub fn write(&self, synth: Option<&SynthSpec>) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(&self.root).map_err(|e| Error::DatasetWrite {
            path: self.root.clone(),
            source: e,
        })?;
        let manifest_path = self.root.join(MANIFEST_FILE);
        let mut text = String::with_capacity(64 * (self.entries.len() + 1));
        text.push_str(MANIFEST_HEADER);
        text.push('\n');
        for e in &self.entries {
            let path = e.image_path.to_string_lossy();
            if path.contains([',', '\n']) {
                return Err(Error::MalformedRow {
                    line: 0,
                    reason: format!("image path {path:?} cannot be written to csv"),
                });
            }
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{},{}\n", e.video_id, e.frame_index, path, label));
        }
        write_file(&manifest_path, text.as_bytes())?;
        let meta = MetaFile {
            format_version: 1,
            class_names: self.class_names.clone(),
            split: self.split,
            synth: synth.cloned(),
        };
        let meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        write_file(&self.root.join(META_FILE), meta_text.as_bytes())?;
        Ok(manifest_path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::DatasetWrite {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads `manifest.csv` (or a directory containing it) plus the sibling `meta.json`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let csv_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    if !csv_path.is_file() {
        return Err(Error::ManifestMissing(csv_path));
    }
    let root = csv_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let meta_path = root.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaFile = serde_json::from_str(&meta_text).map_err(|e| Error::MalformedRow {
        line: e.line(),
        reason: format!("{}: {e}", meta_path.display()),
    })?;
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!(
                    "expected header {MANIFEST_HEADER:?}, found {:?}",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            })
        }
    }
    let mut entries = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let frame_index = fields[1].parse::<usize>().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("frame_index {:?} is not a non-negative integer", fields[1]),
        })?;
        let label = if fields[3].is_empty() {
            None
        } else {
            let value = fields[3].parse::<i64>().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("label {:?} is not an integer", fields[3]),
            })?;
            if value < 0 || value as usize >= meta.class_names.len() {
                return Err(Error::LabelOutOfRange {
                    line,
                    label: value,
                    n_classes: meta.class_names.len(),
                });
            }
            Some(value as usize)
        };
        if fields[2].is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty image path".into(),
            });
        }
        entries.push(ManifestEntry {
            video_id: fields[0].to_string(),
            frame_index,
            image_path: PathBuf::from(fields[2]),
            label,
        });
    }
    let manifest = DatasetManifest {
        root,
        entries,
        class_names: meta.class_names,
        split: meta.split,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Reads the SynthSpec recorded next to a generated manifest, if any.
pub fn load_synth_spec(dataset_dir: &Path) -> Result<Option<SynthSpec>> {
    let meta_path = dataset_dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| Error::MalformedRow {
        line: e.line(),
        reason: format!("{}: {e}", meta_path.display()),
    })?;
    Ok(meta.synth)
}

/// A batch of decoded images, `B × H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn from_images(images: &[Image], ids: Vec<String>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyBatch)?;
        if ids.len() != images.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} ids",
                images.len(),
                ids.len()
            )));
        }
        let (h, w, c) = first.dim();
        let mut data = Array4::zeros((images.len(), h, w, c));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (h, w, c) {
                return Err(Error::Dimension(format!(
                    "image {} has shape {:?}, expected {:?}",
                    ids[i],
                    img.dim(),
                    (h, w, c)
                )));
            }
            data.index_axis_mut(Axis(0), i).assign(img);
        }
        Ok(Self { data, ids })
    }

    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Image {
        self.data.index_axis(Axis(0), i).to_owned()
    }
}

pub fn entry_id(entry: &ManifestEntry) -> String {
    format!("{}/{}", entry.video_id, entry.frame_index)
}

pub fn load_images(manifest: &DatasetManifest, indices: &[usize]) -> Result<ImageBatch> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut images = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    let mut expected: Option<(usize, usize)> = None;
    for &i in indices {
        let entry = manifest.entries.get(i).ok_or_else(|| {
            Error::Dimension(format!("entry index {i} out of range ({})", manifest.len()))
        })?;
        let path = manifest.root.join(&entry.image_path);
        let img = read_png(&path)?;
        let (h, w, _) = img.dim();
        match expected {
            None => expected = Some((h, w)),
            Some(shape) if shape != (h, w) => {
                return Err(Error::Decode {
                    path,
                    reason: format!("size {h}x{w} differs from batch size {}x{}", shape.0, shape.1),
                })
            }
            _ => {}
        }
        images.push(img);
        ids.push(entry_id(entry));
    }
    ImageBatch::from_images(&images, ids)
}

/// Decodes an 8-bit RGB or RGBA PNG into floats in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| decode_err(e.to_string()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut img = Image::zeros((h, w, 3));
    for y in 0..h {
        let row = &bytes[y * info.line_size..];
        for x in 0..w {
            for c in 0..3 {
                img[[y, x, c]] = row[x * channels + c] as f32 / 255.0;
            }
        }
    }
    Ok(img)
}

/// Quantizes to 8 bits and writes an RGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let bytes = quantize(img);
    let file = fs::File::create(path).map_err(|e| Error::DatasetWrite {
        path: path.to_path_buf(),
        source: e,
    })?;
    let write_err = |e: png::EncodingError| Error::DatasetWrite {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(write_err)?;
    writer.write_image_data(&bytes).map_err(write_err)?;
    writer.finish().map_err(write_err)?;
    Ok(())
}

pub fn quantize(img: &Image) -> Vec<u8> {
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic phase videos
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthLayout {
    /// Phases visited in order, one contiguous segment each.
    #[default]
    Segments,
    /// Independent per-frame class draws (binary characterization analog).
    IidFrames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub n_phases: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub layout: SynthLayout,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_videos: 40,
            frames_per_video: 50,
            n_phases: 7,
            image_size: 64,
            noise_level: 0.2,
            seed: 0,
            layout: SynthLayout::Segments,
        }
    }
}

impl SynthSpec {
    /// Two-class, temporally unstructured variant.
    pub fn binary(n_videos: usize, frames_per_video: usize, seed: u64) -> Self {
        Self {
            n_videos,
            frames_per_video,
            n_phases: 2,
            layout: SynthLayout::IidFrames,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 {
            return Err(Error::config("n_videos", "must be positive"));
        }
        if self.frames_per_video == 0 {
            return Err(Error::config("frames_per_video", "must be positive"));
        }
        if self.n_phases == 0 {
            return Err(Error::config("n_phases", "must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size", "must be at least 8 pixels"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::config("noise_level", "must lie in [0, 1]"));
        }
        if self.layout == SynthLayout::Segments && self.frames_per_video < self.n_phases {
            return Err(Error::config(
                "frames_per_video",
                format!(
                    "{} frames cannot hold {} non-empty phases",
                    self.frames_per_video, self.n_phases
                ),
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_phases).map(|p| format!("phase{p}")).collect()
    }

    pub fn video_id(v: usize) -> String {
        format!("v{v:03}")
    }
}

/// Splits `n_frames` into `n_phases` contiguous segments, each at least one
/// frame, with lengths proportional to a symmetric Dirichlet(2) draw.
pub fn phase_lengths<R: Rng + ?Sized>(n_frames: usize, n_phases: usize, rng: &mut R) -> Vec<usize> {
    assert!(n_phases >= 1 && n_frames >= n_phases);
    let gamma = Gamma::new(2.0, 1.0).expect("valid gamma");
    let draws: Vec<f64> = (0..n_phases).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let spare = (n_frames - n_phases) as f64;
    // one guaranteed frame per phase, the rest by largest remainder
    let shares: Vec<f64> = draws.iter().map(|d| d / total * spare).collect();
    let mut lengths: Vec<usize> = shares.iter().map(|s| 1 + s.floor() as usize).collect();
    let mut left = n_frames - lengths.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n_phases).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &p in order.iter().cycle() {
        if left == 0 {
            break;
        }
        lengths[p] += 1;
        left -= 1;
    }
    lengths
}

/// Appearance of one phase: the texture family every frame of that phase draws from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseStyle {
    pub hue: f64,
    /// Stripe direction in radians.
    pub orientation: f64,
    /// Stripe cycles across the image.
    pub frequency: f64,
    pub motif: Motif,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    Disc,
    Square,
    Ring,
    Cross,
    Diamond,
    Bar,
    Triangle,
}

const MOTIFS: [Motif; 7] = [
    Motif::Disc,
    Motif::Square,
    Motif::Ring,
    Motif::Cross,
    Motif::Diamond,
    Motif::Bar,
    Motif::Triangle,
];

// Stripe directions; each is separated from the others by at least 45 degrees.
const ORIENTATIONS: [f64; 3] = [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_4];
const FREQUENCIES: [f64; 3] = [2.5, 5.0, 8.0];

/// Deterministic texture family for phase `p`. Consecutive phases differ in
/// orientation and motif, phases three apart in frequency.
pub fn phase_style(p: usize, _n: usize) -> PhaseStyle {
    PhaseStyle {
        hue: (0.02 * p as f64).fract(),
        orientation: ORIENTATIONS[p % 3] + 0.2 * (p / 9) as f64,
        frequency: FREQUENCIES[(p / 3) % 3],
        motif: MOTIFS[p % MOTIFS.len()],
    }
}

/// Scale of the structured nuisances; saturates at noise level 0.2.
fn nuisance(noise: f64) -> f64 {
    (5.0 * noise).min(1.0)
}

/// Recording conditions shared by all frames of a video.
#[derive(Clone, Copy, Debug, PartialEq)]
struct VideoLook {
    hue_shift: f64,
    saturation: f64,
    brightness: f64,
    contrast: f64,
}

impl VideoLook {
    fn draw<R: Rng + ?Sized>(noise: f64, rng: &mut R) -> Self {
        let a = nuisance(noise);
        let mut u = || rng.random::<f64>() * 2.0 - 1.0;
        Self {
            hue_shift: 0.08 * a * u(),
            saturation: 0.3 + 0.05 * a * u(),
            brightness: 0.1 * a * u(),
            contrast: 0.2 * a * u(),
        }
    }
}

/// Frame-level variation: texture phase, motif placement and occasional haze.
#[derive(Clone, Copy, Debug, PartialEq)]
struct FrameJitter {
    texture_offset: f64,
    angle_shift: f64,
    motif_x: f64,
    motif_y: f64,
    motif_scale: f64,
    hue_shift: f64,
    brightness: f64,
    /// Blend weight toward a featureless haze; zero for clean frames.
    haze: f64,
}

impl FrameJitter {
    fn draw<R: Rng + ?Sized>(noise: f64, rng: &mut R) -> Self {
        let a = nuisance(noise);
        let texture_offset = a * rng.random::<f64>();
        let mut u = || rng.random::<f64>() * 2.0 - 1.0;
        let (angle_shift, motif_x, motif_y, motif_scale, hue_shift, brightness) = (
            std::f64::consts::PI / 18.0 * a * u(),
            0.25 * a * u(),
            0.25 * a * u(),
            0.3 * a * u(),
            0.03 * a * u(),
            0.05 * a * u(),
        );
        let hazed = rng.random::<f64>() < (0.75 * noise).min(1.0);
        let haze = if hazed { 0.8 + 0.15 * rng.random::<f64>() } else { 0.0 };
        Self {
            texture_offset,
            angle_shift,
            motif_x,
            motif_y,
            motif_scale,
            hue_shift,
            brightness,
            haze,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn motif_mask(motif: Motif, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match motif {
        Motif::Disc => dx * dx + dy * dy <= r * r,
        Motif::Square => ax <= 0.8 * r && ay <= 0.8 * r,
        Motif::Ring => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.6 * r
        }
        Motif::Cross => (ax <= 0.25 * r && ay <= r) || (ay <= 0.25 * r && ax <= r),
        Motif::Diamond => ax + ay <= r,
        Motif::Bar => ax <= r && ay <= 0.3 * r,
        Motif::Triangle => dy <= 0.7 * r && dy >= -r + 2.0 * ax,
    }
}

fn render_frame<R: Rng + ?Sized>(
    style: &PhaseStyle,
    look: &VideoLook,
    jitter: &FrameJitter,
    size: usize,
    noise: f64,
    rng: &mut R,
) -> Image {
    let s = size as f64;
    let angle = style.orientation + jitter.angle_shift;
    let (ca, sa) = (angle.cos(), angle.sin());
    let hue = style.hue + look.hue_shift + jitter.hue_shift;
    let base = hsv_to_rgb(hue, look.saturation, 0.6);
    let accent = hsv_to_rgb(hue + 0.5, look.saturation + 0.15, 0.85);
    let cx = 0.5 + jitter.motif_x;
    let cy = 0.5 + jitter.motif_y;
    let radius = 0.2 * (1.0 + jitter.motif_scale);
    let contrast = 1.0 + look.contrast;
    let brightness = look.brightness + jitter.brightness;
    let pixel_sigma = 0.25 * noise;
    let mut img = Image::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let v = (y as f64 + 0.5) / s;
            let along = (u - 0.5) * ca + (v - 0.5) * sa;
            let stripe = (std::f64::consts::TAU * (style.frequency * along + jitter.texture_offset)).sin();
            let shade = 1.0 + 0.35 * stripe;
            let inside = motif_mask(style.motif, u - cx, v - cy, radius);
            for c in 0..3 {
                let colour = if inside { accent[c] } else { base[c] * shade };
                let mut value = (colour - 0.5) * contrast + 0.5 + brightness;
                value = (1.0 - jitter.haze) * value + jitter.haze * 0.55;
                if pixel_sigma > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    value += pixel_sigma * z;
                }
                img[[y, x, c]] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Renders the frames of one video in memory: `(label, image)` per frame.
pub fn render_video(spec: &SynthSpec, video: usize) -> Vec<(usize, Image)> {
    let key = RngKey::new(spec.seed).with("synth").with_u64(video as u64);
    let mut layout_rng = key.with("layout").stream();
    let labels: Vec<usize> = match spec.layout {
        SynthLayout::Segments => {
            let lengths = phase_lengths(spec.frames_per_video, spec.n_phases, &mut layout_rng);
            lengths
                .iter()
                .enumerate()
                .flat_map(|(p, &len)| std::iter::repeat_n(p, len))
                .collect()
        }
        SynthLayout::IidFrames => (0..spec.frames_per_video)
            .map(|_| layout_rng.random_range(0..spec.n_phases))
            .collect(),
    };
    let look = VideoLook::draw(spec.noise_level, &mut key.with("video-look").stream());
    let styles: Vec<PhaseStyle> = (0..spec.n_phases)
        .map(|p| phase_style(p, spec.n_phases))
        .collect();
    labels
        .into_iter()
        .enumerate()
        .map(|(f, label)| {
            let frame_key = key.with_u64(f as u64);
            let jitter = FrameJitter::draw(spec.noise_level, &mut frame_key.with("frame-jitter").stream());
            let mut pixel_rng = frame_key.with("pixels").stream();
            let img = render_frame(
                &styles[label],
                &look,
                &jitter,
                spec.image_size,
                spec.noise_level,
                &mut pixel_rng,
            );
            (label, img)
        })
        .collect()
}

/// Writes a synthetic dataset into `out_dir` and returns its manifest.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let frames_dir = out_dir.join("frames");
    let mut entries = Vec::with_capacity(spec.n_videos * spec.frames_per_video);
    for v in 0..spec.n_videos {
        let video_id = SynthSpec::video_id(v);
        let video_dir = frames_dir.join(&video_id);
        fs::create_dir_all(&video_dir).map_err(|e| Error::DatasetWrite {
            path: video_dir.clone(),
            source: e,
        })?;
        for (f, (label, img)) in render_video(spec, v).into_iter().enumerate() {
            let rel = PathBuf::from("frames").join(&video_id).join(format!("{f}.png"));
            write_png(&out_dir.join(&rel), &img)?;
            entries.push(ManifestEntry {
                video_id: video_id.clone(),
                frame_index: f,
                image_path: rel,
                label: Some(label),
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        class_names: spec.class_names(),
        split: Split::Train,
    };
    manifest.write(Some(spec))?;
    Ok(manifest)
}
