//! On-disk formats: tensor files, scene manifests, PNG images, checkpoints.
//!
//! A tensor file is `"MGST"`, a little-endian `u32` version (1), `u32` rank,
//! `rank` `u32` dims, a `u8` dtype (0 = float32, 1 = float64) and the
//! row-major little-endian payload.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::query::{BBox, LabelMap, QuerySet};
use crate::scene::{
    Camera, Dataset, FeatureMap, GaussianCloud, Image, ParamGroup, TrainSample, COLOR_DIM,
};
use crate::train::{AdamState, Optimizer, TrainConfig, TrainState};

pub const TENSOR_MAGIC: &[u8; 4] = b"MGST";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "vlsplat-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense tensor; `F32` tensors hold values exactly representable as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(dims, DType::F64, data)
    }

    /// Values are rounded to `f32`.
    pub fn f32(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let data = data.into_iter().map(|v| v as f32 as f64).collect();
        Self::checked(dims, DType::F32, data)
    }

    fn checked(dims: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::param(format!(
                "tensor dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::param("tensor dimension exceeds u32"));
        }
        Ok(Tensor { dims, dtype, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(13 + 4 * self.dims.len() + self.data.len() * self.dtype.size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.push(self.dtype.code());
        match self.dtype {
            DType::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parse a tensor; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
        let corrupt = |msg: &str| Error::Corrupt {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(at..at + n)
                .ok_or_else(|| corrupt("truncated header"))?;
            at += n;
            Ok(s)
        };
        if take(4)? != TENSOR_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "bad magic (not a tensor file)".into(),
            });
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != TENSOR_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: TENSOR_VERSION,
            });
        }
        let rank = u32_at(take(4)?) as usize;
        if rank > 16 {
            return Err(corrupt("implausible rank"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_at(take(4)?) as usize);
        }
        let dtype = match take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("unknown dtype {other}"),
                })
            }
        };
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("dims overflow"))?;
        let payload = &bytes[at..];
        if Some(payload.len()) != count.checked_mul(dtype.size()) {
            return Err(corrupt(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                count * dtype.size()
            )));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok(Tensor { dims, dtype, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes, path)
    }

    fn expect_dims(&self, dims: &[usize], path: &Path) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected dims {dims:?}, found {:?}", self.dims),
            });
        }
        Ok(())
    }
}

pub fn feature_map_to_tensor(f: &FeatureMap) -> Result<Tensor> {
    Tensor::f32(vec![f.height, f.width, f.channels], f.data.clone())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let t = Tensor::read(path)?;
    if t.dims.len() != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "feature map must be rank 3 (H×W×C), found rank {}",
                t.dims.len()
            ),
        });
    }
    FeatureMap::from_data(t.dims[1], t.dims[0], t.dims[2], t.data)
}

/// Label maps are stored as H×W float32 with −1 for background.
pub fn label_map_to_tensor(
    labels: &[Option<usize>],
    width: usize,
    height: usize,
) -> Result<Tensor> {
    let data = labels
        .iter()
        .map(|l| l.map_or(-1.0, |v| v as f64))
        .collect();
    Tensor::f32(vec![height, width], data)
}

pub fn read_label_map(path: &Path) -> Result<(usize, usize, LabelMap)> {
    let t = Tensor::read(path)?;
    if t.dims.len() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "label map must be rank 2".into(),
        });
    }
    let labels = t
        .data
        .iter()
        .map(|&v| (v >= 0.0).then_some(v as usize))
        .collect();
    Ok((t.dims[1], t.dims[0], labels))
}

pub fn image_to_rgb8(img: &Image) -> Vec<u8> {
    img.data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fmt)?;
    w.write_image_data(rgb).map_err(fmt)?;
    w.finish().map_err(fmt)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::param("PNG output needs a 3-channel image"));
    }
    write_png_rgb8(path, img.width, img.height, &image_to_rgb8(img))
}

/// Decode an 8-bit PNG (gray, gray+alpha, RGB or RGBA) to RGB in [0, 1].
pub fn read_png(path: &Path) -> Result<Image> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| fmt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fmt("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| fmt(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(fmt(format!("unsupported PNG color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for p in px.chunks_exact(step) {
        let rgb = if step < 3 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        };
        data.extend(rgb.iter().map(|&v| v as f64 / 255.0));
    }
    Image::from_data(w, h, 3, data)
}

/// Camera as written in manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (w, x, y, z).
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraSpec {
    fn from(c: &Camera) -> Self {
        CameraSpec {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            quaternion: c.rotation,
            translation: c.translation,
        }
    }
}

impl CameraSpec {
    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: self.quaternion,
            translation: self.translation,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image_path: String,
    pub feature_path: String,
    pub camera: CameraSpec,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: usize,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub frame: usize,
    pub gt_label_map_path: String,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalAnnotations {
    pub labels: Vec<String>,
    /// Q × d_f tensor of query embeddings.
    pub queries_path: String,
    pub frames: Vec<EvalFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub d_f: usize,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalAnnotations>,
    /// N × 6 tensor (xyz, rgb) of initialization points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_points_path: Option<String>,
    /// Checkpoint directory holding the generating parameters, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_checkpoint_path: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl SceneManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// A scene loaded from a manifest, all frames in manifest order.
#[derive(Clone, Debug)]
pub struct Scene {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub samples: Vec<TrainSample>,
}

/// Accepts a scene directory or a manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let mpath = manifest_path(path);
    let manifest: SceneManifest = read_json(&mpath)?;
    let root = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut samples = Vec::with_capacity(manifest.frames.len());
    for (i, fr) in manifest.frames.iter().enumerate() {
        let camera = fr.camera.to_camera().map_err(|e| Error::Format {
            path: mpath.clone(),
            msg: format!("frame {i}: {e}"),
        })?;
        let ipath = root.join(&fr.image_path);
        let image = read_png(&ipath)?;
        let fpath = root.join(&fr.feature_path);
        let gt_features = read_feature_map(&fpath)?;
        if gt_features.channels != manifest.d_f {
            return Err(Error::Format {
                path: fpath,
                msg: format!(
                    "feature width {} does not match d_f = {}",
                    gt_features.channels, manifest.d_f
                ),
            });
        }
        let sample = TrainSample {
            image,
            camera,
            gt_features,
        };
        sample.validate().map_err(|e| Error::Format {
            path: ipath,
            msg: format!("frame {i}: {e}"),
        })?;
        samples.push(sample);
    }
    Ok(Scene {
        root,
        manifest,
        samples,
    })
}

impl Scene {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.frames.len())
            .filter(|&i| self.manifest.frames[i].split == split)
            .collect()
    }

    /// Training split, or every frame when the manifest marks none.
    pub fn train_dataset(&self) -> Dataset {
        let mut idx = self.indices(Split::Train);
        if idx.is_empty() {
            idx = (0..self.samples.len()).collect();
        }
        Dataset {
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    pub fn eval(&self) -> Result<&EvalAnnotations> {
        self.manifest.eval.as_ref().ok_or_else(|| Error::Format {
            path: self.root.join(MANIFEST_NAME),
            msg: "scene has no evaluation annotations".into(),
        })
    }

    pub fn queries(&self) -> Result<QuerySet> {
        let ev = self.eval()?;
        let path = self.root.join(&ev.queries_path);
        let t = Tensor::read(&path)?;
        t.expect_dims(&[ev.labels.len(), self.manifest.d_f], &path)?;
        let embeddings = t
            .data
            .chunks(self.manifest.d_f.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        QuerySet::new(ev.labels.clone(), embeddings).map_err(|e| Error::Format {
            path,
            msg: e.to_string(),
        })
    }

    pub fn label_map(&self, ev: &EvalFrame) -> Result<LabelMap> {
        let path = self.root.join(&ev.gt_label_map_path);
        let (w, h, labels) = read_label_map(&path)?;
        let cam = &self
            .samples
            .get(ev.frame)
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                msg: format!("annotation refers to missing frame {}", ev.frame),
            })?
            .camera;
        if (w, h) != (cam.width, cam.height) {
            return Err(Error::Format {
                path,
                msg: format!(
                    "label map {w}x{h} does not match frame {}x{}",
                    cam.width, cam.height
                ),
            });
        }
        Ok(labels)
    }

    /// Initialization points and colors, if the manifest names them.
    pub fn init_points(&self) -> Result<Option<(Vec<[f64; 3]>, Vec<[f64; 3]>)>> {
        let Some(rel) = &self.manifest.init_points_path else {
            return Ok(None);
        };
        let path = self.root.join(rel);
        let t = Tensor::read(&path)?;
        if t.dims.len() != 2 || t.dims[1] != 6 {
            return Err(Error::Format {
                path,
                msg: "init points must be an N×6 tensor".into(),
            });
        }
        let pts = t.data.chunks(6).map(|r| [r[0], r[1], r[2]]).collect();
        let cols = t.data.chunks(6).map(|r| [r[3], r[4], r[5]]).collect();
        Ok(Some((pts, cols)))
    }
}

/// Training state plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct GroupStep {
    group: String,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    version: u32,
    config_hash: String,
    config: TrainConfig,
    iteration: u64,
    num_gaussians: usize,
    feature_dim: usize,
    fusion: FusionKind,
    heads: usize,
    optimizer_steps: Vec<GroupStep>,
    blocks: Vec<BlockEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON encoding of `cfg`.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(&json))
}

fn group_from_name(name: &str) -> Option<ParamGroup> {
    ParamGroup::ALL.into_iter().find(|g| g.name() == name)
}

fn checkpoint_blocks(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let s = &ck.state;
    let n = s.cloud.len();
    let mut blocks = Vec::new();
    for (g, p) in s.cloud.params() {
        let w = p.len().checked_div(n).unwrap_or(0);
        blocks.push((format!("cloud.{}", g.name()), vec![n, w], p.to_vec()));
    }
    for (name, p) in s.fusion.named_params() {
        blocks.push((format!("fusion.{name}"), vec![p.len()], p.to_vec()));
    }
    for (g, st) in &s.optimizer.states {
        blocks.push((
            format!("adam.{}.m", g.name()),
            vec![st.m.len()],
            st.m.clone(),
        ));
        blocks.push((
            format!("adam.{}.v", g.name()),
            vec![st.v.len()],
            st.v.clone(),
        ));
    }
    blocks
}

/// Write `ck` into directory `dir` (created if needed).
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, dims, data) in checkpoint_blocks(ck) {
        let file = format!("{name}.mgst");
        let bytes = Tensor::f64(dims, data)?.encode();
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(BlockEntry {
            name,
            file,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let s = &ck.state;
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(&ck.config),
        config: ck.config.clone(),
        iteration: s.iteration,
        num_gaussians: s.cloud.len(),
        feature_dim: s.cloud.feature_dim(),
        fusion: s.fusion.kind(),
        heads: s.fusion.heads(),
        optimizer_steps: s
            .optimizer
            .states
            .iter()
            .map(|(g, st)| GroupStep {
                group: g.name().into(),
                step: st.step,
            })
            .collect(),
        blocks: entries,
    };
    write_json(&dir.join("index.json"), &index)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let ipath = dir.join("index.json");
    let index: CheckpointIndex = read_json(&ipath)?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: ipath,
            msg: format!("not a checkpoint index (format '{}')", index.format),
        });
    }
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: ipath,
            found: index.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if config_hash(&index.config) != index.config_hash {
        return Err(Error::Corrupt {
            path: ipath,
            msg: "config hash mismatch".into(),
        });
    }
    let heads = if index.heads == 0 { 1 } else { index.heads };
    let fusion = Fusion::empty(index.fusion, COLOR_DIM, index.feature_dim, heads);
    let cloud = GaussianCloud::zeros(index.num_gaussians, index.feature_dim);
    let mut state = TrainState::new(cloud, fusion);
    state.iteration = index.iteration;

    let expected = checkpoint_blocks(&Checkpoint {
        config: index.config.clone(),
        state: state.clone(),
    });
    if expected.len() != index.blocks.len() {
        return Err(Error::Corrupt {
            path: ipath,
            msg: format!(
                "expected {} blocks, index lists {}",
                expected.len(),
                index.blocks.len()
            ),
        });
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, dims, _), entry) in expected.iter().zip(&index.blocks) {
        if *name != entry.name {
            return Err(Error::Corrupt {
                path: ipath.clone(),
                msg: format!("expected block '{name}', found '{}'", entry.name),
            });
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let t = Tensor::decode(&bytes, &path)?;
        if hex(&Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Corrupt {
                path,
                msg: "checksum mismatch".into(),
            });
        }
        if t.dtype != DType::F64 {
            return Err(Error::Format {
                path,
                msg: "checkpoint blocks must be float64".into(),
            });
        }
        t.expect_dims(dims, &path)?;
        loaded.push(t.data);
    }

    let mut it = loaded.into_iter();
    for (_, p) in state.cloud.params_mut() {
        p.copy_from_slice(&it.next().expect("block count checked"));
    }
    for (_, p) in state.fusion.named_params_mut() {
        p.copy_from_slice(&it.next().expect("block count checked"));
    }
    let steps = index.optimizer_steps;
    let mut optimizer = Optimizer { states: Vec::new() };
    for (g, _) in &state.optimizer.states {
        let step = steps
            .iter()
            .find(|s| group_from_name(&s.group) == Some(*g))
            .map(|s| s.step)
            .ok_or_else(|| Error::Corrupt {
                path: ipath.clone(),
                msg: format!("missing optimizer step for {}", g.name()),
            })?;
        let m = it.next().expect("block count checked");
        let v = it.next().expect("block count checked");
        optimizer.states.push((*g, AdamState { m, v, step }));
    }
    state.optimizer = optimizer;
    state.cloud.validate().map_err(|e| Error::Corrupt {
        path: ipath,
        msg: e.to_string(),
    })?;
    Ok(Checkpoint {
        config: index.config,
        state,
    })
}
