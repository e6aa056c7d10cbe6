//! Binary clip, trace and checkpoint formats, dataset manifests and run
//! directories.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! clip        "GVTC" | version u32 | T H W C u32 | fps f32 | T·H·W·C × f32
//! trace       "GVTS" | version u32 | T u32       | fps f32 | T × f32
//! checkpoint  "GVTM" | version u32 | config_len u32 | config JSON
//!             | count u32 | count × (name_len u32 | name | ndim u32 | ndim × u64 | numel × f64)
//! ```
//!
//! Clips and traces are stored as `f32` and widened on load; checkpoints keep
//! full `f64` precision. Checkpoint entries are the model parameters in
//! creation order followed by each head batch norm's `running_mean` and
//! `running_var`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::metrics::{write_pairs_csv, ExperimentResult};
use crate::model::Model;
use crate::preprocess::{SignalTrace, VideoClip};
use crate::synthdata::PresetName;
use crate::tensor::Tensor;
use crate::training::EpochRecord;

pub const CLIP_MAGIC: &[u8; 4] = b"GVTC";
pub const TRACE_MAGIC: &[u8; 4] = b"GVTS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GVTM";
pub const FORMAT_VERSION: u32 = 1;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let m: [u8; 4] = read_exact(r)?;
    ensure!(&m == magic, Format, "not a {what} file (magic {:?})", String::from_utf8_lossy(&m));
    let v = read_u32(r)?;
    ensure!(v == FORMAT_VERSION, Format, "unsupported {what} version {v}");
    Ok(())
}

fn ensure_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    ensure!(r.read(&mut probe)? == 0, Format, "trailing bytes after {what} payload");
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("payload shorter than {n} values")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_clip(w: &mut impl Write, clip: &VideoClip) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in clip.dims {
        w.write_all(&dim_u32(d, "clip extent")?.to_le_bytes())?;
    }
    w.write_all(&(clip.fps as f32).to_le_bytes())?;
    write_f32s(w, &clip.data)
}

pub fn read_clip(r: &mut impl Read) -> Result<VideoClip> {
    read_header(r, CLIP_MAGIC, "clip")?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let fps = f32::from_le_bytes(read_exact(r)?) as f64;
    ensure!(dims.iter().all(|&d| d > 0), Format, "clip header has a zero extent {:?}", dims);
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| Error::Format("clip extents overflow".into()))?;
    let data = read_f32s(r, n)?;
    ensure_eof(r, "clip")?;
    VideoClip::new(dims, fps, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_trace(w: &mut impl Write, trace: &SignalTrace) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&dim_u32(trace.len(), "trace length")?.to_le_bytes())?;
    w.write_all(&(trace.fps as f32).to_le_bytes())?;
    write_f32s(w, &trace.samples)
}

pub fn read_trace(r: &mut impl Read) -> Result<SignalTrace> {
    read_header(r, TRACE_MAGIC, "trace")?;
    let n = read_u32(r)? as usize;
    let fps = f32::from_le_bytes(read_exact(r)?) as f64;
    let samples = read_f32s(r, n)?;
    ensure_eof(r, "trace")?;
    ensure!(samples.iter().all(|v| v.is_finite()), Format, "trace contains non-finite values");
    Ok(SignalTrace { samples, fps })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(file_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(file_err(path))?))
}

fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Io(source) => Error::File {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn save_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut w = create(path)?;
    in_file(path, write_clip(&mut w, clip))?;
    w.flush().map_err(file_err(path))
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    in_file(path, read_clip(&mut open(path)?))
}

pub fn save_trace(path: &Path, trace: &SignalTrace) -> Result<()> {
    let mut w = create(path)?;
    in_file(path, write_trace(&mut w, trace))?;
    w.flush().map_err(file_err(path))
}

pub fn load_trace(path: &Path) -> Result<SignalTrace> {
    in_file(path, read_trace(&mut open(path)?))
}

/// Named tensors as stored in a checkpoint, in file order.
fn checkpoint_entries(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for (k, st) in model.bn_states().iter().enumerate() {
        let c = st.running_mean.len();
        for (suffix, v) in [("running_mean", &st.running_mean), ("running_var", &st.running_var)] {
            out.push((
                format!("head.up{k}.bn.{suffix}"),
                Tensor::new(&[c], v.clone()).expect("channel vector"),
            ));
        }
    }
    out
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config())?;
    w.write_all(&dim_u32(cfg.len(), "config length")?.to_le_bytes())?;
    w.write_all(&cfg)?;
    let entries = checkpoint_entries(model);
    w.write_all(&dim_u32(entries.len(), "entry count")?.to_le_bytes())?;
    for (name, t) in &entries {
        w.write_all(&dim_u32(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&dim_u32(t.ndim(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    read_header(r, CHECKPOINT_MAGIC, "checkpoint")?;
    let cfg_len = read_u32(r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|_| Error::Format("truncated config".into()))?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Model::new(&cfg, 0).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let expected = checkpoint_entries(&model);
    let count = read_u32(r)? as usize;
    ensure!(
        count == expected.len(),
        Format,
        "checkpoint holds {count} tensors, the configured model has {}",
        expected.len()
    );
    for (want_name, want) in &expected {
        let name_len = read_u32(r)? as usize;
        ensure!(name_len <= 1024, Format, "implausible name length {name_len}");
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        ensure!(&name == want_name, Format, "expected tensor {want_name}, found {name}");
        let ndim = read_u32(r)? as usize;
        ensure!(ndim == want.ndim(), Format, "tensor {name} has rank {ndim}, expected {}", want.ndim());
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
        }
        ensure!(shape == want.shape(), Format, "tensor {name} has shape {:?}, expected {:?}", shape, want.shape());
        let mut bytes = vec![0u8; want.len() * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("tensor {name} is truncated")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(rest) = name.strip_prefix("head.up") {
            if let Some((k, stat)) = rest.split_once(".bn.running_") {
                let k: usize = k.parse().map_err(|_| Error::Format(format!("bad tensor name {name}")))?;
                let st = &mut model.bn_states_mut()[k];
                match stat {
                    "mean" => st.running_mean = data,
                    _ => st.running_var = data,
                }
                continue;
            }
        }
        model.params_mut().set(&name, Tensor::new(&shape, data)?)?;
    }
    ensure_eof(r, "checkpoint")?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = create(path)?;
    in_file(path, write_checkpoint(&mut w, model))?;
    w.flush().map_err(file_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    in_file(path, read_checkpoint(&mut open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub clip_path: String,
    pub trace_path: String,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_hr: Option<f64>,
}

/// How a synthetic dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorMeta {
    pub preset: PresetName,
    pub seed: u64,
    pub subjects: usize,
    pub clips_per_subject: usize,
    pub dims: [usize; 3],
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorMeta>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        fs::write(&path, self.to_json()?).map_err(file_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let s = fs::read_to_string(&path).map_err(file_err(&path))?;
        in_file(&path, Self::from_json(&s))
    }
}

/// A clip, its trace and its manifest entry.
#[derive(Clone, Debug)]
pub struct Record {
    pub id: String,
    pub entry: ManifestEntry,
    pub clip: VideoClip,
    pub trace: SignalTrace,
}

fn record_id(entry: &ManifestEntry) -> String {
    Path::new(&entry.clip_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.clip_path.clone())
}

/// Loads the manifest in `dir` and every clip and trace it references.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Record>)> {
    let manifest = Manifest::load(dir)?;
    ensure!(!manifest.entries.is_empty(), Input, "manifest in {} lists no clips", dir.display());
    let records = manifest
        .entries
        .iter()
        .map(|e| {
            let clip = load_clip(&dir.join(&e.clip_path))?;
            let trace = load_trace(&dir.join(&e.trace_path))?;
            ensure!(
                trace.len() >= clip.frames(),
                Input,
                "{}: trace has {} samples for {} frames",
                e.trace_path,
                trace.len(),
                clip.frames()
            );
            Ok(Record {
                id: record_id(e),
                entry: e.clone(),
                clip,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

/// Writes a synthetic dataset's clips, traces and manifest under `dir`.
pub fn save_dataset(dir: &Path, ds: &crate::synthdata::SynthDataset) -> Result<()> {
    for (entry, lc) in ds.manifest.entries.iter().zip(&ds.clips) {
        save_clip(&dir.join(&entry.clip_path), &lc.clip)?;
        save_trace(&dir.join(&entry.trace_path), &lc.trace)?;
    }
    ds.manifest.save(dir)
}

/// File names inside a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const HISTORY: &'static str = "history.csv";
    pub const PAIRS: &'static str = "pairs.csv";
    pub const METRICS: &'static str = "metrics.json";
    pub const CHECKPOINT: &'static str = "model.gvtm";
    pub const SEARCH_TRACE: &'static str = "search_trace.csv";

    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(file_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(file_err(&p))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn write_history(&self, history: &[EpochRecord]) -> Result<()> {
        let mut s = String::from("epoch,train_loss,val_mae\n");
        for r in history {
            let val = r.val_mae.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, val));
        }
        self.write(Self::HISTORY, s.as_bytes())
    }

    /// `pairs.csv` and `metrics.json`.
    pub fn write_result(&self, result: &ExperimentResult) -> Result<()> {
        let mut buf = Vec::new();
        write_pairs_csv(&mut buf, &result.pairs)?;
        self.write(Self::PAIRS, &buf)?;
        self.write_json(Self::METRICS, result)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        self.write(name, text.as_bytes())
    }

    pub fn save_model(&self, model: &Model) -> Result<()> {
        save_checkpoint(&self.path(Self::CHECKPOINT), model)
    }

    pub fn load_model(&self) -> Result<Model> {
        load_checkpoint(&self.path(Self::CHECKPOINT))
    }
}
