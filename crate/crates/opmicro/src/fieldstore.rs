//! Field and stack containers with deterministic NPY + sidecar + CSV I/O.
//!
//! All arrays persist as NPY v1.0 with a JSON sidecar (`<name>.meta.json`)
//! carrying pixel size, timestamps, units, and dtype. Stacks canonicalize to
//! T,H,W,C order on load regardless of the file's declared layout.

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// One 2-D image: the unit of all image math in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    data: Array2<f64>,
    pub pixel_size: Option<f64>,
    pub value_range: Option<(f64, f64)>,
}

impl ScalarField {
    /// Validates shape and finiteness; metadata starts empty.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("ScalarField must be at least 1x1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ScalarField contains non-finite values"));
        }
        Ok(ScalarField {
            data,
            pixel_size: None,
            value_range: None,
        })
    }

    pub fn from_vec(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((h, w), values)
            .map_err(|e| Error::invalid(format!("bad field shape: {e}")))?;
        ScalarField::new(data)
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        ScalarField::new(Array2::from_elem((h, w), value))
    }

    pub fn with_value_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::invalid("value_range min must be below max"));
        }
        self.value_range = Some((lo, hi));
        Ok(self)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("row-major field")
    }

    /// Consumes the field, returning the raw array.
    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Builds a new field with the same metadata but different data.
    pub fn like(&self, data: Array2<f64>) -> Result<Self> {
        let mut f = ScalarField::new(data)?;
        f.pixel_size = self.pixel_size;
        f.value_range = self.value_range;
        Ok(f)
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Population standard deviation (ddof = 0).
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }
}

/// Sidecar metadata persisted next to every NPY artifact.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct StackMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energies_ev: Option<Vec<f64>>,
}

/// Ordered frame sequence in canonical T,H,W,C layout.
///
/// Frames are stored flattened, frame-major with channels adjacent:
/// index `t * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    frames: Vec<ScalarField>,
    channels: usize,
    times: Vec<f64>,
    pub meta: StackMeta,
}

impl FrameStack {
    /// `frames.len()` must be a multiple of `channels`; all frames share a
    /// shape; `times` (when given) must be strictly increasing with one entry
    /// per time point.
    pub fn new(frames: Vec<ScalarField>, channels: usize, times: Option<Vec<f64>>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if frames.is_empty() {
            return Err(Error::invalid("FrameStack must contain at least one frame"));
        }
        if frames.len() % channels != 0 {
            return Err(Error::invalid(format!(
                "{} frames do not divide into {} channels",
                frames.len(),
                channels
            )));
        }
        let shape = frames[0].shape();
        if frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::invalid("all frames in a stack must share a shape"));
        }
        let n_t = frames.len() / channels;
        let times = match times {
            Some(ts) => {
                if ts.len() != n_t {
                    return Err(Error::invalid(format!(
                        "{} timestamps for {} time points",
                        ts.len(),
                        n_t
                    )));
                }
                if ts.windows(2).any(|w| !(w[0] < w[1])) || ts.iter().any(|t| !t.is_finite()) {
                    return Err(Error::invalid("timestamps must be finite and strictly increasing"));
                }
                ts
            }
            None => (0..n_t).map(|i| i as f64).collect(),
        };
        Ok(FrameStack {
            frames,
            channels,
            times,
            meta: StackMeta::default(),
        })
    }

    pub fn single_channel(frames: Vec<ScalarField>, times: Option<Vec<f64>>) -> Result<Self> {
        FrameStack::new(frames, 1, times)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Channel 0 of time point `t`.
    pub fn frame(&self, t: usize) -> &ScalarField {
        &self.frames[t * self.channels]
    }

    pub fn frame_channel(&self, t: usize, c: usize) -> &ScalarField {
        assert!(c < self.channels, "channel index out of range");
        &self.frames[t * self.channels + c]
    }

    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    /// Applies `f` to every frame, keeping layout and metadata.
    pub fn map_frames(&self, mut f: impl FnMut(&ScalarField) -> Result<ScalarField>) -> Result<Self> {
        let mapped: Result<Vec<ScalarField>> = self.frames.iter().map(|fr| f(fr)).collect();
        let mut out = FrameStack::new(mapped?, self.channels, Some(self.times.clone()))?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Returns the stack restricted to the given time indices (in order).
    pub fn select_times(&self, indices: &[usize]) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len() * self.channels);
        let mut times = Vec::with_capacity(indices.len());
        for &t in indices {
            if t >= self.n_frames() {
                return Err(Error::invalid(format!("time index {t} out of range")));
            }
            for c in 0..self.channels {
                frames.push(self.frame_channel(t, c).clone());
            }
            times.push(self.times[t]);
        }
        let mut out = FrameStack::new(frames, self.channels, Some(times))?;
        out.meta = self.meta.clone();
        Ok(out)
    }
}

/// Element type for persisted arrays. In-memory data is always f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Declared axis order of an on-disk array, e.g. "THW" or "HWC".
///
/// Must contain H and W exactly once; T and C are optional and default to
/// size-1 axes on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisLayout {
    axes: [Option<u8>; 4],
    ndim: usize,
}

impl AxisLayout {
    pub fn parse(s: &str) -> Result<Self> {
        let mut axes = [None; 4];
        let chars: Vec<char> = s.chars().collect();
        if chars.len() > 4 {
            return Err(Error::invalid(format!("layout '{s}' has too many axes")));
        }
        for (pos, ch) in chars.iter().enumerate() {
            let slot = match ch.to_ascii_uppercase() {
                'T' => 0,
                'H' => 1,
                'W' => 2,
                'C' => 3,
                other => return Err(Error::invalid(format!("unknown axis '{other}' in layout"))),
            };
            if axes[slot].is_some() {
                return Err(Error::invalid(format!("duplicate axis '{ch}' in layout")));
            }
            axes[slot] = Some(pos as u8);
        }
        if axes[1].is_none() || axes[2].is_none() {
            return Err(Error::invalid("layout must include H and W"));
        }
        Ok(AxisLayout {
            axes,
            ndim: chars.len(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    fn axis_pos(&self, slot: usize) -> Option<usize> {
        self.axes[slot].map(|p| p as usize)
    }
}

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

fn npy_header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let mut dims = shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if shape.len() == 1 {
        dims.push(',');
    }
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}), }}",
        dtype.descr(),
        dims
    );
    // Total header (magic + version + length + dict + padding + '\n') pads to 64 bytes.
    let prefix = NPY_MAGIC.len() + 2 + 2;
    let unpadded = prefix + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let dict_len = dict.len() + padding + 1;
    let mut out = Vec::with_capacity(prefix + dict_len);
    out.extend_from_slice(NPY_MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(dict_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padding));
    out.push(b'\n');
    out
}

/// Writes a row-major array as NPY v1.0.
pub fn write_npy(path: &Path, data: &[f64], shape: &[usize], dtype: Dtype) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::invalid(format!(
            "shape {shape:?} does not match {} elements",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("refusing to persist non-finite values"));
    }
    let mut bytes = npy_header(dtype, shape);
    match dtype {
        Dtype::F32 => {
            bytes.reserve(n * 4);
            for v in data {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            bytes.reserve(n * 8);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_npy_dict(header: &str) -> Result<(Dtype, bool, Vec<usize>)> {
    let grab = |key: &str| -> Result<&str> {
        let pat = format!("'{key}':");
        let start = header
            .find(&pat)
            .ok_or_else(|| Error::invalid(format!("NPY header missing '{key}'")))?
            + pat.len();
        Ok(header[start..].trim_start())
    };

    let descr_rest = grab("descr")?;
    let quote = descr_rest
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::invalid("NPY descr is not quoted"))?;
    let descr_body: String = descr_rest[1..]
        .chars()
        .take_while(|c| *c != quote)
        .collect();
    let dtype = match descr_body.as_str() {
        "<f4" | "=f4" | "|f4" => Dtype::F32,
        "<f8" | "=f8" | "|f8" => Dtype::F64,
        other => {
            return Err(Error::invalid(format!(
                "unsupported NPY dtype '{other}' (need little-endian f4/f8)"
            )))
        }
    };

    let fortran_rest = grab("fortran_order")?;
    let fortran = if fortran_rest.starts_with("False") {
        false
    } else if fortran_rest.starts_with("True") {
        true
    } else {
        return Err(Error::invalid("NPY fortran_order is not a boolean"));
    };

    let shape_rest = grab("shape")?;
    if !shape_rest.starts_with('(') {
        return Err(Error::invalid("NPY shape is not a tuple"));
    }
    let close = shape_rest
        .find(')')
        .ok_or_else(|| Error::invalid("NPY shape tuple not closed"))?;
    let mut shape = Vec::new();
    for tok in shape_rest[1..close].split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        shape.push(
            tok.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad NPY shape entry '{tok}'")))?,
        );
    }
    Ok((dtype, fortran, shape))
}

/// Reads an NPY v1.0 array of little-endian f4/f8, returning f64 data.
pub fn read_npy(path: &Path) -> Result<(Vec<f64>, Vec<usize>, Dtype)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::invalid(format!(
            "{}: not an NPY file (bad magic)",
            path.display()
        )));
    }
    if bytes[6] != 1 {
        return Err(Error::invalid(format!(
            "{}: unsupported NPY version {}.{}",
            path.display(),
            bytes[6],
            bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(Error::invalid(format!(
            "{}: truncated NPY header",
            path.display()
        )));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| Error::invalid("NPY header is not UTF-8"))?;
    let (dtype, fortran, shape) = parse_npy_dict(header)?;
    if fortran {
        return Err(Error::invalid("fortran-order NPY files are not supported"));
    }
    let n: usize = shape.iter().product();
    let elem = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let payload = &bytes[data_start..];
    if payload.len() != n * elem {
        return Err(Error::invalid(format!(
            "{}: payload has {} bytes, shape {:?} needs {}",
            path.display(),
            payload.len(),
            shape,
            n * elem
        )));
    }
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{}: array contains non-finite values",
            path.display()
        )));
    }
    Ok((data, shape, dtype))
}

/// Sidecar path for an artifact: same basename with extension `.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Loads a stack from NPY (+ optional sidecar) or from a single-frame CSV.
///
/// The layout descriptor declares the file's axis order among T,H,W,C; the
/// returned stack is always canonical T,H,W,C.
pub fn load_stack(path: &Path, layout: AxisLayout) -> Result<FrameStack> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        if layout.ndim() != 2 {
            return Err(Error::invalid("CSV import supports single HW frames only"));
        }
        let frame = import_frame_csv(path)?;
        return FrameStack::single_channel(vec![frame], None);
    }

    let (data, shape, dtype) = read_npy(path)?;
    if shape.len() != layout.ndim() {
        return Err(Error::invalid(format!(
            "layout declares {} axes but file has {} ({:?})",
            layout.ndim(),
            shape.len(),
            shape
        )));
    }

    let dim = |slot: usize| layout.axis_pos(slot).map(|p| shape[p]).unwrap_or(1);
    let (n_t, h, w, n_c) = (dim(0), dim(1), dim(2), dim(3));
    if n_c != 1 && n_c != 3 {
        return Err(Error::invalid(format!("channel axis must be 1 or 3, got {n_c}")));
    }
    if n_t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("empty axis in stack file"));
    }

    // Row-major strides of the source file, mapped onto canonical axes.
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    let stride = |slot: usize| layout.axis_pos(slot).map(|p| strides[p]).unwrap_or(0);
    let (st, sh, sw, sc) = (stride(0), stride(1), stride(2), stride(3));

    let meta = read_sidecar(path)?;
    let mut frames = Vec::with_capacity(n_t * n_c);
    for t in 0..n_t {
        for c in 0..n_c {
            let mut values = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    values.push(data[t * st + y * sh + x * sw + c * sc]);
                }
            }
            let mut field = ScalarField::from_vec(h, w, values)?;
            if let Some(m) = &meta {
                field.pixel_size = m.pixel_size;
                field.value_range = m.value_range;
            }
            frames.push(field);
        }
    }

    let times = meta.as_ref().and_then(|m| m.times.clone());
    let mut stack = FrameStack::new(frames, n_c, times)?;
    if let Some(mut m) = meta {
        m.dtype.get_or_insert_with(|| dtype.name().to_string());
        stack.meta = m;
    } else {
        stack.meta.dtype = Some(dtype.name().to_string());
    }
    Ok(stack)
}

fn read_sidecar(path: &Path) -> Result<Option<StackMeta>> {
    let sc = sidecar_path(path);
    if !sc.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    let meta: StackMeta = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: bad sidecar: {e}", sc.display())))?;
    Ok(Some(meta))
}

/// Persists a stack as canonical T,H,W,C NPY plus sidecar (f64 by default).
pub fn save_stack(stack: &FrameStack, path: &Path) -> Result<()> {
    save_stack_dtype(stack, path, Dtype::F64)
}

pub fn save_stack_dtype(stack: &FrameStack, path: &Path, dtype: Dtype) -> Result<()> {
    let n_t = stack.n_frames();
    let n_c = stack.channels();
    let (h, w) = stack.frame_shape();
    let mut data = Vec::with_capacity(n_t * h * w * n_c);
    for t in 0..n_t {
        for y in 0..h {
            for x in 0..w {
                for c in 0..n_c {
                    data.push(stack.frame_channel(t, c).data()[(y, x)]);
                }
            }
        }
    }
    let shape = [n_t, h, w, n_c];
    write_npy(path, &data, &shape, dtype)?;

    let mut meta = stack.meta.clone();
    meta.dtype = Some(dtype.name().to_string());
    meta.shape = Some(shape.to_vec());
    meta.times = Some(stack.times().to_vec());
    if meta.pixel_size.is_none() {
        meta.pixel_size = stack.frame(0).pixel_size;
    }
    if meta.value_range.is_none() {
        meta.value_range = stack.frame(0).value_range;
    }
    let sc = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::invalid(format!("sidecar serialization: {e}")))?;
    std::fs::write(&sc, text).map_err(|e| Error::io(&sc, e))?;
    Ok(())
}

/// Reads one frame from RFC-4180 CSV (no header row).
pub fn import_frame_csv(path: &Path) -> Result<ScalarField> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let row: Vec<f64> = record
            .iter()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: bad number '{tok}'", path.display())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::invalid(format!(
                    "{}: ragged CSV rows ({} vs {})",
                    path.display(),
                    w,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::invalid(format!("{}: empty CSV", path.display())))?;
    ScalarField::from_vec(height, width, values)
}

/// Writes one frame as CSV, row per line, full f64 round-trip precision.
pub fn export_frame_csv(field: &ScalarField, path: &Path) -> Result<()> {
    let mut out = String::new();
    let (h, w) = field.shape();
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                out.push(',');
            }
            // RFC-4180 values; ryu-style shortest representation via Display.
            out.push_str(&format!("{:?}", field.data()[(y, x)]));
        }
        out.push_str("\r\n");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// SHA-256 of a byte slice, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// What an analysis artifact describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Simulate,
    Corrupt,
    Denoise,
    Metrics,
    Recovery,
    Stxm,
    Neutron,
    Optical,
}

/// Run provenance: enough to reproduce or audit any artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    /// Input path (as given) -> SHA-256 of file contents.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_digest: String, seed: u64) -> Self {
        Provenance {
            config_digest,
            inputs: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs
            .insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }
}

/// Top-level JSON artifact written by every pipeline run.
///
/// Serialization uses sorted keys (`serde_json` map ordering), so equal
/// reports produce byte-identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kind: ReportKind,
    pub provenance: Provenance,
    pub payload: serde_json::Value,
}

impl AnalysisReport {
    pub fn new(kind: ReportKind, provenance: Provenance, payload: serde_json::Value) -> Self {
        AnalysisReport {
            kind,
            provenance,
            payload,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: bad report: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ScalarField::from_vec(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn field_rejects_non_finite_and_empty() {
        assert!(ScalarField::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(ScalarField::from_vec(0, 0, vec![]).is_err());
        assert!(ScalarField::constant(2, 2, 0.5).unwrap().with_value_range(1.0, 1.0).is_err());
    }

    #[test]
    fn stack_invariants() {
        let f = ScalarField::constant(4, 4, 0.5).unwrap();
        assert!(FrameStack::new(vec![], 1, None).is_err());
        assert!(FrameStack::new(vec![f.clone(), f.clone()], 2, None).is_err());
        assert!(FrameStack::new(vec![f.clone(), f.clone()], 1, Some(vec![0.0, 0.0])).is_err());
        let bad_shape = ScalarField::constant(3, 4, 0.5).unwrap();
        assert!(FrameStack::new(vec![f.clone(), bad_shape], 1, None).is_err());
        let ok = FrameStack::new(vec![f.clone(), f], 1, Some(vec![0.0, 2.5])).unwrap();
        assert_eq!(ok.n_frames(), 2);
        assert_eq!(ok.times(), &[0.0, 2.5]);
    }

    #[test]
    fn npy_round_trip_f64_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.npy");
        let frames: Vec<ScalarField> = (0..3).map(|i| random_field(7, 5, 100 + i)).collect();
        let stack = FrameStack::single_channel(frames, None).unwrap();
        save_stack(&stack, &path).unwrap();
        let loaded = load_stack(&path, AxisLayout::parse("THWC").unwrap()).unwrap();
        assert_eq!(loaded.n_frames(), 3);
        for t in 0..3 {
            assert_eq!(loaded.frame(t).data(), stack.frame(t).data());
        }
        // Identical bytes after a second save round trip.
        let path2 = dir.path().join("stack2.npy");
        save_stack(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn npy_f32_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack32.npy");
        // Values generated at f32 precision, so the downcast is lossless.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..64).map(|_| rng.random::<f32>() as f64).collect();
        let stack = FrameStack::single_channel(
            vec![ScalarField::from_vec(8, 8, values).unwrap()],
            None,
        )
        .unwrap();
        save_stack_dtype(&stack, &path, Dtype::F32).unwrap();
        let loaded = load_stack(&path, AxisLayout::parse("THWC").unwrap()).unwrap();
        assert_eq!(loaded.frame(0).data(), stack.frame(0).data());
        assert_eq!(loaded.meta.dtype.as_deref(), Some("f32"));
    }

    #[test]
    fn layout_permutations_canonicalize() {
        let dir = tempfile::tempdir().unwrap();
        // Write a (H=2, W=3, T=4) array by hand in HWT order.
        let (h, w, t) = (2usize, 3usize, 4usize);
        let mut data = vec![0.0f64; h * w * t];
        for (i, v) in data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let path = dir.path().join("hwt.npy");
        write_npy(&path, &data, &[h, w, t], Dtype::F64).unwrap();
        let stack = load_stack(&path, AxisLayout::parse("HWT").unwrap()).unwrap();
        assert_eq!(stack.n_frames(), t);
        assert_eq!(stack.frame_shape(), (h, w));
        // Element (t=1, y=0, x=2) in HWT order sits at index y*(w*t) + x*t + t_idx.
        assert_eq!(stack.frame(1).data()[(0, 2)], (2 * t + 1) as f64);

        // Canonicalization is idempotent: re-saving the canonical stack and
        // re-loading changes nothing.
        let canon = dir.path().join("canon.npy");
        save_stack(&stack, &canon).unwrap();
        let again = load_stack(&canon, AxisLayout::parse("THWC").unwrap()).unwrap();
        for i in 0..t {
            assert_eq!(again.frame(i).data(), stack.frame(i).data());
        }
    }

    #[test]
    fn thw_file_loads_as_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let (t, h, w) = (5usize, 4usize, 4usize);
        let data: Vec<f64> = (0..t * h * w).map(|i| i as f64).collect();
        let path = dir.path().join("thw.npy");
        write_npy(&path, &data, &[t, h, w], Dtype::F64).unwrap();
        let stack = load_stack(&path, AxisLayout::parse("THW").unwrap()).unwrap();
        assert_eq!(stack.n_frames(), t);
        assert_eq!(stack.channels(), 1);
        assert_eq!(stack.frame(2).data()[(1, 3)], (2 * 16 + 7) as f64);
    }

    #[test]
    fn rejects_malformed_and_non_finite_npy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        std::fs::write(&path, b"not numpy at all").unwrap();
        assert!(read_npy(&path).is_err());

        // Hand-craft a valid header with a NaN payload.
        let nan_path = dir.path().join("nan.npy");
        let mut bytes = npy_header(Dtype::F64, &[1, 1, 1, 1]);
        bytes.extend_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&nan_path, bytes).unwrap();
        let err = read_npy(&nan_path).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn csv_round_trip_values_1_to_9() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.csv");
        std::fs::write(&path, "1,2,3\r\n4,5,6\r\n7,8,9\r\n").unwrap();
        let frame = import_frame_csv(&path).unwrap();
        let flat: Vec<f64> = frame.as_slice().to_vec();
        assert_eq!(flat, (1..=9).map(|v| v as f64).collect::<Vec<_>>());

        let out = dir.path().join("out.csv");
        export_frame_csv(&frame, &out).unwrap();
        let back = import_frame_csv(&out).unwrap();
        assert_eq!(back.data(), frame.data());
    }

    #[test]
    fn csv_via_load_stack() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.csv");
        std::fs::write(&path, "0.5,0.25\r\n0.125,1.0\r\n").unwrap();
        let stack = load_stack(&path, AxisLayout::parse("HW").unwrap()).unwrap();
        assert_eq!(stack.n_frames(), 1);
        assert_eq!(stack.frame(0).data()[(1, 1)], 1.0);
    }

    #[test]
    fn sidecar_carries_times_and_pixel_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.npy");
        let frames: Vec<ScalarField> = (0..2).map(|i| random_field(3, 3, i)).collect();
        let mut stack = FrameStack::single_channel(frames, Some(vec![0.0, 0.125])).unwrap();
        stack.meta.pixel_size = Some(7.8125e-3);
        stack.meta.kind = Some("concentration".into());
        save_stack(&stack, &path).unwrap();
        let loaded = load_stack(&path, AxisLayout::parse("THWC").unwrap()).unwrap();
        assert_eq!(loaded.times(), &[0.0, 0.125]);
        assert_eq!(loaded.meta.pixel_size, Some(7.8125e-3));
        assert_eq!(loaded.meta.kind.as_deref(), Some("concentration"));
        assert_eq!(loaded.frame(0).pixel_size, Some(7.8125e-3));
    }

    #[test]
    fn report_json_is_deterministic() {
        let mut prov = Provenance::new(sha256_hex(b"config"), 42);
        prov.inputs.insert("input".into(), sha256_hex(b"data"));
        let payload = serde_json::json!({"psnr": 31.5, "mse": 0.0007});
        let report = AnalysisReport::new(ReportKind::Metrics, prov, payload);
        let a = report.to_json().unwrap();
        let b = report.to_json().unwrap();
        assert_eq!(a, b);
        let parsed: AnalysisReport = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed.kind, ReportKind::Metrics);
        assert_eq!(parsed.provenance.seed, 42);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
