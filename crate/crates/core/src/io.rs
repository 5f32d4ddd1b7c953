//! File formats: the binary tensor container, checkpoints, waveform text,
//! PGM/PPM frames, dataset directories and CSV reports.
//!
//! Tensor container layout (all integers little-endian):
//!
//! ```text
//! "SCPT" | version u16 | count u32 | per tensor:
//!   name_len u16 | name (UTF-8) | dtype u8 (1 = f32, 2 = f64) | ndim u8 | dims u32 × ndim | payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::encoders::FrameClip;
use crate::error::{Result, ScptError};
use crate::harness::Sample;
use crate::params::ParamStore;
use crate::signal_tfr::{TfrImage, Waveform};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SCPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dtype: DType, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(ScptError::shape(format!("`{name}`: dims {dims:?} vs {} values", data.len())));
        }
        Ok(NamedTensor { name, dtype, dims, data })
    }

    pub fn matrix(name: impl Into<String>, dtype: DType, m: &Matrix) -> Self {
        NamedTensor { name: name.into(), dtype, dims: vec![m.rows(), m.cols()], data: m.data().to_vec() }
    }

    pub fn vector(name: impl Into<String>, dtype: DType, v: &[f64]) -> Self {
        NamedTensor { name: name.into(), dtype, dims: vec![v.len()], data: v.to_vec() }
    }

    /// 2-D view; a 1-D tensor becomes a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [n] => Ok(Matrix::from_vec(1, n, self.data.clone())),
            [r, c] => Ok(Matrix::from_vec(r, c, self.data.clone())),
            _ => Err(ScptError::shape(format!("`{}` has {} dims, expected 1 or 2", self.name, self.dims.len()))),
        }
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| ScptError::InvalidArgument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(ScptError::InvalidArgument(format!("duplicate tensor name `{}`", t.name)));
        }
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(ScptError::shape(format!("`{}`: dims {:?} vs {} values", t.name, t.dims, t.data.len())));
        }
        let name_len = u16::try_from(t.name.len()).map_err(|_| ScptError::InvalidArgument(format!("name too long: {}", t.name)))?;
        let ndim = u8::try_from(t.dims.len()).map_err(|_| ScptError::InvalidArgument(format!("too many dims in `{}`", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype as u8);
        out.push(ndim);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| ScptError::InvalidArgument(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t.dtype {
            DType::F32 => t.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ScptError::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(ScptError::CorruptFile("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(ScptError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ScptError::CorruptFile("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ScptError::CorruptFile(format!("duplicate tensor name `{name}`")));
        }
        let dtype = match r.u8()? {
            1 => DType::F32,
            2 => DType::F64,
            other => return Err(ScptError::CorruptFile(format!("unknown dtype tag {other} in `{name}`"))),
        };
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(dtype.size()).is_some())
            .ok_or_else(|| ScptError::CorruptFile(format!("`{name}` is too large")))?;
        let payload = r.take(len * dtype.size())?;
        let data = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        };
        out.push(NamedTensor { name, dtype, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(ScptError::CorruptFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ScptError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| ScptError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ScptError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ScptError::io(path, e))
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_file(path, &encode_tensors(tensors)?)
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_tensors(&read_file(path)?)
}

/// Stores every tensor of `store` in f64, so reloading is bitwise exact.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: Vec<NamedTensor> = store.iter().map(|(_, e)| NamedTensor::matrix(e.name.clone(), DType::F64, &e.value)).collect();
    save_tensors(path, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for t in load_tensors(path)? {
        let m = t.to_matrix().map_err(|e| ScptError::CorruptFile(e.to_string()))?;
        store.insert(t.name, m).map_err(|e| ScptError::CorruptFile(e.to_string()))?;
    }
    Ok(store)
}

const RATE_KEY: &str = "sample_rate_hz";

/// Text waveform: a `sample_rate_hz=<float>` header, then one sample per line.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_waveform(text: &str) -> Result<Waveform> {
    let mut rate = None;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| ScptError::Config { line: i + 1, msg };
        if rate.is_none() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected `{RATE_KEY}=<float>` header")))?;
            if k.trim() != RATE_KEY {
                return Err(bad(format!("expected `{RATE_KEY}`, found `{}`", k.trim())));
            }
            rate = Some(v.trim().parse::<f64>().map_err(|e| bad(format!("sample rate: {e}")))?);
            continue;
        }
        samples.push(line.parse::<f64>().map_err(|e| bad(format!("sample `{line}`: {e}")))?);
    }
    let rate = rate.ok_or(ScptError::Config { line: 0, msg: format!("missing `{RATE_KEY}` header") })?;
    Waveform::new(samples, rate)
}

pub fn format_waveform(w: &Waveform) -> String {
    let mut s = format!("{RATE_KEY}={}\n", w.sample_rate_hz());
    for v in w.samples() {
        s.push_str(&format!("{v}\n"));
    }
    s
}

/// Reads a waveform from text, or from a tensor file holding `samples` and `sample_rate_hz`.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let bytes = read_file(path)?;
    if bytes.starts_with(MAGIC) {
        let tensors = decode_tensors(&bytes)?;
        let find = |n: &str| {
            tensors
                .iter()
                .find(|t| t.name == n)
                .ok_or_else(|| ScptError::CorruptFile(format!("{}: no `{n}` tensor", path.display())))
        };
        let rate = find(RATE_KEY)?.data.first().copied().ok_or_else(|| ScptError::CorruptFile("empty sample rate".into()))?;
        return Waveform::new(find("samples")?.data.clone(), rate);
    }
    let text = String::from_utf8(bytes).map_err(|_| ScptError::CorruptFile(format!("{} is not UTF-8 text", path.display())))?;
    parse_waveform(&text)
}

pub fn tfr_tensors(t: &TfrImage) -> Vec<NamedTensor> {
    vec![
        NamedTensor::matrix("tfr", DType::F32, &t.values),
        NamedTensor::vector("freq_axis_hz", DType::F64, &t.freq_axis_hz),
        NamedTensor::vector("time_axis_s", DType::F64, &t.time_axis_s),
    ]
}

/// Binary PGM (`P5`) or PPM (`P6`) with 8-bit samples, scaled to `[0, 1]`.
/// Returns a `channels × (h·w)` matrix.
pub fn decode_pnm(bytes: &[u8]) -> Result<(Matrix, usize, usize)> {
    let corrupt = |m: &str| ScptError::CorruptFile(format!("PNM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("header is not ASCII"))?.to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(corrupt(&format!("unsupported kind {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad number in header"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 || w == 0 || h == 0 {
        return Err(corrupt("only 8-bit, non-empty images are supported"));
    }
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(channels)).ok_or_else(|| corrupt("image too large"))?;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| corrupt("truncated pixels"))?;
    let mut m = Matrix::zeros(channels, w * h);
    for (i, &b) in payload.iter().enumerate() {
        m[(i % channels, i / channels)] = b as f64 / maxval as f64;
    }
    Ok((m, h, w))
}

pub fn encode_pnm(m: &Matrix, height: usize, width: usize) -> Result<Vec<u8>> {
    let kind = match m.rows() {
        1 => "P5",
        3 => "P6",
        c => return Err(ScptError::shape(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    if m.cols() != height * width {
        return Err(ScptError::shape(format!("{} pixels vs {height}x{width}", m.cols())));
    }
    let mut out = format!("{kind}\n{width} {height}\n255\n").into_bytes();
    for p in 0..m.cols() {
        for c in 0..m.rows() {
            out.push((m[(c, p)].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Grayscale dump of a matrix, min-max scaled, first row at the top.
pub fn matrix_to_pgm(m: &Matrix) -> Vec<u8> {
    let (lo, hi) = m.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let flat = Matrix::from_fn(1, m.len(), |_, i| (m.data()[i] - lo) / span);
    encode_pnm(&flat, m.rows(), m.cols()).expect("one channel")
}

/// Frames from a tensor file (`frames`, dims `[T, C, H, W]`).
pub fn load_frames_tensor(path: &Path) -> Result<FrameClip> {
    let tensors = load_tensors(path)?;
    let t = tensors
        .iter()
        .find(|t| t.name == "frames")
        .ok_or_else(|| ScptError::CorruptFile(format!("{}: no `frames` tensor", path.display())))?;
    let [n, c, h, w] = t.dims[..] else {
        return Err(ScptError::shape(format!("frames tensor has dims {:?}, expected [T, C, H, W]", t.dims)));
    };
    let per = c * h * w;
    let frames = (0..n).map(|i| Matrix::from_vec(c, h * w, t.data[i * per..(i + 1) * per].to_vec())).collect();
    FrameClip::new(frames, c, h, w)
}

pub fn frames_tensor(clip: &FrameClip) -> NamedTensor {
    let data = clip.frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    NamedTensor { name: "frames".into(), dtype: DType::F32, dims: vec![clip.frames.len(), clip.channels, clip.height, clip.width], data }
}

/// Frames from a directory of `.pgm`/`.ppm` files, in file-name order.
pub fn load_frames_dir(dir: &Path) -> Result<FrameClip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ScptError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ScptError::EmptyClip);
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut shape = None;
    for p in &paths {
        let (m, h, w) = decode_pnm(&read_file(p)?)?;
        if *shape.get_or_insert((m.rows(), h, w)) != (m.rows(), h, w) {
            return Err(ScptError::shape(format!("{} differs in size from the first frame", p.display())));
        }
        frames.push(m);
    }
    let (c, h, w) = shape.expect("at least one frame");
    FrameClip::new(frames, c, h, w)
}

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "trial,subject_id,trial_id,valence,arousal,fps";

/// Writes one sub-directory per trial (`wave.txt`, `frames.tensor`) and a manifest.
pub fn save_dataset(dir: &Path, trials: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ScptError::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in trials {
        let name = format!("s{:03}_t{:03}", s.subject_id, s.trial_id);
        let sub = dir.join(&name);
        write_file(&sub.join("wave.txt"), format_waveform(&s.waveform).as_bytes())?;
        save_tensors(&sub.join("frames.tensor"), &[frames_tensor(&s.frames)])?;
        manifest.push_str(&format!("{name},{},{},{},{},{}\n", s.subject_id, s.trial_id, s.valence_score, s.arousal_score, s.fps));
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Reads a dataset directory. Each trial directory holds `wave.txt` (or
/// `wave.tensor`) and either `frames.tensor` or a `frames/` image directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST);
    let text = read_text(&path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(ScptError::Config { line: 1, msg: format!("manifest header must be `{MANIFEST_HEADER}`") }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |msg: String| ScptError::Config { line: i + 1, msg };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let sub = dir.join(cols[0]);
        let wave = if sub.join("wave.txt").exists() { sub.join("wave.txt") } else { sub.join("wave.tensor") };
        let frames = if sub.join("frames.tensor").exists() {
            load_frames_tensor(&sub.join("frames.tensor"))?
        } else {
            load_frames_dir(&sub.join("frames"))?
        };
        out.push(Sample {
            frames,
            fps: real(cols[5])?,
            waveform: load_waveform(&wave)?,
            valence_score: real(cols[3])?,
            arousal_score: real(cols[4])?,
            subject_id: int(cols[1])?,
            trial_id: int(cols[2])?,
        });
    }
    if out.is_empty() {
        return Err(ScptError::EmptyEvalSet);
    }
    Ok(out)
}

/// Minimal CSV writer: a header and rows of already formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], footer: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    let mut put = |line: String| writeln!(buf, "{line}").expect("write to Vec");
    put(header.join(","));
    for r in rows {
        put(r.join(","));
    }
    for f in footer {
        put(f.clone());
    }
    write_file(path, &buf)
}
