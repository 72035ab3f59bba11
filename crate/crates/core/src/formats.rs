//! On-disk formats: XDV1 volumes, XDT1 tensors, XDC1 checkpoints, 16-bit
//! PGM previews with a JSON sidecar, and dataset directories.
//!
//! Decoders never trust declared sizes: every length is checked against the
//! bytes actually present before anything is allocated.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DecompositionSample;
use crate::error::{Error, Result};
use crate::model::{Model, NetworkConfig, NetworkParams};
use crate::ndtensor::Tensor;
use crate::projection::{CameraPose, Label, ProjectionImage};
use crate::volume::Volume;

pub const XDV1_MAGIC: &[u8; 5] = b"XDV1\n";
pub const XDT1_MAGIC: &[u8; 4] = b"XDT1";
pub const XDC1_MAGIC: &[u8; 4] = b"XDC1";
pub const XDC1_VERSION: u32 = 1;
/// Upper bound on the JSON header of a checkpoint.
const MAX_HEADER: usize = 1 << 20;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Reader { buf, pos: 0, format }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.format, reason)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated at byte {}: need {n} more bytes, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len()).ok() != Some(magic) {
            return Err(self.err("bad magic"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| self.err(format!("declares {n} values but only {} bytes remain", self.remaining())))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(4 * vs.len());
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::param(format!("{what} {n} does not fit in 32 bits")))
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(41 + 4 * v.len());
    out.extend_from_slice(XDV1_MAGIC);
    for d in v.dims() {
        put_u32(&mut out, to_u32(d, "volume dimension")?);
    }
    put_f32s(&mut out, &v.spacing());
    put_f32s(&mut out, &v.origin());
    put_f32s(&mut out, v.data());
    Ok(out)
}

pub fn decode_volume(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(buf, "XDV1");
    r.magic(XDV1_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let origin = [r.f32()?, r.f32()?, r.f32()?];
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.err(format!("dims {dims:?} overflow")))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Volume::new(dims, spacing, origin, data).map_err(|e| Error::format("XDV1", e.to_string()))
}

pub fn encode_tensor(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    write_tensor_into(&mut out, t)?;
    Ok(out)
}

fn write_tensor_into(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    out.extend_from_slice(XDT1_MAGIC);
    put_u32(out, to_u32(t.shape().len(), "rank")?);
    for &d in t.shape() {
        put_u32(out, to_u32(d, "tensor dimension")?);
    }
    put_f32s(out, t.data());
    Ok(())
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    r.magic(XDT1_MAGIC)?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 4 {
        return Err(r.err(format!("rank must lie in 1..=4, got {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.err(format!("shape {shape:?} overflows")))?;
    let data = r.f32s(n)?;
    Tensor::new(&shape, data).map_err(|e| r.err(e.to_string()))
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(buf, "XDT1");
    let t = read_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    names: Vec<String>,
}

/// XDC1: magic, u32 version, u32 header length, JSON header holding the
/// network config and parameter names, then one XDT1 block per parameter.
pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    model.params.validate(&model.config)?;
    let header = serde_json::to_vec(&CheckpointHeader {
        network: model.config.clone(),
        names: model.params.names.clone(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * model.params.count() + 24 * model.params.tensors.len());
    out.extend_from_slice(XDC1_MAGIC);
    put_u32(&mut out, XDC1_VERSION);
    put_u32(&mut out, to_u32(header.len(), "header length")?);
    out.extend_from_slice(&header);
    for t in &model.params.tensors {
        write_tensor_into(&mut out, t)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Model> {
    let mut r = Reader::new(buf, "XDC1");
    r.magic(XDC1_MAGIC)?;
    let version = r.u32()?;
    if version != XDC1_VERSION {
        return Err(Error::Version {
            expected: format!("XDC1 v{XDC1_VERSION}"),
            found: format!("XDC1 v{version}"),
        });
    }
    let len = r.u32()? as usize;
    if len > MAX_HEADER {
        return Err(r.err(format!("header of {len} bytes exceeds {MAX_HEADER}")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| r.err(format!("header: {e}")))?;
    header.network.validate().map_err(|e| r.err(e.to_string()))?;
    let expected = header.network.param_shapes();
    if header.names.len() != expected.len() {
        return Err(r.err(format!("{} names for {} parameters", header.names.len(), expected.len())));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let t = read_tensor(&mut r)?;
        if t.shape() != shape.as_slice() {
            return Err(r.err(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(r.err(format!("{name} holds non-finite values")));
        }
        tensors.push(t);
    }
    r.finish()?;
    let params = NetworkParams {
        names: header.names,
        tensors,
    };
    Model::new(header.network, params).map_err(|e| r.err(e.to_string()))
}

/// Linear intensity mapping of a PGM preview back to absorbance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub pose: Option<CameraPose>,
}

/// 16-bit binary PGM of `img`, linearly mapped from `[min, max]` to
/// `[0, 65535]`, with the sidecar that inverts the mapping.
pub fn encode_pgm(img: &ProjectionImage) -> (Vec<u8>, PgmSidecar) {
    let (min, max) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let range = max - min;
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(2 * img.data.len());
    for &v in &img.data {
        let q = if range > 0.0 {
            ((v as f64 - min) / range * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    let sidecar = PgmSidecar {
        min,
        max,
        pose: img.pose.clone(),
    };
    (out, sidecar)
}

/// Raw PGM raster: width, height, maxval, samples in row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn header_token(buf: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while buf.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("PGM", "header ends early")),
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
        if *pos - start > 9 {
            return Err(Error::format("PGM", "header number too long"));
        }
    }
    if start == *pos {
        return Err(Error::format("PGM", format!("expected a number at byte {start}")));
    }
    std::str::from_utf8(&buf[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| Error::format("PGM", "bad header number"))
}

pub fn decode_pgm(buf: &[u8]) -> Result<Pgm> {
    if !buf.starts_with(b"P5") {
        return Err(Error::format("PGM", "not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let width = header_token(buf, &mut pos)?;
    let height = header_token(buf, &mut pos)?;
    let maxval = header_token(buf, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::format("PGM", "zero image size"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM", format!("maxval {maxval} outside 1..=65535")));
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("PGM", "missing whitespace after maxval"));
    }
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let body = &buf[pos..];
    let n = width
        .checked_mul(height)
        .filter(|n| n.checked_mul(bytes_per) == Some(body.len()))
        .ok_or_else(|| Error::format("PGM", format!("{width}x{height} raster does not match {} data bytes", body.len())))?;
    let samples: Vec<u16> = if bytes_per == 1 {
        body.iter().map(|&b| b as u16).collect()
    } else {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(Error::format("PGM", "sample exceeds maxval"));
    }
    debug_assert_eq!(samples.len(), n);
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

/// Reverses [`encode_pgm`] up to quantization.
pub fn image_from_pgm(pgm: &Pgm, sidecar: &PgmSidecar, label: Label) -> Result<ProjectionImage> {
    if !(sidecar.min.is_finite() && sidecar.max.is_finite()) || sidecar.max < sidecar.min {
        return Err(Error::format("PGM", "sidecar range is invalid"));
    }
    let scale = (sidecar.max - sidecar.min) / pgm.maxval as f64;
    let data = pgm
        .samples
        .iter()
        .map(|&s| (sidecar.min + s as f64 * scale) as f32)
        .collect();
    let img = ProjectionImage::new(pgm.width, pgm.height, data, label)?;
    Ok(match &sidecar.pose {
        Some(p) => img.with_pose(p.clone()),
        None => img,
    })
}

pub fn image_to_tensor(img: &ProjectionImage) -> Result<Tensor<f32>> {
    Tensor::new(&[img.height, img.width], img.data.clone())
}

pub fn image_from_tensor(t: &Tensor<f32>, label: Label) -> Result<ProjectionImage> {
    match *t.shape() {
        [h, w] => ProjectionImage::new(w, h, t.data().to_vec(), label),
        _ => Err(Error::shape(format!("an image tensor has 2 dims, got {:?}", t.shape()))),
    }
}

/// Per-sample metadata stored next to the tensors of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub phantom: String,
    pub view: usize,
    pub components: usize,
    pub cranial_deg: Option<f64>,
    pub lao_rao_deg: Option<f64>,
    pub pose: Option<CameraPose>,
}

/// Directory name of the sample of `phantom` at `view`.
pub fn sample_dir_name(phantom: &str, view: usize) -> String {
    format!("{phantom}_view{view:04}")
}

/// Writes `<stem>.xdt`, `<stem>.pgm` and the `<stem>.json` sidecar.
pub fn write_image(dir: &Path, stem: &str, img: &ProjectionImage) -> Result<()> {
    fs::write(dir.join(format!("{stem}.xdt")), encode_tensor(&image_to_tensor(img)?)?)?;
    let (pgm, sidecar) = encode_pgm(img);
    fs::write(dir.join(format!("{stem}.pgm")), pgm)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Writes one directory per sample: `input` and `target_<i>` as XDT1
/// tensors with PGM previews, plus `sample.json`. Returns the directory names.
pub fn save_samples(root: &Path, samples: &[DecompositionSample]) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(samples.len());
    for s in samples {
        let name = sample_dir_name(&s.phantom, s.view);
        let dir = root.join(&name);
        fs::create_dir_all(&dir)?;
        write_image(&dir, "input", &s.input)?;
        for (i, t) in s.targets.iter().enumerate() {
            write_image(&dir, &format!("target_{i}"), t)?;
        }
        let pose = s.input.pose.clone();
        let meta = SampleMeta {
            phantom: s.phantom.clone(),
            view: s.view,
            components: s.components(),
            cranial_deg: pose.as_ref().map(|p| p.cranial_deg),
            lao_rao_deg: pose.as_ref().map(|p| p.lao_rao_deg),
            pose,
        };
        fs::write(dir.join("sample.json"), serde_json::to_vec_pretty(&meta)?)?;
        names.push(name);
    }
    Ok(names)
}

/// Reads a sample directory written by [`save_samples`].
pub fn load_sample(dir: &Path) -> Result<DecompositionSample> {
    let meta: SampleMeta = serde_json::from_slice(&fs::read(dir.join("sample.json"))?)?;
    if meta.components > 64 {
        return Err(Error::format("sample.json", format!("{} components", meta.components)));
    }
    let read = |stem: &str, label| -> Result<ProjectionImage> {
        let t = decode_tensor(&fs::read(dir.join(format!("{stem}.xdt")))?)?;
        let img = image_from_tensor(&t, label)?;
        Ok(match &meta.pose {
            Some(p) => img.with_pose(p.clone()),
            None => img,
        })
    };
    let input = read("input", Label::Total)?;
    let targets = (0..meta.components)
        .map(|i| read(&format!("target_{i}"), Label::Component(i)))
        .collect::<Result<Vec<_>>>()?;
    let s = DecompositionSample {
        phantom: meta.phantom,
        view: meta.view,
        input,
        targets,
    };
    s.validate()?;
    Ok(s)
}

/// Contents of `dataset.json` at the root of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub components: usize,
    pub width: usize,
    pub height: usize,
    pub phantoms: Vec<String>,
    pub samples: Vec<String>,
}

impl DatasetIndex {
    pub fn describe(samples: &[DecompositionSample]) -> Result<DatasetIndex> {
        let first = samples.first().ok_or_else(|| Error::param("dataset has no samples"))?;
        let mut phantoms: Vec<String> = Vec::new();
        for s in samples {
            if !phantoms.contains(&s.phantom) {
                phantoms.push(s.phantom.clone());
            }
        }
        Ok(DatasetIndex {
            components: first.components(),
            width: first.input.width,
            height: first.input.height,
            phantoms,
            samples: samples.iter().map(|s| sample_dir_name(&s.phantom, s.view)).collect(),
        })
    }
}

fn plain_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\'])
}

pub fn write_dataset_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    Ok(fs::write(root.join("dataset.json"), serde_json::to_vec_pretty(index)?)?)
}

/// Loads every sample listed in `<root>/dataset.json`.
pub fn load_dataset(root: &Path) -> Result<Vec<DecompositionSample>> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(root.join("dataset.json"))?)?;
    if let Some(bad) = index.samples.iter().find(|n| !plain_name(n)) {
        return Err(Error::format("dataset.json", format!("sample name {bad:?} is not a plain directory name")));
    }
    let samples = index
        .samples
        .iter()
        .map(|n| load_sample(&root.join(n)))
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        if s.components() != index.components || s.input.width != index.width || s.input.height != index.height {
            return Err(Error::format("dataset.json", format!("sample {:?} disagrees with the index", s.id())));
        }
    }
    Ok(samples)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    Ok(fs::write(path, encode_volume(v)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_network;
    use crate::projection::{pose_from_angles, CameraIntrinsics};
    use proptest::prelude::*;

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            input_size: [8, 8],
            levels: 1,
            base_channels: 2,
            components: 2,
            dropout_p: 0.1,
            fusion: crate::model::FusionMode::Learnable,
        }
    }

    #[test]
    fn volume_layout_is_fixed() {
        let v = Volume::new([2, 2, 2], [1.0, 2.0, 3.0], [0.5, 0.0, -1.0], (0..8).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(&bytes[..5], b"XDV1\n");
        assert_eq!(bytes.len(), 5 + 12 + 12 + 12 + 32);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[21..25].try_into().unwrap()), 2.0);
        assert_eq!(f32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()), 7.0);
        assert_eq!(decode_volume(&bytes).unwrap(), v);
    }

    #[test]
    fn truncated_and_oversized_inputs_fail() {
        let v = Volume::zeros([2, 3, 2], [1.0; 3], [0.0; 3]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        for cut in [0, 4, 20, bytes.len() - 1] {
            assert!(decode_volume(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_volume(&extra).is_err());
        let mut huge = bytes[..41].to_vec();
        huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_volume(&huge), Err(Error::Format { .. })));
    }

    #[test]
    fn tensor_rank_limits() {
        let t = Tensor::new(&[2, 3], vec![1.0f32; 6]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        bytes[4..8].copy_from_slice(&5u32.to_le_bytes());
        assert!(decode_tensor(&bytes).is_err());
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode_tensor(&bytes).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_version() {
        let cfg = small_net();
        let model = Model::new(cfg.clone(), build_network(&cfg, 3).unwrap()).unwrap();
        let mut bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Version { .. })));
    }

    #[test]
    fn checkpoint_rejects_wrong_shapes() {
        let cfg = small_net();
        let model = Model::new(cfg.clone(), build_network(&cfg, 3).unwrap()).unwrap();
        let mut other = cfg.clone();
        other.base_channels = 3;
        let mut bytes = encode_checkpoint(&model).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = serde_json::to_vec(&CheckpointHeader {
            network: other,
            names: model.params.names.clone(),
        })
        .unwrap();
        let mut patched = bytes[..8].to_vec();
        put_u32(&mut patched, header.len() as u32);
        patched.extend_from_slice(&header);
        patched.extend_from_slice(&bytes[12 + header_len..]);
        assert!(decode_checkpoint(&patched).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn pgm_header_and_values() {
        let img = ProjectionImage::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], Label::Total).unwrap();
        let (bytes, side) = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!((side.min, side.max), (0.0, 5.0));
        let pgm = decode_pgm(&bytes).unwrap();
        assert_eq!(pgm.samples[0], 0);
        assert_eq!(pgm.samples[5], 65535);
        assert_eq!(pgm.samples[1], 13107);
        let back = image_from_pgm(&pgm, &side, Label::Total).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn pgm_accepts_comments_and_8_bit() {
        let mut bytes = b"P5 # comment\n2 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 255]);
        let pgm = decode_pgm(&bytes).unwrap();
        assert_eq!((pgm.width, pgm.height, pgm.maxval), (2, 1, 255));
        assert_eq!(pgm.samples, vec![7, 255]);
        assert!(decode_pgm(b"P5\n2 1\n255\n\x07").is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n\x07").is_err());
        assert!(decode_pgm(b"P5\n1 1\n70000\n\x00\x00").is_err());
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let img = ProjectionImage::new(2, 2, vec![1.5; 4], Label::Total).unwrap();
        let (bytes, side) = encode_pgm(&img);
        let back = image_from_pgm(&decode_pgm(&bytes).unwrap(), &side, Label::Total).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn sample_directory_round_trip() {
        let pose = pose_from_angles(&CameraIntrinsics::square(4), 10.0, -20.0);
        let img = |s: f32, label| {
            ProjectionImage::new(4, 4, (0..16).map(|i| s * i as f32).collect(), label)
                .unwrap()
                .with_pose(pose.clone())
        };
        let s = DecompositionSample {
            phantom: "p7".into(),
            view: 3,
            input: img(3.0, Label::Total),
            targets: vec![img(1.0, Label::Component(0)), img(2.0, Label::Component(1))],
        };
        let dir = tempfile::tempdir().unwrap();
        let names = save_samples(dir.path(), std::slice::from_ref(&s)).unwrap();
        assert_eq!(names, vec!["p7_view0003".to_string()]);
        for f in ["input.xdt", "input.pgm", "input.json", "target_1.xdt", "sample.json"] {
            assert!(dir.path().join(&names[0]).join(f).exists(), "{f}");
        }
        assert_eq!(load_sample(&dir.path().join(&names[0])).unwrap(), s);
        let index = DatasetIndex::describe(std::slice::from_ref(&s)).unwrap();
        write_dataset_index(dir.path(), &index).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), vec![s]);
        let mut bad = index.clone();
        bad.samples = vec!["../p7_view0003".into()];
        write_dataset_index(dir.path(), &bad).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn volume_round_trip(
            dims in prop::array::uniform3(2usize..5),
            spacing in prop::array::uniform3(0.1f32..10.0),
            origin in prop::array::uniform3(-100f32..100.0),
            seed in any::<u32>(),
        ) {
            let n = dims.iter().product::<usize>();
            let data = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32).collect();
            let v = Volume::new(dims, spacing, origin, data).unwrap();
            prop_assert_eq!(decode_volume(&encode_volume(&v).unwrap()).unwrap(), v);
        }

        #[test]
        fn tensor_round_trip(shape in prop::collection::vec(1usize..5, 1..=4), values in prop::collection::vec(-1e6f32..1e6, 256)) {
            let n: usize = shape.iter().product();
            let t = Tensor::new(&shape, values[..n].to_vec()).unwrap();
            prop_assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn pgm_round_trip_within_quantization(w in 1usize..9, h in 1usize..9, values in prop::collection::vec(0f32..50.0, 64)) {
            let img = ProjectionImage::new(w, h, values[..w * h].to_vec(), Label::Total).unwrap();
            let (bytes, side) = encode_pgm(&img);
            let back = image_from_pgm(&decode_pgm(&bytes).unwrap(), &side, Label::Total).unwrap();
            let step = (side.max - side.min) / 65535.0;
            for (a, b) in img.data.iter().zip(&back.data) {
                prop_assert!(((a - b) as f64).abs() <= step / 2.0 + 1e-5 * side.max.abs());
            }
        }

        #[test]
        fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_volume(&bytes);
            let _ = decode_tensor(&bytes);
            let _ = decode_checkpoint(&bytes);
            let _ = decode_pgm(&bytes);
        }
    }
}
