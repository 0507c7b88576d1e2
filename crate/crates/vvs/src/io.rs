//! Binary file formats: frame features, backbone activations, checkpoints,
//! and embedding stores. All integers and floats are little-endian; writes
//! are byte-deterministic so identical inputs produce identical files.

use std::fs;
use std::path::Path;

use crate::error::{Result, VvsError};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MAGIC_FEATURES: &[u8; 4] = b"VVSF";
const MAGIC_ACTIVATIONS: &[u8; 4] = b"VVSA";
const MAGIC_CHECKPOINT: &[u8; 4] = b"VVSC";
const MAGIC_EMBEDDINGS: &[u8; 4] = b"VVSE";

const FLAG_PCA_APPLIED: u32 = 1;

/// Frame feature tensor `[T, S2, C]` plus whitening state.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub data: Tensor,
    pub pca_applied: bool,
}

impl FrameFeatures {
    pub fn new(data: Tensor, pca_applied: bool) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(VvsError::Shape {
                op: "frame_features",
                detail: format!("expected [T, S2, C], got {:?}", data.shape()),
            });
        }
        Ok(Self { data, pca_applied })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, bs: &[u8]) {
        self.buf.extend_from_slice(bs);
    }

    fn save(self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf).map_err(|e| VvsError::io(path.display().to_string(), e))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4], format: &'static str) -> Result<Self> {
        let mut r = Self {
            buf,
            pos: 0,
            format,
        };
        let got = r.bytes(4)?;
        if got != magic {
            return Err(VvsError::Format {
                format,
                detail: format!("bad magic {:?}", String::from_utf8_lossy(got)),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(VvsError::Format {
                format,
                detail: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            });
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(VvsError::Format {
                format: self.format,
                detail: format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(VvsError::Format {
                format: self.format,
                detail: format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| VvsError::io(path.display().to_string(), e))
}

/// Write a feature file: header (T, S2, C, flags) then row-major data.
pub fn write_features(path: &Path, features: &FrameFeatures) -> Result<()> {
    let mut w = Writer::new(MAGIC_FEATURES);
    w.u32(features.frames() as u32);
    w.u32(features.regions() as u32);
    w.u32(features.channels() as u32);
    w.u32(if features.pca_applied {
        FLAG_PCA_APPLIED
    } else {
        0
    });
    w.f32s(features.data.data());
    w.save(path)
}

pub fn read_features(path: &Path) -> Result<FrameFeatures> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, MAGIC_FEATURES, "VVSF")?;
    let t = r.u32()? as usize;
    let s2 = r.u32()? as usize;
    let c = r.u32()? as usize;
    let flags = r.u32()?;
    let data = r.f32s(t * s2 * c)?;
    r.finish()?;
    FrameFeatures::new(
        Tensor::new(&[t, s2, c], data)?,
        flags & FLAG_PCA_APPLIED != 0,
    )
}

/// Write an activation dump: K per-layer blocks, layer k shaped `[T, H, W, Ck]`.
pub fn write_activations(path: &Path, layers: &[Tensor]) -> Result<()> {
    if layers.is_empty() {
        return Err(VvsError::Format {
            format: "VVSA",
            detail: "activation stack needs at least one layer".into(),
        });
    }
    let t = layers[0].shape()[0];
    for (k, layer) in layers.iter().enumerate() {
        let s = layer.shape();
        if s.len() != 4 || s[0] != t {
            return Err(VvsError::Format {
                format: "VVSA",
                detail: format!("layer {k} shaped {:?}, expected [T={t}, H, W, Ck]", s),
            });
        }
    }
    let mut w = Writer::new(MAGIC_ACTIVATIONS);
    w.u32(t as u32);
    w.u32(layers.len() as u32);
    for layer in layers {
        let s = layer.shape();
        w.u32(s[1] as u32);
        w.u32(s[2] as u32);
        w.u32(s[3] as u32);
        w.f32s(layer.data());
    }
    w.save(path)
}

pub fn read_activations(path: &Path) -> Result<Vec<Tensor>> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, MAGIC_ACTIVATIONS, "VVSA")?;
    let t = r.u32()? as usize;
    let k = r.u32()? as usize;
    if t == 0 || k == 0 {
        return Err(VvsError::Format {
            format: "VVSA",
            detail: format!("empty stack: T={t}, K={k}"),
        });
    }
    let mut layers = Vec::with_capacity(k);
    for _ in 0..k {
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let ck = r.u32()? as usize;
        let data = r.f32s(t * h * w * ck)?;
        layers.push(Tensor::new(&[t, h, w, ck], data)?);
    }
    r.finish()?;
    Ok(layers)
}

/// Write a checkpoint: a JSON config echo, then named parameter sections in
/// the order given (name, shape, values).
pub fn write_checkpoint(path: &Path, config_json: &str, params: &[(String, Tensor)]) -> Result<()> {
    let mut w = Writer::new(MAGIC_CHECKPOINT);
    w.u32(config_json.len() as u32);
    w.bytes(config_json.as_bytes());
    w.u32(params.len() as u32);
    for (name, tensor) in params {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u32(tensor.shape().len() as u32);
        for &d in tensor.shape() {
            w.u32(d as u32);
        }
        w.f32s(tensor.data());
    }
    w.save(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, MAGIC_CHECKPOINT, "VVSC")?;
    let cfg_len = r.u32()? as usize;
    let config_json =
        String::from_utf8(r.bytes(cfg_len)?.to_vec()).map_err(|e| VvsError::Format {
            format: "VVSC",
            detail: format!("config blob not utf-8: {e}"),
        })?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name =
            String::from_utf8(r.bytes(name_len)?.to_vec()).map_err(|e| VvsError::Format {
                format: "VVSC",
                detail: format!("parameter name not utf-8: {e}"),
            })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        params.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok((config_json, params))
}

/// Write an embedding store: `count` records of (id, vector), all `dim` wide.
pub fn write_embeddings<'a, I>(path: &Path, dim: usize, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut body = Writer::new(MAGIC_EMBEDDINGS);
    let mut count = 0u32;
    let mut payload = Writer { buf: Vec::new() };
    for (id, vec) in records {
        if vec.len() != dim {
            return Err(VvsError::Format {
                format: "VVSE",
                detail: format!("record '{id}' has dim {}, store dim {dim}", vec.len()),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(VvsError::Format {
                format: "VVSE",
                detail: format!("id longer than {} bytes", u16::MAX),
            });
        }
        payload.u16(id.len() as u16);
        payload.bytes(id.as_bytes());
        payload.f32s(vec);
        count += 1;
    }
    body.u32(count);
    body.u32(dim as u32);
    body.bytes(&payload.buf);
    body.save(path)
}

/// Embedding records as read back from disk: `(id, vector)` pairs.
pub type EmbeddingRecords = Vec<(String, Vec<f32>)>;

pub fn read_embeddings(path: &Path) -> Result<(usize, EmbeddingRecords)> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, MAGIC_EMBEDDINGS, "VVSE")?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = String::from_utf8(r.bytes(id_len)?.to_vec()).map_err(|e| VvsError::Format {
            format: "VVSE",
            detail: format!("id not utf-8: {e}"),
        })?;
        let vec = r.f32s(dim)?;
        records.push((id, vec));
    }
    r.finish()?;
    Ok((dim, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn pseudo(n: usize, salt: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let h = (i as u32).wrapping_mul(2654435761) ^ salt.wrapping_mul(0x9E3779B9);
                ((h >> 8) & 0xffff) as f32 / 65536.0 - 0.5
            })
            .collect()
    }

    #[test]
    fn features_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.vvsf");
        let x = FrameFeatures::new(Tensor::new(&[3, 2, 4], pseudo(24, 7)).unwrap(), true).unwrap();
        write_features(&path, &x).unwrap();
        let y = read_features(&path).unwrap();
        assert_eq!(x, y);
        let first = fs::read(&path).unwrap();
        write_features(&path, &y).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn features_exact_byte_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.vvsf");
        let x =
            FrameFeatures::new(Tensor::new(&[1, 1, 2], vec![1.0, -2.5]).unwrap(), true).unwrap();
        write_features(&path, &x).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"VVSF");
        for v in [1u32, 1, 1, 2, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(fs::read(&path).unwrap(), want);
    }

    #[test]
    fn features_reject_bad_magic_version_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.vvsf");
        let x = FrameFeatures::new(Tensor::new(&[2, 1, 3], pseudo(6, 1)).unwrap(), false).unwrap();
        write_features(&path, &x).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad = good.clone();
        bad[4] = 99;
        fs::write(&path, &bad).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut padded = good.clone();
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_features(Path::new("/nonexistent/x.vvsf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.vvsf"), "{err}");
    }

    #[test]
    fn activations_round_trip_multi_layer() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.vvsa");
        let layers = vec![
            Tensor::new(&[2, 3, 3, 4], pseudo(72, 2)).unwrap(),
            Tensor::new(&[2, 2, 2, 8], pseudo(64, 3)).unwrap(),
        ];
        write_activations(&path, &layers).unwrap();
        let got = read_activations(&path).unwrap();
        assert_eq!(got.len(), 2);
        for (a, b) in layers.iter().zip(&got) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn activations_reject_inconsistent_frame_counts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.vvsa");
        let layers = vec![
            Tensor::new(&[2, 1, 1, 2], pseudo(4, 4)).unwrap(),
            Tensor::new(&[3, 1, 1, 2], pseudo(6, 5)).unwrap(),
        ];
        let err = write_activations(&path, &layers).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_order_and_config() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.vvsc");
        let cfg = r#"{"lr":2e-5,"epochs":3}"#;
        let params = vec![
            (
                "ddm.fc1.w".to_string(),
                Tensor::new(&[3, 2], pseudo(6, 8)).unwrap(),
            ),
            (
                "ddm.fc1.b".to_string(),
                Tensor::new(&[2], pseudo(2, 9)).unwrap(),
            ),
        ];
        write_checkpoint(&path, cfg, &params).unwrap();
        let (got_cfg, got_params) = read_checkpoint(&path).unwrap();
        assert_eq!(got_cfg, cfg);
        assert_eq!(got_params.len(), 2);
        for ((an, at), (bn, bt)) in params.iter().zip(&got_params) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
            assert_eq!(at.data(), bt.data());
        }
    }

    #[test]
    fn embeddings_round_trip_with_unicode_ids() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.vvse");
        let a = [0.1f32, 0.2, 0.3];
        let b = [1.0f32, -1.0, 0.5];
        write_embeddings(&path, 3, vec![("vid_α", &a[..]), ("q2", &b[..])]).unwrap();
        let (dim, records) = read_embeddings(&path).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(records[0].0, "vid_α");
        assert_eq!(records[0].1, a);
        assert_eq!(records[1].0, "q2");
        assert_eq!(records[1].1, b);
    }

    #[test]
    fn embeddings_reject_dim_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.vvse");
        let a = [0.1f32, 0.2];
        let err = write_embeddings(&path, 3, vec![("v", &a[..])]).unwrap_err();
        assert!(err.to_string().contains("dim"), "{err}");
    }

    #[test]
    fn empty_embedding_store_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.vvse");
        write_embeddings(&path, 4, Vec::<(&str, &[f32])>::new()).unwrap();
        let (dim, records) = read_embeddings(&path).unwrap();
        assert_eq!(dim, 4);
        assert!(records.is_empty());
    }
}
