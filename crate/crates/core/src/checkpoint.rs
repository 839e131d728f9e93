//! Framed binary model checkpoints: magic, version, config and metrics
//! echoes, then a named-tensor table. Values are row-major little-endian
//! f64, so a save/load round trip is bitwise lossless.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbones::NamedParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"HFMF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// JSON echo of the configuration the model was built with.
    pub config_json: String,
    /// JSON snapshot of metrics at save time.
    pub metrics_json: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshots every named parameter of a model.
    pub fn from_model<M: NamedParams>(
        model: &M,
        config_json: impl Into<String>,
        metrics_json: impl Into<String>,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, p) in model.named_params() {
            let t = Tensor::from_vec(p.shape(), p.data_cloned())?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::contract(
                    "checkpoint",
                    format!("duplicate parameter name {name:?}"),
                ));
            }
        }
        Ok(Checkpoint {
            version: VERSION,
            config_json: config_json.into(),
            metrics_json: metrics_json.into(),
            tensors,
        })
    }

    /// Writes the snapshot into a freshly constructed model. The model and
    /// checkpoint must carry exactly the same parameter names and shapes.
    pub fn apply_to<M: NamedParams>(&self, model: &M) -> Result<()> {
        let params = model.named_params();
        if params.len() != self.tensors.len() {
            return Err(Error::contract(
                "checkpoint",
                format!(
                    "model has {} parameters but checkpoint stores {}",
                    params.len(),
                    self.tensors.len()
                ),
            ));
        }
        for (name, p) in params {
            let stored = self.tensors.get(&name).ok_or_else(|| {
                Error::contract("checkpoint", format!("missing parameter {name:?}"))
            })?;
            if stored.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: p.shape(),
                    rhs: stored.shape().to_vec(),
                });
            }
            p.set_data(stored.data());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        put_block(&mut buf, self.config_json.as_bytes());
        put_block(&mut buf, self.metrics_json.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_block(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |msg: &str| Error::Format {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        let mut r = Reader { raw: &raw, pos: 0 };

        if r.bytes(5).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("bad magic, not a model checkpoint"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let config_json = r.string().ok_or_else(|| bad("truncated config echo"))?;
        let metrics_json = r.string().ok_or_else(|| bad("truncated metrics"))?;
        let count = r.u64().ok_or_else(|| bad("truncated tensor count"))?;

        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string().ok_or_else(|| bad("truncated tensor name"))?;
            let rank = r.u64().ok_or_else(|| bad("truncated tensor rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated tensor shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r
                .f64s(numel)
                .ok_or_else(|| bad(&format!("truncated values for tensor {name:?}")))?;
            if tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(bad(&format!("duplicate tensor {name:?}")));
            }
        }
        if r.pos != raw.len() {
            return Err(bad("trailing bytes after tensor table"));
        }
        Ok(Checkpoint { version, config_json, metrics_json, tensors })
    }
}

fn put_block(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    raw: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.raw.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).ok()
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8)?)?;
        Some(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
