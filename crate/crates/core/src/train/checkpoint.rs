//! Binary checkpoints: configuration, architecture, knowledge graph and
//! parameters, all deterministic and bit-exact on reload.
//!
//! Layout (integers little-endian `u64`, text as length-prefixed UTF-8):
//! magic `KGICUCKP`, version, config text, model spec JSON, data directory,
//! best epoch (`u64::MAX` for none), knowledge graph JSON, parameter count,
//! then per parameter its path, rows, cols and `rows·cols` `f64` values.

use std::path::Path;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::knowledge::GlobalKnowledgeGraph;
use crate::model::{Model, ModelSpec};
use crate::numeric::{ParameterSet, Tensor};

const MAGIC: &[u8; 8] = b"KGICUCKP";
const VERSION: u64 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub data_dir: String,
    pub best_epoch: Option<usize>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Input(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Input("checkpoint length overflows".into()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Input("checkpoint text is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u64(&mut buf, VERSION);
        put_str(&mut buf, &self.config.to_text());
        put_str(&mut buf, &serde_json::to_string(&self.model.spec)?);
        put_str(&mut buf, &self.data_dir);
        put_u64(&mut buf, self.best_epoch.map_or(u64::MAX, |e| e as u64));
        put_str(&mut buf, &self.model.kg.to_json()?);
        put_u64(&mut buf, self.model.params.len() as u64);
        for (path, t) in self.model.params.iter() {
            put_str(&mut buf, path);
            put_u64(&mut buf, t.rows() as u64);
            put_u64(&mut buf, t.cols() as u64);
            for v in t.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Input("not a checkpoint file".into()));
        }
        let version = r.u64()?;
        if version != VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::parse(&r.str()?)?;
        let spec: ModelSpec = serde_json::from_str(&r.str()?)?;
        let data_dir = r.str()?;
        let best = r.u64()?;
        let best_epoch = (best != u64::MAX).then_some(best as usize);
        let kg = GlobalKnowledgeGraph::from_json(&r.str()?)?;
        let count = r.len()?;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let path = r.str()?;
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Input("checkpoint tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Input("checkpoint tensor size overflows".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(path, Tensor::matrix(rows, cols, values)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Input("trailing bytes after checkpoint".into()));
        }
        let model = Model::new(spec, params, kg)?;
        Ok(Self {
            config,
            model,
            data_dir,
            best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
