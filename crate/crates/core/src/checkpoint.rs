//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GRCK" | u32 version | u64 header length | header JSON
//! u32 tensor count, then per tensor:
//!     u32 name length | name | u32 rank | u64 dims… | f64 values…
//! 32-byte SHA-256 of everything above
//! ```
//!
//! The header carries the model configuration, the grid and flow snapshot,
//! the fine-tuning task when a head is present and, for runs driven from a
//! configuration file, that file and the seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RoadNetwork;
use crate::downstream::{Finetuned, Head, Task};
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::model::context::ContextSnapshot;
use crate::model::{Model, ModelConfig, ModelContext};

pub const MAGIC: &[u8; 4] = b"GRCK";
pub const VERSION: u32 = 1;

/// The run that produced a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    /// Full run configuration as TOML.
    pub config: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    context: ContextSnapshot,
    task: Option<Task>,
    #[serde(default)]
    run: Option<RunInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub context: ContextSnapshot,
    pub task: Option<Task>,
    pub run: Option<RunInfo>,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, ctx: &ModelContext, head: Option<&Head>) -> Self {
        Self {
            config: model.config.clone(),
            context: ctx.snapshot(),
            task: head.map(|h| h.task),
            run: None,
            params: model.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_finetuned(ft: &Finetuned, ctx: &ModelContext) -> Self {
        Self::from_model(&ft.model, ctx, Some(&ft.head))
    }

    pub fn with_run(mut self, run: RunInfo) -> Self {
        self.run = Some(run);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { config: self.config.clone(), context: self.context.clone(), task: self.task, run: self.run.clone() })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Compatibility(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after the last tensor".into()));
        }
        Ok(Self { config: header.config, context: header.context, task: header.task, run: header.run, params })
    }

    /// Writes through a temporary file so a failed save leaves no partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let result = (|| -> Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)?;
            Ok(())
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        result
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rejects a checkpoint whose representation size differs from `d`.
    pub fn expect_dim(&self, d: usize) -> Result<()> {
        if self.config.d != d {
            return Err(Error::Compatibility(format!("checkpoint has d = {}, configuration asks for d = {d}", self.config.d)));
        }
        Ok(())
    }

    /// Rebuilds the context against `net` and the model with its head.
    pub fn restore(&self, net: &RoadNetwork) -> Result<(Model, ModelContext, Option<Head>)> {
        let ctx = ModelContext::new(self.context.grid, self.context.flow.clone(), net)?;
        let mut model = Model::new(self.config.clone(), &ctx, 0)?;
        let head = self.task.map(|t| Head::new(&mut model, t, 0)).transpose()?;
        model.store.load_from(&self.params)?;
        Ok((model, ctx, head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_world, SynthConfig};
    use crate::model::fixture::tiny;
    use crate::model::Variant;
    use crate::pipeline::{context_from, grid_for_network};

    fn setup() -> (RoadNetwork, ModelContext, Model) {
        let w = synth_world(&SynthConfig { rows: 4, cols: 4, num_trajectories: 2, ..Default::default() }, 1).unwrap();
        let grid = grid_for_network(&w.network, 200.0).unwrap();
        let ctx = context_from(grid, &w.network, &[]).unwrap();
        let m = Model::new(tiny(Variant::Full, 0.0), &ctx, 3).unwrap();
        (w.network, ctx, m)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (net, ctx, mut m) = setup();
        let head = Head::new(&mut m, Task::Classify { num_classes: 3 }, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let run = RunInfo { config: "seed = 3\n".into(), seed: 3 };
        Checkpoint::from_model(&m, &ctx, Some(&head)).with_run(run.clone()).save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded.run.as_ref(), Some(&run));
        let (m2, ctx2, h2) = loaded.restore(&net).unwrap();
        Checkpoint::from_model(&m2, &ctx2, h2.as_ref()).with_run(run).save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(!dir.path().join("a.partial").exists());
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let (net, ctx, m) = setup();
        let mut bytes = Checkpoint::from_model(&m, &ctx, None).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
        let ck = Checkpoint::from_model(&m, &ctx, None);
        assert!(matches!(ck.expect_dim(16), Err(Error::Compatibility(_))));
        let mut wrong = ck.clone();
        wrong.config = tiny(Variant::Full, 0.0);
        wrong.config.d = 12;
        wrong.config.h = 24;
        assert!(matches!(wrong.restore(&net), Err(Error::Compatibility(_))));
        assert!(matches!(Checkpoint::load(Path::new("/no/such.ckpt")), Err(Error::NotFound(_))));
    }
}
