//! Checkpoint file:
//!
//! ```text
//! "ENDC"  u32 version (=1)  u8 stage (0 cnn, 1 pretrain, 2 finetune)
//! u32 json_len  json_len bytes of UTF-8 JSON (CheckpointMeta)
//! ENDT segment: parameters
//! ENDT segment: buffers (batch-norm running statistics)
//! ENDT segment: optimizer moments
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, RunLog};
use crate::features::{Cnn, CnnConfig};
use crate::tensor::io::{read_segment, write_store};
use crate::tensor::{Optimizer, OptimizerKind, ParamStore};
use crate::transformer::{EncoderConfig, EndoNet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ENDC";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cnn,
    Pretrain,
    Finetune,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Cnn => 0,
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Stage> {
        match t {
            0 => Some(Stage::Cnn),
            1 => Some(Stage::Pretrain),
            2 => Some(Stage::Finetune),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Snapshot of the stage config.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps already taken in epoch `epoch + 1`. Together with `seed` this
    /// is the RNG position: every stream is re-derived from (seed, epoch).
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer_steps: u64,
    /// Losses of the steps already taken in a partial epoch.
    #[serde(default)]
    pub partial_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<RunLog>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Self {
        CheckpointMeta {
            config: serde_json::to_value(config).expect("config serializes"),
            encoder: None,
            seed,
            epoch: 0,
            step: 0,
            optimizer: None,
            learning_rate: 0.0,
            optimizer_steps: 0,
            partial_losses: Vec::new(),
            log: None,
            extra: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub optimizer: ParamStore,
}

impl Checkpoint {
    pub fn from_cnn(cnn: &Cnn, meta: CheckpointMeta) -> Self {
        let meta = CheckpointMeta { config: serde_json::to_value(cnn.config).expect("config serializes"), ..meta };
        Checkpoint {
            stage: Stage::Cnn,
            meta,
            params: cnn.params.clone(),
            buffers: cnn.buffers.clone(),
            optimizer: ParamStore::new(),
        }
    }

    pub fn to_cnn(&self) -> Result<Cnn, PipelineError> {
        self.expect_stage(&[Stage::Cnn])?;
        let config: CnnConfig = serde_json::from_value(self.meta.config.clone())
            .map_err(|e| PipelineError::Corrupt(format!("cnn config: {e}")))?;
        let cnn = Cnn { config, params: self.params.clone(), buffers: self.buffers.clone() };
        cnn.check_shapes()?;
        Ok(cnn)
    }

    /// Transformer checkpoint; `optimizer` adds its moments and step count.
    pub fn from_model(stage: Stage, model: &EndoNet, optimizer: Option<&Optimizer>, mut meta: CheckpointMeta) -> Self {
        meta.encoder = Some(model.config);
        let mut moments = ParamStore::new();
        if let Some(opt) = optimizer {
            meta.optimizer = Some(opt.kind);
            meta.learning_rate = opt.learning_rate;
            meta.optimizer_steps = opt.step_count();
            for (name, t) in opt.state_tensors(&model.params) {
                moments.insert(name, t);
            }
        }
        Checkpoint { stage, meta, params: model.params.clone(), buffers: ParamStore::new(), optimizer: moments }
    }

    pub fn to_model(&self) -> Result<EndoNet, PipelineError> {
        self.expect_stage(&[Stage::Pretrain, Stage::Finetune])?;
        let config = self.meta.encoder.ok_or_else(|| PipelineError::Corrupt("missing encoder config".into()))?;
        let model = EndoNet { config, params: self.params.clone() };
        model.check_shapes()?;
        Ok(model)
    }

    /// Optimizer with the saved moments, or `None` if none were saved.
    pub fn to_optimizer(&self) -> Result<Option<Optimizer>, PipelineError> {
        let Some(kind) = self.meta.optimizer else { return Ok(None) };
        let mut opt = Optimizer::new(kind, self.meta.learning_rate);
        opt.restore(&self.params, self.meta.optimizer_steps, &self.optimizer)?;
        Ok(Some(opt))
    }

    pub fn expect_stage(&self, allowed: &[Stage]) -> Result<(), PipelineError> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(PipelineError::Incompatible(format!("stage {:?}, expected one of {allowed:?}", self.stage)))
        }
    }
}

pub fn write_checkpoint_to<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Corrupt(e.to_string());
    let json = serde_json::to_vec(&ckpt.meta).map_err(|e| PipelineError::Corrupt(e.to_string()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[ckpt.stage.tag()]).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    write_store(w, &ckpt.params)?;
    write_store(w, &ckpt.buffers)?;
    write_store(w, &ckpt.optimizer)?;
    Ok(())
}

pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<Checkpoint, PipelineError> {
    let mut head = [0u8; 13];
    r.read_exact(&mut head).map_err(|_| PipelineError::Corrupt("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(PipelineError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::Corrupt(format!("unsupported version {version}")));
    }
    let stage = Stage::from_tag(head[8]).ok_or_else(|| PipelineError::Corrupt(format!("unknown stage tag {}", head[8])))?;
    let len = u32::from_le_bytes(head[9..13].try_into().expect("4 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| PipelineError::Corrupt("truncated config".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| PipelineError::Corrupt(e.to_string()))?;
    let params = read_segment(r)?;
    let buffers = read_segment(r)?;
    let optimizer = read_segment(r)?;
    Ok(Checkpoint { stage, meta, params, buffers, optimizer })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), PipelineError> {
    let io = |e| PipelineError::Io { path: path.to_path_buf(), source: e };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    write_checkpoint_to(&mut w, ckpt)?;
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let f = fs::File::open(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
    read_checkpoint_from(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_roundtrip() {
        let cnn = Cnn::new(CnnConfig { width: 0.125, ..Default::default() }, 3).unwrap();
        let ckpt = Checkpoint::from_cnn(&cnn, CheckpointMeta::new(&(), 3));
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let cnn2 = back.to_cnn().unwrap();
        assert_eq!(cnn2.params, cnn.params);
        assert_eq!(cnn2.buffers, cnn.buffers);
        assert!(back.to_model().is_err());
    }

    #[test]
    fn corrupt_inputs() {
        let cnn = Cnn::new(CnnConfig { width: 0.125, ..Default::default() }, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &Checkpoint::from_cnn(&cnn, CheckpointMeta::new(&(), 0))).unwrap();
        let cut = &buf[..buf.len() / 2];
        assert!(read_checkpoint_from(&mut &cut[..]).is_err());
        buf[8] = 9;
        assert!(matches!(read_checkpoint_from(&mut buf.as_slice()), Err(PipelineError::Corrupt(_))));
    }
}
