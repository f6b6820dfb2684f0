//! Single-file checkpoints.
//!
//! A checkpoint is a tar archive holding `config.txt` (the run config in its
//! text form), `state.json` (epoch, optimizer step, parameter shapes), and
//! one raw little-endian `f32` file per tensor under `params/`, `adam/m/` and
//! `adam/v/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use ua_nn::{Adam, AdamConfig, MomentState, ParamSet};

use super::AtlasEncoder;
use crate::config::{AtlasConfig, RunConfig};
use crate::error::{Error, Result};

const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct State {
    format: u32,
    epoch: usize,
    adam_step: u64,
    learning_rate: f32,
    params: BTreeMap<String, (usize, usize)>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub encoder: AtlasEncoder,
    pub optimizer: Adam,
}

fn to_bytes(a: &Array2<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8], shape: (usize, usize), name: &str) -> Result<Array2<f32>> {
    if bytes.len() != shape.0 * shape.1 * 4 {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has {} bytes, expected {}",
            bytes.len(),
            shape.0 * shape.1 * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, name, data)
        .map_err(|e| Error::Checkpoint(format!("writing {name}: {e}")))
}

impl Checkpoint {
    pub fn new(config: RunConfig, epoch: usize, encoder: AtlasEncoder, optimizer: Adam) -> Self {
        Self {
            config,
            epoch,
            encoder,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut builder = tar::Builder::new(Vec::new());
        append(&mut builder, "config.txt", self.config.to_text().as_bytes())?;
        let params = self.encoder.named_params();
        let state = State {
            format: FORMAT,
            epoch: self.epoch,
            adam_step: self.optimizer.step,
            learning_rate: self.optimizer.config.lr,
            params: params.iter().map(|(n, p)| (n.clone(), p.shape())).collect(),
        };
        append(&mut builder, "state.json", serde_json::to_string_pretty(&state)?.as_bytes())?;
        for (name, p) in &params {
            append(&mut builder, &format!("params/{name}.f32"), &to_bytes(&p.value))?;
        }
        for (name, st) in &self.optimizer.moments {
            append(&mut builder, &format!("adam/m/{name}.f32"), &to_bytes(&st.m))?;
            append(&mut builder, &format!("adam/v/{name}.f32"), &to_bytes(&st.v))?;
        }
        builder
            .into_inner()
            .map_err(|e| Error::Checkpoint(format!("finishing archive: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = tar::Archive::new(bytes);
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in archive.entries().map_err(|e| Error::Checkpoint(e.to_string()))? {
            let mut entry = entry.map_err(|e| Error::Checkpoint(e.to_string()))?;
            let name = entry
                .path()
                .map_err(|e| Error::Checkpoint(e.to_string()))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            entry
                .read_to_end(&mut data)
                .map_err(|e| Error::Checkpoint(format!("reading {name}: {e}")))?;
            files.insert(name, data);
        }
        let take = |files: &mut BTreeMap<String, Vec<u8>>, name: &str| {
            files
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("archive has no `{name}`")))
        };
        let config_text = String::from_utf8(take(&mut files, "config.txt")?)
            .map_err(|_| Error::Checkpoint("config.txt is not UTF-8".into()))?;
        let config = RunConfig::from_text(&config_text)?;
        let state: State = serde_json::from_slice(&take(&mut files, "state.json")?)?;
        if state.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", state.format)));
        }
        let mut encoder = AtlasEncoder::new(&config)?;
        {
            let mut params = encoder.named_params_mut();
            let expected: BTreeMap<String, (usize, usize)> =
                params.iter().map(|(n, p)| (n.clone(), p.shape())).collect();
            if expected != state.params {
                return Err(Error::Checkpoint(
                    "parameter names or shapes do not match the stored config".into(),
                ));
            }
            for (name, p) in params.iter_mut() {
                p.value = from_bytes(&take(&mut files, &format!("params/{name}.f32"))?, p.shape(), name)?;
            }
        }
        let mut optimizer = Adam::new(AdamConfig::with_lr(state.learning_rate));
        optimizer.step = state.adam_step;
        for (name, shape) in &state.params {
            let m = files.remove(&format!("adam/m/{name}.f32"));
            let v = files.remove(&format!("adam/v/{name}.f32"));
            if let (Some(m), Some(v)) = (m, v) {
                optimizer.moments.insert(
                    name.clone(),
                    MomentState {
                        m: from_bytes(&m, *shape, name)?,
                        v: from_bytes(&v, *shape, name)?,
                    },
                );
            }
        }
        Ok(Self {
            config,
            epoch: state.epoch,
            encoder,
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and requires its atlas to equal `expected`.
    pub fn load_for(path: &Path, expected: &AtlasConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config.atlas != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint atlas (n_charts={}, chart_dim={}) does not match the requested atlas (n_charts={}, chart_dim={})",
                ck.config.atlas.n_charts, ck.config.atlas.chart_dim, expected.n_charts, expected.chart_dim
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionMode;
    use ndarray::Array4;

    fn config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.atlas.n_charts = 2;
        cfg.atlas.chart_dim = 3;
        cfg.model.conv_widths = vec![4, 4, 4];
        cfg
    }

    #[test]
    fn round_trip_restores_outputs() {
        let cfg = config();
        let enc = AtlasEncoder::new(&cfg).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
        let mut trained = enc.clone();
        for (_, p) in trained.named_params_mut() {
            p.grad.fill(0.5);
        }
        opt.step(trained.named_params_mut());
        let ck = Checkpoint::new(cfg.clone(), 3, trained.clone(), opt.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.optimizer, opt);
        assert_eq!(back.encoder.checksum(), trained.checksum());
        let x = Array4::from_shape_fn((2, 64, 64, 1), |(b, i, j, _)| ((b + i * j) % 7) as f32 / 7.0);
        assert_eq!(
            back.encoder.forward(&x, FusionMode::OneHot).unwrap(),
            trained.forward(&x, FusionMode::OneHot).unwrap()
        );
    }

    #[test]
    fn mismatched_atlas_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tar");
        let cfg = config();
        let ck = Checkpoint::new(cfg.clone(), 0, AtlasEncoder::new(&cfg).unwrap(), Adam::new(AdamConfig::with_lr(1e-3)));
        ck.save(&path).unwrap();
        let mut other = cfg.atlas.clone();
        other.n_charts = 4;
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::load_for(&path, &cfg.atlas).is_ok());
    }
}
