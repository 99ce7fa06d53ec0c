//! Binary checkpoints: magic, version, configuration echo, then every model
//! tensor as a name followed by its dims and little-endian f32 payload.

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, Network};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"PNETCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub tensors: Vec<(String, Tensor4<f32>)>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
    };
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn take_u64(bytes: &[u8], at: &mut usize, what: &str) -> Result<usize> {
    let b = take(bytes, at, 8, what)?;
    usize::try_from(u64::from_le_bytes(b.try_into().unwrap()))
        .map_err(|_| Error::Format(format!("{what} does not fit in memory")))
}

fn take_str(bytes: &[u8], at: &mut usize, what: &str) -> Result<String> {
    let n = take_u64(bytes, at, what)?;
    let s = take(bytes, at, n, what)?;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, net: &Network<f32>) -> Self {
        Self {
            config_toml: config.experiment_toml(),
            tensors: net.state().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_toml);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            t.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_toml = take_str(bytes, &mut at, "config")?;
        let count = take_u64(bytes, &mut at, "tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name = take_str(bytes, &mut at, &format!("tensor {i} name"))?;
            let (t, used) =
                Tensor4::<f32>::read_le(&bytes[at..]).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            at += used;
            tensors.push((name, t));
        }
        if at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - at
            )));
        }
        Ok(Self { config_toml, tensors })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml(&self.config_toml)
    }

    /// Rebuilds the network described by the echoed configuration and loads the
    /// stored tensors into it.
    pub fn restore(&self) -> Result<(TrainConfig, Network<f32>)> {
        let cfg = self.config()?;
        let mut net = build_model::<f32>(&cfg.model, cfg.data.classes, cfg.seed)?;
        let names: Vec<String> = net.state().into_iter().map(|(n, _)| n).collect();
        for (want, (got, _)) in names.iter().zip(&self.tensors) {
            if want != got {
                return Err(Error::Format(format!(
                    "checkpoint holds {got} where the model expects {want}"
                )));
            }
        }
        net.load_state(self.tensors.iter().map(|(_, t)| t.clone()).collect())?;
        Ok((cfg, net))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig, PoolPreset};

    fn sample() -> (TrainConfig, Network<f32>) {
        let mut cfg = TrainConfig::new(ModelConfig::new(Arch::TinySynth, PoolPreset::NnZ));
        cfg.data.classes = 2;
        let net = build_model(&cfg.model, 2, 9).unwrap();
        (cfg, net)
    }

    #[test]
    fn bytes_round_trip() {
        let (cfg, net) = sample();
        let ck = Checkpoint::capture(&cfg, &net);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restore_rebuilds_same_tensors() {
        let (mut cfg, mut net) = sample();
        cfg.seed = 1;
        let first = net.params_mut().into_iter().next().unwrap();
        first.value.fill(0.5);
        let ck = Checkpoint::capture(&cfg, &net);
        let (_, restored) = ck.restore().unwrap();
        for ((na, a), (nb, b)) in net.state().iter().zip(restored.state()) {
            assert_eq!(na, &nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (cfg, net) = sample();
        let bytes = Checkpoint::capture(&cfg, &net).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version 7"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
