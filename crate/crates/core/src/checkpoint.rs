//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `ASDACKPT1`, the config hash and the full
//! config text as length-prefixed strings, the completed epoch count, the Adam
//! step, the detector threshold and map count, then named f64 tensors: model
//! parameters followed by the Adam first and second moments. An optional
//! learned whitening (mean, projection, dims) closes the file.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{AsdaError, Result};
use crate::model::Model;
use crate::postprocess::WhiteningProjection;
use crate::training::{AdamState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"ASDACKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub state: TrainState,
    pub whitening: Option<WhiteningProjection>,
}

fn put_u64<W: Write>(out: &mut W, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    put_u64(out, s.len() as u64)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn put_tensor<W: Write>(out: &mut W, name: &str, values: &[f64]) -> Result<()> {
    put_str(out, name)?;
    put_u64(out, values.len() as u64)?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| AsdaError::Format(format!("truncated checkpoint while reading {what}: {e}")))?;
        Ok(b)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let n = self.u64(what)?;
        if n > limit {
            return Err(AsdaError::Format(format!("{what} length {n} exceeds {limit}")));
        }
        Ok(n as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what, 1 << 20)?;
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| AsdaError::Format(format!("truncated checkpoint while reading {what}: {e}")))?;
        String::from_utf8(b).map_err(|_| AsdaError::Format(format!("{what} is not UTF-8")))
    }

    fn vec(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what, 1 << 32)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn tensor(&mut self, expected_name: &str, expected_len: usize) -> Result<Vec<f64>> {
        let name = self.string("tensor name")?;
        if name != expected_name {
            return Err(AsdaError::Format(format!("expected tensor `{expected_name}`, found `{name}`")));
        }
        let values = self.vec(&name)?;
        if values.len() != expected_len {
            return Err(AsdaError::Format(format!(
                "tensor `{name}` has {} values, model expects {expected_len}",
                values.len()
            )));
        }
        Ok(values)
    }
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, state: TrainState) -> Self {
        Checkpoint {
            config_hash: config.hash(),
            config,
            state,
            whitening: None,
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let model = &self.state.model;
        out.write_all(CHECKPOINT_MAGIC)?;
        put_str(&mut out, &self.config_hash)?;
        put_str(&mut out, &self.config.to_text())?;
        put_u64(&mut out, self.state.epoch as u64)?;
        put_u64(&mut out, self.state.adam.step)?;
        out.write_all(&model.detector.theta().to_le_bytes())?;
        put_u64(&mut out, model.detector.steps() as u64)?;
        let names = model.tensor_names();
        let tensors = model.tensors();
        put_u64(&mut out, names.len() as u64)?;
        for (name, t) in names.iter().zip(&tensors) {
            put_tensor(&mut out, name, t)?;
        }
        for (prefix, moments) in [("adam.m", &self.state.adam.first), ("adam.v", &self.state.adam.second)] {
            for (name, t) in names.iter().zip(moments.iter()) {
                put_tensor(&mut out, &format!("{prefix}.{name}"), t)?;
            }
        }
        match &self.whitening {
            None => out.write_all(&[0])?,
            Some(w) => {
                out.write_all(&[1])?;
                put_u64(&mut out, w.input_dim as u64)?;
                put_u64(&mut out, w.output_dim as u64)?;
                put_u64(&mut out, w.floored as u64)?;
                put_tensor(&mut out, "whitening.mean", &w.mean)?;
                put_tensor(&mut out, "whitening.projection", &w.projection)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader { inner: input };
        let magic = r.bytes::<9>("magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AsdaError::Format("not an ASDACKPT1 checkpoint".into()));
        }
        let config_hash = r.string("config hash")?;
        let config = ExperimentConfig::parse(&r.string("config")?)?;
        if config.hash() != config_hash {
            return Err(AsdaError::HashMismatch {
                expected: config_hash,
                found: config.hash(),
            });
        }
        let epoch = r.u64("epoch")? as usize;
        let step = r.u64("optimizer step")?;
        let theta = r.f64("theta")?;
        let k = r.u64("map count")? as usize;

        let mut model = Model::new(&config.model_config(), config.seed)?;
        if k != model.detector.steps() {
            return Err(AsdaError::Format(format!(
                "checkpoint has {k} semantic maps, its config implies {}",
                model.detector.steps()
            )));
        }
        model.detector.set_theta(theta)?;
        let names = model.tensor_names();
        let count = r.u64("tensor count")? as usize;
        if count != names.len() {
            return Err(AsdaError::Format(format!(
                "checkpoint has {count} tensors, model has {}",
                names.len()
            )));
        }
        let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        for (dst, (name, len)) in model.tensors_mut().into_iter().zip(names.iter().zip(&lens)) {
            dst.copy_from_slice(&r.tensor(name, *len)?);
        }
        let mut moments = |prefix: &str| -> Result<Vec<Vec<f64>>> {
            names
                .iter()
                .zip(&lens)
                .map(|(name, len)| r.tensor(&format!("{prefix}.{name}"), *len))
                .collect()
        };
        let first = moments("adam.m")?;
        let second = moments("adam.v")?;
        let whitening = match r.bytes::<1>("whitening flag")?[0] {
            0 => None,
            1 => {
                let input_dim = r.u64("whitening input dim")? as usize;
                let output_dim = r.u64("whitening output dim")? as usize;
                let floored = r.u64("whitening floor count")? as usize;
                let mean = r.tensor("whitening.mean", input_dim)?;
                let projection = r.tensor("whitening.projection", input_dim * output_dim)?;
                Some(WhiteningProjection {
                    mean,
                    projection,
                    input_dim,
                    output_dim,
                    floored,
                })
            }
            f => return Err(AsdaError::Format(format!("bad whitening flag {f}"))),
        };
        Ok(Checkpoint {
            config,
            config_hash,
            state: TrainState {
                model,
                adam: AdamState { step, first, second },
                epoch,
            },
            whitening,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Rejects checkpoints trained under a different model/data configuration.
    pub fn check_compatible(&self, config: &ExperimentConfig) -> Result<()> {
        let expected = config.hash();
        if expected != self.config_hash {
            return Err(AsdaError::HashMismatch {
                expected,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::preset("tiny").unwrap()
    }

    #[test]
    fn round_trip() {
        let cfg = tiny();
        let mut state = TrainState::new(Model::new(&cfg.model_config(), cfg.seed).unwrap());
        state.epoch = 3;
        state.adam.step = 17;
        state.adam.first[0][0] = 0.25;
        state.adam.second[1][0] = 1e-9;
        state.model.tensors_mut()[0][0] = 42.0;
        let mut ck = Checkpoint::new(cfg, state);
        ck.whitening = Some(WhiteningProjection::identity(16));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..9], b"ASDACKPT1");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let cfg = tiny();
        let ck = Checkpoint::new(cfg.clone(), TrainState::new(Model::new(&cfg.model_config(), 0).unwrap()));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 9]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());

        let mut other = cfg.clone();
        other.theta = 0.5;
        assert!(matches!(ck.check_compatible(&other), Err(AsdaError::HashMismatch { .. })));
        let mut more_epochs = cfg;
        more_epochs.epochs = 9;
        ck.check_compatible(&more_epochs).unwrap();
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let ck = Checkpoint::new(cfg.clone(), TrainState::new(Model::new(&cfg.model_config(), 0).unwrap()));
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!path.with_extension("tmp").exists());
    }
}
