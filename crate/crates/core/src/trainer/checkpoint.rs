//! Checkpoint file: a UTF-8 header terminated by an empty line, then the raw
//! tensor payload.
//!
//! ```text
//! MODALFUSE-CHECKPOINT 1
//! variant=moe_bilinear
//! dim=64
//! heads=4
//! proj_dim=16
//! hidden=64
//! stages=query_text_align,query_image_align,fusion_align
//! optimizer_step=620
//! config.<key>=<value>           (one line per run-config field)
//! tensor <name> <rows>x<cols>    (params, then adam_m.<name>, then adam_v.<name>)
//!
//! <f64 little-endian values, tensors in header order, row-major>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{format, Error, Result};
use crate::fusion::{FusionParams, FusionShape, FusionVariant};
use crate::kv::KvFile;
use crate::numerics::Tensor2;

use super::config::{Stage, TrainConfig};
use super::optimizer::OptimizerState;

pub const CHECKPOINT_MAGIC: &str = "MODALFUSE-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FusionParams,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    /// Stages that have produced these parameters, oldest first.
    pub stages: Vec<Stage>,
}

impl Checkpoint {
    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.params.dim() != dim {
            return Err(format(format!("checkpoint has dim {} but the run expects dim {dim}", self.params.dim())));
        }
        Ok(())
    }

    fn sections(&self) -> Vec<(String, &Tensor2)> {
        let mut out = self.params.tensors();
        out.extend(self.optimizer.first_moment.tensors().into_iter().map(|(n, t)| (format!("adam_m.{n}"), t)));
        out.extend(self.optimizer.second_moment.tensors().into_iter().map(|(n, t)| (format!("adam_v.{n}"), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.params.shape();
        let mut header = format!(
            "{CHECKPOINT_MAGIC}\nvariant={}\ndim={}\nheads={}\nproj_dim={}\nhidden={}\nstages={}\noptimizer_step={}\n",
            shape.variant.key(),
            shape.dim,
            shape.heads,
            shape.proj_dim,
            shape.hidden,
            self.stages.iter().map(|s| s.key()).collect::<Vec<_>>().join(","),
            self.optimizer.step,
        );
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("config.{k}={v}\n"));
        }
        let sections = self.sections();
        for (name, t) in &sections {
            header.push_str(&format!("tensor {name} {}x{}\n", t.rows(), t.cols()));
        }
        header.push('\n');
        let mut bytes = header.into_bytes();
        for (_, t) in &sections {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| format("checkpoint header is not terminated"))?;
        let header = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| format("checkpoint header is not UTF-8"))?;
        let payload = &bytes[split + 2..];

        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(format(format!("not a checkpoint (expected {CHECKPOINT_MAGIC:?})")));
        }
        let mut meta = String::new();
        let mut listed = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut it = rest.split(' ');
                let (name, dims) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
                let (r, c) = dims.split_once('x').ok_or_else(|| format(format!("bad tensor line {line:?}")))?;
                let r: usize = r.parse().map_err(|_| format(format!("bad tensor line {line:?}")))?;
                let c: usize = c.parse().map_err(|_| format(format!("bad tensor line {line:?}")))?;
                listed.push((name.to_string(), r, c));
            } else {
                meta.push_str(line);
                meta.push('\n');
            }
        }
        let kv = KvFile::parse(&meta).map_err(|e| format(format!("checkpoint header: {e}")))?;
        let req = |k: &str| kv.raw(k).ok_or_else(|| format(format!("checkpoint header lacks {k}")));
        let num = |k: &str| -> Result<usize> { req(k)?.parse().map_err(|_| format(format!("bad value for {k}"))) };
        let variant: FusionVariant = req("variant")?.parse().map_err(|e: Error| format(e.to_string()))?;
        let shape = FusionShape {
            variant,
            dim: num("dim")?,
            heads: num("heads")?,
            proj_dim: num("proj_dim")?,
            hidden: num("hidden")?,
        };
        let stages = match req("stages")? {
            "" => Vec::new(),
            s => s.split(',').map(|x| x.parse()).collect::<Result<Vec<Stage>>>().map_err(|e| format(e.to_string()))?,
        };
        let step: u64 = req("optimizer_step")?.parse().map_err(|_| format("bad optimizer_step"))?;
        let cfg_text: String = kv
            .keys_with_prefix("config.")
            .map(|(k, v)| format!("{}={v}\n", &k["config.".len()..]))
            .collect();
        let config = TrainConfig::from_kv_text(&cfg_text).map_err(|e| format(format!("checkpoint config: {e}")))?;

        let params = FusionParams::init(shape, 0).map_err(|e| format(e.to_string()))?;
        let mut ck = Checkpoint {
            optimizer: OptimizerState { first_moment: params.zeros_like(), second_moment: params.zeros_like(), step },
            params,
            config,
            stages,
        };
        let expected: Vec<(String, usize, usize)> =
            ck.sections().into_iter().map(|(n, t)| (n, t.rows(), t.cols())).collect();
        if expected != listed {
            return Err(format("checkpoint tensor list does not match its declared shape"));
        }

        let mut offset = 0;
        let mut fill = |name: &str, t: &mut Tensor2| -> Result<()> {
            let n = t.data().len() * 8;
            let chunk = payload
                .get(offset..offset + n)
                .ok_or_else(|| format(format!("checkpoint payload truncated: missing tensor {name}")))?;
            for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
            }
            offset += n;
            Ok(())
        };
        for (name, t) in ck.params.tensors_mut() {
            fill(&name, t)?;
        }
        for (name, t) in ck.optimizer.first_moment.tensors_mut() {
            fill(&format!("adam_m.{name}"), t)?;
        }
        for (name, t) in ck.optimizer.second_moment.tensors_mut() {
            fill(&format!("adam_v.{name}"), t)?;
        }
        if offset != payload.len() {
            return Err(format(format!("checkpoint has {} trailing bytes", payload.len() - offset)));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(variant: FusionVariant, dim: usize) -> Checkpoint {
        let mut params = FusionParams::init(FusionShape::with_defaults(variant, dim), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        params.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random::<f64>() - 0.5));
        let mut optimizer = OptimizerState::new(&params);
        optimizer.first_moment.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = rng.random()));
        optimizer.second_moment.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = rng.random()));
        optimizer.step = 17;
        Checkpoint {
            params,
            optimizer,
            config: TrainConfig { variant, ..TrainConfig::default() },
            stages: vec![Stage::QueryTextAlign, Stage::FusionAlign],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in FusionVariant::ALL {
            let ck = sample(v, 8);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back, ck);
            assert!(back.has_stage(Stage::QueryTextAlign) && !back.has_stage(Stage::QueryImageAlign));
        }
    }

    #[test]
    fn dim_guard() {
        let ck = sample(FusionVariant::Moe, 64);
        let err = ck.expect_dim(32).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncation_names_missing_tensor() {
        let ck = sample(FusionVariant::MoeBilinear, 8);
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("adam_v.ln_bias"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn corrupted_header_is_format_error() {
        let ck = sample(FusionVariant::Mlp, 8);
        let text = String::from_utf8_lossy(&ck.to_bytes()).replace("dim=8", "dim=9").into_bytes();
        assert!(matches!(Checkpoint::from_bytes(&text), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"hello\n\n"), Err(Error::Format(_))));
    }
}
