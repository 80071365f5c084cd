//! CLDM model files: training config (as JSON), schedule, denoiser and heads
//! in one little-endian blob. The byte layout is documented in the README.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::ByteReader;
use crate::denoiser::{Activation, DenoiserParams, Dense};
use crate::diffusion::{NoiseSchedule, NoiseScale};
use crate::heads::HeadParams;
use crate::trainer::{CludiModel, TrainConfig};
use crate::{Error, Result};

pub const CLDM_MAGIC: &[u8; 4] = b"CLDM";
pub const CLDM_VERSION: u16 = 1;

struct Out(Vec<u8>);

impl Out {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows());
        self.u64(m.ncols());
        m.iter().for_each(|&v| self.f64(v));
    }
}

pub fn encode(model: &CludiModel) -> Result<Vec<u8>> {
    let mut out = Out(Vec::new());
    out.0.extend_from_slice(CLDM_MAGIC);
    out.0.extend_from_slice(&CLDM_VERSION.to_le_bytes());
    out.0.extend_from_slice(&0u16.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    out.0.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.0.extend_from_slice(&config);

    let s = &model.schedule;
    out.u64(s.steps());
    out.f64(s.offset());
    out.f64(s.eps_floor());
    out.f64(model.scale.f2());

    let net = &model.denoiser;
    use crate::diffusion::Denoise;
    out.u64(net.embed_dim());
    out.u64(net.feature_dim());
    out.u64(net.time_dim());
    out.u64(net.steps());
    out.0.push(net.activation().tag());
    out.u64(net.layers().len());
    for layer in net.layers() {
        out.matrix(&layer.weight);
        layer.bias.iter().for_each(|&v| out.f64(v));
    }

    let h = &model.heads;
    out.f64(h.tau);
    out.f64(h.tau_col);
    out.matrix(&h.logits);
    out.matrix(&h.embedding);
    Ok(out.0)
}

fn count(r: &mut ByteReader, limit: u64, what: &str) -> Result<usize> {
    let at = r.offset();
    let v = r.u64()?;
    if v > limit {
        return Err(Error::Format {
            offset: at,
            message: format!("{what} = {v} is implausibly large"),
        });
    }
    Ok(v as usize)
}

fn matrix(r: &mut ByteReader) -> Result<Array2<f64>> {
    let rows = count(r, 1 << 32, "rows")?;
    let cols = count(r, 1 << 32, "cols")?;
    let cells = rows as u64 * cols as u64;
    r.require(cells.saturating_mul(8))?;
    let values = (0..cells).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length matches shape"))
}

pub fn decode(bytes: &[u8]) -> Result<CludiModel> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CLDM_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"CLDM\"".into(),
        });
    }
    let version = r.u16()?;
    if version != CLDM_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported CLDM version {version}"),
        });
    }
    r.u16()?;
    let config_len = r.u32()? as usize;
    let config_at = r.offset();
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::Format {
        offset: config_at,
        message: format!("config JSON: {e}"),
    })?;

    let steps = count(&mut r, u32::MAX as u64, "steps")?;
    let schedule = NoiseSchedule::sqrt(steps, r.f64()?, r.f64()?)?;
    let scale = NoiseScale::new(r.f64()?)?;

    let embed = count(&mut r, u32::MAX as u64, "embed_dim")?;
    let feature = count(&mut r, u32::MAX as u64, "feature_dim")?;
    let time = count(&mut r, u32::MAX as u64, "time_dim")?;
    let net_steps = count(&mut r, u32::MAX as u64, "denoiser steps")?;
    let act_at = r.offset();
    let activation = Activation::from_tag(r.u8()?).ok_or(Error::Format {
        offset: act_at,
        message: "unknown activation tag".into(),
    })?;
    let n_layers = count(&mut r, 1 << 16, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = matrix(&mut r)?;
        r.require(weight.ncols() as u64 * 8)?;
        let bias = (0..weight.ncols()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Dense {
            weight,
            bias: Array1::from(bias),
        });
    }
    let denoiser = DenoiserParams::from_layers(embed, feature, time, net_steps, activation, layers)?;

    let tau = r.f64()?;
    let tau_col = r.f64()?;
    let heads = HeadParams {
        logits: matrix(&mut r)?,
        embedding: matrix(&mut r)?,
        tau,
        tau_col,
    };
    heads.validate()?;
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    if heads.embed_dim() != embed {
        return Err(Error::invalid("heads and denoiser disagree on d"));
    }
    Ok(CludiModel {
        config,
        schedule,
        scale,
        denoiser,
        heads,
    })
}

pub fn save(model: &CludiModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CludiModel> {
    decode(&fs::read(path)?)
}
