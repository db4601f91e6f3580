//! Model checkpoint format (all integers little-endian):
//!
//! ```text
//! "PGCK" | u32 version = 1
//! u32 in_channels | u32 hidden | u32 out_channels | u32 time_dim | u32 kernel
//! u64 parameter count | f32 x count
//! u8 has_moments [ | u64 step | f32 x count (m) | f32 x count (v) ]
//! ```

use std::fs;
use std::path::Path;

use super::model::{DenoiserModel, ModelArch, IN_CHANNELS, OUT_CHANNELS};
use super::optim::{OptimConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, put_u64, write_atomic, LeReader};

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u32 = 1;
const KERNEL: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            model: state.model.clone(),
            moments: Some(Moments {
                step: state.step,
                m: state.m.clone(),
                v: state.v.clone(),
            }),
        }
    }

    /// Resumable state; hyperparameters are not stored and come from `hyper`.
    pub fn into_state(self, hyper: OptimConfig) -> TrainState {
        let mut st = TrainState::new(self.model, hyper);
        if let Some(m) = self.moments {
            st.step = m.step;
            st.m = m.m;
            st.v = m.v;
        }
        st
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.model.arch();
        let params = self.model.params();
        let mut out = Vec::with_capacity(64 + params.len() * 12);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for v in [
            IN_CHANNELS as u32,
            arch.hidden as u32,
            OUT_CHANNELS as u32,
            arch.time_dim as u32,
            KERNEL,
        ] {
            put_u32(&mut out, v);
        }
        put_u64(&mut out, params.len() as u64);
        put_f32s(&mut out, params.iter().map(|&p| p as f32));
        match &self.moments {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                put_u64(&mut out, m.step);
                put_f32s(&mut out, m.m.iter().map(|&x| x as f32));
                put_f32s(&mut out, m.v.iter().map(|&x| x as f32));
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(buf);
        let magic = r.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let at = r.offset();
        let in_ch = r.u32("in_channels")?;
        let hidden = r.u32("hidden")? as usize;
        let out_ch = r.u32("out_channels")?;
        let time_dim = r.u32("time_dim")? as usize;
        let kernel = r.u32("kernel")?;
        if in_ch as usize != IN_CHANNELS || out_ch as usize != OUT_CHANNELS || kernel != KERNEL {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported architecture {in_ch}->{out_ch} kernel {kernel}"),
            });
        }
        let arch = ModelArch { hidden, time_dim };
        arch.validate().map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        let at = r.offset();
        let n = r.u64("parameter count")?;
        if n != arch.param_count() as u64 {
            return Err(Error::Format {
                offset: at,
                msg: format!(
                    "parameter count {n} does not match architecture ({})",
                    arch.param_count()
                ),
            });
        }
        let n = n as usize;
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
        let params = widen(r.f32s(n, "parameters")?);
        let moments = match r.u8("moments flag")? {
            0 => None,
            1 => Some(Moments {
                step: r.u64("step")?,
                m: widen(r.f32s(n, "first moments")?),
                v: widen(r.f32s(n, "second moments")?),
            }),
            f => {
                return Err(Error::Format {
                    offset: r.offset() - 1,
                    msg: format!("invalid moments flag {f}"),
                })
            }
        };
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.offset(),
                msg: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self {
            model: DenoiserModel::from_params(arch, params)?,
            moments,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
