//! Checkpoint container: a plain-text header followed by the parameters as
//! little-endian `f32`.
//!
//! ```text
//! scorevae-checkpoint
//! version = 1
//! component = encoder
//! seed = 0
//! iteration = 2000
//! data_dim = 2
//! latent_dim = 2
//! sde = 0.1 20 1
//! nets = 1
//! net.0.name = encoder
//! net.0.widths = 2 64 64 4
//! net.0.activation = gelu
//! net.0.time_features = 4
//! param_count = 4676
//! end
//! <4 · param_count bytes>
//! ```
//!
//! Tensors are written net by net in [`NetSpec::param_shapes`] order,
//! row-major.

use super::config::Component;
use crate::diffproc::SdeSpec;
use crate::ndiff::{Activation, Mat, Mlp, NetSpec};
use crate::{Error, Result};
use byteorder::{ByteOrder, LittleEndian};
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "scorevae-checkpoint";
const END: &str = "end";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    pub seed: u64,
    pub iteration: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub sde: SdeSpec,
    /// Named networks, e.g. `encoder` and `decoder` for the VAE.
    pub nets: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Result<&Mlp> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| {
                Error::Format(format!(
                    "{} checkpoint has no '{name}' network",
                    self.component.name()
                ))
            })
    }

    pub fn expect_component(&self, c: Component) -> Result<()> {
        if self.component != c {
            return Err(Error::Format(format!(
                "expected a {} checkpoint, got {}",
                c.name(),
                self.component.name()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|(_, m)| m.spec().param_count()).sum()
    }

    /// Rounds every parameter to `f32`, the precision of the payload.
    pub fn round_to_storage(mut self) -> Self {
        for (_, net) in &mut self.nets {
            for p in net.params_mut() {
                p.mapv_inplace(|v| v as f32 as f64);
            }
        }
        self
    }

    pub fn header(&self) -> String {
        let mut h = String::new();
        let s = &self.sde;
        let _ = writeln!(h, "{MAGIC}");
        let _ = writeln!(h, "version = {FORMAT_VERSION}");
        let _ = writeln!(h, "component = {}", self.component.name());
        let _ = writeln!(h, "seed = {}", self.seed);
        let _ = writeln!(h, "iteration = {}", self.iteration);
        let _ = writeln!(h, "data_dim = {}", self.data_dim);
        let _ = writeln!(h, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(h, "sde = {:?} {:?} {:?}", s.beta_min, s.beta_max, s.t_end);
        let _ = writeln!(h, "nets = {}", self.nets.len());
        for (i, (name, net)) in self.nets.iter().enumerate() {
            let spec = net.spec();
            let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(h, "net.{i}.name = {name}");
            let _ = writeln!(h, "net.{i}.widths = {}", widths.join(" "));
            let _ = writeln!(h, "net.{i}.activation = {}", spec.activation);
            let _ = writeln!(h, "net.{i}.time_features = {}", spec.time_features);
        }
        let _ = writeln!(h, "param_count = {}", self.param_count());
        let _ = writeln!(h, "{END}");
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        let start = out.len();
        out.resize(start + 4 * self.param_count(), 0);
        let mut off = start;
        for (_, net) in &self.nets {
            for p in net.params() {
                for &v in p.iter() {
                    LittleEndian::write_f32(&mut out[off..off + 4], v as f32);
                    off += 4;
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut fields: Vec<(String, String)> = Vec::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let rel = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + rel])
                .map_err(|_| Error::Format("checkpoint header is not text".into()))?;
            pos += rel + 1;
            if first {
                if line != MAGIC {
                    return Err(Error::Format(format!(
                        "not a checkpoint: expected '{MAGIC}', got '{line}'"
                    )));
                }
                first = false;
                continue;
            }
            if line == END {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("malformed header line '{line}'")))?;
            fields.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks '{key}'")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value '{v}' for '{key}'")))
        }
        let version: u32 = num("version", get("version")?)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version: expected {FORMAT_VERSION}, got {version}"
            )));
        }
        let component: Component = get("component")?.parse()?;
        let data_dim: usize = num("data_dim", get("data_dim")?)?;
        let sde_vals: Vec<f64> = get("sde")?
            .split(' ')
            .map(|v| num("sde", v))
            .collect::<Result<_>>()?;
        if sde_vals.len() != 3 {
            return Err(Error::Format("sde needs beta_min beta_max t_end".into()));
        }
        let sde = SdeSpec::new(sde_vals[0], sde_vals[1], sde_vals[2], data_dim)
            .map_err(|e| Error::Format(e.to_string()))?;
        let n_nets: usize = num("nets", get("nets")?)?;
        let mut specs = Vec::with_capacity(n_nets);
        for i in 0..n_nets {
            let name = get(&format!("net.{i}.name"))?.to_string();
            let widths: Vec<usize> = get(&format!("net.{i}.widths"))?
                .split(' ')
                .map(|v| num("widths", v))
                .collect::<Result<_>>()?;
            let act: Activation = get(&format!("net.{i}.activation"))?
                .parse()
                .map_err(|_| Error::Format(format!("bad activation for net {i}")))?;
            let tf: usize = num("time_features", get(&format!("net.{i}.time_features"))?)?;
            let spec = NetSpec::new(widths, act, tf).map_err(|e| Error::Format(e.to_string()))?;
            specs.push((name, spec));
        }
        let declared: usize = num("param_count", get("param_count")?)?;
        let implied: usize = specs.iter().map(|(_, s)| s.param_count()).sum();
        if declared != implied {
            return Err(Error::Format(format!(
                "param_count: header declares {declared}, net specs imply {implied}"
            )));
        }
        let payload = &bytes[pos..];
        if payload.len() != 4 * declared {
            return Err(Error::Format(format!(
                "payload length: expected {} bytes, got {}",
                4 * declared,
                payload.len()
            )));
        }
        let mut off = 0;
        let mut nets = Vec::with_capacity(n_nets);
        for (name, spec) in specs {
            let params = spec
                .param_shapes()
                .into_iter()
                .map(|(r, c)| {
                    let m = Mat::from_shape_fn((r, c), |(i, j)| {
                        let at = off + 4 * (i * c + j);
                        LittleEndian::read_f32(&payload[at..at + 4]) as f64
                    });
                    off += 4 * r * c;
                    m
                })
                .collect();
            nets.push((name, Mlp::from_params(spec, params)?));
        }
        Ok(Self {
            component,
            seed: num("seed", get("seed")?)?,
            iteration: num("iteration", get("iteration")?)?,
            data_dim,
            latent_dim: num("latent_dim", get("latent_dim")?)?,
            sde,
            nets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
