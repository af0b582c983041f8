//! Checkpoint files: a text manifest, one blank line, then the parameters as
//! little-endian `f32` arrays in manifest order.
//!
//! ```text
//! hmp-checkpoint v1
//! stage = stay
//! seed = 0
//! config.d_r = 16
//! param stay.enc.w_i 16 32
//! crc32 = 1c291ca3
//!
//! <payload>
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "hmp-checkpoint v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stay,
    Admission,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stay => "stay",
            Stage::Admission => "admission",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stay" => Ok(Stage::Stay),
            "admission" => Ok(Stage::Admission),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    /// echo of the producing configuration
    pub config: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::StageMismatch {
                expected: expected.to_string(),
                found: self.stage.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(4 * self.params.numel());
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut head = format!("{MAGIC}\nstage = {}\nseed = {}\n", self.stage, self.seed);
        for (k, v) in &self.config {
            head.push_str(&format!("config.{k} = {v}\n"));
        }
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("param {name} {}\n", dims.join(" ")));
        }
        head.push_str(&format!("crc32 = {:08x}\n\n", crc32fast::hash(&payload)));
        let mut out = head.into_bytes();
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::format(0, "manifest is not terminated by a blank line"))?;
        let head = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::format(0, "manifest is not UTF-8"))?;
        let payload = &bytes[split + 2..];

        let mut lines = head.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(Error::format(1, format!("expected `{MAGIC}`"))),
        }
        let mut stage = None;
        let mut seed = None;
        let mut crc = None;
        let mut config = Vec::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| Error::format(ln, "param without name"))?;
                let shape = parts
                    .map(|p| p.parse::<usize>().map_err(|_| Error::format(ln, format!("bad extent `{p}`"))))
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name.to_string(), shape));
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(ln, format!("unrecognized line `{line}`")))?;
            match k {
                "stage" => stage = Some(v.parse::<Stage>().map_err(|e| Error::format(ln, e.to_string()))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| Error::format(ln, "bad seed"))?),
                "crc32" => {
                    crc = Some(u32::from_str_radix(v, 16).map_err(|_| Error::format(ln, "bad crc32"))?)
                }
                _ => match k.strip_prefix("config.") {
                    Some(key) => config.push((key.to_string(), v.to_string())),
                    None => return Err(Error::format(ln, format!("unknown field `{k}`"))),
                },
            }
        }
        let stage = stage.ok_or_else(|| Error::format(0, "missing stage"))?;
        let seed = seed.ok_or_else(|| Error::format(0, "missing seed"))?;
        let expected = crc.ok_or_else(|| Error::format(0, "missing crc32"))?;

        let want: usize = shapes.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
        if payload.len() != want {
            return Err(Error::format(
                0,
                format!("payload is {} bytes, manifest describes {want}", payload.len()),
            ));
        }
        let actual = crc32fast::hash(payload);
        if actual != expected {
            return Err(Error::Checksum { expected, actual });
        }
        let mut params = ParamStore::new();
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            params.insert(name, Tensor::new(&shape, data, true)?);
        }
        Ok(Checkpoint {
            stage,
            seed,
            config,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
