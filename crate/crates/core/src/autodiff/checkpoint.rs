//! Checkpoint files: a UTF-8 header followed by a little-endian `f32`
//! payload.
//!
//! ```text
//! AVSRCKPT
//! format_version 1
//! config <bytes>
//! <config text, exactly <bytes> bytes>
//! norm <name> <dim>
//! mean <v1> ... <vdim>
//! var <v1> ... <vdim>
//! param <name> <trainable 0|1> <offset> <d1>x<d2>...
//! end <payload bytes>
//! <payload>
//! ```
//!
//! Offsets count `f32` values from the start of the payload.

use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "AVSRCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Text of the run configuration that produced the parameters.
    pub config: String,
    pub norms: Vec<(String, NormStats)>,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn norm(&self, name: &str) -> Option<&NormStats> {
        self.norms.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("format_version {CHECKPOINT_VERSION}\n"));
        head.push_str(&format!("config {}\n", self.config.len()));
        head.push_str(&self.config);
        head.push('\n');
        for (name, stats) in &self.norms {
            head.push_str(&format!("norm {name} {}\n", stats.dim()));
            head.push_str("mean");
            for v in &stats.mean {
                head.push_str(&format!(" {v:?}"));
            }
            head.push_str("\nvar");
            for v in &stats.var {
                head.push_str(&format!(" {v:?}"));
            }
            head.push('\n');
        }
        let mut offset = 0usize;
        for p in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!(
                "param {} {} {} {}\n",
                p.name,
                u8::from(p.trainable),
                offset,
                dims.join("x")
            ));
            offset += p.value.numel();
        }
        head.push_str(&format!("end {}\n", offset * 4));
        let mut bytes = head.into_bytes();
        bytes.reserve(offset * 4);
        for p in self.params.iter() {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.line().ok_or_else(|| bad("truncated header".into()))?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic `{magic}`")));
        }
        let version = cur.line().ok_or_else(|| bad("missing version".into()))?;
        let version: u32 = version
            .strip_prefix("format_version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad version line `{version}`")))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let cfg_line = cur.line().ok_or_else(|| bad("missing config".into()))?;
        let cfg_len: usize = cfg_line
            .strip_prefix("config ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad config line `{cfg_line}`")))?;
        let cfg_bytes = cur.take(cfg_len).ok_or_else(|| bad("truncated config".into()))?;
        let config = String::from_utf8(cfg_bytes.to_vec()).map_err(|_| bad("config is not UTF-8".into()))?;
        if cur.take(1) != Some(b"\n") {
            return Err(bad("config not newline-terminated".into()));
        }

        let mut norms = Vec::new();
        let mut entries = Vec::new();
        let payload_len = loop {
            let line = cur.line().ok_or_else(|| bad("missing `end` line".into()))?;
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["norm", name, dim] => {
                    let dim: usize = dim.parse().map_err(|_| bad(format!("bad norm dim in `{line}`")))?;
                    let mean = parse_floats(cur.line(), "mean", dim).ok_or_else(|| bad(format!("bad mean for {name}")))?;
                    let var = parse_floats(cur.line(), "var", dim).ok_or_else(|| bad(format!("bad var for {name}")))?;
                    norms.push((name.to_string(), NormStats { mean, var }));
                }
                ["param", name, trainable, offset, dims] => {
                    let trainable = match *trainable {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad(format!("bad trainable flag in `{line}`"))),
                    };
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
                    let shape: Vec<usize> = dims
                        .split('x')
                        .map(|d| d.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("bad shape in `{line}`")))?;
                    entries.push((name.to_string(), trainable, offset, shape));
                }
                ["end", n] => break n.parse::<usize>().map_err(|_| bad(format!("bad end line `{line}`")))?,
                _ => return Err(bad(format!("unexpected header line `{line}`"))),
            }
        };
        let payload = cur.take(payload_len).ok_or_else(|| bad("truncated payload".into()))?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after payload".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut params = ParamSet::new();
        for (name, trainable, offset, shape) in entries {
            let n: usize = shape.iter().product();
            let data = floats
                .get(offset..offset + n)
                .ok_or_else(|| bad(format!("parameter {name} exceeds payload")))?
                .to_vec();
            if params.id(&name).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            params.add(name, Tensor::from_vec(&shape, data)?, trainable);
        }
        Ok(Self { config, norms, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes, path)
    }
}

fn parse_floats(line: Option<&str>, key: &str, dim: usize) -> Option<Vec<f32>> {
    let mut it = line?.split(' ');
    if it.next()? != key {
        return None;
    }
    let v: Vec<f32> = it.map(|s| s.parse().ok()).collect::<Option<_>>()?;
    (v.len() == dim).then_some(v)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Option<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest.iter().position(|&b| b == b'\n')?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).ok()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }
}
