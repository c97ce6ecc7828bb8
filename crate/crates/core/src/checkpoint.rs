//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CGCK" | version: u32 | config hash: [u8; 32] | section*
//! section = tag: [u8; 4] | length: u64 | payload
//! ```
//!
//! Sections: `PARM` (JSON shape manifest, then parameters as f32), `OPTM`
//! (Adam step then both moment vectors as f64), `TCHR` (teacher JSON, optional),
//! `RNGS` (random generator states as JSON) and `META` (counters as JSON).

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AdamState, InputShape, NetConfig, ParamSlot, PolicyNet, PolicyParams};
use crate::curriculum::Teacher;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub frames: u64,
    pub updates: u64,
    pub episodes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub trainer: ChaCha8Rng,
    pub workers: Vec<ChaCha8Rng>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub params: PolicyParams,
    pub teacher: Option<Teacher>,
    pub rngs: Option<RngStates>,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    net: NetConfig,
    input: InputShape,
    actions: usize,
    slots: Vec<ParamSlot>,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);

        let net = &self.params.net;
        let manifest = serde_json::to_vec(&Manifest {
            net: net.config.clone(),
            input: net.input,
            actions: net.actions,
            slots: net.slots().to_vec(),
        })?;
        let mut parm = Vec::with_capacity(12 + manifest.len() + 4 * self.params.weights.len());
        parm.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        parm.extend_from_slice(&manifest);
        parm.extend_from_slice(&(self.params.weights.len() as u64).to_le_bytes());
        for w in &self.params.weights {
            parm.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        section(&mut out, b"PARM", &parm);

        let adam = &self.params.adam;
        let mut optm = Vec::with_capacity(16 + 16 * adam.m.len());
        optm.extend_from_slice(&adam.t.to_le_bytes());
        optm.extend_from_slice(&(adam.m.len() as u64).to_le_bytes());
        for v in adam.m.iter().chain(&adam.v) {
            optm.extend_from_slice(&v.to_le_bytes());
        }
        section(&mut out, b"OPTM", &optm);

        if let Some(t) = &self.teacher {
            section(&mut out, b"TCHR", &serde_json::to_vec(t)?);
        }
        if let Some(r) = &self.rngs {
            section(&mut out, b"RNGS", &serde_json::to_vec(r)?);
        }
        section(&mut out, b"META", &serde_json::to_vec(&self.meta)?);
        Ok(out)
    }

    /// Parses a checkpoint. With `expected_hash` set, a different embedded
    /// hash is refused unless `force` is true.
    pub fn from_bytes(buf: &[u8], expected_hash: Option<&[u8; 32]>, force: bool) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if let Some(expected) = expected_hash {
            if expected != &config_hash && !force {
                return Err(Error::ConfigHashMismatch {
                    expected: hex::encode(expected),
                    found: hex::encode(config_hash),
                });
            }
        }

        let mut params = None;
        let mut adam = None;
        let mut teacher = None;
        let mut rngs = None;
        let mut meta = None;
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = usize::try_from(r.u64()?).map_err(|_| bad("section too large"))?;
            let mut s = Reader {
                buf: r.take(len)?,
                pos: 0,
            };
            match &tag {
                b"PARM" => {
                    let mlen = s.u32()? as usize;
                    let m: Manifest = serde_json::from_slice(s.take(mlen)?)?;
                    let net = PolicyNet::new(m.net, m.input, m.actions);
                    if net.slots() != m.slots.as_slice() {
                        return Err(bad("parameter manifest does not match the network"));
                    }
                    let n = s.u64()? as usize;
                    if n != net.param_count() {
                        return Err(bad(format!(
                            "{n} parameters, network needs {}",
                            net.param_count()
                        )));
                    }
                    let weights = s
                        .take(4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    params = Some((net, weights));
                }
                b"OPTM" => {
                    let t = s.u64()?;
                    let n = s.u64()? as usize;
                    let vals: Vec<f64> = s
                        .take(16 * n)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let (m, v) = vals.split_at(n);
                    adam = Some(AdamState {
                        m: m.to_vec(),
                        v: v.to_vec(),
                        t,
                    });
                }
                b"TCHR" => teacher = Some(serde_json::from_slice(s.buf)?),
                b"RNGS" => rngs = Some(serde_json::from_slice(s.buf)?),
                b"META" => meta = Some(serde_json::from_slice(s.buf)?),
                other => {
                    return Err(bad(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
            if matches!(&tag, b"PARM" | b"OPTM") && !s.done() {
                return Err(bad("trailing bytes in section"));
            }
        }
        let (net, weights) = params.ok_or_else(|| bad("missing PARM section"))?;
        let adam = adam.ok_or_else(|| bad("missing OPTM section"))?;
        if adam.m.len() != net.param_count() {
            return Err(bad("optimiser state does not match the parameters"));
        }
        Ok(Checkpoint {
            config_hash,
            params: PolicyParams { net, weights, adam },
            teacher,
            rngs,
            meta: meta.ok_or_else(|| bad("missing META section"))?,
        })
    }

    /// Writes through a temporary file so an interrupted save never clobbers
    /// the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<&[u8; 32]>, force: bool) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_hash, force)
    }
}
