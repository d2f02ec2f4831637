//! Sample collections and the binary `CFEE` dataset file.
//!
//! Layout (all little-endian): magic `CFEE`, version `u32`, then `L`, `K`,
//! `N`, sample count as `u32`, the thirteen [`SystemParams`] fields as `f64`
//! in declaration order (counts widened to `f64`, a missing serve threshold
//! stored as NaN), and per sample `L×3` AP coordinates, `K×2` UE coordinates
//! and `L×K×K` gains.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_sample, ChannelSample, SystemParams, Topology};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CFEE";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: SystemParams,
    pub samples: Vec<ChannelSample>,
    /// Generation seed; not stored in the file, so `None` after loading.
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-sample generator: stream `index` of the ChaCha8 family keyed by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl Dataset {
    pub fn generate(params: &SystemParams, count: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        if count == 0 {
            return Err(Error::InvalidParams("count must be ≥ 1".into()));
        }
        let samples = (0..count)
            .into_par_iter()
            .map(|i| generate_sample(params, &mut sample_rng(seed, i as u64), false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: params.clone(),
            samples,
            seed: Some(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean and population standard deviation over every stored gain entry.
    pub fn gain_stats(&self) -> GainStats {
        let mut count = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for g in self.samples.iter().flat_map(|s| s.gains.iter()) {
            count += 1;
            let d = g - mean;
            mean += d / count as f64;
            m2 += d * (g - mean);
        }
        GainStats {
            mean,
            std: if count > 0 { (m2 / count as f64).sqrt() } else { 0.0 },
            count,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let p = &self.params;
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::InvalidParams(format!("{what} exceeds u32")))
        };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for (v, what) in [
            (p.n_aps, "n_aps"),
            (p.n_ues, "n_ues"),
            (p.n_antennas, "n_antennas"),
            (self.samples.len(), "count"),
        ] {
            w.write_all(&u32_of(v, what)?.to_le_bytes())?;
        }
        for v in params_to_f64(p) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::new();
        for s in &self.samples {
            if s.n_aps != p.n_aps || s.n_ues != p.n_ues {
                return Err(Error::Incompatible("sample dimensions differ from params".into()));
            }
            buf.clear();
            for a in &s.topology.ap_positions {
                a.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
            for u in &s.topology.ue_positions {
                u.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
            s.gains.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            kind: "dataset",
            reason,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fmt(format!("header: {e}")))?;
        if &magic != DATASET_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let nl = read_u32(&mut r)? as usize;
        let nk = read_u32(&mut r)? as usize;
        let nn = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let mut fields = [0.0; 13];
        for f in fields.iter_mut() {
            *f = read_f64(&mut r)?;
        }
        let params = params_from_f64(&fields);
        if (params.n_aps, params.n_ues, params.n_antennas) != (nl, nk, nn) {
            return Err(fmt("header counts disagree with parameter block".into()));
        }
        let per_sample = nl * 3 + nk * 2 + nl * nk * nk;
        let mut buf = vec![0u8; per_sample * 8];
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|e| fmt(format!("sample {i} truncated: {e}")))?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (aps, rest) = vals.split_at(nl * 3);
            let (ues, gains) = rest.split_at(nk * 2);
            samples.push(ChannelSample {
                n_aps: nl,
                n_ues: nk,
                gains: gains.to_vec(),
                topology: Topology {
                    ap_positions: aps.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    ue_positions: ues.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                },
                raw: None,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(fmt("trailing bytes after last sample".into()));
        }
        Ok(Self {
            params,
            samples,
            seed: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Dataset restricted to `indices` (same params, no seed).
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            params: self.params.clone(),
            samples: indices.into_iter().map(|i| self.samples[i].clone()).collect(),
            seed: None,
        }
    }
}

fn params_to_f64(p: &SystemParams) -> [f64; 13] {
    [
        p.n_aps as f64,
        p.n_ues as f64,
        p.n_antennas as f64,
        p.area_side,
        p.ap_height,
        p.pathloss_exp,
        p.pathloss_const,
        p.shadow_std,
        p.noise_power,
        p.amp_inefficiency,
        p.static_power,
        p.serve_threshold.unwrap_or(f64::NAN),
        p.bandwidth,
    ]
}

fn params_from_f64(f: &[f64; 13]) -> SystemParams {
    SystemParams {
        n_aps: f[0] as usize,
        n_ues: f[1] as usize,
        n_antennas: f[2] as usize,
        area_side: f[3],
        ap_height: f[4],
        pathloss_exp: f[5],
        pathloss_const: f[6],
        shadow_std: f[7],
        noise_power: f[8],
        amp_inefficiency: f[9],
        static_power: f[10],
        serve_threshold: (!f[11].is_nan()).then_some(f[11]),
        bandwidth: f[12],
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format {
        kind: "binary",
        reason: format!("truncated u32: {e}"),
    })?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format {
        kind: "binary",
        reason: format!("truncated f64: {e}"),
    })?;
    Ok(f64::from_le_bytes(b))
}
