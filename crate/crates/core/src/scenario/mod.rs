//! Cell-free network layouts, channel realizations and MRT effective gains.
//!
//! APs sit on a regular grid at a fixed height above a square area; UEs are
//! dropped uniformly on the ground. Each AP–UE link gets a log-distance path
//! loss with log-normal shadowing and i.i.d. Rayleigh small-scale fading over
//! the AP's antennas. With maximum-ratio precoding, AP `l` sees the effective
//! gain `h[l][k][j] = |h_{l,k}^H h_{l,j}|² / ‖h_{l,j}‖²`.

pub(crate) mod dataset;

pub use dataset::{Dataset, GainStats, DATASET_MAGIC, DATASET_VERSION};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical configuration of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub n_aps: usize,
    pub n_ues: usize,
    pub n_antennas: usize,
    /// Side of the square coverage area, meters.
    pub area_side: f64,
    /// AP height above the UEs, meters.
    pub ap_height: f64,
    pub pathloss_exp: f64,
    /// Path loss at 1 m, dB.
    pub pathloss_const: f64,
    /// Shadow fading standard deviation, dB.
    pub shadow_std: f64,
    /// Receiver noise power σ², watts.
    pub noise_power: f64,
    /// Power amplifier inefficiency μ.
    pub amp_inefficiency: f64,
    /// Static power consumption P_c, watts.
    pub static_power: f64,
    /// Minimum per-link gain (dB) for an AP to hold CSI of and serve a UE.
    pub serve_threshold: Option<f64>,
    /// Bandwidth, Hz.
    pub bandwidth: f64,
}

/// `10^(dbm / 10)` mW expressed in watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            n_aps: 15,
            n_ues: 15,
            n_antennas: 5,
            area_side: 100.0,
            ap_height: 10.0,
            pathloss_exp: 3.67,
            pathloss_const: -30.5,
            shadow_std: 4.0,
            noise_power: dbm_to_watts(-86.0),
            amp_inefficiency: 1.0,
            static_power: 4.0,
            serve_threshold: None,
            bandwidth: 10e6,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.n_aps == 0 || self.n_ues == 0 || self.n_antennas == 0 {
            return bad("n_aps, n_ues and n_antennas must be ≥ 1");
        }
        let positive = [
            ("area_side", self.area_side),
            ("noise_power", self.noise_power),
            ("amp_inefficiency", self.amp_inefficiency),
            ("static_power", self.static_power),
            ("bandwidth", self.bandwidth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        let finite = [
            ("ap_height", self.ap_height),
            ("pathloss_exp", self.pathloss_exp),
            ("pathloss_const", self.pathloss_const),
            ("shadow_std", self.shadow_std),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be finite, got {v}")));
            }
        }
        if self.ap_height < 0.0 || self.shadow_std < 0.0 {
            return bad("ap_height and shadow_std must be non-negative");
        }
        if let Some(t) = self.serve_threshold {
            if !t.is_finite() {
                return bad("serve_threshold must be finite or none");
            }
        }
        Ok(())
    }

    /// Large-scale gain (linear) of a link at `distance` meters with shadowing `shadow_db`.
    pub fn large_scale_gain(&self, distance: f64, shadow_db: f64) -> Result<f64> {
        large_scale_gain(distance, shadow_db, self.pathloss_exp, self.pathloss_const)
    }
}

/// `10^((c − 10·α·log10(d) + shadow) / 10)`.
pub fn large_scale_gain(
    distance: f64,
    shadow_db: f64,
    pathloss_exp: f64,
    pathloss_const: f64,
) -> Result<f64> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::Domain(distance));
    }
    let db = pathloss_const - 10.0 * pathloss_exp * distance.log10() + shadow_db;
    Ok(10f64.powf(db / 10.0))
}

/// AP and UE positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub ap_positions: Vec<[f64; 3]>,
    pub ue_positions: Vec<[f64; 2]>,
}

impl Topology {
    /// 3-D distance between AP `l` and UE `k`.
    pub fn distance(&self, l: usize, k: usize) -> f64 {
        let a = self.ap_positions[l];
        let u = self.ue_positions[k];
        ((a[0] - u[0]).powi(2) + (a[1] - u[1]).powi(2) + a[2].powi(2)).sqrt()
    }
}

/// Row-major AP grid over ⌈√L⌉² cells (first `L` cells used); UEs uniform.
pub fn generate_topology<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> Topology {
    Topology {
        ap_positions: ap_grid(params.n_aps, params.area_side, params.ap_height),
        ue_positions: (0..params.n_ues)
            .map(|_| {
                [
                    rng.gen::<f64>() * params.area_side,
                    rng.gen::<f64>() * params.area_side,
                ]
            })
            .collect(),
    }
}

fn ap_grid(n_aps: usize, side: f64, height: f64) -> Vec<[f64; 3]> {
    let g = (n_aps as f64).sqrt().ceil() as usize;
    let cell = side / g as f64;
    (0..n_aps)
        .map(|i| {
            let (row, col) = (i / g, i % g);
            [
                (col as f64 + 0.5) * cell,
                (row as f64 + 0.5) * cell,
                height,
            ]
        })
        .collect()
}

/// i.i.d. CN(0, `large_gain`) entries.
pub fn small_scale_channel<R: Rng + ?Sized>(
    rng: &mut R,
    n_antennas: usize,
    large_gain: f64,
) -> Vec<Complex64> {
    let s = (large_gain / 2.0).sqrt();
    (0..n_antennas)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re * s, im * s)
        })
        .collect()
}

/// Complex channel vectors `h[l][:, k]`, stored AP-major as `[l][n][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawChannels {
    pub n_aps: usize,
    pub n_antennas: usize,
    pub n_ues: usize,
    pub data: Vec<Complex64>,
}

impl RawChannels {
    pub fn zeros(n_aps: usize, n_antennas: usize, n_ues: usize) -> Self {
        Self {
            n_aps,
            n_antennas,
            n_ues,
            data: vec![Complex64::new(0.0, 0.0); n_aps * n_antennas * n_ues],
        }
    }

    pub fn at(&self, l: usize, n: usize, k: usize) -> Complex64 {
        self.data[(l * self.n_antennas + n) * self.n_ues + k]
    }

    pub fn set(&mut self, l: usize, n: usize, k: usize, v: Complex64) {
        self.data[(l * self.n_antennas + n) * self.n_ues + k] = v;
    }
}

/// MRT effective gains, `L × K × K` AP-major; zero-norm columns give zero gains.
pub fn effective_gains(raw: &RawChannels) -> Vec<f64> {
    let (nl, nn, nk) = (raw.n_aps, raw.n_antennas, raw.n_ues);
    let mut out = vec![0.0; nl * nk * nk];
    for l in 0..nl {
        let norm2: Vec<f64> = (0..nk)
            .map(|k| (0..nn).map(|n| raw.at(l, n, k).norm_sqr()).sum())
            .collect();
        for k in 0..nk {
            for j in 0..nk {
                let idx = (l * nk + k) * nk + j;
                if k == j {
                    out[idx] = norm2[k];
                    continue;
                }
                if norm2[j] == 0.0 {
                    continue;
                }
                let inner: Complex64 = (0..nn).map(|n| raw.at(l, n, k).conj() * raw.at(l, n, j)).sum();
                // Cauchy–Schwarz bound, restored after rounding
                out[idx] = (inner.norm_sqr() / norm2[j]).min(norm2[k]);
            }
        }
    }
    out
}

/// One network realization: the per-AP `K × K` gain matrices and the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub n_aps: usize,
    pub n_ues: usize,
    /// `L × K × K`, AP-major, row `k` = receiving UE, column `j` = precoded stream.
    pub gains: Vec<f64>,
    pub topology: Topology,
    pub raw: Option<RawChannels>,
}

impl ChannelSample {
    pub fn from_gains(n_aps: usize, n_ues: usize, gains: Vec<f64>) -> Self {
        assert_eq!(gains.len(), n_aps * n_ues * n_ues, "gain buffer size");
        Self {
            n_aps,
            n_ues,
            gains,
            topology: Topology {
                ap_positions: vec![[0.0; 3]; n_aps],
                ue_positions: vec![[0.0; 2]; n_ues],
            },
            raw: None,
        }
    }

    #[inline]
    pub fn gain(&self, l: usize, k: usize, j: usize) -> f64 {
        self.gains[(l * self.n_ues + k) * self.n_ues + j]
    }

    /// `served[l * K + k]`: whether AP `l` holds CSI for UE `k` under `threshold_db`.
    pub fn served_mask(&self, threshold_db: Option<f64>) -> Vec<bool> {
        let (nl, nk) = (self.n_aps, self.n_ues);
        (0..nl * nk)
            .map(|i| match threshold_db {
                None => true,
                Some(t) => {
                    let g = self.gain(i / nk, i % nk, i % nk);
                    g > 0.0 && 10.0 * g.log10() >= t
                }
            })
            .collect()
    }

    /// Gains as seen by the APs: rows and columns of unserved UEs zeroed.
    pub fn observed_gains(&self, threshold_db: Option<f64>) -> Vec<f64> {
        if threshold_db.is_none() {
            return self.gains.clone();
        }
        let mask = self.served_mask(threshold_db);
        let nk = self.n_ues;
        let mut g = self.gains.clone();
        for l in 0..self.n_aps {
            for k in 0..nk {
                for j in 0..nk {
                    if !mask[l * nk + k] || !mask[l * nk + j] {
                        g[(l * nk + k) * nk + j] = 0.0;
                    }
                }
            }
        }
        g
    }

    /// Reorders UEs (`perm[new] = old`) on both axes of every AP matrix.
    pub fn permute_ues(&self, perm: &[usize]) -> Self {
        let nk = self.n_ues;
        assert_eq!(perm.len(), nk);
        let mut gains = vec![0.0; self.gains.len()];
        for l in 0..self.n_aps {
            for k in 0..nk {
                for j in 0..nk {
                    gains[(l * nk + k) * nk + j] = self.gain(l, perm[k], perm[j]);
                }
            }
        }
        Self {
            gains,
            topology: Topology {
                ap_positions: self.topology.ap_positions.clone(),
                ue_positions: perm.iter().map(|&p| self.topology.ue_positions[p]).collect(),
            },
            raw: None,
            ..*self
        }
    }

    /// Reorders APs (`perm[new] = old`).
    pub fn permute_aps(&self, perm: &[usize]) -> Self {
        let block = self.n_ues * self.n_ues;
        assert_eq!(perm.len(), self.n_aps);
        let gains = perm
            .iter()
            .flat_map(|&p| self.gains[p * block..(p + 1) * block].iter().copied())
            .collect();
        Self {
            gains,
            topology: Topology {
                ap_positions: perm.iter().map(|&p| self.topology.ap_positions[p]).collect(),
                ue_positions: self.topology.ue_positions.clone(),
            },
            raw: None,
            ..*self
        }
    }
}

/// Draws one sample: fresh UE drop, shadowing per link, Rayleigh fading.
pub fn generate_sample<R: Rng + ?Sized>(
    params: &SystemParams,
    rng: &mut R,
    keep_raw: bool,
) -> Result<ChannelSample> {
    let topology = generate_topology(params, rng);
    let (nl, nk, nn) = (params.n_aps, params.n_ues, params.n_antennas);
    let shadow = Normal::new(0.0, params.shadow_std)
        .map_err(|e| Error::InvalidParams(format!("shadow_std: {e}")))?;
    let mut raw = RawChannels::zeros(nl, nn, nk);
    for l in 0..nl {
        for k in 0..nk {
            let s_db = shadow.sample(rng);
            let beta = params.large_scale_gain(topology.distance(l, k), s_db)?;
            for (n, h) in small_scale_channel(rng, nn, beta).into_iter().enumerate() {
                raw.set(l, n, k, h);
            }
        }
    }
    let gains = effective_gains(&raw);
    Ok(ChannelSample {
        n_aps: nl,
        n_ues: nk,
        gains,
        topology,
        raw: keep_raw.then_some(raw),
    })
}
