//! PU-side link quality and SIM output power.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelSet;
use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, HermitianMatrix};
use crate::scenario::{to_db, watts_to_dbm, ScenarioConfig};

/// R_pu[i] = (P_sb/N_pu) Σ_r h*_{pu,s}[r,i] h_{pu,s}[r,i]ᵀ.
pub fn pu_covariance(channels: &ChannelSet, i: usize, config: &ScenarioConfig) -> HermitianMatrix {
    let n = config.num_elements();
    let n_pu = channels.h_pu_s.len();
    let mut r = CMat::zeros(n, n);
    for h in &channels.h_pu_s {
        let h = &h[i];
        r += h.conjugate() * h.transpose();
    }
    if n_pu > 0 {
        r *= Complex64::new(config.scene.p_sb_watts / n_pu as f64, 0.0);
    }
    HermitianMatrix::from_symmetrized(r)
}

/// S²[i] = (P_pb/N_pu) Σ_r |h_{pu,pb}[r,i]|².
pub fn pb_signal_power(channels: &ChannelSet, i: usize, config: &ScenarioConfig) -> f64 {
    let n_pu = channels.h_pu_pb.len();
    if n_pu == 0 {
        return 0.0;
    }
    let sum: f64 = channels.h_pu_pb.iter().map(|h| h[i].norm_sqr()).sum();
    config.scene.p_pb_watts / n_pu as f64 * sum
}

/// Average PU link quality for one set of SIM outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub sinr: Vec<f64>,
    pub sinr_bar: Vec<f64>,
    pub interference: Vec<f64>,
    pub se: Vec<f64>,
    pub se_bar: Vec<f64>,
    pub se_avg: f64,
    pub se_bar_avg: f64,
    pub p_sws: Option<f64>,
    pub qos_ratio: f64,
}

/// One CSV row of a [`LinkReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRow {
    pub subcarrier: usize,
    pub sinr_db: f64,
    pub sinr_bar_db: f64,
    pub interference_dbm: f64,
    pub se: f64,
    pub se_bar: f64,
}

impl LinkReport {
    pub fn rows(&self) -> Vec<LinkRow> {
        (0..self.sinr.len())
            .map(|i| LinkRow {
                subcarrier: i,
                sinr_db: to_db(self.sinr[i]),
                sinr_bar_db: to_db(self.sinr_bar[i]),
                // Zero interference is reported at a -400 dBm floor so CSVs stay finite.
                interference_dbm: if self.interference[i] > 0.0 {
                    watts_to_dbm(self.interference[i])
                } else {
                    -400.0
                },
                se: self.se[i],
                se_bar: self.se_bar[i],
            })
            .collect()
    }
}

fn check_dims(f_set: &[CVec], config: &ScenarioConfig) -> Result<()> {
    if f_set.len() != config.num_subcarriers() || f_set.iter().any(|f| f.len() != config.num_elements()) {
        return Err(Error::InvalidInput(format!(
            "expected {} vectors of length {}",
            config.num_subcarriers(),
            config.num_elements()
        )));
    }
    Ok(())
}

pub fn link_report(f_set: &[CVec], channels: &ChannelSet, config: &ScenarioConfig) -> Result<LinkReport> {
    check_dims(f_set, config)?;
    let sigma2 = config.noise_power();
    let n = config.num_subcarriers();
    let mut rep = LinkReport {
        sinr: Vec::with_capacity(n),
        sinr_bar: Vec::with_capacity(n),
        interference: Vec::with_capacity(n),
        se: Vec::with_capacity(n),
        se_bar: Vec::with_capacity(n),
        se_avg: 0.0,
        se_bar_avg: 0.0,
        p_sws: p_sws(f_set, config).ok(),
        qos_ratio: 1.0,
    };
    for (i, f) in f_set.iter().enumerate() {
        let s2 = pb_signal_power(channels, i, config);
        let i2 = pu_covariance(channels, i, config).quad_form(f).max(0.0);
        let sinr = s2 / (i2 + sigma2);
        let sinr_bar = s2 / sigma2;
        rep.sinr.push(sinr);
        rep.sinr_bar.push(sinr_bar);
        rep.interference.push(i2);
        rep.se.push((1.0 + sinr).log2());
        rep.se_bar.push((1.0 + sinr_bar).log2());
    }
    rep.se_avg = rep.se.iter().sum::<f64>() / n as f64;
    rep.se_bar_avg = rep.se_bar.iter().sum::<f64>() / n as f64;
    rep.qos_ratio = if rep.se_bar_avg > 0.0 { rep.se_avg / rep.se_bar_avg } else { 1.0 };
    Ok(rep)
}

/// P_sws = I·P_sb / Σ_i ‖f[i]‖².
pub fn p_sws(f_set: &[CVec], config: &ScenarioConfig) -> Result<f64> {
    let energy: f64 = f_set.iter().map(|f| f.norm_squared()).sum();
    if !(energy > 0.0) {
        return Err(Error::InvalidInput("P_sws undefined for all-zero SIM outputs".into()));
    }
    Ok(f_set.len() as f64 * config.scene.p_sb_watts / energy)
}

/// Factor to apply to P_sb so that P_sws equals the configured target.
pub fn normalize_psws(f_set: &[CVec], config: &ScenarioConfig) -> Result<f64> {
    Ok(config.scene.p_sws_target_watts / p_sws(f_set, config)?)
}
