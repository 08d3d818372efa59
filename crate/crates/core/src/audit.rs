//! Parameter and multiply-accumulate counting, against reference counts.
//!
//! Counting works from parameter shapes alone, so auditing the largest preset
//! never allocates its weights.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{ModelConfig, Patternformer, TABLE1_PRESETS};

pub const MAC_CONVENTION: &str = "one multiply-add counts as one FLOP; conv = Cout*Cin*k*k*Ho*Wo, \
linear = in*out*positions, attention adds 2*T^2*D per block; norms, pooling and activations are not counted";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub path: String,
    pub params: usize,
    pub macs: u64,
}

impl CostEntry {
    pub fn new(path: impl Into<String>, params: usize, macs: u64) -> Self {
        CostEntry {
            path: path.into(),
            params,
            macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub params: usize,
    /// Per sample.
    pub macs: u64,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn new(entries: Vec<CostEntry>) -> Self {
        CostReport {
            params: entries.iter().map(|e| e.params).sum(),
            macs: entries.iter().map(|e| e.macs).sum(),
            entries,
        }
    }

    /// Totals of the entries under a dotted path prefix.
    pub fn under(&self, prefix: &str) -> (usize, u64) {
        self.entries
            .iter()
            .filter(|e| crate::nn::under(&e.path, prefix))
            .fold((0, 0), |(p, m), e| (p + e.params, m + e.macs))
    }
}

pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(cost_report(config)?.params)
}

pub fn count_macs(config: &ModelConfig) -> Result<u64> {
    Ok(cost_report(config)?.macs)
}

pub fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    Patternformer::describe(config)?.0.cost_report()
}

/// Published figures for one preset, with the tolerance each is held to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceTarget {
    pub name: &'static str,
    pub params: f64,
    pub gmacs: f64,
    pub param_band: f64,
    /// `None` when the figure is reported but not held to a band.
    pub mac_band: Option<f64>,
    /// Known discrepancy between the published figure and any consistent width rule.
    pub flagged: bool,
}

pub const REFERENCE_TARGETS: [ReferenceTarget; 7] = [
    ReferenceTarget { name: "Res34-ViT_S", params: 42.8e6, gmacs: 6.6, param_band: 0.02, mac_band: Some(0.10), flagged: false },
    ReferenceTarget { name: "Res34-ViT_B", params: 106.6e6, gmacs: 15.0, param_band: 0.02, mac_band: Some(0.10), flagged: false },
    ReferenceTarget { name: "Res50-ViT_S", params: 45.2e6, gmacs: 7.0, param_band: 0.02, mac_band: Some(0.10), flagged: false },
    ReferenceTarget { name: "Res50-ViT_B", params: 109.0e6, gmacs: 15.4, param_band: 0.02, mac_band: Some(0.10), flagged: false },
    ReferenceTarget { name: "Efficient-T", params: 11.9e6, gmacs: 1.6, param_band: 0.35, mac_band: None, flagged: true },
    ReferenceTarget { name: "Efficient-S", params: 29.8e6, gmacs: 3.5, param_band: 0.02, mac_band: None, flagged: false },
    ReferenceTarget { name: "Efficient-B", params: 56.7e6, gmacs: 6.3, param_band: 0.35, mac_band: None, flagged: true },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub target: ReferenceTarget,
    pub params: usize,
    pub macs: u64,
    pub report: CostReport,
}

impl AuditRow {
    pub fn rel_err_params(&self) -> f64 {
        self.params as f64 / self.target.params - 1.0
    }

    pub fn rel_err_macs(&self) -> f64 {
        self.macs as f64 / (self.target.gmacs * 1e9) - 1.0
    }

    pub fn params_ok(&self) -> bool {
        self.rel_err_params().abs() <= self.target.param_band
    }

    pub fn macs_ok(&self) -> bool {
        self.target.mac_band.is_none_or(|b| self.rel_err_macs().abs() <= b)
    }

    pub fn within_band(&self) -> bool {
        self.params_ok() && self.macs_ok()
    }
}

/// Audits every reference preset at `resolution` with a `num_classes` head.
pub fn audit_family(resolution: usize, num_classes: usize) -> Result<Vec<AuditRow>> {
    REFERENCE_TARGETS
        .iter()
        .zip(TABLE1_PRESETS)
        .map(|(target, name)| {
            let mut cfg = ModelConfig::preset(name)?;
            cfg.resolution = resolution;
            cfg.num_classes = num_classes;
            let report = cost_report(&cfg)?;
            Ok(AuditRow {
                target: *target,
                params: report.params,
                macs: report.macs,
                report,
            })
        })
        .collect()
}

/// True when every Res*-ViT* row lies within its band; these rows decide the exit status.
pub fn audit_passes(rows: &[AuditRow]) -> bool {
    rows.iter()
        .filter(|r| r.target.name.starts_with("Res"))
        .all(AuditRow::within_band)
}

pub fn render_csv(rows: &[AuditRow]) -> String {
    let mut s = String::from("name,params,macs,ref_params,ref_macs,rel_err_params,rel_err_macs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            r.target.name,
            r.params,
            r.macs,
            r.target.params as u64,
            (r.target.gmacs * 1e9) as u64,
            r.rel_err_params(),
            r.rel_err_macs()
        );
    }
    s
}

pub fn render_text(rows: &[AuditRow]) -> String {
    let mut s = format!("# MAC convention: {MAC_CONVENTION}\n");
    let _ = writeln!(
        s,
        "{:<12} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}  status",
        "model", "params", "ref", "err", "GMACs", "ref", "err"
    );
    for r in rows {
        let status = match (r.within_band(), r.target.flagged) {
            (true, false) => "ok".to_string(),
            (true, true) => format!("ok (discrepancy flagged, band +/-{:.0}%)", r.target.param_band * 100.0),
            (false, _) => "OUT OF BAND".to_string(),
        };
        let _ = writeln!(
            s,
            "{:<12} {:>9.2}M {:>9.1}M {:>+7.2}% {:>8.2} {:>8.1} {:>+7.2}%  {}",
            r.target.name,
            r.params as f64 / 1e6,
            r.target.params / 1e6,
            100.0 * r.rel_err_params(),
            r.macs as f64 / 1e9,
            r.target.gmacs,
            100.0 * r.rel_err_macs(),
            status
        );
    }
    s
}
