//! Configuration and time-series files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{BatterySpec, DamSpec, FfsSpec, Series, SystemSpec, TimeSeries, TurbineFlow, SECONDS_PER_HOUR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamEntry {
    #[serde(default)]
    pub name: String,
    pub v_min: f64,
    pub v_max: f64,
    pub head_coeffs: [f64; 3],
    pub h0: f64,
    pub eta: f64,
    pub d: f64,
    pub phi_max: f64,
    pub k_h: f64,
    pub turbine_flow: TurbineFlow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfsEntry {
    #[serde(default)]
    pub name: String,
    pub p_max: f64,
    pub k_f: f64,
}

/// Paths of the driving series, relative to the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<PathBuf>,
    /// dam index -> inflow CSV
    #[serde(default)]
    pub inflow: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Initial normalized volumes in dam order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_volumes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_charge: Option<f64>,
    /// Level-1 multiplier per cascade link, USD/m³.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Vec<f64>>,
}

/// Whole configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunEntry>,
    #[serde(default)]
    pub dam: BTreeMap<String, DamEntry>,
    #[serde(default)]
    pub ffs: BTreeMap<String, FfsEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatterySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<SeriesEntry>,
}

fn parse_index(section: &str, key: &str) -> Result<usize> {
    key.parse()
        .map_err(|_| Error::Validation(vec![format!("[{section}.{key}]: section index must be a nonnegative integer")]))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Validation(d) => Error::io(path, d.join("; ")),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<SystemSpec> {
        let mut dams = Vec::new();
        for (key, e) in &self.dam {
            let index = parse_index("dam", key)?;
            dams.push(DamSpec {
                index,
                name: if e.name.is_empty() { format!("dam {index}") } else { e.name.clone() },
                v_min: e.v_min,
                v_max: e.v_max,
                head_coeffs: e.head_coeffs,
                h0: e.h0,
                eta: e.eta,
                d: e.d,
                turbine_flow: e.turbine_flow.clone(),
                phi_max: e.phi_max,
                k_h: e.k_h,
                downstream: e.downstream,
                tau: e.tau,
            });
        }
        dams.sort_by_key(|d| d.index);
        let mut ffs = Vec::new();
        for (key, e) in &self.ffs {
            let index = parse_index("ffs", key)?;
            ffs.push(FfsSpec {
                index,
                name: if e.name.is_empty() { format!("ffs {index}") } else { e.name.clone() },
                p_max: e.p_max,
                k_f: e.k_f,
            });
        }
        ffs.sort_by_key(|f| f.index);
        Ok(SystemSpec {
            dams,
            ffs,
            battery: self.battery.clone(),
        })
    }

    pub fn from_system(spec: &SystemSpec) -> Self {
        let dam = spec
            .dams
            .iter()
            .map(|d| {
                (
                    d.index.to_string(),
                    DamEntry {
                        name: d.name.clone(),
                        v_min: d.v_min,
                        v_max: d.v_max,
                        head_coeffs: d.head_coeffs,
                        h0: d.h0,
                        eta: d.eta,
                        d: d.d,
                        phi_max: d.phi_max,
                        k_h: d.k_h,
                        turbine_flow: d.turbine_flow.clone(),
                        downstream: d.downstream,
                        tau: d.tau,
                    },
                )
            })
            .collect();
        let ffs = spec
            .ffs
            .iter()
            .map(|f| {
                (
                    f.index.to_string(),
                    FfsEntry {
                        name: f.name.clone(),
                        p_max: f.p_max,
                        k_f: f.k_f,
                    },
                )
            })
            .collect();
        ConfigFile {
            run: None,
            dam,
            ffs,
            battery: spec.battery.clone(),
            series: None,
        }
    }
}

/// Reads a `t_hours,value` CSV, multiplying every value by `factor`.
pub fn read_series(path: &Path, factor: f64) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::io(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "t_hours" || &headers[1] != "value" {
        return Err(Error::io(path, "expected header `t_hours,value`"));
    }
    let mut samples = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, e))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::io(path, format!("row {}: {e}", line + 1)))
        };
        samples.push((num(0)?, num(1)? * factor));
    }
    TimeSeries::new(samples).map_err(|e| Error::io(path, e))
}

/// Demand in kW.
pub fn read_demand(path: &Path) -> Result<TimeSeries> {
    read_series(path, 1.0)
}

/// Inflow file in m³/s, returned in m³/h.
pub fn read_inflow(path: &Path) -> Result<TimeSeries> {
    read_series(path, SECONDS_PER_HOUR)
}

pub fn write_series(path: &Path, series: &TimeSeries, factor: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    w.write_record(["t_hours", "value"]).map_err(|e| Error::io(path, e))?;
    for &(t, v) in series.samples() {
        w.write_record([t.to_string(), (v * factor).to_string()])
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Resolves the series named in the config (relative to `base`), with
/// explicit overrides taking precedence. Inflows default to zero only when
/// neither source names a file.
pub fn load_series(
    cfg: &ConfigFile,
    spec: &SystemSpec,
    base: &Path,
    demand_override: Option<&Path>,
    inflow_overrides: &BTreeMap<usize, PathBuf>,
    horizon: f64,
) -> Result<Series> {
    let entry = cfg.series.clone().unwrap_or_default();
    let demand_path = match (demand_override, &entry.demand) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => base.join(p),
        (None, None) => return Err(Error::Mismatch("no demand series given".into())),
    };
    let demand = read_demand(&demand_path)?;
    let mut inflows = Vec::new();
    for dam in &spec.dams {
        let path = inflow_overrides
            .get(&dam.index)
            .cloned()
            .or_else(|| entry.inflow.get(&dam.index.to_string()).map(|p| base.join(p)));
        let s = match path {
            Some(p) => read_inflow(&p)?,
            None => TimeSeries::constant(0.0, horizon),
        };
        inflows.push(s);
    }
    let series = Series { demand, inflows };
    series.check_horizon(horizon)?;
    Ok(series)
}
