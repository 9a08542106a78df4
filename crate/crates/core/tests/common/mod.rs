#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::path::PathBuf;

use cascade_dispatch::io::{load_series, ConfigFile};
use cascade_dispatch::system::*;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/uruguay")
}

pub fn uruguay_config() -> ConfigFile {
    ConfigFile::load(&data_dir().join("system.toml")).unwrap()
}

pub fn uruguay() -> System {
    System::new(uruguay_config().system().unwrap()).unwrap()
}

pub fn uruguay_series() -> Series {
    let cfg = uruguay_config();
    let sys = uruguay();
    load_series(&cfg, &sys.spec, &data_dir(), None, &BTreeMap::new(), 24.0).unwrap()
}

pub fn uruguay_dam(name: &str) -> DamSpec {
    uruguay().spec.dams.into_iter().find(|d| d.name == name).unwrap()
}

/// Small dam: 2·10⁶ m³ of storage, 100 m³/s outflow capacity, 60 m³/s turbines.
pub fn small_dam(index: usize, downstream: Option<usize>, tau: Option<f64>) -> DamSpec {
    DamSpec {
        index,
        name: format!("small {index}"),
        v_min: 1e6,
        v_max: 3e6,
        head_coeffs: [0.0, 10.0, 50.0],
        h0: 10.0,
        eta: 9.0,
        d: 1e-4,
        turbine_flow: TurbineFlow::Constant { value: 60.0 },
        phi_max: 100.0,
        k_h: 1e-3,
        downstream,
        tau,
    }
}

pub fn small_ffs() -> FfsSpec {
    FfsSpec {
        index: 1,
        name: "gas".into(),
        p_max: 3e4,
        k_f: 100.0,
    }
}

pub fn small_battery() -> BatterySpec {
    BatterySpec {
        capacity: 2e4,
        p_max_discharge: 5e3,
        p_max_charge: 4e3,
    }
}

/// One dam, one FFS, one battery.
pub fn toy_single() -> System {
    System::new(SystemSpec {
        dams: vec![small_dam(1, None, None)],
        ffs: vec![small_ffs()],
        battery: Some(small_battery()),
    })
    .unwrap()
}

/// Two dams in a cascade with a one-hour delay, one FFS, one battery.
pub fn toy_cascade() -> System {
    System::new(SystemSpec {
        dams: vec![small_dam(1, Some(2), Some(1.0)), small_dam(2, None, None)],
        ffs: vec![small_ffs()],
        battery: Some(small_battery()),
    })
    .unwrap()
}

/// Demand between 10⁴ and 3·10⁴ kW over `horizon` hours, inflow 30 m³/s per dam.
pub fn toy_series(sys: &System, horizon: f64) -> Series {
    let mut pts = Vec::new();
    let n = (horizon * 4.0) as usize;
    for k in 0..=n {
        let t = k as f64 * horizon / n as f64;
        pts.push((t, 2e4 + 1e4 * (1.3 * t).sin()));
    }
    Series {
        demand: TimeSeries::new(pts).unwrap(),
        inflows: (0..sys.n_dams())
            .map(|_| TimeSeries::constant(30.0 * SECONDS_PER_HOUR, horizon))
            .collect(),
    }
}
