//! Scenario files.
//!
//! Scenarios are TOML documents with a top-level `version = 1`. Unknown keys
//! are rejected and every error names the path of the offending field.
//!
//! ```toml
//! version = 1
//! seed = 7
//! length_s = 120.0
//!
//! [[gateways]]
//! id = "gw0"
//! location = [0.0, 0.0]
//!
//! [[devices]]
//! id = "node"
//! location = [100.0, 0.0]
//! class = "C"
//! activation = { mode = "otaa", dev_eui = "0000000000000001",
//!                join_eui = "0000000000000000",
//!                app_key = "2b7e151628aed2a6abf7158809cf4f3c" }
//! traffic = { period_s = 30.0, fport = 1, payload_hex = "70696e67" }
//!
//! [[applications]]
//! fport = 1
//! match_hex = "70696e67"
//! reply_hex = "706f6e67"
//! ```

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::phy::MAX_PAYLOAD;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub version: u32,
    /// TOML integers are signed, so seeds above `i64::MAX` are written as
    /// decimal strings. Both forms are accepted.
    #[serde(default, with = "seed_value")]
    pub seed: u64,
    #[serde(default = "default_length")]
    pub length_s: f64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    #[serde(default, skip_serializing_if = "PhySpec::is_empty")]
    pub phy: PhySpec,
    #[serde(default, skip_serializing_if = "LorawanSpec::is_empty")]
    pub lorawan: LorawanSpec,
    #[serde(default)]
    pub gateways: Vec<GatewaySpec>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub applications: Vec<ApplicationSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub multicast_groups: Vec<MulticastSpec>,
}

fn default_length() -> f64 {
    3600.0
}

fn default_tick() -> f64 {
    1e-6
}

/// Overrides of the path-loss and collision defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhySpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pl0_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d0_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capture_threshold_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_preamble_symbols: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_figure_db: Option<f64>,
}

impl PhySpec {
    fn is_empty(&self) -> bool {
        *self == PhySpec::default()
    }
}

/// Overrides of the regional receive-window defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorawanSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rx1_delay_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rx2_delay_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub join_accept_delay1_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub join_accept_delay2_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rx2_frequency_hz: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rx2_sf: Option<u8>,
}

impl LorawanSpec {
    fn is_empty(&self) -> bool {
        *self == LorawanSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    pub id: String,
    /// `[x, y]` or `[x, y, z]` in metres.
    pub location: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassSpec {
    A,
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub location: Vec<f64>,
    #[serde(default = "default_class")]
    pub class: ClassSpec,
    #[serde(default = "default_sf")]
    pub sf: u8,
    #[serde(default = "default_power")]
    pub tx_power_dbm: i8,
    /// When the device starts: OTAA join or, for ABP, the first uplink.
    #[serde(default = "default_start")]
    pub start_s: f64,
    /// Required unless the device runs firmware.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficSpec>,
    /// Host-compiled firmware module driving the radio directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firmware: Option<PathBuf>,
}

fn default_class() -> ClassSpec {
    ClassSpec::A
}

fn default_sf() -> u8 {
    7
}

fn default_power() -> i8 {
    14
}

fn default_start() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ActivationSpec {
    Otaa {
        #[serde(with = "hex_u64")]
        dev_eui: u64,
        #[serde(with = "hex_u64")]
        join_eui: u64,
        #[serde(with = "hex_key")]
        app_key: [u8; 16],
    },
    Abp {
        #[serde(with = "hex_u32")]
        dev_addr: u32,
        #[serde(with = "hex_key")]
        nwk_skey: [u8; 16],
        #[serde(with = "hex_key")]
        app_skey: [u8; 16],
    },
}

/// Periodic uplinks, starting once the device is activated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub period_s: f64,
    #[serde(default = "default_fport")]
    pub fport: u8,
    #[serde(default, with = "hex_bytes")]
    pub payload_hex: Vec<u8>,
    #[serde(default)]
    pub confirmed: bool,
    /// Earliest time of the first uplink. Defaults to right after activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_s: Option<f64>,
}

fn default_fport() -> u8 {
    1
}

/// Server application that answers matching uplinks with a downlink on the
/// same port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationSpec {
    pub fport: u8,
    /// Only uplinks with exactly this payload get a reply. Any if absent.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex_bytes")]
    pub match_hex: Option<Vec<u8>>,
    #[serde(with = "hex_bytes")]
    pub reply_hex: Vec<u8>,
    #[serde(default)]
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MulticastSpec {
    #[serde(with = "hex_u32")]
    pub mc_addr: u32,
    #[serde(with = "hex_key")]
    pub nwk_skey: [u8; 16],
    #[serde(with = "hex_key")]
    pub app_skey: [u8; 16],
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficSpec>,
}

impl ScenarioSpec {
    /// Checks everything serde cannot: versions, ranges and cross references.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return Err(invalid(format!(
                "version: unsupported scenario version {} (expected {SCENARIO_VERSION})",
                self.version
            )));
        }
        if !(self.length_s.is_finite() && self.length_s >= 0.0) {
            return Err(invalid(format!("length_s: must be >= 0, got {}", self.length_s)));
        }
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return Err(invalid(format!("tick_s: must be > 0, got {}", self.tick_s)));
        }
        let mut ids = BTreeSet::new();
        for (i, g) in self.gateways.iter().enumerate() {
            check_location(&format!("gateways[{i}].location"), &g.location)?;
            if !ids.insert(g.id.as_str()) {
                return Err(invalid(format!("gateways[{i}].id: duplicate id {:?}", g.id)));
            }
        }
        let mut euis = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            let at = format!("devices[{i}]");
            check_location(&format!("{at}.location"), &d.location)?;
            if !ids.insert(d.id.as_str()) {
                return Err(invalid(format!("{at}.id: duplicate id {:?}", d.id)));
            }
            if !(d.start_s.is_finite() && d.start_s >= 0.0) {
                return Err(invalid(format!("{at}.start_s: must be >= 0")));
            }
            if !(7..=12).contains(&d.sf) {
                return Err(invalid(format!("{at}.sf: {} not in 7..=12", d.sf)));
            }
            match (&d.activation, &d.firmware) {
                (None, None) => {
                    return Err(invalid(format!("{at}.activation: required for {:?}", d.id)))
                }
                (Some(_), Some(_)) => {
                    return Err(invalid(format!(
                        "{at}.activation: firmware device {:?} drives its radio directly and takes no activation",
                        d.id
                    )))
                }
                (None, Some(_)) if d.traffic.is_some() => {
                    return Err(invalid(format!("{at}.traffic: not used by firmware devices")))
                }
                _ => {}
            }
            match d.activation {
                Some(ActivationSpec::Otaa { dev_eui, .. }) if !euis.insert(dev_eui) => {
                    return Err(invalid(format!("{at}.activation.dev_eui: duplicate {dev_eui:016x}")));
                }
                Some(ActivationSpec::Abp { dev_addr, .. }) if !addrs.insert(dev_addr) => {
                    return Err(invalid(format!("{at}.activation.dev_addr: duplicate {dev_addr:08x}")));
                }
                _ => {}
            }
            if let Some(t) = &d.traffic {
                check_traffic(&format!("{at}.traffic"), t)?;
            }
        }
        let mut ports = BTreeSet::new();
        for (i, a) in self.applications.iter().enumerate() {
            if !(1..=223).contains(&a.fport) {
                return Err(invalid(format!("applications[{i}].fport: {} not in 1..=223", a.fport)));
            }
            if !ports.insert(a.fport) {
                return Err(invalid(format!("applications[{i}].fport: port {} already taken", a.fport)));
            }
            check_payload(&format!("applications[{i}].reply_hex"), &a.reply_hex)?;
        }
        let mut groups = BTreeSet::new();
        for (i, g) in self.multicast_groups.iter().enumerate() {
            let at = format!("multicast_groups[{i}]");
            if !groups.insert(g.mc_addr) || addrs.contains(&g.mc_addr) {
                return Err(invalid(format!("{at}.mc_addr: duplicate address {:08x}", g.mc_addr)));
            }
            for m in &g.members {
                let Some(dev) = self.devices.iter().find(|d| &d.id == m) else {
                    return Err(invalid(format!("{at}.members: unknown device {m:?}")));
                };
                if dev.activation.is_none() {
                    return Err(invalid(format!("{at}.members: {m:?} is not a LoRaWAN device")));
                }
            }
            if let Some(t) = &g.traffic {
                check_traffic(&format!("{at}.traffic"), t)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

fn check_location(at: &str, loc: &[f64]) -> Result<(), ScenarioError> {
    if !(2..=3).contains(&loc.len()) || loc.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{at}: expected [x, y] or [x, y, z] of finite numbers")));
    }
    Ok(())
}

fn check_payload(at: &str, bytes: &[u8]) -> Result<(), ScenarioError> {
    if bytes.len() > MAX_PAYLOAD {
        return Err(invalid(format!("{at}: {} bytes exceeds {MAX_PAYLOAD}", bytes.len())));
    }
    Ok(())
}

fn check_traffic(at: &str, t: &TrafficSpec) -> Result<(), ScenarioError> {
    if !(t.period_s.is_finite() && t.period_s > 0.0) {
        return Err(invalid(format!("{at}.period_s: must be > 0")));
    }
    if !(1..=223).contains(&t.fport) {
        return Err(invalid(format!("{at}.fport: {} not in 1..=223", t.fport)));
    }
    if let Some(first) = t.first_s {
        if !(first.is_finite() && first >= 0.0) {
            return Err(invalid(format!("{at}.first_s: must be >= 0")));
        }
    }
    check_payload(&format!("{at}.payload_hex"), &t.payload_hex)
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let de = toml::Deserializer::new(text);
    let spec: ScenarioSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Parse {
            path,
            message: inner.message().to_string(),
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

mod seed_value {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => i.serialize(s),
            Err(_) => s.serialize_str(&v.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(i) => u64::try_from(i).map_err(|_| D::Error::custom(format!("seed must be >= 0, got {i}"))),
            Raw::Text(t) => t
                .parse()
                .map_err(|_| D::Error::custom(format!("seed {t:?} is not an unsigned 64-bit integer"))),
        }
    }
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(|e| D::Error::custom(format!("invalid hex {s:?}: {e}")))
    }
}

mod opt_hex_bytes {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => super::hex_bytes::serialize(b, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        super::hex_bytes::deserialize(d).map(Some)
    }
}

fn fixed<const N: usize, E: serde::de::Error>(s: &str) -> Result<[u8; N], E> {
    let bytes = hex::decode(s).map_err(|e| E::custom(format!("invalid hex {s:?}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| E::custom(format!("expected {} hex digits, got {}", 2 * N, s.len())))
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        super::fixed::<16, _>(&String::deserialize(d)?)
    }
}

/// EUIs are written most significant byte first.
mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        super::fixed::<8, _>(&String::deserialize(d)?).map(u64::from_be_bytes)
    }
}

mod hex_u32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:08x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        super::fixed::<4, _>(&String::deserialize(d)?).map(u32::from_be_bytes)
    }
}
