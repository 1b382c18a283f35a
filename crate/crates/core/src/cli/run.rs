use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use log::{info, warn};

use crate::energy::PowerProfile;
use crate::firmware_bridge::{load_firmware, FirmwareError, FirmwareImage, FirmwareInstance, FirmwareState};
use crate::kernel::{Kernel, KernelError, SimConfig, SimTime};
use crate::lorawan::region::uplink_config;
use crate::lorawan::{
    Activation, Application, Device, DeviceClass, DeviceConfig, DeviceStats, DownlinkEvent, LorawanError,
    MulticastGroup, MulticastSession, NetworkServer, NsConfig, ServerStats, UplinkEvent,
};
use crate::phy::{
    EnergyRecord, Location, Medium, PacketRecord, PhyError, PhyParams, Radio, ReceptionRecord,
};

use super::scenario::{ActivationSpec, ApplicationSpec, ClassSpec, ScenarioError, ScenarioSpec, TrafficSpec};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("phy: {0}")]
    Phy(#[from] PhyError),
    #[error("lorawan: {0}")]
    Lorawan(#[from] LorawanError),
    #[error("firmware for {device:?}: {source}")]
    Firmware { device: String, source: FirmwareError },
}

/// What a device ended the run with.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub id: String,
    /// LoRaWAN devices only.
    pub stats: Option<DeviceStats>,
    pub dev_addr: Option<u32>,
    pub downlinks: Vec<DownlinkEvent>,
    /// Firmware devices only.
    pub firmware: Option<(FirmwareState, Option<i32>)>,
}

/// Per-radio figures computed from the three tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioSummary {
    pub radio_id: String,
    pub sent: u64,
    /// Packets received intact on the other side of the link.
    pub delivered: u64,
    pub pdr: Option<f64>,
    /// Mean over every delivered copy.
    pub mean_snr_db: Option<f64>,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub seed: u64,
    pub length_s: f64,
    pub tick_s: f64,
    pub packets: Vec<PacketRecord>,
    pub receptions: Vec<ReceptionRecord>,
    pub energy: Vec<EnergyRecord>,
    pub summary: Vec<RadioSummary>,
    pub devices: Vec<DeviceReport>,
    pub server: ServerStats,
    pub uplinks: Vec<UplinkEvent>,
}

struct Tables {
    packets: Vec<PacketRecord>,
    receptions: Vec<ReceptionRecord>,
    energy: Vec<EnergyRecord>,
}

/// Replies to uplinks on one port.
struct Responder(ApplicationSpec);

impl Application for Responder {
    fn port(&self) -> u8 {
        self.0.fport
    }

    fn on_uplink(&mut self, ns: &NetworkServer, up: &UplinkEvent) {
        if self.0.match_hex.as_ref().is_some_and(|m| *m != up.payload) {
            return;
        }
        if let Err(e) = ns.queue_downlink(up.dev_addr, self.0.fport, &self.0.reply_hex, self.0.confirmed) {
            warn!("reply to {:08x}: {e}", up.dev_addr);
        }
    }
}

fn location(v: &[f64]) -> Location {
    Location::new(v[0], v[1], v.get(2).copied().unwrap_or(0.0))
}

fn phy_params(spec: &ScenarioSpec) -> PhyParams {
    let mut p = PhyParams::default();
    let o = &spec.phy;
    let pl = &mut p.path_loss;
    pl.pl0_db = o.pl0_db.unwrap_or(pl.pl0_db);
    pl.d0_m = o.d0_m.unwrap_or(pl.d0_m);
    pl.gamma = o.gamma.unwrap_or(pl.gamma);
    pl.sigma_db = o.sigma_db.unwrap_or(pl.sigma_db);
    let c = &mut p.collision;
    c.capture_threshold_db = o.capture_threshold_db.unwrap_or(c.capture_threshold_db);
    c.critical_preamble_symbols = o.critical_preamble_symbols.unwrap_or(c.critical_preamble_symbols);
    c.noise_figure_db = o.noise_figure_db.unwrap_or(c.noise_figure_db);
    p
}

fn ns_config(spec: &ScenarioSpec) -> NsConfig {
    let mut c = NsConfig::default();
    let o = &spec.lorawan;
    c.net_id = o.net_id.unwrap_or(c.net_id);
    let rx = &mut c.rx;
    rx.rx1_delay_s = o.rx1_delay_s.unwrap_or(rx.rx1_delay_s);
    rx.rx2_delay_s = o.rx2_delay_s.unwrap_or(rx.rx2_delay_s);
    rx.join_accept_delay1_s = o.join_accept_delay1_s.unwrap_or(rx.join_accept_delay1_s);
    rx.join_accept_delay2_s = o.join_accept_delay2_s.unwrap_or(rx.join_accept_delay2_s);
    rx.rx2_frequency_hz = o.rx2_frequency_hz.unwrap_or(rx.rx2_frequency_hz);
    rx.rx2_sf = o.rx2_sf.unwrap_or(rx.rx2_sf);
    c
}

/// Sleeps until the first slot (at `first`, or at the first call when
/// unset), then every `period`, skipping slots missed while the previous
/// send was still running.
struct Schedule {
    next: Option<u64>,
    period: u64,
}

impl Schedule {
    fn new(k: &Kernel, t: &TrafficSpec, default_first: Option<f64>) -> Result<Schedule, KernelError> {
        Ok(Schedule {
            next: t.first_s.or(default_first).map(|s| k.ticks(s)).transpose()?,
            period: k.ticks(t.period_s)?.max(1),
        })
    }

    async fn wait(&mut self, k: &Kernel) {
        let now = k.now().ticks();
        let mut next = self.next.unwrap_or(now);
        while next < now {
            next += self.period;
        }
        if next > now {
            // The target is in the future, so this cannot fail.
            let _ = k.sleep_until(SimTime(next)).await;
        }
        self.next = Some(next + self.period);
    }
}

fn spawn_device(k: &Kernel, dev: Device, start_s: f64, traffic: Option<TrafficSpec>) -> Result<(), RunError> {
    let start = k.ticks(start_s)?;
    let schedule = traffic.as_ref().map(|t| Schedule::new(k, t, None)).transpose()?;
    let k2 = k.clone();
    k.spawn_root(async move {
        let _ = k2.sleep_until(SimTime(start)).await;
        if let Err(e) = dev.join().await {
            warn!("{}: join failed: {e}", dev.id());
            return;
        }
        let (Some(t), Some(mut schedule)) = (traffic, schedule) else {
            return;
        };
        loop {
            schedule.wait(&k2).await;
            if let Err(e) = dev.send_uplink(t.fport, &t.payload_hex, t.confirmed).await {
                warn!("{}: uplink failed: {e}", dev.id());
            }
        }
    })?;
    Ok(())
}

/// Builds the network described by `spec` and runs it to `length_s`.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunOutputs, RunError> {
    spec.validate()?;
    let kernel = Kernel::new(SimConfig {
        tick_duration: spec.tick_s,
        seed: spec.seed,
        length: spec.length_s,
    })?;
    let medium = Medium::new(&kernel, phy_params(spec))?;
    let ns = NetworkServer::new(&kernel, ns_config(spec))?;
    let profile = PowerProfile::default();

    let mut gateway_ids = BTreeSet::new();
    for g in &spec.gateways {
        let radio = medium.add_radio(&g.id, location(&g.location), uplink_config(7, 14), profile.clone())?;
        ns.add_gateway(radio)?;
        gateway_ids.insert(g.id.clone());
    }
    for a in &spec.applications {
        ns.register_application(Rc::new(RefCell::new(Responder(a.clone()))))?;
    }

    let mut radios: Vec<Radio> = ns.gateways().iter().map(|g| g.radio().clone()).collect();
    let mut devices: BTreeMap<String, Device> = BTreeMap::new();
    let mut firmware: Vec<(String, FirmwareInstance)> = Vec::new();
    for d in &spec.devices {
        let config = uplink_config(d.sf, d.tx_power_dbm);
        let radio = medium.add_radio(&d.id, location(&d.location), config, profile.clone())?;
        radios.push(radio.clone());
        if let Some(path) = &d.firmware {
            let fw = load_firmware(&FirmwareImage::new(path)).map_err(|source| RunError::Firmware {
                device: d.id.clone(),
                source,
            })?;
            firmware.push((d.id.clone(), fw));
            continue;
        }
        let class = match d.class {
            ClassSpec::A => DeviceClass::A,
            ClassSpec::C => DeviceClass::C,
        };
        let activation = match d.activation.clone().expect("validated") {
            ActivationSpec::Otaa {
                dev_eui,
                join_eui,
                app_key,
            } => {
                ns.register_otaa(dev_eui, join_eui, app_key, class)?;
                Activation::Otaa {
                    dev_eui,
                    join_eui,
                    app_key,
                }
            }
            ActivationSpec::Abp {
                dev_addr,
                nwk_skey,
                app_skey,
            } => {
                ns.register_abp(dev_addr, nwk_skey, app_skey, class)?;
                Activation::Abp {
                    dev_addr,
                    nwk_skey,
                    app_skey,
                }
            }
        };
        let cfg = DeviceConfig {
            sf: d.sf,
            tx_power_dbm: d.tx_power_dbm,
            rx: ns.config().rx,
            ..DeviceConfig::new(class, activation)
        };
        let dev = Device::new(radio, cfg)?;
        spawn_device(&kernel, dev.clone(), d.start_s, d.traffic.clone())?;
        devices.insert(d.id.clone(), dev);
    }

    for g in &spec.multicast_groups {
        let mut group = MulticastGroup {
            mc_addr: g.mc_addr,
            nwk_skey: g.nwk_skey,
            app_skey: g.app_skey,
            member_euis: Vec::new(),
            member_addrs: Vec::new(),
        };
        for m in &g.members {
            let dev = &devices[m];
            dev.add_multicast(MulticastSession {
                mc_addr: g.mc_addr,
                nwk_skey: g.nwk_skey,
                app_skey: g.app_skey,
            });
            match spec.devices.iter().find(|d| &d.id == m).and_then(|d| d.activation.as_ref()) {
                Some(ActivationSpec::Otaa { dev_eui, .. }) => group.member_euis.push(*dev_eui),
                Some(ActivationSpec::Abp { dev_addr, .. }) => group.member_addrs.push(*dev_addr),
                None => {}
            }
        }
        ns.add_multicast_group(group)?;
        if let Some(t) = g.traffic.clone() {
            let mut schedule = Schedule::new(&kernel, &t, Some(t.period_s))?;
            let (k, ns, mc_addr) = (kernel.clone(), ns.clone(), g.mc_addr);
            kernel.spawn_root(async move {
                loop {
                    schedule.wait(&k).await;
                    if let Err(e) = ns.send_multicast(mc_addr, t.fport, &t.payload_hex) {
                        warn!("multicast {mc_addr:08x}: {e}");
                    }
                }
            })?;
        }
    }

    for (id, fw) in &firmware {
        let radio = radios.iter().find(|r| &r.id() == id).expect("radio added");
        fw.start(radio).map_err(|source| RunError::Firmware {
            device: id.clone(),
            source,
        })?;
    }

    // Registered last so it runs after the medium has closed open packets.
    let tables = Rc::new(RefCell::new(None));
    {
        let (tables, medium, radios) = (tables.clone(), medium.clone(), radios.clone());
        kernel.on_sim_end(move || {
            // One closing row per radio carries the energy up to the end.
            for r in &radios {
                let c = r.energy();
                let _ = c.set_power(c.power_w());
            }
            *tables.borrow_mut() = Some(Tables {
                packets: medium.packet_log(),
                receptions: medium.reception_log(),
                energy: medium.energy_log(),
            });
        });
    }

    info!(
        "running {} gateways, {} devices for {} s (seed {})",
        spec.gateways.len(),
        spec.devices.len(),
        spec.length_s,
        spec.seed
    );
    kernel.run(spec.length_s)?;
    let Tables {
        mut packets,
        mut receptions,
        mut energy,
    } = tables.borrow_mut().take().expect("end hook ran");
    packets.sort_by_key(|p| (p.time, p.seq));
    receptions.sort_by_key(|r| (r.time, r.packet_seq, r.radio_index));
    energy.sort_by_key(|e| (e.event.time, e.radio_index));
    let summary = summarize(&packets, &receptions, &energy, &gateway_ids);

    let reports = spec
        .devices
        .iter()
        .map(|d| {
            let dev = devices.get(&d.id);
            DeviceReport {
                id: d.id.clone(),
                stats: dev.map(Device::stats),
                dev_addr: dev.and_then(Device::dev_addr),
                downlinks: dev.map(Device::downlink_log).unwrap_or_default(),
                firmware: firmware
                    .iter()
                    .find(|(id, _)| id == &d.id)
                    .map(|(_, fw)| (fw.state(), fw.exit_code())),
            }
        })
        .collect();

    Ok(RunOutputs {
        seed: spec.seed,
        length_s: spec.length_s,
        tick_s: spec.tick_s,
        packets,
        receptions,
        energy,
        summary,
        devices: reports,
        server: ns.stats(),
        uplinks: ns.uplink_log(),
    })
}

/// Per-radio summary from the exported tables.
///
/// A packet is identified by its sender and start time (a radio cannot start
/// two transmissions at once). A device packet counts as delivered when any
/// gateway received it intact, a gateway packet when any non-gateway radio
/// did.
pub fn summarize(
    packets: &[PacketRecord],
    receptions: &[ReceptionRecord],
    energy: &[EnergyRecord],
    gateways: &BTreeSet<String>,
) -> Vec<RadioSummary> {
    let mut ids: Vec<String> = Vec::new();
    for r in energy {
        if !ids.contains(&r.radio_id) {
            ids.push(r.radio_id.clone());
        }
    }
    for p in packets {
        if !ids.contains(&p.sender_id) {
            ids.push(p.sender_id.clone());
        }
    }
    let mut delivered: BTreeMap<(&str, SimTime), Vec<f64>> = BTreeMap::new();
    for r in receptions {
        if r.delivered && gateways.contains(&r.radio_id) != gateways.contains(&r.sender_id) {
            delivered.entry((r.sender_id.as_str(), r.time)).or_default().push(r.snr_db);
        }
    }
    ids.into_iter()
        .map(|id| {
            let mut sent = 0;
            let mut ok = 0;
            let mut snrs = Vec::new();
            for p in packets.iter().filter(|p| p.sender_id == id) {
                sent += 1;
                if let Some(s) = delivered.get(&(id.as_str(), p.time)) {
                    ok += 1;
                    snrs.extend(s);
                }
            }
            let energy_j = energy
                .iter()
                .rev()
                .find(|e| e.radio_id == id)
                .map_or(0.0, |e| e.event.cumulative_j);
            RadioSummary {
                radio_id: id,
                sent,
                delivered: ok,
                pdr: (sent > 0).then(|| ok as f64 / sent as f64),
                mean_snr_db: (!snrs.is_empty()).then(|| snrs.iter().sum::<f64>() / snrs.len() as f64),
                energy_j,
            }
        })
        .collect()
}
