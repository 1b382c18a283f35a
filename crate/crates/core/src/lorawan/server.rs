use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use log::{debug, info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernel::{Kernel, SimQueue, SimTime};
use crate::phy::{airtime, Radio, RadioConfig};

use super::application::{check_fport, AppHandle, AppRegistry};
use super::crypto::{derive_session_keys, Direction, Key};
use super::frame::{DataFrame, DataFrameSpec, FCtrl, JoinAccept, JoinRequest, MType, PhyPayload};
use super::gateway::{Gateway, GatewayUplink};
use super::mac::{decode_commands, encode_commands, MacCommand};
use super::region::{demod_floor_db, rx1_config, sf_to_dr, RxWindowParams};
use super::{expand_fcnt, DeviceClass, LorawanError, UplinkEvent};

#[derive(Debug, Clone, PartialEq)]
pub struct NsConfig {
    /// 24-bit network identifier; its low 7 bits prefix every DevAddr.
    pub net_id: u32,
    pub rx: RxWindowParams,
    /// Copies of one frame arriving within this window count as one uplink.
    pub dedup_window_s: f64,
}

impl Default for NsConfig {
    fn default() -> Self {
        NsConfig {
            net_id: 0x13,
            rx: RxWindowParams::default(),
            dedup_window_s: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub joins_accepted: u64,
    pub joins_rejected: u64,
    pub uplinks_accepted: u64,
    pub duplicates: u64,
    pub retransmissions: u64,
    pub replays_dropped: u64,
    pub mic_failures: u64,
    pub unknown_devices: u64,
    pub malformed: u64,
    pub downlinks_sent: u64,
    pub downlinks_dropped: u64,
    pub multicast_sent: u64,
}

/// Network-side view of one activated device.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    pub dev_addr: u32,
    pub dev_eui: Option<u64>,
    pub class: DeviceClass,
    pub nwk_skey: Key,
    pub app_skey: Key,
    pub fcnt_up: Option<u32>,
    pub fcnt_down: u32,
    pub queued_downlinks: usize,
    pub last_rssi_dbm: Option<f64>,
    pub last_snr_db: Option<f64>,
    pub last_gw_cnt: u32,
    /// Battery and margin from the latest DevStatusAns.
    pub dev_status: Option<(u8, i8)>,
    pub link_adr_ans: Option<MacCommand>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticastGroup {
    pub mc_addr: u32,
    pub nwk_skey: Key,
    pub app_skey: Key,
    /// DevEUIs (OTAA) or DevAddrs (ABP) of the members; only used to pick
    /// gateways.
    pub member_euis: Vec<u64>,
    pub member_addrs: Vec<u32>,
}

struct QueuedDownlink {
    fport: u8,
    payload: Vec<u8>,
    confirmed: bool,
}

#[derive(Clone)]
struct LastUplink {
    config: RadioConfig,
    best_gw: usize,
    rssi_dbm: f64,
    snr_db: f64,
    gw_cnt: u32,
}

struct DeviceRecord {
    dev_eui: Option<u64>,
    class: DeviceClass,
    nwk_skey: Key,
    app_skey: Key,
    fcnt_up: Option<u32>,
    fcnt_down: u32,
    queue: VecDeque<QueuedDownlink>,
    mac: Vec<MacCommand>,
    need_ack: bool,
    link_check: bool,
    last: Option<LastUplink>,
    /// Class C: hold downlinks for the RX1 window until this time.
    hold_until: SimTime,
    dev_status: Option<(u8, i8)>,
    link_adr_ans: Option<MacCommand>,
}

impl DeviceRecord {
    fn new(dev_eui: Option<u64>, class: DeviceClass, nwk_skey: Key, app_skey: Key) -> Self {
        DeviceRecord {
            dev_eui,
            class,
            nwk_skey,
            app_skey,
            fcnt_up: None,
            fcnt_down: 0,
            queue: VecDeque::new(),
            mac: Vec::new(),
            need_ack: false,
            link_check: false,
            last: None,
            hold_until: SimTime::ZERO,
            dev_status: None,
            link_adr_ans: None,
        }
    }
}

struct OtaaRecord {
    join_eui: u64,
    app_key: Key,
    class: DeviceClass,
    used_nonces: BTreeSet<u16>,
    dev_addr: Option<u32>,
}

struct GroupState {
    group: MulticastGroup,
    fcnt: u32,
}

struct NsState {
    config: NsConfig,
    rng: ChaCha8Rng,
    gateways: Vec<Gateway>,
    otaa: BTreeMap<u64, OtaaRecord>,
    devices: BTreeMap<u32, DeviceRecord>,
    next_addr: u32,
    /// Frame bytes seen recently, with first arrival and owning device.
    recent: BTreeMap<Vec<u8>, (SimTime, Option<u32>)>,
    groups: BTreeMap<u32, GroupState>,
    stats: ServerStats,
    uplinks: Vec<UplinkEvent>,
}

struct NsInner {
    kernel: Kernel,
    state: RefCell<NsState>,
    apps: RefCell<AppRegistry>,
    queue: SimQueue<GatewayUplink>,
}

/// Network server with an embedded join server. Clones share state.
#[derive(Clone)]
pub struct NetworkServer {
    inner: Rc<NsInner>,
}

impl std::fmt::Debug for NetworkServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkServer").finish_non_exhaustive()
    }
}

enum Pending {
    Fixed(Vec<u8>),
    Data,
}

impl NetworkServer {
    pub fn new(kernel: &Kernel, config: NsConfig) -> Result<NetworkServer, LorawanError> {
        config.rx.validate()?;
        if config.net_id > 0xff_ffff {
            return Err(LorawanError::Argument(format!("net_id {:#x} exceeds 24 bits", config.net_id)));
        }
        if !(config.dedup_window_s.is_finite() && config.dedup_window_s >= 0.0) {
            return Err(LorawanError::Argument("dedup window must be non-negative".into()));
        }
        let ns = NetworkServer {
            inner: Rc::new(NsInner {
                kernel: kernel.clone(),
                state: RefCell::new(NsState {
                    next_addr: (config.net_id & 0x7f) << 25 | 1,
                    config,
                    rng: kernel.rng_stream(),
                    gateways: Vec::new(),
                    otaa: BTreeMap::new(),
                    devices: BTreeMap::new(),
                    recent: BTreeMap::new(),
                    groups: BTreeMap::new(),
                    stats: ServerStats::default(),
                    uplinks: Vec::new(),
                }),
                apps: RefCell::new(AppRegistry::default()),
                queue: SimQueue::new(kernel),
            }),
        };
        let task_ns = ns.clone();
        kernel.spawn(async move {
            while let Ok(up) = task_ns.inner.queue.get().await {
                task_ns.handle_uplink(up);
            }
        });
        Ok(ns)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.inner.kernel
    }

    pub fn config(&self) -> NsConfig {
        self.inner.state.borrow().config.clone()
    }

    /// Turns `radio` into a gateway attached to this server.
    pub fn add_gateway(&self, radio: Radio) -> Result<Gateway, LorawanError> {
        let index = self.inner.state.borrow().gateways.len();
        let gw = Gateway::start(index, radio, self.inner.queue.clone())?;
        self.inner.state.borrow_mut().gateways.push(gw.clone());
        Ok(gw)
    }

    pub fn gateways(&self) -> Vec<Gateway> {
        self.inner.state.borrow().gateways.clone()
    }

    pub fn register_otaa(
        &self,
        dev_eui: u64,
        join_eui: u64,
        app_key: Key,
        class: DeviceClass,
    ) -> Result<(), LorawanError> {
        let mut st = self.inner.state.borrow_mut();
        if st.otaa.contains_key(&dev_eui) {
            return Err(LorawanError::Argument(format!("DevEUI {dev_eui:016x} already registered")));
        }
        st.otaa.insert(
            dev_eui,
            OtaaRecord {
                join_eui,
                app_key,
                class,
                used_nonces: BTreeSet::new(),
                dev_addr: None,
            },
        );
        Ok(())
    }

    pub fn register_abp(
        &self,
        dev_addr: u32,
        nwk_skey: Key,
        app_skey: Key,
        class: DeviceClass,
    ) -> Result<(), LorawanError> {
        let mut st = self.inner.state.borrow_mut();
        if st.devices.contains_key(&dev_addr) {
            return Err(LorawanError::Argument(format!("DevAddr {dev_addr:08x} already in use")));
        }
        st.devices
            .insert(dev_addr, DeviceRecord::new(None, class, nwk_skey, app_skey));
        Ok(())
    }

    /// Attaches an application to an FPort. Ports outside 1..=223 and ports
    /// already taken are rejected.
    pub fn register_application(&self, app: AppHandle) -> Result<(), LorawanError> {
        self.inner.apps.borrow_mut().register(app)
    }

    pub fn add_multicast_group(&self, group: MulticastGroup) -> Result<(), LorawanError> {
        let mut st = self.inner.state.borrow_mut();
        if st.groups.contains_key(&group.mc_addr) || st.devices.contains_key(&group.mc_addr) {
            return Err(LorawanError::Argument(format!(
                "address {:08x} already in use",
                group.mc_addr
            )));
        }
        st.groups.insert(group.mc_addr, GroupState { group, fcnt: 0 });
        Ok(())
    }

    pub fn dev_addr_of(&self, dev_eui: u64) -> Option<u32> {
        self.inner.state.borrow().otaa.get(&dev_eui).and_then(|o| o.dev_addr)
    }

    pub fn session(&self, dev_addr: u32) -> Option<SessionInfo> {
        let st = self.inner.state.borrow();
        let d = st.devices.get(&dev_addr)?;
        Some(SessionInfo {
            dev_addr,
            dev_eui: d.dev_eui,
            class: d.class,
            nwk_skey: d.nwk_skey,
            app_skey: d.app_skey,
            fcnt_up: d.fcnt_up,
            fcnt_down: d.fcnt_down,
            queued_downlinks: d.queue.len(),
            last_rssi_dbm: d.last.as_ref().map(|l| l.rssi_dbm),
            last_snr_db: d.last.as_ref().map(|l| l.snr_db),
            last_gw_cnt: d.last.as_ref().map_or(0, |l| l.gw_cnt),
            dev_status: d.dev_status,
            link_adr_ans: d.link_adr_ans,
        })
    }

    pub fn stats(&self) -> ServerStats {
        self.inner.state.borrow().stats.clone()
    }

    /// Every uplink accepted and decrypted, in arrival order.
    pub fn uplink_log(&self) -> Vec<UplinkEvent> {
        self.inner.state.borrow().uplinks.clone()
    }

    /// Queues an application downlink. Class A devices get it in the
    /// receive windows after their next uplink; Class C devices right away.
    pub fn queue_downlink(
        &self,
        dev_addr: u32,
        fport: u8,
        payload: &[u8],
        confirmed: bool,
    ) -> Result<(), LorawanError> {
        check_fport(fport)?;
        {
            let mut st = self.inner.state.borrow_mut();
            let dev = st
                .devices
                .get_mut(&dev_addr)
                .ok_or(LorawanError::UnknownDevice(dev_addr))?;
            dev.queue.push_back(QueuedDownlink {
                fport,
                payload: payload.to_vec(),
                confirmed,
            });
        }
        self.flush_class_c(dev_addr);
        Ok(())
    }

    /// Queues a network-initiated MAC command (LinkADRReq, DevStatusReq).
    pub fn queue_mac_command(&self, dev_addr: u32, cmd: MacCommand) -> Result<(), LorawanError> {
        {
            let mut st = self.inner.state.borrow_mut();
            let dev = st
                .devices
                .get_mut(&dev_addr)
                .ok_or(LorawanError::UnknownDevice(dev_addr))?;
            dev.mac.push(cmd);
        }
        self.flush_class_c(dev_addr);
        Ok(())
    }

    /// Sends one frame to a multicast group on the RX2 channel. Each gateway
    /// that last heard a member transmits it in turn.
    pub fn send_multicast(&self, mc_addr: u32, fport: u8, payload: &[u8]) -> Result<(), LorawanError> {
        check_fport(fport)?;
        let (bytes, gateways, rx2) = {
            let mut st = self.inner.state.borrow_mut();
            let st = &mut *st;
            let g = st.groups.get_mut(&mc_addr).ok_or(LorawanError::UnknownGroup(mc_addr))?;
            let frame = DataFrame::seal(
                &DataFrameSpec {
                    mtype: MType::UnconfirmedDataDown,
                    dev_addr: mc_addr,
                    fctrl: FCtrl::default(),
                    fcnt: g.fcnt,
                    fopts: &[],
                    fport: Some(fport),
                    payload,
                },
                &g.group.nwk_skey,
                &g.group.app_skey,
            )?;
            g.fcnt += 1;
            let mut addrs = g.group.member_addrs.clone();
            addrs.extend(
                g.group
                    .member_euis
                    .iter()
                    .filter_map(|e| st.otaa.get(e).and_then(|o| o.dev_addr)),
            );
            let mut gws: BTreeSet<usize> = addrs
                .iter()
                .filter_map(|a| st.devices.get(a)?.last.as_ref().map(|l| l.best_gw))
                .collect();
            if gws.is_empty() && !st.gateways.is_empty() {
                gws.insert(0);
            }
            let gateways: Vec<Gateway> = gws.into_iter().map(|i| st.gateways[i].clone()).collect();
            st.stats.multicast_sent += 1;
            (frame.encode(), gateways, st.config.rx.rx2_config())
        };
        if gateways.is_empty() {
            return Err(LorawanError::Argument("no gateway attached".into()));
        }
        let spacing = airtime(&rx2, bytes.len())?.total + 0.01;
        let k = self.inner.kernel.clone();
        k.clone().spawn(async move {
            for (i, gw) in gateways.iter().enumerate() {
                if i > 0 && k.sleep(spacing).await.is_err() {
                    return;
                }
                gw.send(rx2, bytes.clone());
            }
        });
        Ok(())
    }

    fn flush_class_c(&self, dev_addr: u32) {
        let now = self.inner.kernel.now();
        let mut st = self.inner.state.borrow_mut();
        let Some(dev) = st.devices.get(&dev_addr) else { return };
        if dev.class != DeviceClass::C || now < dev.hold_until {
            return;
        }
        let gw_index = dev.last.as_ref().map_or(0, |l| l.best_gw);
        let Some(gw) = st.gateways.get(gw_index).cloned() else {
            warn!("no gateway for Class C downlink to {dev_addr:08x}");
            return;
        };
        let rx2 = st.config.rx.rx2_config();
        while let Some(bytes) = build_downlink(&mut st, dev_addr) {
            st.stats.downlinks_sent += 1;
            gw.send(rx2, bytes);
        }
    }

    fn handle_uplink(&self, up: GatewayUplink) {
        let now = self.inner.kernel.now();
        let bytes = up.reception.packet.payload.clone();
        {
            let mut st = self.inner.state.borrow_mut();
            let st = &mut *st;
            let window = self.inner.kernel.ticks(st.config.dedup_window_s).unwrap_or(0);
            st.recent.retain(|_, (seen, _)| now.saturating_sub(*seen) <= window);
            if let Some((_, owner)) = st.recent.get(&bytes) {
                st.stats.duplicates += 1;
                if let Some(last) = owner
                    .and_then(|a| st.devices.get_mut(&a))
                    .and_then(|d| d.last.as_mut())
                {
                    last.gw_cnt += 1;
                    if up.reception.rssi_dbm > last.rssi_dbm {
                        last.best_gw = up.gateway;
                        last.rssi_dbm = up.reception.rssi_dbm;
                        last.snr_db = up.reception.snr_db;
                    }
                }
                return;
            }
            st.recent.insert(bytes.clone(), (now, None));
        }
        match PhyPayload::decode(&bytes) {
            Ok(PhyPayload::JoinRequest(jr)) => self.handle_join(&up, jr, &bytes),
            Ok(PhyPayload::Data(f)) if f.direction() == Direction::Up => {
                self.handle_data(&up, f, &bytes)
            }
            Ok(_) => {}
            Err(e) => {
                debug!("undecodable uplink: {e}");
                self.inner.state.borrow_mut().stats.malformed += 1;
            }
        }
    }

    fn last_uplink(up: &GatewayUplink) -> LastUplink {
        LastUplink {
            config: up.reception.packet.config,
            best_gw: up.gateway,
            rssi_dbm: up.reception.rssi_dbm,
            snr_db: up.reception.snr_db,
            gw_cnt: 1,
        }
    }

    fn handle_join(&self, up: &GatewayUplink, jr: JoinRequest, bytes: &[u8]) {
        let (dev_addr, accept, d1, d2) = {
            let mut st = self.inner.state.borrow_mut();
            let st = &mut *st;
            let Some(rec) = st.otaa.get_mut(&jr.dev_eui) else {
                st.stats.unknown_devices += 1;
                return;
            };
            if rec.join_eui != jr.join_eui || !jr.verify_mic(&rec.app_key) {
                st.stats.mic_failures += 1;
                return;
            }
            if !rec.used_nonces.insert(jr.dev_nonce) {
                debug!("join from {:016x} reused DevNonce {}", jr.dev_eui, jr.dev_nonce);
                st.stats.joins_rejected += 1;
                return;
            }
            let dev_addr = match rec.dev_addr {
                Some(a) => a,
                None => {
                    let a = st.next_addr;
                    st.next_addr += 1;
                    rec.dev_addr = Some(a);
                    a
                }
            };
            let app_nonce = st.rng.random::<u32>() & 0xff_ffff;
            let (nwk, app) =
                derive_session_keys(&rec.app_key, app_nonce, st.config.net_id, jr.dev_nonce);
            let rx = st.config.rx;
            let accept = JoinAccept {
                app_nonce,
                net_id: st.config.net_id,
                dev_addr,
                dl_settings: sf_to_dr(rx.rx2_sf).unwrap_or(0),
                rx_delay: rx.rx1_delay_s.round().clamp(1.0, 15.0) as u8,
                cflist: None,
            }
            .seal(&rec.app_key);
            let mut record = DeviceRecord::new(Some(jr.dev_eui), rec.class, nwk, app);
            record.last = Some(Self::last_uplink(up));
            record.hold_until = up.reception.packet.rx_end
                + self.inner.kernel.ticks(rx.join_accept_delay2_s).unwrap_or(0);
            st.devices.insert(dev_addr, record);
            if let Some(entry) = st.recent.get_mut(bytes) {
                entry.1 = Some(dev_addr);
            }
            st.stats.joins_accepted += 1;
            info!("join accepted for {:016x} as {dev_addr:08x}", jr.dev_eui);
            (dev_addr, accept, rx.join_accept_delay1_s, rx.join_accept_delay2_s)
        };
        self.schedule_windows(dev_addr, up.reception.packet.rx_end, d1, d2, Pending::Fixed(accept));
    }

    fn handle_data(&self, up: &GatewayUplink, f: DataFrame, bytes: &[u8]) {
        let dev_addr = f.dev_addr;
        let event = {
            let mut st = self.inner.state.borrow_mut();
            let st = &mut *st;
            let Some(dev) = st.devices.get_mut(&dev_addr) else {
                st.stats.unknown_devices += 1;
                return;
            };
            let fcnt = expand_fcnt(dev.fcnt_up, f.fcnt);
            if !f.verify_mic(&dev.nwk_skey, fcnt) {
                st.stats.mic_failures += 1;
                return;
            }
            if let Some(entry) = st.recent.get_mut(bytes) {
                entry.1 = Some(dev_addr);
            }
            let confirmed = f.mtype.is_confirmed();
            let rx = st.config.rx;
            let hold = self.inner.kernel.ticks(rx.rx2_delay_s).unwrap_or(0);
            match dev.fcnt_up {
                Some(last) if fcnt == last && confirmed => {
                    st.stats.retransmissions += 1;
                    dev.need_ack = true;
                    dev.last = Some(Self::last_uplink(up));
                    dev.hold_until = up.reception.packet.rx_end + hold;
                    None
                }
                Some(last) if fcnt <= last => {
                    st.stats.replays_dropped += 1;
                    return;
                }
                _ => {
                    dev.fcnt_up = Some(fcnt);
                    dev.need_ack = confirmed;
                    dev.last = Some(Self::last_uplink(up));
                    dev.hold_until = up.reception.packet.rx_end + hold;
                    let mac_bytes = if f.fport == Some(0) {
                        f.decrypt_payload(&dev.nwk_skey, fcnt)
                    } else {
                        f.fopts.clone()
                    };
                    let (cmds, unknown) = decode_commands(&mac_bytes, Direction::Up);
                    if let Some(cid) = unknown {
                        debug!("{dev_addr:08x} sent unknown MAC command {cid:#04x}");
                    }
                    for cmd in cmds {
                        match cmd {
                            MacCommand::LinkCheckReq => dev.link_check = true,
                            MacCommand::LinkAdrAns { .. } => dev.link_adr_ans = Some(cmd),
                            MacCommand::DevStatusAns { battery, margin } => {
                                dev.dev_status = Some((battery, margin))
                            }
                            _ => {}
                        }
                    }
                    st.stats.uplinks_accepted += 1;
                    match f.fport {
                        Some(port) if port > 0 => {
                            let ev = UplinkEvent {
                                time: up.reception.packet.rx_end,
                                dev_addr,
                                dev_eui: dev.dev_eui,
                                fport: port,
                                fcnt,
                                confirmed,
                                payload: f.decrypt_payload(&dev.app_skey, fcnt),
                                rssi_dbm: up.reception.rssi_dbm,
                                snr_db: up.reception.snr_db,
                                gateway: st.gateways[up.gateway].id(),
                            };
                            st.uplinks.push(ev.clone());
                            Some(ev)
                        }
                        _ => None,
                    }
                }
            }
        };
        if let Some(ev) = event {
            let app = self.inner.apps.borrow().get(ev.fport);
            if let Some(app) = app {
                app.borrow_mut().on_uplink(self, &ev);
            }
        }
        let rx = self.inner.state.borrow().config.rx;
        self.schedule_windows(
            dev_addr,
            up.reception.packet.rx_end,
            rx.rx1_delay_s,
            rx.rx2_delay_s,
            Pending::Data,
        );
    }

    /// Sends whatever is pending for the device in RX1 through the best
    /// gateway, or in RX2 if that gateway is busy at RX1.
    fn schedule_windows(&self, dev_addr: u32, end: SimTime, d1: f64, d2: f64, pending: Pending) {
        let k = self.inner.kernel.clone();
        let ns = self.clone();
        let (Ok(t1), Ok(t2)) = (k.ticks(d1), k.ticks(d2)) else { return };
        k.clone().spawn(async move {
            let mut pending = Some(pending);
            for (at, first) in [(end + t1, true), (end + t2, false)] {
                if k.sleep_until(at).await.is_err() {
                    return;
                }
                let mut st = ns.inner.state.borrow_mut();
                let st = &mut *st;
                let Some(last) = st.devices.get(&dev_addr).and_then(|d| d.last.clone()) else {
                    return;
                };
                let Some(gw) = st.gateways.get(last.best_gw).cloned() else { return };
                if gw.busy() {
                    if !first {
                        st.stats.downlinks_dropped += 1;
                        warn!("gateway {} busy in both windows for {dev_addr:08x}", last.best_gw);
                    }
                    continue;
                }
                let cfg = if first {
                    rx1_config(&last.config)
                } else {
                    st.config.rx.rx2_config()
                };
                let bytes = match pending.take() {
                    Some(Pending::Fixed(b)) => Some(b),
                    _ => build_downlink(st, dev_addr),
                };
                if let Some(b) = bytes {
                    st.stats.downlinks_sent += 1;
                    gw.send(cfg, b);
                }
                return;
            }
        });
    }
}

/// Assembles the next downlink for a device from its queues, or `None` if
/// there is nothing to say.
fn build_downlink(st: &mut NsState, dev_addr: u32) -> Option<Vec<u8>> {
    let gateways = st.gateways.len();
    let dev = st.devices.get_mut(&dev_addr)?;
    let mut mac = std::mem::take(&mut dev.mac);
    if dev.link_check {
        dev.link_check = false;
        if let Some(l) = &dev.last {
            let margin = (l.snr_db - demod_floor_db(l.config.sf)).round().clamp(0.0, 254.0) as u8;
            mac.push(MacCommand::LinkCheckAns {
                margin,
                gw_cnt: l.gw_cnt.min(gateways as u32).min(255) as u8,
            });
        }
    }
    let app = dev.queue.pop_front();
    if app.is_none() && mac.is_empty() && !dev.need_ack {
        return None;
    }
    let mac_bytes = encode_commands(&mac);
    let (fopts, fport, payload, confirmed) = match &app {
        Some(a) if mac_bytes.len() <= 15 => (mac_bytes, Some(a.fport), a.payload.clone(), a.confirmed),
        Some(a) => {
            dev.mac = mac;
            (Vec::new(), Some(a.fport), a.payload.clone(), a.confirmed)
        }
        None if mac_bytes.len() <= 15 => (mac_bytes, None, Vec::new(), false),
        None => (Vec::new(), Some(0), mac_bytes, false),
    };
    let fctrl = FCtrl {
        ack: dev.need_ack,
        fpending: !dev.queue.is_empty(),
        ..FCtrl::default()
    };
    dev.need_ack = false;
    let frame = DataFrame::seal(
        &DataFrameSpec {
            mtype: if confirmed {
                MType::ConfirmedDataDown
            } else {
                MType::UnconfirmedDataDown
            },
            dev_addr,
            fctrl,
            fcnt: dev.fcnt_down,
            fopts: &fopts,
            fport,
            payload: &payload,
        },
        &dev.nwk_skey,
        &dev.app_skey,
    );
    dev.fcnt_down += 1;
    match frame {
        Ok(f) => Some(f.encode()),
        Err(e) => {
            warn!("cannot build downlink for {dev_addr:08x}: {e}");
            None
        }
    }
}
