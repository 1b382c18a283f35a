use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::rc::Rc;

use log::{debug, info};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernel::{Kernel, SimTime};
use crate::phy::{IdleMode, PhyError, Radio, RadioConfig, Reception};

use super::application::{check_fport, AppHandle, AppRegistry};
use super::crypto::{derive_session_keys, Direction, Key};
use super::frame::{DataFrame, DataFrameSpec, FCtrl, JoinAccept, JoinRequest, MType, PhyPayload};
use super::mac::{decode_commands, encode_commands, MacCommand};
use super::region::{dr_to_sf, rx1_config, tx_power_dbm, uplink_config, window_timeout, RxWindowParams};
use super::{expand_fcnt, DownlinkEvent, LorawanError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceClass {
    A,
    C,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Activation {
    Otaa { dev_eui: u64, join_eui: u64, app_key: Key },
    Abp { dev_addr: u32, nwk_skey: Key, app_skey: Key },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub class: DeviceClass,
    pub activation: Activation,
    pub sf: u8,
    pub tx_power_dbm: i8,
    pub rx: RxWindowParams,
    /// Transmissions of a confirmed uplink before giving up, 1..=15.
    pub max_transmissions: u32,
    /// DevStatusAns battery byte: 0 external power, 1..=254 level, 255 unknown.
    pub battery: u8,
}

impl DeviceConfig {
    pub fn new(class: DeviceClass, activation: Activation) -> Self {
        DeviceConfig {
            class,
            activation,
            sf: 7,
            tx_power_dbm: 14,
            rx: RxWindowParams::default(),
            max_transmissions: 8,
            battery: 255,
        }
    }

    pub fn validate(&self) -> Result<(), LorawanError> {
        if !(7..=12).contains(&self.sf) {
            return Err(LorawanError::Argument(format!("sf {} not in 7..=12", self.sf)));
        }
        if !(2..=16).contains(&self.tx_power_dbm) || self.tx_power_dbm % 2 != 0 {
            return Err(LorawanError::Argument(format!(
                "tx power {} dBm is not an even value in 2..=16",
                self.tx_power_dbm
            )));
        }
        if !(1..=15).contains(&self.max_transmissions) {
            return Err(LorawanError::Argument(format!(
                "max_transmissions {} not in 1..=15",
                self.max_transmissions
            )));
        }
        self.rx.validate()
    }
}

/// Keys for a multicast group the device belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MulticastSession {
    pub mc_addr: u32,
    pub nwk_skey: Key,
    pub app_skey: Key,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub join_requests: u64,
    pub joined_at: Option<SimTime>,
    pub uplinks: u64,
    pub transmissions: u64,
    pub acked: u64,
    pub downlinks: u64,
    pub multicast_downlinks: u64,
    pub mic_failures: u64,
    pub replays_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UplinkResult {
    pub fcnt: u32,
    pub transmissions: u32,
    pub acked: bool,
    /// End of the last transmission.
    pub tx_end: SimTime,
}

struct Session {
    dev_addr: u32,
    nwk_skey: Key,
    app_skey: Key,
    fcnt_up: u32,
    fcnt_down: Option<u32>,
}

struct GroupSession {
    keys: MulticastSession,
    fcnt: Option<u32>,
}

struct DevState {
    cfg: DeviceConfig,
    session: Option<Session>,
    rng: ChaCha8Rng,
    used_nonces: BTreeSet<u16>,
    mac_answers: Vec<MacCommand>,
    link_check_req: bool,
    ack_next: bool,
    acked: Option<u32>,
    last_link_check: Option<(u8, u8)>,
    last_snr_db: Option<f64>,
    stats: DeviceStats,
    downlinks: Vec<DownlinkEvent>,
    groups: Vec<GroupSession>,
    listening: bool,
}

struct DevInner {
    kernel: Kernel,
    radio: Radio,
    state: RefCell<DevState>,
    apps: RefCell<AppRegistry>,
    busy: Cell<bool>,
}

/// A LoRaWAN end device driving one radio. Clones share state.
#[derive(Clone)]
pub struct Device {
    inner: Rc<DevInner>,
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device").field("id", &self.id()).finish()
    }
}

struct BusyGuard<'a>(&'a Cell<bool>);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.set(false);
    }
}

impl Device {
    pub fn new(radio: Radio, cfg: DeviceConfig) -> Result<Device, LorawanError> {
        cfg.validate()?;
        let kernel = radio.medium().kernel().clone();
        radio.set_idle_mode(IdleMode::Sleep);
        radio.set_config(uplink_config(cfg.sf, cfg.tx_power_dbm))?;
        let session = match &cfg.activation {
            Activation::Abp {
                dev_addr,
                nwk_skey,
                app_skey,
            } => Some(Session {
                dev_addr: *dev_addr,
                nwk_skey: *nwk_skey,
                app_skey: *app_skey,
                fcnt_up: 0,
                fcnt_down: None,
            }),
            Activation::Otaa { .. } => None,
        };
        let abp = session.is_some();
        let dev = Device {
            inner: Rc::new(DevInner {
                kernel: kernel.clone(),
                radio,
                state: RefCell::new(DevState {
                    cfg,
                    session,
                    rng: kernel.rng_stream(),
                    used_nonces: BTreeSet::new(),
                    mac_answers: Vec::new(),
                    link_check_req: false,
                    ack_next: false,
                    acked: None,
                    last_link_check: None,
                    last_snr_db: None,
                    stats: DeviceStats::default(),
                    downlinks: Vec::new(),
                    groups: Vec::new(),
                    listening: false,
                }),
                apps: RefCell::new(AppRegistry::default()),
                busy: Cell::new(false),
            }),
        };
        if abp {
            dev.start_listener()?;
        }
        Ok(dev)
    }

    pub fn id(&self) -> String {
        self.inner.radio.id()
    }

    pub fn radio(&self) -> &Radio {
        &self.inner.radio
    }

    pub fn class(&self) -> DeviceClass {
        self.inner.state.borrow().cfg.class
    }

    pub fn is_activated(&self) -> bool {
        self.inner.state.borrow().session.is_some()
    }

    pub fn dev_addr(&self) -> Option<u32> {
        self.inner.state.borrow().session.as_ref().map(|s| s.dev_addr)
    }

    /// Network and application session keys once activated.
    pub fn session_keys(&self) -> Option<(Key, Key)> {
        let st = self.inner.state.borrow();
        st.session.as_ref().map(|s| (s.nwk_skey, s.app_skey))
    }

    /// Frame counter the next new uplink will use.
    pub fn fcnt_up(&self) -> Option<u32> {
        self.inner.state.borrow().session.as_ref().map(|s| s.fcnt_up)
    }

    pub fn uplink_config(&self) -> RadioConfig {
        let st = self.inner.state.borrow();
        uplink_config(st.cfg.sf, st.cfg.tx_power_dbm)
    }

    pub fn stats(&self) -> DeviceStats {
        self.inner.state.borrow().stats.clone()
    }

    pub fn downlink_log(&self) -> Vec<DownlinkEvent> {
        self.inner.state.borrow().downlinks.clone()
    }

    /// Margin and gateway count from the latest LinkCheckAns.
    pub fn last_link_check(&self) -> Option<(u8, u8)> {
        self.inner.state.borrow().last_link_check
    }

    /// Adds a LinkCheckReq to the next uplink.
    pub fn request_link_check(&self) {
        self.inner.state.borrow_mut().link_check_req = true;
    }

    pub fn register_application(&self, app: AppHandle) -> Result<(), LorawanError> {
        self.inner.apps.borrow_mut().register(app)
    }

    pub fn add_multicast(&self, keys: MulticastSession) {
        self.inner
            .state
            .borrow_mut()
            .groups
            .push(GroupSession { keys, fcnt: None });
    }

    fn kernel(&self) -> &Kernel {
        &self.inner.kernel
    }

    fn rx2_config(&self) -> RadioConfig {
        self.inner.state.borrow().cfg.rx.rx2_config()
    }

    /// Class C devices listen on RX2 whenever they are not transmitting or
    /// in RX1.
    fn start_listener(&self) -> Result<(), LorawanError> {
        {
            let mut st = self.inner.state.borrow_mut();
            if st.cfg.class != DeviceClass::C || st.listening {
                return Ok(());
            }
            st.listening = true;
        }
        self.inner.radio.set_config(self.rx2_config())?;
        self.inner.radio.set_continuous_rx(true);
        let dev = Rc::downgrade(&self.inner);
        let radio = self.inner.radio.clone();
        self.kernel().spawn(async move {
            loop {
                match radio.receive(None).await {
                    Ok(Some(rec)) => {
                        let Some(inner) = dev.upgrade() else { break };
                        Device { inner }.handle_downlink(&rec);
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(())
    }

    /// OTAA join, retried with exponential backoff until accepted. Returns
    /// at once for ABP or already joined devices.
    pub async fn join(&self) -> Result<(), LorawanError> {
        let (dev_eui, join_eui, app_key) = {
            let st = self.inner.state.borrow();
            match (&st.cfg.activation, &st.session) {
                (_, Some(_)) | (Activation::Abp { .. }, _) => return Ok(()),
                (
                    Activation::Otaa {
                        dev_eui,
                        join_eui,
                        app_key,
                    },
                    None,
                ) => (*dev_eui, *join_eui, *app_key),
            }
        };
        if self.inner.busy.replace(true) {
            return Err(PhyError::Busy(self.id()).into());
        }
        let _busy = BusyGuard(&self.inner.busy);
        for attempt in 0u32.. {
            let (nonce, up_cfg, rx) = {
                let mut st = self.inner.state.borrow_mut();
                if st.used_nonces.len() > u16::MAX as usize {
                    return Err(LorawanError::Argument("DevNonce space exhausted".into()));
                }
                let nonce = loop {
                    let n: u16 = st.rng.random();
                    if st.used_nonces.insert(n) {
                        break n;
                    }
                };
                st.stats.join_requests += 1;
                (nonce, uplink_config(st.cfg.sf, st.cfg.tx_power_dbm), st.cfg.rx)
            };
            let jr = JoinRequest::seal(join_eui, dev_eui, nonce, &app_key);
            let tx = self.inner.radio.transmit_with(up_cfg, &jr.encode()).await?;
            let joined = self
                .class_a_windows(
                    tx.rx_end,
                    (rx.join_accept_delay1_s, rx1_config(&up_cfg)),
                    (rx.join_accept_delay2_s, rx.rx2_config()),
                    |rec| self.accept_join(rec, &app_key, nonce),
                )
                .await?;
            if joined {
                let now = self.kernel().now();
                self.inner.state.borrow_mut().stats.joined_at = Some(now);
                info!("{} joined at {:.6} s", self.id(), self.kernel().to_secs(now));
                self.start_listener()?;
                return Ok(());
            }
            let backoff = {
                let mut st = self.inner.state.borrow_mut();
                let base = (10.0 * 2f64.powi(attempt.min(4) as i32)).min(160.0);
                base * (1.0 + st.rng.random_range(-0.1..0.1))
            };
            debug!("{} join attempt {} failed, retrying in {backoff:.3} s", self.id(), attempt + 1);
            self.kernel().sleep(backoff).await?;
        }
        unreachable!()
    }

    fn accept_join(&self, rec: &Reception, app_key: &Key, dev_nonce: u16) -> bool {
        let Ok(PhyPayload::JoinAccept(wire)) = PhyPayload::decode(&rec.packet.payload) else {
            return false;
        };
        let Ok(ja) = JoinAccept::open(&wire, app_key) else {
            return false;
        };
        let (nwk_skey, app_skey) = derive_session_keys(app_key, ja.app_nonce, ja.net_id, dev_nonce);
        let mut st = self.inner.state.borrow_mut();
        st.session = Some(Session {
            dev_addr: ja.dev_addr,
            nwk_skey,
            app_skey,
            fcnt_up: 0,
            fcnt_down: None,
        });
        st.last_snr_db = Some(rec.snr_db);
        true
    }

    /// Opens the two receive windows after a transmission ending at `end`.
    /// Each window yields at most one frame; `accept` decides whether it
    /// closes the exchange.
    async fn class_a_windows<F: FnMut(&Reception) -> bool>(
        &self,
        end: SimTime,
        rx1: (f64, RadioConfig),
        rx2: (f64, RadioConfig),
        mut accept: F,
    ) -> Result<bool, LorawanError> {
        let k = self.kernel().clone();
        for (delay, cfg) in [rx1, rx2] {
            let at = end + k.ticks(delay)?;
            if at < k.now() {
                continue;
            }
            k.sleep_until(at).await?;
            self.inner.radio.set_config(cfg)?;
            if let Some(rec) = self.inner.radio.receive(Some(window_timeout(&cfg))).await? {
                if accept(&rec) {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Class C variant: the background listener does the receiving; this
    /// only retunes for RX1 and waits out the RX2 window.
    async fn class_c_windows(&self, end: SimTime, up_cfg: &RadioConfig) -> Result<(), LorawanError> {
        let k = self.kernel().clone();
        let rx = self.inner.state.borrow().cfg.rx;
        let radio = &self.inner.radio;
        let rx1 = rx1_config(up_cfg);
        let rx2 = rx.rx2_config();
        k.sleep_until(end + k.ticks(rx.rx1_delay_s)?).await?;
        radio.set_config(rx1)?;
        k.sleep(window_timeout(&rx1)).await?;
        radio.wait_until_settled().await;
        radio.set_config(rx2)?;
        let rx2_close = end + k.ticks(rx.rx2_delay_s + window_timeout(&rx2))?;
        if rx2_close > k.now() {
            k.sleep_until(rx2_close).await?;
        }
        radio.wait_until_settled().await;
        Ok(())
    }

    /// Sends one application uplink and runs the receive windows. Confirmed
    /// uplinks are repeated with the same counter until acknowledged or
    /// `max_transmissions` is reached.
    pub async fn send_uplink(
        &self,
        fport: u8,
        payload: &[u8],
        confirmed: bool,
    ) -> Result<UplinkResult, LorawanError> {
        check_fport(fport)?;
        if self.inner.busy.replace(true) {
            return Err(PhyError::Busy(self.id()).into());
        }
        let _busy = BusyGuard(&self.inner.busy);
        let (bytes, fcnt, up_cfg, rx, tries, class) = {
            let mut st = self.inner.state.borrow_mut();
            let st = &mut *st;
            let Some(s) = &st.session else {
                return Err(LorawanError::NotActivated);
            };
            let mut mac = std::mem::take(&mut st.mac_answers);
            if std::mem::take(&mut st.link_check_req) {
                mac.push(MacCommand::LinkCheckReq);
            }
            let mut fopts = encode_commands(&mac);
            fopts.truncate(15);
            let frame = DataFrame::seal(
                &DataFrameSpec {
                    mtype: if confirmed {
                        MType::ConfirmedDataUp
                    } else {
                        MType::UnconfirmedDataUp
                    },
                    dev_addr: s.dev_addr,
                    fctrl: FCtrl {
                        ack: std::mem::take(&mut st.ack_next),
                        ..FCtrl::default()
                    },
                    fcnt: s.fcnt_up,
                    fopts: &fopts,
                    fport: Some(fport),
                    payload,
                },
                &s.nwk_skey,
                &s.app_skey,
            )?;
            let tries = if confirmed { st.cfg.max_transmissions } else { 1 };
            (
                frame.encode(),
                s.fcnt_up,
                uplink_config(st.cfg.sf, st.cfg.tx_power_dbm),
                st.cfg.rx,
                tries,
                st.cfg.class,
            )
        };
        let mut result = UplinkResult {
            fcnt,
            transmissions: 0,
            acked: false,
            tx_end: SimTime::ZERO,
        };
        for attempt in 0..tries {
            if attempt > 0 {
                self.kernel().sleep(1.0).await?;
            }
            let tx = self.inner.radio.transmit_with(up_cfg, &bytes).await?;
            result.transmissions += 1;
            result.tx_end = tx.rx_end;
            self.inner.state.borrow_mut().stats.transmissions += 1;
            let listening = self.inner.state.borrow().listening;
            if class == DeviceClass::C && listening {
                self.class_c_windows(tx.rx_end, &up_cfg).await?;
            } else {
                self.class_a_windows(
                    tx.rx_end,
                    (rx.rx1_delay_s, rx1_config(&up_cfg)),
                    (rx.rx2_delay_s, rx.rx2_config()),
                    |rec| self.handle_downlink(rec),
                )
                .await?;
            }
            if confirmed && self.inner.state.borrow().acked == Some(fcnt) {
                result.acked = true;
                break;
            }
            if !confirmed {
                break;
            }
        }
        let mut st = self.inner.state.borrow_mut();
        st.stats.uplinks += 1;
        if result.acked {
            st.stats.acked += 1;
        }
        if let Some(s) = st.session.as_mut() {
            s.fcnt_up = fcnt + 1;
        }
        Ok(result)
    }

    /// Processes a received frame. Returns true if it was addressed to this
    /// device (unicast or one of its multicast groups) and authentic.
    fn handle_downlink(&self, rec: &Reception) -> bool {
        let Ok(PhyPayload::Data(f)) = PhyPayload::decode(&rec.packet.payload) else {
            return false;
        };
        if f.direction() != Direction::Down {
            return false;
        }
        let now = self.kernel().now();
        let id = self.id();
        let event = {
            let mut st = self.inner.state.borrow_mut();
            let st = &mut *st;
            let unicast = st.session.as_ref().is_some_and(|s| s.dev_addr == f.dev_addr);
            if unicast {
                let s = st.session.as_mut().unwrap();
                let fcnt = expand_fcnt(s.fcnt_down, f.fcnt);
                if !f.verify_mic(&s.nwk_skey, fcnt) {
                    st.stats.mic_failures += 1;
                    return false;
                }
                if s.fcnt_down.is_some_and(|last| fcnt <= last) {
                    st.stats.replays_dropped += 1;
                    return false;
                }
                s.fcnt_down = Some(fcnt);
                st.last_snr_db = Some(rec.snr_db);
                st.stats.downlinks += 1;
                if f.fctrl.ack {
                    st.acked = Some(s.fcnt_up);
                }
                if f.mtype.is_confirmed() {
                    st.ack_next = true;
                }
                let (nwk, app) = (s.nwk_skey, s.app_skey);
                let mac_bytes = if f.fport == Some(0) {
                    f.decrypt_payload(&nwk, fcnt)
                } else {
                    f.fopts.clone()
                };
                let (cmds, unknown) = decode_commands(&mac_bytes, Direction::Down);
                if let Some(cid) = unknown {
                    debug!("{id} ignoring unknown MAC command {cid:#04x}");
                }
                for cmd in cmds {
                    Self::apply_mac(st, cmd);
                }
                match f.fport {
                    Some(port) if port > 0 => Some(DownlinkEvent {
                        time: now,
                        device: id,
                        dev_addr: f.dev_addr,
                        fport: port,
                        fcnt,
                        payload: f.decrypt_payload(&app, fcnt),
                        multicast: false,
                        rssi_dbm: rec.rssi_dbm,
                        snr_db: rec.snr_db,
                    }),
                    _ => None,
                }
            } else {
                let Some(g) = st.groups.iter_mut().find(|g| g.keys.mc_addr == f.dev_addr) else {
                    return false;
                };
                let fcnt = expand_fcnt(g.fcnt, f.fcnt);
                if !f.verify_mic(&g.keys.nwk_skey, fcnt) {
                    st.stats.mic_failures += 1;
                    return false;
                }
                if g.fcnt.is_some_and(|last| fcnt <= last) {
                    st.stats.replays_dropped += 1;
                    return false;
                }
                g.fcnt = Some(fcnt);
                let payload = f.decrypt_payload(&g.keys.app_skey, fcnt);
                st.stats.multicast_downlinks += 1;
                match f.fport {
                    Some(port) if port > 0 => Some(DownlinkEvent {
                        time: now,
                        device: id,
                        dev_addr: f.dev_addr,
                        fport: port,
                        fcnt,
                        payload,
                        multicast: true,
                        rssi_dbm: rec.rssi_dbm,
                        snr_db: rec.snr_db,
                    }),
                    _ => None,
                }
            }
        };
        if let Some(ev) = event {
            self.inner.state.borrow_mut().downlinks.push(ev.clone());
            let app = self.inner.apps.borrow().get(ev.fport);
            if let Some(app) = app {
                app.borrow_mut().on_downlink(&ev);
            }
        }
        true
    }

    fn apply_mac(st: &mut DevState, cmd: MacCommand) {
        match cmd {
            MacCommand::LinkCheckAns { margin, gw_cnt } => st.last_link_check = Some((margin, gw_cnt)),
            MacCommand::LinkAdrReq {
                data_rate,
                tx_power,
                ch_mask,
                ..
            } => {
                // 0xF keeps the current value.
                let sf = if data_rate == 0x0f { Some(st.cfg.sf) } else { dr_to_sf(data_rate) };
                let dbm = if tx_power == 0x0f {
                    Some(st.cfg.tx_power_dbm)
                } else {
                    tx_power_dbm(tx_power)
                };
                let mask_ok = ch_mask & 0x0001 != 0;
                if let (Some(sf), Some(dbm), true) = (sf, dbm, mask_ok) {
                    st.cfg.sf = sf;
                    st.cfg.tx_power_dbm = dbm;
                }
                st.mac_answers.push(MacCommand::LinkAdrAns {
                    power_ack: dbm.is_some(),
                    data_rate_ack: sf.is_some(),
                    channel_mask_ack: mask_ok,
                });
            }
            MacCommand::DevStatusReq => {
                let margin = st.last_snr_db.unwrap_or(0.0).round().clamp(-32.0, 31.0) as i8;
                st.mac_answers.push(MacCommand::DevStatusAns {
                    battery: st.cfg.battery,
                    margin,
                });
            }
            _ => {}
        }
    }
}
