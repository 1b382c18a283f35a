use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::{Rc, Weak};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    airtime, config_match, link_budget, resolve_collision, Arrival, CollisionParams, Location,
    Outcome, PathLossParams, PhyError, RadioConfig,
};
use crate::energy::{PowerConsumer, PowerEvent, PowerProfile};
use crate::kernel::{Kernel, SimQueue, SimTime, Signal, Elapsed};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhyParams {
    pub path_loss: PathLossParams,
    pub collision: CollisionParams,
}

impl PhyParams {
    pub fn validate(&self) -> Result<(), PhyError> {
        self.path_loss.validate()?;
        self.collision.validate()
    }
}

/// A transmission as it travels over the air. Every receiver gets its own
/// copy.
#[derive(Debug, Clone, PartialEq)]
pub struct AirPacket {
    pub seq: u64,
    pub payload: Vec<u8>,
    pub config: RadioConfig,
    pub tx_start: SimTime,
    pub preamble_end: SimTime,
    pub rx_end: SimTime,
    pub tx_location: Location,
    pub sender_id: String,
}

/// A packet that was successfully demodulated by a radio.
#[derive(Debug, Clone, PartialEq)]
pub struct Reception {
    pub packet: AirPacket,
    pub rssi_dbm: f64,
    pub snr_db: f64,
    pub collided: bool,
    pub preamble_missed: bool,
    pub interrupted: bool,
}

/// One row of the packet log.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub seq: u64,
    pub time: SimTime,
    pub sender_id: String,
    pub config: RadioConfig,
    pub airtime_s: f64,
    pub tx_location: Location,
    pub payload: Vec<u8>,
}

/// One row of the per-radio log: the fate of one packet at one radio.
/// `time` is the packet's transmission start.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptionRecord {
    pub packet_seq: u64,
    pub time: SimTime,
    pub radio_index: usize,
    pub radio_id: String,
    pub sender_id: String,
    pub rssi_dbm: f64,
    pub snr_db: f64,
    pub delivered: bool,
    pub collided: bool,
    pub preamble_missed: bool,
    pub interrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRecord {
    pub radio_index: usize,
    pub radio_id: String,
    pub event: PowerEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadioMode {
    Sleep,
    Standby,
    Rx,
    Cad,
    Tx,
}

/// What a radio does when it is neither transmitting nor listening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdleMode {
    Sleep,
    Standby,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkStatus {
    /// Receiver not listening (or signal below sensitivity, or mismatch).
    Idle,
    Candidate { locked: bool },
    /// Receiver could have demodulated the packet but was not ready in time.
    Missed,
    /// Receiver stopped listening mid-packet.
    Aborted { locked: bool, by_tx: bool },
}

#[derive(Debug, Clone)]
struct Link {
    rssi_dbm: f64,
    snr_db: f64,
    above: bool,
    status: LinkStatus,
    arrival: Arrival,
    interferers: Vec<Arrival>,
}

struct Transmission {
    packet: AirPacket,
    sender: usize,
    /// Indexed by receiver; the sender's own entry is unused.
    links: Vec<Link>,
}

struct RadioState {
    name: String,
    location: Location,
    config: RadioConfig,
    multi_sf: bool,
    profile: PowerProfile,
    consumer: PowerConsumer,
    transmitting: bool,
    /// Output power of the packet being sent.
    tx_dbm: i8,
    cad: bool,
    cad_hit: bool,
    listeners: usize,
    /// Stay in Rx between `receive` calls.
    continuous_rx: bool,
    idle: IdleMode,
    mode: RadioMode,
    queue: SimQueue<Reception>,
    candidates: BTreeSet<u64>,
    resolved: Signal,
}

impl RadioState {
    fn accepts(&self, tx: &RadioConfig) -> bool {
        if self.multi_sf {
            config_match(tx, &RadioConfig { sf: tx.sf, ..self.config })
        } else {
            config_match(tx, &self.config)
        }
    }

    fn wanted_mode(&self) -> RadioMode {
        if self.transmitting {
            RadioMode::Tx
        } else if self.cad {
            RadioMode::Cad
        } else if self.listeners > 0 || self.continuous_rx {
            RadioMode::Rx
        } else {
            match self.idle {
                IdleMode::Sleep => RadioMode::Sleep,
                IdleMode::Standby => RadioMode::Standby,
            }
        }
    }

    fn power_w(&self, mode: RadioMode) -> f64 {
        match mode {
            RadioMode::Sleep => self.profile.sleep_w,
            RadioMode::Standby => self.profile.standby_w,
            RadioMode::Rx | RadioMode::Cad => self.profile.rx_w,
            RadioMode::Tx => self.profile.tx_power_w(self.tx_dbm),
        }
    }
}

struct MediumState {
    radios: Vec<RadioState>,
    on_air: BTreeMap<u64, Transmission>,
    packets: Vec<PacketRecord>,
    receptions: Vec<ReceptionRecord>,
    next_seq: u64,
    rng: ChaCha8Rng,
}

/// The shared channel all radios transmit into. Clones share state.
#[derive(Clone)]
pub struct Medium {
    kernel: Kernel,
    params: Rc<PhyParams>,
    state: Rc<RefCell<MediumState>>,
}

impl std::fmt::Debug for Medium {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.state.borrow();
        f.debug_struct("Medium")
            .field("radios", &st.radios.len())
            .field("packets", &st.packets.len())
            .finish()
    }
}

impl Medium {
    pub fn new(kernel: &Kernel, params: PhyParams) -> Result<Self, PhyError> {
        params.validate()?;
        let medium = Medium {
            kernel: kernel.clone(),
            params: Rc::new(params),
            state: Rc::new(RefCell::new(MediumState {
                radios: Vec::new(),
                on_air: BTreeMap::new(),
                packets: Vec::new(),
                receptions: Vec::new(),
                next_seq: 0,
                rng: kernel.rng_stream(),
            })),
        };
        // Packets still on air when the run stops get their rows now.
        let weak: Weak<RefCell<MediumState>> = Rc::downgrade(&medium.state);
        let params = medium.params.clone();
        kernel.on_sim_end(move || {
            if let Some(state) = weak.upgrade() {
                let mut st = state.borrow_mut();
                let ids: Vec<u64> = st.on_air.keys().copied().collect();
                for id in ids {
                    finish_packet(&mut st, &params, id, true);
                }
            }
        });
        Ok(medium)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn params(&self) -> &PhyParams {
        &self.params
    }

    pub fn add_radio(
        &self,
        id: &str,
        location: Location,
        config: RadioConfig,
        profile: PowerProfile,
    ) -> Result<Radio, PhyError> {
        config.validate()?;
        profile.validate()?;
        if !location.is_finite() {
            return Err(PhyError::InvalidLocation);
        }
        let mut st = self.state.borrow_mut();
        if st.radios.iter().any(|r| r.name == id) {
            return Err(PhyError::DuplicateRadio(id.to_string()));
        }
        let consumer = PowerConsumer::new(&self.kernel);
        consumer.set_power(profile.standby_w)?;
        // Packets already on air never reach a radio that joins late.
        for tx in st.on_air.values_mut() {
            tx.links.push(Link {
                rssi_dbm: f64::NEG_INFINITY,
                snr_db: f64::NEG_INFINITY,
                above: false,
                status: LinkStatus::Idle,
                arrival: tx.links[0].arrival,
                interferers: Vec::new(),
            });
        }
        st.radios.push(RadioState {
            name: id.to_string(),
            location,
            config,
            multi_sf: false,
            profile,
            consumer,
            transmitting: false,
            tx_dbm: config.tx_power_dbm,
            cad: false,
            cad_hit: false,
            listeners: 0,
            continuous_rx: false,
            idle: IdleMode::Standby,
            mode: RadioMode::Standby,
            queue: SimQueue::new(&self.kernel),
            candidates: BTreeSet::new(),
            resolved: Signal::new(),
        });
        Ok(Radio {
            medium: self.clone(),
            index: st.radios.len() - 1,
        })
    }

    pub fn radio_count(&self) -> usize {
        self.state.borrow().radios.len()
    }

    pub fn packet_log(&self) -> Vec<PacketRecord> {
        self.state.borrow().packets.clone()
    }

    /// Per-radio rows ordered by (packet start, packet, radio).
    pub fn reception_log(&self) -> Vec<ReceptionRecord> {
        let mut rows = self.state.borrow().receptions.clone();
        rows.sort_by_key(|r| (r.time, r.packet_seq, r.radio_index));
        rows
    }

    /// Power transitions of every radio ordered by (time, radio).
    pub fn energy_log(&self) -> Vec<EnergyRecord> {
        let st = self.state.borrow();
        let mut rows: Vec<EnergyRecord> = st
            .radios
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.consumer.events().into_iter().map(move |event| EnergyRecord {
                    radio_index: i,
                    radio_id: r.name.clone(),
                    event,
                })
            })
            .collect();
        // Stable: keeps per-radio event order within a tick.
        rows.sort_by_key(|r| (r.event.time, r.radio_index));
        rows
    }

    fn update_mode(&self, st: &mut MediumState, idx: usize) {
        if self.kernel.has_ended() {
            return;
        }
        let radio = &mut st.radios[idx];
        let new = radio.wanted_mode();
        let old = radio.mode;
        if new == old {
            return;
        }
        radio.mode = new;
        let w = radio.power_w(new);
        radio
            .consumer
            .set_power(w)
            .expect("profile validated at registration");
        log::trace!(target: "lorasim::phy", "{} {:?} -> {:?}", radio.name, old, new);
        if old == RadioMode::Rx {
            abort_candidates(st, idx, new == RadioMode::Tx);
        }
        if new == RadioMode::Rx {
            self.enter_rx(st, idx);
        }
    }

    /// Picks up packets already on air whose critical preamble section has
    /// not started yet.
    fn enter_rx(&self, st: &mut MediumState, idx: usize) {
        let now = self.kernel.now().ticks();
        let MediumState { radios, on_air, .. } = st;
        let radio = &mut radios[idx];
        for (id, tx) in on_air.iter_mut() {
            if tx.sender == idx || tx.packet.rx_end.ticks() <= now {
                continue;
            }
            let link = &mut tx.links[idx];
            let retry = matches!(
                link.status,
                LinkStatus::Idle | LinkStatus::Missed | LinkStatus::Aborted { locked: false, .. }
            );
            if !retry || !link.above || !radio.accepts(&tx.packet.config) {
                continue;
            }
            if now <= link.arrival.critical_start {
                link.status = LinkStatus::Candidate { locked: false };
                radio.candidates.insert(*id);
            } else {
                link.status = LinkStatus::Missed;
            }
        }
    }

    async fn transmit_from(
        &self,
        idx: usize,
        config: RadioConfig,
        payload: &[u8],
    ) -> Result<AirPacket, PhyError> {
        config.validate()?;
        let at = airtime(&config, payload.len())?;
        let k = &self.kernel;
        if k.has_ended() {
            return Err(PhyError::Ended);
        }
        let now = k.now();
        let preamble_end = now + k.ticks(at.preamble)?;
        let rx_end = now + k.ticks(at.total)?;
        let critical = k.ticks(self.params.collision.critical_preamble_symbols as f64 * at.symbol)?;
        let critical_start = SimTime(preamble_end.ticks().saturating_sub(critical).max(now.ticks()));

        let packet = {
            let mut st = self.state.borrow_mut();
            let radio = &mut st.radios[idx];
            if radio.transmitting || radio.cad {
                return Err(PhyError::Busy(radio.name.clone()));
            }
            let seq = st.next_seq;
            st.next_seq += 1;
            let radio = &mut st.radios[idx];
            let packet = AirPacket {
                seq,
                payload: payload.to_vec(),
                config,
                tx_start: now,
                preamble_end,
                rx_end,
                tx_location: radio.location,
                sender_id: radio.name.clone(),
            };
            radio.tx_dbm = config.tx_power_dbm;
            radio.transmitting = true;
            self.update_mode(&mut st, idx);
            st.packets.push(PacketRecord {
                seq,
                time: now,
                sender_id: packet.sender_id.clone(),
                config,
                airtime_s: k.to_secs(SimTime(rx_end.ticks() - now.ticks())),
                tx_location: packet.tx_location,
                payload: packet.payload.clone(),
            });
            self.start_packet(&mut st, idx, packet.clone(), critical_start);
            packet
        };
        log::debug!(
            target: "lorasim::phy",
            "t={:.6} {} tx seq={} sf{} {} bytes",
            k.to_secs(now),
            packet.sender_id,
            packet.seq,
            config.sf,
            payload.len()
        );

        // Timers are armed before the caller's own wait so the delivery
        // phases run first at equal ticks.
        let at_preamble_end = k.sleep_until(preamble_end);
        let at_end = k.sleep_until(rx_end);
        let medium = self.clone();
        let seq = packet.seq;
        k.spawn(async move {
            if at_preamble_end.await.is_err() {
                return;
            }
            medium.lock_candidates(seq);
            if at_end.await.is_err() {
                return;
            }
            let mut st = medium.state.borrow_mut();
            finish_packet(&mut st, &medium.params, seq, false);
            st.radios[idx].transmitting = false;
            medium.update_mode(&mut st, idx);
        });
        k.sleep_until(rx_end).await?;
        Ok(packet)
    }

    /// Phase one: link budgets, receiver states and overlap bookkeeping.
    fn start_packet(
        &self,
        st: &mut MediumState,
        sender: usize,
        packet: AirPacket,
        critical_start: SimTime,
    ) {
        let params = &self.params;
        let cfg = packet.config;
        let sensitivity = params.collision.sensitivity(cfg.sf, cfg.bw_hz);
        let shadow = (params.path_loss.sigma_db > 0.0)
            .then(|| Normal::new(0.0, params.path_loss.sigma_db).expect("sigma validated"));
        let now = packet.tx_start.ticks();
        let MediumState {
            radios,
            on_air,
            rng,
            ..
        } = st;
        let mut links = Vec::with_capacity(radios.len());
        for (r, radio) in radios.iter_mut().enumerate() {
            let shadow_db = match (&shadow, r == sender) {
                (Some(n), false) => n.sample(rng),
                _ => 0.0,
            };
            let lb = link_budget(
                cfg.tx_power_dbm as f64,
                &packet.tx_location,
                &radio.location,
                cfg.bw_hz,
                &params.path_loss,
                params.collision.noise_figure_db,
                shadow_db,
            );
            let above = r != sender && lb.rssi_dbm >= sensitivity;
            let status = if !above {
                LinkStatus::Idle
            } else {
                match radio.mode {
                    RadioMode::Tx if radio.accepts(&cfg) => LinkStatus::Missed,
                    RadioMode::Rx if radio.accepts(&cfg) => {
                        radio.candidates.insert(packet.seq);
                        LinkStatus::Candidate { locked: false }
                    }
                    RadioMode::Cad => {
                        if co_channel(&cfg, &radio.config) {
                            radio.cad_hit = true;
                        }
                        LinkStatus::Idle
                    }
                    _ => LinkStatus::Idle,
                }
            };
            links.push(Link {
                rssi_dbm: lb.rssi_dbm,
                snr_db: lb.snr_db,
                above,
                status,
                arrival: Arrival {
                    tx_start: now,
                    critical_start: critical_start.ticks(),
                    preamble_end: packet.preamble_end.ticks(),
                    rx_end: packet.rx_end.ticks(),
                    rssi_dbm: lb.rssi_dbm,
                },
                interferers: Vec::new(),
            });
        }
        for other in on_air.values_mut() {
            if other.packet.rx_end.ticks() <= now || !co_channel(&other.packet.config, &cfg) {
                continue;
            }
            for (r, link) in links.iter_mut().enumerate() {
                if r == sender || r == other.sender {
                    continue;
                }
                let theirs = &mut other.links[r];
                if link.above && theirs.above {
                    link.interferers.push(theirs.arrival);
                    theirs.interferers.push(link.arrival);
                }
            }
        }
        on_air.insert(
            packet.seq,
            Transmission {
                packet,
                sender,
                links,
            },
        );
    }

    /// Phase two: receivers still tracking the packet lock on at the end of
    /// its preamble.
    fn lock_candidates(&self, seq: u64) {
        let mut st = self.state.borrow_mut();
        if let Some(tx) = st.on_air.get_mut(&seq) {
            for link in &mut tx.links {
                if let LinkStatus::Candidate { locked } = &mut link.status {
                    *locked = true;
                }
            }
        }
    }
}

fn co_channel(a: &RadioConfig, b: &RadioConfig) -> bool {
    a.frequency_hz == b.frequency_hz && a.sf == b.sf && a.bw_hz == b.bw_hz
}

fn abort_candidates(st: &mut MediumState, idx: usize, by_tx: bool) {
    let radio = &mut st.radios[idx];
    let ids = std::mem::take(&mut radio.candidates);
    if ids.is_empty() {
        return;
    }
    for id in ids {
        if let Some(tx) = st.on_air.get_mut(&id) {
            if let LinkStatus::Candidate { locked } = tx.links[idx].status {
                tx.links[idx].status = LinkStatus::Aborted { locked, by_tx };
            }
        }
    }
    st.radios[idx].resolved.notify_all();
}

/// Phase three: resolve the packet at every receiver and write its rows.
/// `truncated` packets were cut off by the end of the run.
fn finish_packet(st: &mut MediumState, params: &PhyParams, seq: u64, truncated: bool) {
    let Some(tx) = st.on_air.remove(&seq) else { return };
    for (r, link) in tx.links.iter().enumerate() {
        if r == tx.sender {
            continue;
        }
        let radio = &mut st.radios[r];
        let (delivered, collided, missed, interrupted) = match link.status {
            LinkStatus::Candidate { .. } => {
                radio.candidates.remove(&seq);
                radio.resolved.notify_all();
                if truncated {
                    (false, false, false, false)
                } else {
                    match resolve_collision(&link.arrival, &link.interferers, &params.collision) {
                        Outcome::Received => (true, false, false, false),
                        Outcome::LostPreamble => (false, true, true, false),
                        Outcome::LostPayload => (false, true, false, true),
                    }
                }
            }
            LinkStatus::Missed => (false, false, true, false),
            LinkStatus::Aborted { locked, by_tx } => {
                let interrupted = locked || by_tx;
                (false, false, !interrupted, interrupted)
            }
            LinkStatus::Idle => (false, false, false, false),
        };
        if delivered {
            radio.queue.put(Reception {
                packet: tx.packet.clone(),
                rssi_dbm: link.rssi_dbm,
                snr_db: link.snr_db,
                collided: false,
                preamble_missed: false,
                interrupted: false,
            });
        }
        st.receptions.push(ReceptionRecord {
            packet_seq: seq,
            time: tx.packet.tx_start,
            radio_index: r,
            radio_id: st.radios[r].name.clone(),
            sender_id: tx.packet.sender_id.clone(),
            rssi_dbm: link.rssi_dbm,
            snr_db: link.snr_db,
            delivered,
            collided,
            preamble_missed: missed,
            interrupted,
        });
    }
}

/// Handle to one registered radio.
#[derive(Clone)]
pub struct Radio {
    medium: Medium,
    index: usize,
}

impl std::fmt::Debug for Radio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Radio").field("id", &self.id()).finish()
    }
}

impl Radio {
    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn id(&self) -> String {
        self.medium.state.borrow().radios[self.index].name.clone()
    }

    pub fn location(&self) -> Location {
        self.medium.state.borrow().radios[self.index].location
    }

    /// Moves the radio. Takes effect for packets that start afterwards.
    pub fn set_location(&self, location: Location) -> Result<(), PhyError> {
        if !location.is_finite() {
            return Err(PhyError::InvalidLocation);
        }
        self.medium.state.borrow_mut().radios[self.index].location = location;
        Ok(())
    }

    pub fn config(&self) -> RadioConfig {
        self.medium.state.borrow().radios[self.index].config
    }

    /// Retunes the radio. A listening radio drops packets it was tracking
    /// and starts over with the new settings.
    pub fn set_config(&self, config: RadioConfig) -> Result<(), PhyError> {
        config.validate()?;
        let mut st = self.medium.state.borrow_mut();
        let radio = &mut st.radios[self.index];
        if radio.config == config {
            return Ok(());
        }
        radio.config = config;
        if radio.mode == RadioMode::Rx && !self.medium.kernel.has_ended() {
            abort_candidates(&mut st, self.index, false);
            self.medium.enter_rx(&mut st, self.index);
        }
        Ok(())
    }

    /// Gateway-style receiver that demodulates every SF at once.
    pub fn set_multi_sf(&self, on: bool) {
        self.medium.state.borrow_mut().radios[self.index].multi_sf = on;
    }

    /// Keeps the receiver on even while no `receive` call is pending, so a
    /// receive loop does not drop packets that are mid-air between calls.
    /// Packets completed in the meantime wait in the reception queue.
    pub fn set_continuous_rx(&self, on: bool) {
        let mut st = self.medium.state.borrow_mut();
        st.radios[self.index].continuous_rx = on;
        self.medium.update_mode(&mut st, self.index);
    }

    pub fn set_idle_mode(&self, idle: IdleMode) {
        let mut st = self.medium.state.borrow_mut();
        st.radios[self.index].idle = idle;
        self.medium.update_mode(&mut st, self.index);
    }

    pub fn mode(&self) -> RadioMode {
        self.medium.state.borrow().radios[self.index].mode
    }

    pub fn energy(&self) -> PowerConsumer {
        self.medium.state.borrow().radios[self.index].consumer.clone()
    }

    /// Transmits with the radio's current configuration; completes when the
    /// packet has left the air.
    pub async fn transmit(&self, payload: &[u8]) -> Result<AirPacket, PhyError> {
        let cfg = self.config();
        self.medium.transmit_from(self.index, cfg, payload).await
    }

    /// Transmits one packet with `config` without retuning the receiver.
    pub async fn transmit_with(
        &self,
        config: RadioConfig,
        payload: &[u8],
    ) -> Result<AirPacket, PhyError> {
        self.medium.transmit_from(self.index, config, payload).await
    }

    /// Waits for the next successfully received packet. With a timeout, a
    /// packet whose preamble was detected before the deadline is still
    /// waited for. `Ok(None)` means the timeout expired.
    pub async fn receive(&self, timeout: Option<f64>) -> Result<Option<Reception>, PhyError> {
        let k = self.medium.kernel.clone();
        let deadline = match timeout {
            Some(t) => Some(k.now() + k.ticks(t)?),
            None => None,
        };
        let (queue, resolved) = {
            let st = self.medium.state.borrow();
            let r = &st.radios[self.index];
            (r.queue.clone(), r.resolved.clone())
        };
        let _guard = ListenGuard::new(self);
        let Some(deadline) = deadline else {
            return queue.get().await.map(Some).map_err(|_| PhyError::Ended);
        };
        match k.timeout_at(deadline, queue.get()).await {
            Ok(Ok(rx)) => return Ok(Some(rx)),
            Ok(Err(_)) => return Err(PhyError::Ended),
            Err(Elapsed) => {}
        }
        loop {
            if let Some(rx) = queue.try_get() {
                return Ok(Some(rx));
            }
            let wait = resolved.wait();
            if self.medium.state.borrow().radios[self.index].candidates.is_empty() {
                return Ok(None);
            }
            wait.await;
        }
    }

    /// True while the receiver is tracking a packet it may still deliver.
    pub fn is_receiving(&self) -> bool {
        !self.medium.state.borrow().radios[self.index].candidates.is_empty()
    }

    /// Waits until the receiver tracks no packet.
    pub async fn wait_until_settled(&self) {
        let resolved = self.medium.state.borrow().radios[self.index].resolved.clone();
        loop {
            let wait = resolved.wait();
            if !self.is_receiving() {
                return;
            }
            wait.await;
        }
    }

    /// Channel activity detection over two symbols of the current
    /// configuration.
    pub async fn cad(&self) -> Result<bool, PhyError> {
        let k = self.medium.kernel.clone();
        let duration = 2.0 * self.config().symbol_time();
        {
            let mut st = self.medium.state.borrow_mut();
            let now = k.now().ticks();
            let MediumState { radios, on_air, .. } = &mut *st;
            let radio = &mut radios[self.index];
            if radio.transmitting || radio.cad || radio.listeners > 0 {
                return Err(PhyError::Busy(radio.name.clone()));
            }
            radio.cad = true;
            radio.cad_hit = on_air.values().any(|tx| {
                tx.sender != self.index
                    && tx.packet.rx_end.ticks() > now
                    && tx.links[self.index].above
                    && co_channel(&tx.packet.config, &radio.config)
            });
            self.medium.update_mode(&mut st, self.index);
        }
        let guard = CadGuard { radio: self };
        k.sleep(duration).await?;
        let hit = self.medium.state.borrow().radios[self.index].cad_hit;
        drop(guard);
        Ok(hit)
    }
}

struct ListenGuard<'a> {
    radio: &'a Radio,
}

impl<'a> ListenGuard<'a> {
    fn new(radio: &'a Radio) -> Self {
        let mut st = radio.medium.state.borrow_mut();
        st.radios[radio.index].listeners += 1;
        radio.medium.update_mode(&mut st, radio.index);
        ListenGuard { radio }
    }
}

impl Drop for ListenGuard<'_> {
    fn drop(&mut self) {
        let Ok(mut st) = self.radio.medium.state.try_borrow_mut() else { return };
        st.radios[self.radio.index].listeners -= 1;
        self.radio.medium.update_mode(&mut st, self.radio.index);
    }
}

struct CadGuard<'a> {
    radio: &'a Radio,
}

impl Drop for CadGuard<'_> {
    fn drop(&mut self) {
        let Ok(mut st) = self.radio.medium.state.try_borrow_mut() else { return };
        let radio = &mut st.radios[self.radio.index];
        radio.cad = false;
        radio.cad_hit = false;
        self.radio.medium.update_mode(&mut st, self.radio.index);
    }
}
