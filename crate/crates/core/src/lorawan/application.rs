use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::kernel::SimTime;

use super::{LorawanError, NetworkServer};

/// A decrypted uplink handed to a server-side application.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkEvent {
    pub time: SimTime,
    pub dev_addr: u32,
    pub dev_eui: Option<u64>,
    pub fport: u8,
    pub fcnt: u32,
    pub confirmed: bool,
    pub payload: Vec<u8>,
    /// Strongest copy among the gateways that heard the frame so far.
    pub rssi_dbm: f64,
    pub snr_db: f64,
    pub gateway: String,
}

/// A decrypted downlink handed to a device-side application.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkEvent {
    pub time: SimTime,
    pub device: String,
    /// Device or multicast group address the frame was sent to.
    pub dev_addr: u32,
    pub fport: u8,
    pub fcnt: u32,
    pub payload: Vec<u8>,
    pub multicast: bool,
    pub rssi_dbm: f64,
    pub snr_db: f64,
}

/// Application bound to one FPort, on a device or on the network server.
pub trait Application {
    /// FPort in 1..=223.
    fn port(&self) -> u8;

    fn on_uplink(&mut self, _ns: &NetworkServer, _uplink: &UplinkEvent) {}

    fn on_downlink(&mut self, _downlink: &DownlinkEvent) {}
}

pub type AppHandle = Rc<RefCell<dyn Application>>;

#[derive(Default)]
pub(crate) struct AppRegistry {
    apps: BTreeMap<u8, AppHandle>,
}

impl AppRegistry {
    pub(crate) fn register(&mut self, app: AppHandle) -> Result<(), LorawanError> {
        let port = app.borrow().port();
        check_fport(port)?;
        if self.apps.contains_key(&port) {
            return Err(LorawanError::DuplicatePort(port));
        }
        self.apps.insert(port, app);
        Ok(())
    }

    pub(crate) fn get(&self, port: u8) -> Option<AppHandle> {
        self.apps.get(&port).cloned()
    }
}

pub(crate) fn check_fport(port: u8) -> Result<(), LorawanError> {
    if (1..=223).contains(&port) {
        Ok(())
    } else {
        Err(LorawanError::Argument(format!(
            "application FPort must be in 1..=223, got {port}"
        )))
    }
}
