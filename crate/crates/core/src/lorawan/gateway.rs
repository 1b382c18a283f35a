use std::cell::Cell;
use std::rc::Rc;

use log::{debug, warn};

use crate::kernel::SimQueue;
use crate::phy::{IdleMode, PhyError, Radio, RadioConfig, Reception};

use super::region::{uplink_config, DOWNLINK_POWER_DBM};

/// An uplink copy as forwarded by one gateway.
#[derive(Debug, Clone)]
pub(crate) struct GatewayUplink {
    pub gateway: usize,
    pub reception: Reception,
}

pub(crate) struct TxRequest {
    pub config: RadioConfig,
    pub payload: Vec<u8>,
}

struct GatewayInner {
    index: usize,
    radio: Radio,
    tx_queue: SimQueue<TxRequest>,
    transmitting: Cell<bool>,
    sent: Cell<u64>,
}

/// Packet forwarder: a multi-SF receiver on the uplink channel that hands
/// every frame to the network server and transmits downlinks on request.
#[derive(Clone)]
pub struct Gateway {
    inner: Rc<GatewayInner>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("id", &self.id()).finish()
    }
}

impl Gateway {
    pub(crate) fn start(
        index: usize,
        radio: Radio,
        uplinks: SimQueue<GatewayUplink>,
    ) -> Result<Gateway, PhyError> {
        radio.set_config(uplink_config(7, DOWNLINK_POWER_DBM))?;
        radio.set_multi_sf(true);
        radio.set_idle_mode(IdleMode::Standby);
        radio.set_continuous_rx(true);
        let kernel = radio.medium().kernel().clone();
        let gw = Gateway {
            inner: Rc::new(GatewayInner {
                index,
                radio: radio.clone(),
                tx_queue: SimQueue::new(&kernel),
                transmitting: Cell::new(false),
                sent: Cell::new(0),
            }),
        };

        let rx_radio = radio.clone();
        kernel.spawn(async move {
            loop {
                match rx_radio.receive(None).await {
                    Ok(Some(reception)) => uplinks.put(GatewayUplink {
                        gateway: index,
                        reception,
                    }),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });

        let inner = Rc::downgrade(&gw.inner);
        let queue = gw.inner.tx_queue.clone();
        kernel.spawn(async move {
            while let Ok(req) = queue.get().await {
                let Some(gw) = inner.upgrade() else { break };
                gw.transmitting.set(true);
                let res = gw.radio.transmit_with(req.config, &req.payload).await;
                gw.transmitting.set(false);
                match res {
                    Ok(p) => {
                        gw.sent.set(gw.sent.get() + 1);
                        debug!("gateway {} sent downlink seq {}", gw.index, p.seq);
                    }
                    Err(PhyError::Ended) => break,
                    Err(e) => warn!("gateway {} downlink failed: {e}", gw.index),
                }
            }
        });
        Ok(gw)
    }

    pub fn index(&self) -> usize {
        self.inner.index
    }

    pub fn id(&self) -> String {
        self.inner.radio.id()
    }

    pub fn radio(&self) -> &Radio {
        &self.inner.radio
    }

    /// True while a downlink is on air or waiting to be sent.
    pub fn busy(&self) -> bool {
        self.inner.transmitting.get() || !self.inner.tx_queue.is_empty()
    }

    pub fn downlinks_sent(&self) -> u64 {
        self.inner.sent.get()
    }

    pub(crate) fn send(&self, config: RadioConfig, payload: Vec<u8>) {
        self.inner.tx_queue.put(TxRequest { config, payload });
    }
}
