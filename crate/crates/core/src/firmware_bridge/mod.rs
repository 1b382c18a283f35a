//! Firmware-in-the-loop: runs host-compiled C firmware against HAL shims
//! that map onto the simulator.
//!
//! Each instance is a private copy of the module, loaded with `RTLD_LOCAL`,
//! so instances of the same image do not share globals. The firmware runs on
//! its own OS thread. Every HAL call hands control to the instance's kernel
//! task and blocks until that task answers. The kernel thread waits while
//! the firmware runs, so virtual time cannot move under it.
//!
//! The shims are exported from the executable, which must be linked with
//! `-rdynamic` (this crate's build script does that for its own binaries).

mod hal;

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

use libloading::os::unix::{Library, Symbol, RTLD_LOCAL, RTLD_NOW};
use log::{debug, warn};

use crate::kernel::{Kernel, SimTime, TaskHandle};
use crate::phy::{PhyError, Radio, RadioConfig};

pub use hal::{binding_table, SimRadioConfig};
use hal::{Channel, Reply, Request, StopFirmware, Wait};

/// HAL symbols the simulator provides.
pub const HAL_SYMBOLS: [&str; 5] = [
    "HAL_Delay",
    "HAL_GetTick",
    "SIM_RadioConfigure",
    "SIM_RadioTransmit",
    "SIM_RadioReceive",
];

pub const DEFAULT_ENTRY: &str = "firmware_main";
pub const DEFAULT_WATCHDOG: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FirmwareError {
    #[error("cannot read firmware module {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("cannot load firmware module: {0}")]
    Load(String),
    #[error("entry symbol {0} not found in firmware module")]
    MissingEntry(String),
    #[error(
        "firmware imports {0}, which the simulator does not provide; \
         supply a shim exporting {0} from the simulator executable"
    )]
    UnboundSymbol(String),
    #[error("invalid firmware state: {0}")]
    State(String),
    #[error(transparent)]
    Phy(#[from] PhyError),
}

/// A host-native loadable module with a C entry point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    pub path: PathBuf,
    pub entry_symbol: String,
}

impl FirmwareImage {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FirmwareImage {
            path: path.into(),
            entry_symbol: DEFAULT_ENTRY.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirmwareState {
    Loaded,
    Running,
    Finished,
    Faulted,
}

/// One HAL call as seen by the kernel, with virtual time when the call
/// arrived and when it returned to the firmware.
#[derive(Debug, Clone, PartialEq)]
pub struct HalCall {
    pub name: &'static str,
    pub entered: SimTime,
    pub returned: SimTime,
}

type Entry = unsafe extern "C-unwind" fn() -> libc::c_int;

struct Inner {
    image: FirmwareImage,
    library: Option<Arc<Library>>,
    entry: Entry,
    state: FirmwareState,
    channel: Option<Arc<Channel>>,
    thread: Option<std::thread::JoinHandle<()>>,
    task: Option<TaskHandle>,
    watchdog: Duration,
    exit_code: Option<i32>,
    diagnostic: Option<String>,
    trace: Vec<HalCall>,
    truncations: u64,
}

/// A loaded firmware module. Clones share state.
#[derive(Clone)]
pub struct FirmwareInstance {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for FirmwareInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let i = self.inner.borrow();
        f.debug_struct("FirmwareInstance")
            .field("path", &i.image.path)
            .field("state", &i.state)
            .finish()
    }
}

/// Pulls the symbol name out of a dynamic loader message such as
/// `/tmp/x.so: undefined symbol: HAL_SPI_Transmit`.
fn undefined_symbol(msg: &str) -> Option<String> {
    let rest = msg.split("undefined symbol: ").nth(1)?;
    let name: String = rest
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    (!name.is_empty()).then_some(name)
}

fn open_private_copy(path: &Path) -> Result<Library, FirmwareError> {
    let io = |e: std::io::Error| FirmwareError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let bytes = std::fs::read(path).map_err(io)?;
    let mut copy = tempfile::Builder::new()
        .prefix("lorasim-fw-")
        .suffix(".so")
        .tempfile()
        .map_err(io)?;
    std::io::Write::write_all(&mut copy, &bytes).map_err(io)?;
    // SAFETY: loading runs the module's initialisers; the module is trusted
    // firmware supplied by the user.
    let lib = unsafe { Library::open(Some(copy.path()), RTLD_NOW | RTLD_LOCAL) };
    lib.map_err(|e| {
        let msg = e.to_string();
        match undefined_symbol(&msg) {
            Some(sym) => FirmwareError::UnboundSymbol(sym),
            None => FirmwareError::Load(msg),
        }
    })
}

/// Loads a private copy of the module and resolves its entry point. HAL
/// imports are bound at load time; an import the simulator does not provide
/// fails the load.
pub fn load_firmware(image: &FirmwareImage) -> Result<FirmwareInstance, FirmwareError> {
    // Keep the shims referenced so the linker exports them.
    std::hint::black_box(binding_table());
    let lib = open_private_copy(&image.path)?;
    // SAFETY: the entry point is declared `int firmware_main(void)`.
    let entry: Entry = unsafe {
        let sym: Symbol<Entry> = lib
            .get(image.entry_symbol.as_bytes())
            .map_err(|_| FirmwareError::MissingEntry(image.entry_symbol.clone()))?;
        *sym
    };
    Ok(FirmwareInstance {
        inner: Rc::new(RefCell::new(Inner {
            image: image.clone(),
            library: Some(Arc::new(lib)),
            entry,
            state: FirmwareState::Loaded,
            channel: None,
            thread: None,
            task: None,
            watchdog: DEFAULT_WATCHDOG,
            exit_code: None,
            diagnostic: None,
            trace: Vec::new(),
            truncations: 0,
        })),
    })
}

fn radio_config(c: &SimRadioConfig) -> RadioConfig {
    RadioConfig {
        frequency_hz: c.frequency_hz,
        sf: c.sf,
        bw_hz: c.bw_hz,
        cr: c.cr,
        preamble_symbols: c.preamble_symbols,
        iq_inverted: c.iq_inverted != 0,
        explicit_header: c.explicit_header != 0,
        crc_on: c.crc_on != 0,
        ldro: false,
        tx_power_dbm: c.tx_power_dbm,
    }
}

fn call_name(r: &Request) -> &'static str {
    match r {
        Request::Delay(_) => "HAL_Delay",
        Request::GetTick => "HAL_GetTick",
        Request::Configure(_) => "SIM_RadioConfigure",
        Request::Transmit(_) => "SIM_RadioTransmit",
        Request::Receive { .. } => "SIM_RadioReceive",
        Request::Finished(_) | Request::Panicked(_) => "return",
    }
}

impl FirmwareInstance {
    pub fn image(&self) -> FirmwareImage {
        self.inner.borrow().image.clone()
    }

    pub fn state(&self) -> FirmwareState {
        self.inner.borrow().state
    }

    /// Value returned by the entry point, once it has returned.
    pub fn exit_code(&self) -> Option<i32> {
        self.inner.borrow().exit_code
    }

    /// Why the instance faulted, if it did.
    pub fn diagnostic(&self) -> Option<String> {
        self.inner.borrow().diagnostic.clone()
    }

    /// Every HAL call made so far.
    pub fn trace(&self) -> Vec<HalCall> {
        self.inner.borrow().trace.clone()
    }

    /// Receive calls whose packet did not fit the firmware buffer.
    pub fn truncations(&self) -> u64 {
        self.inner.borrow().truncations
    }

    /// Wall-time limit for firmware code between two HAL calls.
    pub fn set_watchdog(&self, limit: Duration) {
        self.inner.borrow_mut().watchdog = limit;
    }

    /// Starts the entry point on its own thread, mirrored by a kernel task
    /// that serves its HAL calls on `radio`.
    pub fn start(&self, radio: &Radio) -> Result<(), FirmwareError> {
        let kernel = radio.medium().kernel().clone();
        let (channel, library, entry) = {
            let mut i = self.inner.borrow_mut();
            if i.state != FirmwareState::Loaded {
                return Err(FirmwareError::State(format!(
                    "cannot start firmware in state {:?}",
                    i.state
                )));
            }
            let Some(library) = i.library.clone() else {
                return Err(FirmwareError::State("firmware module was unloaded".into()));
            };
            hal::install_fault_handler();
            let channel = Arc::new(Channel::default());
            i.channel = Some(channel.clone());
            i.state = FirmwareState::Running;
            (channel, library, i.entry)
        };
        let thread_channel = channel.clone();
        let name = format!("fw-{}", radio.id());
        let thread = std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                hal::bind_thread(&thread_channel);
                // SAFETY: entry comes from `library`, which this thread keeps
                // loaded until the entry point has returned or unwound.
                let result = std::panic::catch_unwind(|| unsafe { entry() });
                match result {
                    Ok(code) => thread_channel.post(Request::Finished(code)),
                    Err(payload) if payload.is::<StopFirmware>() => {}
                    Err(payload) => {
                        let msg = payload
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        thread_channel.post(Request::Panicked(msg));
                    }
                }
                drop(library);
            })
            .map_err(|e| FirmwareError::Load(format!("cannot start firmware thread: {e}")))?;
        self.inner.borrow_mut().thread = Some(thread);

        let me = self.clone();
        let radio = radio.clone();
        let k = kernel.clone();
        let task = kernel.spawn(async move { me.mirror(&k, &radio, &channel).await });
        self.inner.borrow_mut().task = Some(task);
        let me = self.clone();
        kernel.on_sim_end(move || me.stop());
        Ok(())
    }

    /// Serves HAL calls until the firmware returns, faults or is stopped.
    async fn mirror(&self, k: &Kernel, radio: &Radio, channel: &Channel) {
        loop {
            let watchdog = self.inner.borrow().watchdog;
            let req = match channel.wait_request(watchdog) {
                Wait::Request(r) => r,
                Wait::Fault(sig) => {
                    self.fault(k, format!("firmware raised signal {sig}"));
                    return;
                }
                Wait::Watchdog => {
                    self.fault(
                        k,
                        format!(
                            "firmware ran {:.3} s of wall time without a HAL call",
                            watchdog.as_secs_f64()
                        ),
                    );
                    return;
                }
            };
            let entered = k.now();
            let name = call_name(&req);
            let reply = match req {
                Request::Finished(code) => {
                    let thread = {
                        let mut i = self.inner.borrow_mut();
                        i.state = FirmwareState::Finished;
                        i.exit_code = Some(code);
                        i.thread.take()
                    };
                    if let Some(t) = thread {
                        let _ = t.join();
                    }
                    debug!("firmware on {} returned {code}", radio.id());
                    return;
                }
                Request::Panicked(msg) => {
                    self.fault(k, format!("HAL shim panicked: {msg}"));
                    return;
                }
                Request::Delay(ms) => match k.sleep(ms as f64 / 1000.0).await {
                    Ok(()) => Reply::Done,
                    Err(_) => return,
                },
                Request::GetTick => Reply::Tick(k.now_millis() as u32),
                Request::Configure(c) => match radio.set_config(radio_config(&c)) {
                    Ok(()) => Reply::Status(0),
                    Err(e) => {
                        warn!("firmware on {}: {e}", radio.id());
                        Reply::Status(-1)
                    }
                },
                Request::Transmit(data) => match radio.transmit(&data).await {
                    Ok(_) => Reply::Status(0),
                    Err(PhyError::Ended) => return,
                    Err(e) => {
                        warn!("firmware on {}: {e}", radio.id());
                        Reply::Status(-1)
                    }
                },
                Request::Receive { max_len, timeout_ms } => {
                    match radio.receive(Some(timeout_ms as f64 / 1000.0)).await {
                        Ok(Some(rec)) => {
                            let mut data = rec.packet.payload;
                            if data.len() > max_len {
                                warn!(
                                    "firmware on {}: {}-byte packet truncated to {max_len}",
                                    radio.id(),
                                    data.len()
                                );
                                data.truncate(max_len);
                                self.inner.borrow_mut().truncations += 1;
                            }
                            Reply::Received(data)
                        }
                        Ok(None) => Reply::Status(-1),
                        Err(PhyError::Ended) => return,
                        Err(e) => {
                            warn!("firmware on {}: {e}", radio.id());
                            Reply::Status(-1)
                        }
                    }
                }
            };
            self.inner.borrow_mut().trace.push(HalCall {
                name,
                entered,
                returned: k.now(),
            });
            channel.reply(reply);
        }
    }

    fn fault(&self, k: &Kernel, msg: String) {
        let mut i = self.inner.borrow_mut();
        let msg = format!("{}: {msg}", i.image.path.display());
        i.state = FirmwareState::Faulted;
        i.diagnostic = Some(msg.clone());
        if let Some(ch) = &i.channel {
            ch.stop();
        }
        // The thread may be stuck in firmware code for good; never unload the
        // module under it.
        if let Some(t) = i.thread.take() {
            std::mem::forget(t);
        }
        if let Some(lib) = i.library.take() {
            std::mem::forget(lib);
        }
        drop(i);
        k.abort(msg);
    }

    /// Unwinds the firmware at its pending HAL call and waits for its thread.
    /// Calling it again, or after the firmware returned, does nothing.
    pub fn stop(&self) {
        let (channel, thread, task) = {
            let mut i = self.inner.borrow_mut();
            match i.state {
                FirmwareState::Running => i.state = FirmwareState::Finished,
                FirmwareState::Loaded => {
                    i.state = FirmwareState::Finished;
                    i.library = None;
                    return;
                }
                FirmwareState::Finished | FirmwareState::Faulted => return,
            }
            (i.channel.clone(), i.thread.take(), i.task.take())
        };
        if let Some(t) = task {
            t.cancel();
        }
        if let Some(ch) = channel {
            ch.stop();
        }
        if let Some(t) = thread {
            let _ = t.join();
        }
        self.inner.borrow_mut().library = None;
    }
}
