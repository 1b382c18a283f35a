//! Firmware-side half of the bridge: the exported HAL shims, the rendezvous
//! channel they block on, and the fault handler.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicI32, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

/// C layout of `SIM_RadioConfig` in `sim_hal.h`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimRadioConfig {
    pub frequency_hz: u32,
    pub sf: u8,
    pub bw_hz: u32,
    pub cr: u8,
    pub preamble_symbols: u16,
    pub iq_inverted: u8,
    pub explicit_header: u8,
    pub crc_on: u8,
    pub tx_power_dbm: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Request {
    Delay(u32),
    GetTick,
    Configure(SimRadioConfig),
    Transmit(Vec<u8>),
    Receive { max_len: usize, timeout_ms: u32 },
    Finished(i32),
    Panicked(String),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Reply {
    Done,
    Tick(u32),
    Status(i32),
    Received(Vec<u8>),
    Stop,
}

/// Unwinding payload used to leave firmware code when the instance stops.
pub(crate) struct StopFirmware;

pub(crate) enum Wait {
    Request(Request),
    Fault(i32),
    Watchdog,
}

#[derive(Default)]
struct Slots {
    request: Option<Request>,
    reply: Option<Reply>,
}

/// Two-slot rendezvous between the firmware thread and the kernel. At any
/// moment exactly one side runs; the other is blocked on the condvar.
#[derive(Default)]
pub(crate) struct Channel {
    slots: Mutex<Slots>,
    cv: Condvar,
    stopped: AtomicBool,
    /// Signal number of a fault raised on the firmware thread, or 0.
    fault: AtomicI32,
}

impl Channel {
    /// Firmware side: posts a call and blocks until the kernel answers.
    fn call(&self, req: Request) -> Reply {
        if self.stopped.load(Ordering::SeqCst) {
            std::panic::resume_unwind(Box::new(StopFirmware));
        }
        let mut s = self.slots.lock().unwrap();
        s.request = Some(req);
        self.cv.notify_all();
        loop {
            if let Some(r) = s.reply.take() {
                drop(s);
                if r == Reply::Stop {
                    std::panic::resume_unwind(Box::new(StopFirmware));
                }
                return r;
            }
            s = self.cv.wait(s).unwrap();
        }
    }

    /// Posts a final message without waiting for an answer.
    pub(crate) fn post(&self, req: Request) {
        let mut s = self.slots.lock().unwrap();
        s.request = Some(req);
        self.cv.notify_all();
    }

    /// Kernel side: blocks until the firmware makes its next call. Gives up
    /// after `watchdog` of wall time or when the firmware thread faults.
    pub(crate) fn wait_request(&self, watchdog: Duration) -> Wait {
        let deadline = Instant::now() + watchdog;
        let mut s = self.slots.lock().unwrap();
        loop {
            if let Some(r) = s.request.take() {
                return Wait::Request(r);
            }
            let sig = self.fault.load(Ordering::SeqCst);
            if sig != 0 {
                return Wait::Fault(sig);
            }
            let now = Instant::now();
            if now >= deadline {
                return Wait::Watchdog;
            }
            let slice = (deadline - now).min(Duration::from_millis(5));
            s = self.cv.wait_timeout(s, slice).unwrap().0;
        }
    }

    pub(crate) fn reply(&self, r: Reply) {
        let mut s = self.slots.lock().unwrap();
        s.reply = Some(r);
        self.cv.notify_all();
    }

    /// Makes the firmware unwind at its current or next HAL call.
    pub(crate) fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        self.reply(Reply::Stop);
    }
}

thread_local! {
    static CURRENT: Cell<*const Channel> = const { Cell::new(std::ptr::null()) };
}

/// Binds the calling thread to `channel` for the rest of its life. The
/// caller keeps the `Arc` alive for that long.
pub(crate) fn bind_thread(channel: &Arc<Channel>) {
    CURRENT.with(|c| c.set(Arc::as_ptr(channel)));
}

fn call(req: Request) -> Reply {
    let ch = CURRENT.with(|c| c.get());
    if ch.is_null() {
        // A HAL function called outside any firmware thread: nothing sensible
        // to return, and unwinding into foreign code we did not start is worse.
        eprintln!("lorasim: HAL call {req:?} from a thread that runs no firmware");
        std::process::abort();
    }
    // SAFETY: set by bind_thread; the thread owns an Arc to the channel.
    unsafe { &*ch }.call(req)
}

#[no_mangle]
pub extern "C-unwind" fn HAL_Delay(ms: u32) {
    call(Request::Delay(ms));
}

#[no_mangle]
pub extern "C-unwind" fn HAL_GetTick() -> u32 {
    match call(Request::GetTick) {
        Reply::Tick(t) => t,
        _ => 0,
    }
}

/// # Safety
/// `cfg` must be null or point to a valid `SIM_RadioConfig`.
#[no_mangle]
pub unsafe extern "C-unwind" fn SIM_RadioConfigure(cfg: *const SimRadioConfig) -> i32 {
    if cfg.is_null() {
        return -1;
    }
    match call(Request::Configure(*cfg)) {
        Reply::Status(s) => s,
        _ => -1,
    }
}

/// # Safety
/// `buf` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C-unwind" fn SIM_RadioTransmit(buf: *const u8, len: i32) -> i32 {
    if buf.is_null() || len < 0 {
        return -1;
    }
    let data = std::slice::from_raw_parts(buf, len as usize).to_vec();
    match call(Request::Transmit(data)) {
        Reply::Status(s) => s,
        _ => -1,
    }
}

/// # Safety
/// `buf` must point to `maxlen` writable bytes.
#[no_mangle]
pub unsafe extern "C-unwind" fn SIM_RadioReceive(buf: *mut u8, maxlen: i32, timeout_ms: u32) -> i32 {
    if buf.is_null() || maxlen < 0 {
        return -1;
    }
    match call(Request::Receive {
        max_len: maxlen as usize,
        timeout_ms,
    }) {
        Reply::Received(data) => {
            std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
            data.len() as i32
        }
        _ => -1,
    }
}

/// Symbol names and addresses of every shim. Also keeps the shims from being
/// discarded by the linker.
pub fn binding_table() -> [(&'static str, usize); 5] {
    [
        ("HAL_Delay", HAL_Delay as *const () as usize),
        ("HAL_GetTick", HAL_GetTick as *const () as usize),
        ("SIM_RadioConfigure", SIM_RadioConfigure as *const () as usize),
        ("SIM_RadioTransmit", SIM_RadioTransmit as *const () as usize),
        ("SIM_RadioReceive", SIM_RadioReceive as *const () as usize),
    ]
}

const FAULT_SIGNALS: [libc::c_int; 4] = [libc::SIGSEGV, libc::SIGBUS, libc::SIGILL, libc::SIGFPE];

static PREVIOUS: OnceLock<[libc::sigaction; 4]> = OnceLock::new();

extern "C" fn on_fault(sig: libc::c_int, _info: *mut libc::siginfo_t, _ctx: *mut libc::c_void) {
    let ch = CURRENT.with(|c| c.get());
    if ch.is_null() {
        // Not ours: put the previous handler back and let the fault recur.
        if let (Some(prev), Some(i)) = (PREVIOUS.get(), FAULT_SIGNALS.iter().position(|s| *s == sig)) {
            // SAFETY: sigaction is async-signal-safe.
            unsafe { libc::sigaction(sig, &prev[i], std::ptr::null_mut()) };
        }
        return;
    }
    // SAFETY: the channel outlives its firmware thread.
    unsafe { &*ch }.fault.store(sig, Ordering::SeqCst);
    // The faulting context cannot continue; park the thread for good. The
    // kernel sees the flag while waiting for the next call.
    loop {
        // SAFETY: pause is async-signal-safe.
        unsafe { libc::pause() };
    }
}

/// Installs the fault handler once per process.
pub(crate) fn install_fault_handler() {
    PREVIOUS.get_or_init(|| {
        // SAFETY: plain sigaction calls with zero-initialised structs.
        unsafe {
            let mut prev: [libc::sigaction; 4] = std::mem::zeroed();
            for (i, sig) in FAULT_SIGNALS.iter().enumerate() {
                let mut act: libc::sigaction = std::mem::zeroed();
                act.sa_sigaction = on_fault as *const () as usize;
                act.sa_flags = libc::SA_SIGINFO | libc::SA_ONSTACK;
                libc::sigemptyset(&mut act.sa_mask);
                libc::sigaction(*sig, &act, &mut prev[i]);
            }
            prev
        }
    });
}
