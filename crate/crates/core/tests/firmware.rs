use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use lorasim::energy::PowerProfile;
use lorasim::firmware_bridge::{
    load_firmware, FirmwareError, FirmwareImage, FirmwareInstance, FirmwareState, HAL_SYMBOLS,
};
use lorasim::kernel::{Kernel, KernelError, SimConfig, SimTime};
use lorasim::phy::{Location, Medium, PhyParams, Radio, RadioConfig};

const SF7: RadioConfig = RadioConfig::new(868_100_000, 7, 125_000);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Compiles a fixture into a loadable module under the test scratch dir.
fn build(source: &str, out: &str, defines: &[&str]) -> PathBuf {
    let dest = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("{out}.so"));
    let status = Command::new("cc")
        .args(["-shared", "-fPIC", "-O1", "-fasynchronous-unwind-tables", "-I"])
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .args(defines.iter().map(|d| format!("-D{d}")))
        .arg(fixtures().join(source))
        .arg("-o")
        .arg(&dest)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compiling {source} for {out}");
    dest
}

fn probe(name: &str, extra: &[&str]) -> FirmwareImage {
    let mut defs = vec![format!("PROBE_{}", name.to_uppercase())];
    defs.extend(extra.iter().map(|s| s.to_string()));
    let out = format!("probe_{name}{}", extra.join("_").replace('=', ""));
    let defs: Vec<&str> = defs.iter().map(|s| s.as_str()).collect();
    FirmwareImage::new(build("probes.c", &out, &defs))
}

struct World {
    kernel: Kernel,
    medium: Medium,
}

fn world(seed: u64) -> World {
    let kernel = Kernel::new(SimConfig {
        seed,
        ..SimConfig::default()
    })
    .unwrap();
    let medium = Medium::new(&kernel, PhyParams::default()).unwrap();
    World { kernel, medium }
}

impl World {
    fn radio(&self, id: &str, x: f64) -> Radio {
        self.medium
            .add_radio(id, Location::new(x, 0.0, 0.0), SF7, PowerProfile::default())
            .unwrap()
    }

    fn run_probe(&self, image: &FirmwareImage, length: f64) -> FirmwareInstance {
        let fw = load_firmware(image).unwrap();
        fw.start(&self.radio("node", 0.0)).unwrap();
        self.kernel.run(length).unwrap();
        fw
    }
}

#[test]
fn sample_ping_loads() {
    let fw = load_firmware(&FirmwareImage::new(build("ping.c", "ping_load", &[]))).unwrap();
    assert_eq!(fw.state(), FirmwareState::Loaded);
    fw.stop();
    assert_eq!(fw.state(), FirmwareState::Finished);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_firmware(&FirmwareImage::new("/nonexistent/fw.so")).unwrap_err();
    assert!(matches!(err, FirmwareError::Io { .. }));
}

#[test]
fn missing_entry_is_named() {
    let err = load_firmware(&probe("no_entry", &[])).unwrap_err();
    assert_eq!(err, FirmwareError::MissingEntry("firmware_main".into()));
    assert!(err.to_string().contains("firmware_main"));
}

#[test]
fn unbound_import_asks_for_a_shim() {
    let err = load_firmware(&probe("unbound", &[])).unwrap_err();
    assert_eq!(err, FirmwareError::UnboundSymbol("HAL_SPI_Transmit".into()));
    let msg = err.to_string();
    assert!(msg.contains("HAL_SPI_Transmit") && msg.contains("shim"), "{msg}");
}

#[test]
fn shims_are_exported_by_the_executable() {
    for sym in HAL_SYMBOLS {
        let name = std::ffi::CString::new(sym).unwrap();
        // SAFETY: plain symbol lookup in the global namespace.
        let addr = unsafe { libc::dlsym(libc::RTLD_DEFAULT, name.as_ptr()) };
        assert!(!addr.is_null(), "{sym} not exported");
    }
}

#[test]
fn delay_then_tick() {
    let w = world(0);
    let fw = w.run_probe(&probe("tick", &[]), 10.0);
    assert_eq!(fw.state(), FirmwareState::Finished);
    assert_eq!(fw.exit_code(), Some(2500));
}

#[test]
fn virtual_time_is_opaque_to_firmware() {
    let w = world(0);
    let fw = w.run_probe(&probe("opacity", &[]), 100.0);
    assert_eq!(fw.exit_code(), Some(0));
    // Time never moves while the firmware runs between calls: a call enters
    // at the virtual time the previous one returned.
    let trace = fw.trace();
    assert_eq!(trace.len(), 300);
    for pair in trace.windows(2) {
        assert_eq!(pair[1].entered, pair[0].returned);
    }
    for call in trace.iter().filter(|c| c.name == "HAL_GetTick") {
        assert_eq!(call.entered, call.returned);
    }
}

#[test]
fn radio_calls_take_virtual_time() {
    let w = world(0);
    let fw = w.run_probe(&probe("radio", &[]), 10.0);
    assert_eq!(fw.exit_code(), Some(0));
    let trace = fw.trace();
    let names: Vec<&str> = trace.iter().map(|c| c.name).collect();
    assert_eq!(names, ["SIM_RadioConfigure", "SIM_RadioTransmit", "SIM_RadioReceive"]);
    assert_eq!(trace[1].returned.ticks() - trace[1].entered.ticks(), 56_576);
    assert_eq!(trace[2].returned.ticks() - trace[2].entered.ticks(), 100_000);
    assert_eq!(w.medium.packet_log().len(), 1);
}

#[test]
fn oversized_packet_is_truncated() {
    let w = world(0);
    let sender = w.radio("sender", 10.0);
    let (k, s) = (w.kernel.clone(), sender.clone());
    w.kernel
        .spawn_root(async move {
            k.sleep(1.0).await.unwrap();
            s.transmit(b"0123456789").await.unwrap();
        })
        .unwrap();
    let fw = w.run_probe(&probe("truncate", &[]), 10.0);
    assert_eq!(fw.exit_code(), Some(4));
    assert_eq!(fw.truncations(), 1);
}

#[test]
fn rejected_config_reports_failure() {
    let w = world(0);
    let fw = w.run_probe(&probe("bad_config", &[]), 1.0);
    assert_eq!(fw.exit_code(), Some(-1));
}

#[test]
fn two_instances_resume_in_virtual_time_order() {
    let w = world(0);
    // Started in the opposite order of their wake-ups.
    for (id, delay) in [("slow", 1000), ("fast", 500)] {
        let fw = load_firmware(&probe("delay", &[&format!("DELAY_MS={delay}")])).unwrap();
        fw.start(&w.radio(id, 0.0)).unwrap();
    }
    w.kernel.run(5.0).unwrap();
    let log = w.medium.packet_log();
    let got: Vec<(String, u64)> = log.iter().map(|p| (p.sender_id.clone(), p.time.ticks())).collect();
    assert_eq!(got, [("fast".to_string(), 500_000), ("slow".to_string(), 1_000_000)]);
    assert_eq!(log[0].payload, [5]);
    assert_eq!(log[1].payload, [10]);
}

#[test]
fn same_image_instances_do_not_share_state() {
    // Each instance has private globals: both count from zero.
    let image = probe("opacity", &[]);
    let w = world(0);
    let a = load_firmware(&image).unwrap();
    let b = load_firmware(&image).unwrap();
    a.start(&w.radio("a", 0.0)).unwrap();
    b.start(&w.radio("b", 5.0)).unwrap();
    w.kernel.run(100.0).unwrap();
    assert_eq!((a.exit_code(), b.exit_code()), (Some(0), Some(0)));
}

#[test]
fn start_twice_and_start_after_stop_fail() {
    let w = world(0);
    let fw = load_firmware(&probe("forever", &[])).unwrap();
    let r = w.radio("node", 0.0);
    fw.start(&r).unwrap();
    assert!(matches!(fw.start(&r), Err(FirmwareError::State(_))));
    w.kernel.run(3.5).unwrap();
    assert_eq!(fw.state(), FirmwareState::Finished);
    assert!(matches!(fw.start(&r), Err(FirmwareError::State(_))));
}

#[test]
fn stop_releases_blocked_firmware_before_run_returns() {
    let w = world(0);
    let fw = load_firmware(&probe("forever", &[])).unwrap();
    fw.start(&w.radio("node", 0.0)).unwrap();
    let (k, f) = (w.kernel.clone(), fw.clone());
    let observed = Rc::new(RefCell::new(None));
    let o = observed.clone();
    w.kernel
        .spawn_root(async move {
            k.sleep(2.5).await.unwrap();
            f.stop();
            *o.borrow_mut() = Some(f.state());
            f.stop();
        })
        .unwrap();
    w.kernel.run(10.0).unwrap();
    assert_eq!(*observed.borrow(), Some(FirmwareState::Finished));
    let delays = fw.trace().len();
    assert_eq!(delays, 2);
}

#[test]
fn busy_firmware_trips_the_watchdog() {
    let w = world(0);
    let fw = load_firmware(&probe("busy", &[])).unwrap();
    fw.set_watchdog(Duration::from_millis(300));
    fw.start(&w.radio("node", 0.0)).unwrap();
    let start = Instant::now();
    let err = w.kernel.run(10.0).unwrap_err();
    assert!(start.elapsed() < Duration::from_secs(2));
    assert!(matches!(err, KernelError::Aborted(ref m) if m.contains("without a HAL call")), "{err:?}");
    assert_eq!(fw.state(), FirmwareState::Faulted);
    // Time stopped where the firmware started computing.
    assert_eq!(w.kernel.now(), SimTime(5_000));
}

#[test]
fn fault_marks_instance_and_ends_run() {
    let w = world(0);
    let fw = load_firmware(&probe("segv", &[])).unwrap();
    fw.start(&w.radio("node", 0.0)).unwrap();
    let err = w.kernel.run(10.0).unwrap_err();
    assert!(matches!(err, KernelError::Aborted(ref m) if m.contains("signal 11")), "{err:?}");
    assert_eq!(fw.state(), FirmwareState::Faulted);
    assert!(fw.diagnostic().unwrap().contains("signal"));
}

/// Native equivalent of ping.c.
fn native_ping(w: &World, radio: Radio) {
    let k = w.kernel.clone();
    w.kernel
        .spawn_root(async move {
            radio.set_config(SF7).unwrap();
            loop {
                radio.transmit(b"ping").await.unwrap();
                radio.receive(Some(5.0)).await.unwrap();
                k.sleep(30.0).await.unwrap();
            }
        })
        .unwrap();
}

fn echo(w: &World, radio: Radio) {
    w.kernel
        .spawn_root(async move {
            while let Ok(Some(_)) = radio.receive(None).await {
                radio.transmit(b"pong").await.unwrap();
            }
        })
        .unwrap();
}

#[test]
fn firmware_ping_matches_native_ping() {
    let image = FirmwareImage::new(build("ping.c", "ping_trace", &[]));
    let trace = |firmware: bool| {
        let w = world(7);
        let node = w.radio("node", 0.0);
        echo(&w, w.radio("echo", 80.0));
        if firmware {
            load_firmware(&image).unwrap().start(&node).unwrap();
        } else {
            native_ping(&w, node);
        }
        w.kernel.run(120.0).unwrap();
        (w.medium.packet_log(), w.medium.reception_log())
    };
    let (fw_packets, fw_rows) = trace(true);
    let (native_packets, native_rows) = trace(false);
    assert_eq!(fw_packets.len(), 8);
    assert_eq!(fw_packets, native_packets);
    assert_eq!(fw_rows, native_rows);
}

#[test]
fn ping_module_imports_the_hal() {
    let module = build("ping.c", "ping_symbols", &[]);
    let nm = |flag: &str| {
        let out = Command::new("nm").args(["-D", flag]).arg(&module).output().unwrap();
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    let (undefined, defined) = (nm("--undefined-only"), nm("--defined-only"));
    assert!(undefined.lines().any(|l| l.ends_with(" HAL_Delay")));
    assert!(!defined.lines().any(|l| l.ends_with(" HAL_Delay")));
    assert!(defined.lines().any(|l| l.ends_with(" firmware_main")));
}
