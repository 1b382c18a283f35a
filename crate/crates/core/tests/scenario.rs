use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;

use lorasim::cli::{
    export_tables, parse_scenario, run_scenario, ActivationSpec, ApplicationSpec, ClassSpec, DeviceSpec,
    GatewaySpec, LorawanSpec, MulticastSpec, PhySpec, RunOutputs, ScenarioError, ScenarioSpec, TrafficSpec,
    ENERGY_EVENTS, PHY_PACKETS, PHY_PACKETS_HEADER, RADIO_RECEPTIONS, RADIO_RECEPTIONS_HEADER,
    ENERGY_EVENTS_HEADER,
};

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn load(name: &str) -> ScenarioSpec {
    parse_scenario(&std::fs::read_to_string(bundled(name)).unwrap()).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("scenario").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn export(out: &RunOutputs, name: &str) -> PathBuf {
    let dir = scratch(name);
    export_tables(out, &dir).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<Vec<u8>> {
    [PHY_PACKETS, RADIO_RECEPTIONS, ENERGY_EVENTS]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

const ABP_KEYS: &str = r#"nwk_skey = "00112233445566778899aabbccddeeff", app_skey = "ffeeddccbbaa99887766554433221100""#;

fn abp_device(id: &str, x: f64, addr: &str, extra: &str) -> String {
    format!(
        "[[devices]]\nid = \"{id}\"\nlocation = [{x:?}, 0.0]\n{extra}\nactivation = {{ mode = \"abp\", dev_addr = \"{addr}\", {ABP_KEYS} }}\n"
    )
}

#[test]
fn duplicate_device_id_is_named() {
    let text = format!(
        "version = 1\n{}{}",
        abp_device("twin", 1.0, "00000001", ""),
        abp_device("twin", 2.0, "00000002", "")
    );
    let err = parse_scenario(&text).unwrap_err();
    assert!(matches!(err, ScenarioError::Invalid(_)));
    assert!(err.to_string().contains("\"twin\""), "{err}");
}

#[test]
fn odd_payload_hex_is_rejected() {
    let text = format!(
        "version = 1\n{}traffic = {{ period_s = 10.0, payload_hex = \"abc\" }}\n",
        abp_device("d", 1.0, "00000001", "")
    );
    let err = parse_scenario(&text).unwrap_err();
    assert!(
        matches!(err, ScenarioError::Parse { ref path, .. } if path == "devices[0].traffic.payload_hex"),
        "{err:?}"
    );
}

#[test]
fn payload_over_255_bytes_is_rejected() {
    let text = format!(
        "version = 1\n{}traffic = {{ period_s = 10.0, payload_hex = \"{}\" }}\n",
        abp_device("d", 1.0, "00000001", ""),
        "00".repeat(256)
    );
    let err = parse_scenario(&text).unwrap_err();
    assert!(err.to_string().contains("256 bytes"), "{err}");
}

#[test]
fn multicast_members_must_exist() {
    let text = format!(
        "version = 1\n{}[[multicast_groups]]\nmc_addr = \"11223344\"\n{ABP_KEYS_TABLE}members = [\"d\", \"ghost\"]\n",
        abp_device("d", 1.0, "00000001", ""),
        ABP_KEYS_TABLE = "nwk_skey = \"00112233445566778899aabbccddeeff\"\napp_skey = \"00112233445566778899aabbccddeeff\"\n"
    );
    let err = parse_scenario(&text).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
}

#[test]
fn device_needs_activation_or_firmware() {
    let text = "version = 1\n[[devices]]\nid = \"d\"\nlocation = [0.0, 0.0]\n";
    assert!(parse_scenario(text).unwrap_err().to_string().contains("activation"));
}

#[test]
fn empty_run_writes_headers_only() {
    let out = run_scenario(&parse_scenario("version = 1\nlength_s = 5.0").unwrap()).unwrap();
    let dir = export(&out, "empty");
    let expect: [(&str, Vec<&str>); 3] = [
        (PHY_PACKETS, PHY_PACKETS_HEADER.to_vec()),
        (RADIO_RECEPTIONS, RADIO_RECEPTIONS_HEADER.to_vec()),
        (ENERGY_EVENTS, ENERGY_EVENTS_HEADER.to_vec()),
    ];
    for (file, header) in expect {
        let text = std::fs::read_to_string(dir.join(file)).unwrap();
        assert_eq!(text, format!("{}\n", header.join(",")));
    }
}

#[test]
fn one_uplink_fans_out_to_both_gateways() {
    let text = format!(
        "version = 1\nlength_s = 3.0\n\
         [[gateways]]\nid = \"g1\"\nlocation = [0.0, 0.0]\n\
         [[gateways]]\nid = \"g2\"\nlocation = [20.0, 0.0]\n{}\
         traffic = {{ period_s = 100.0, payload_hex = \"01\" }}\n",
        abp_device("d", 10.0, "26000001", "")
    );
    let out = run_scenario(&parse_scenario(&text).unwrap()).unwrap();
    let dir = export(&out, "fanout");
    let (_, packets) = read_csv(&dir.join(PHY_PACKETS));
    let (_, rows) = read_csv(&dir.join(RADIO_RECEPTIONS));
    assert_eq!(packets.len(), 1);
    assert_eq!(rows.len(), 2);
    let radios: BTreeSet<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(radios, BTreeSet::from(["g1", "g2"]));
    assert_eq!(out.server.uplinks_accepted, 1);
    assert_eq!(out.server.duplicates, 1);
}

#[test]
fn ping_pong_scenario() {
    let out = run_scenario(&load("ping_pong.toml")).unwrap();
    let node = &out.devices[0];
    let stats = node.stats.clone().unwrap();
    let joined = stats.joined_at.unwrap();
    let pings: Vec<_> = out.uplinks.iter().filter(|u| u.payload == b"ping").collect();
    let pongs: Vec<_> = node.downlinks.iter().filter(|d| d.payload == b"pong").collect();
    assert!(pings.len() >= 3 && pongs.len() >= 3, "{} pings, {} pongs", pings.len(), pongs.len());
    assert!(joined < pings[0].time);
    let tick = out.tick_s;
    for (ping, pong) in pings.iter().zip(&pongs) {
        let dt = (pong.time.ticks() - ping.time.ticks()) as f64 * tick;
        assert!(dt > 0.0 && dt < 5.0, "pong {dt} s after ping");
    }
    // Pings near 6, 36, 66 and 96 s after a ~5 s join.
    let secs: Vec<f64> = pings.iter().map(|p| p.time.as_secs(tick)).collect();
    for (s, want) in secs.iter().zip([6.0, 36.0, 66.0, 96.0]) {
        assert!((s - want).abs() < 0.5, "{secs:?}");
    }
}

#[test]
fn capture_pair_loses_both_uplinks() {
    let out = run_scenario(&load("capture_pair.toml")).unwrap();
    let at_30: Vec<_> = out
        .receptions
        .iter()
        .filter(|r| r.time.as_secs(out.tick_s) == 30.0 && r.radio_id == "gw0")
        .collect();
    assert_eq!(at_30.len(), 2);
    assert!(at_30.iter().all(|r| r.collided && !r.delivered));
    assert_eq!(out.server.joins_accepted, 2);
}

#[test]
fn exports_are_deterministic_and_seed_dependent() {
    for name in ["ping_pong.toml", "capture_pair.toml"] {
        let spec = load(name);
        let a = files(&export(&run_scenario(&spec).unwrap(), &format!("{name}-a")));
        let b = files(&export(&run_scenario(&spec).unwrap(), &format!("{name}-b")));
        assert_eq!(a, b, "{name}");
        let other = ScenarioSpec {
            seed: spec.seed + 1,
            ..spec.clone()
        };
        let c = files(&export(&run_scenario(&other).unwrap(), &format!("{name}-c")));
        assert_ne!(a[0], c[0], "{name}: seed did not change the packet table");
    }
}

/// Summary recomputed from the CSV files alone, with no access to the run.
fn pdr_from_files(dir: &Path, gateways: &BTreeSet<&str>) -> BTreeMap<String, (u64, u64)> {
    let (_, packets) = read_csv(&dir.join(PHY_PACKETS));
    let (_, rows) = read_csv(&dir.join(RADIO_RECEPTIONS));
    let mut ok = BTreeSet::new();
    for r in &rows {
        let (radio, sender) = (r[1].as_str(), r[2].as_str());
        if r[5] == "true" && gateways.contains(radio) != gateways.contains(sender) {
            ok.insert((r[0].clone(), sender.to_string()));
        }
    }
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for p in &packets {
        let c = counts.entry(p[1].clone()).or_default();
        c.0 += 1;
        c.1 += ok.contains(&(p[0].clone(), p[1].clone())) as u64;
    }
    counts
}

#[test]
fn summary_matches_tables() {
    for name in ["ping_pong.toml", "capture_pair.toml"] {
        let spec = load(name);
        let out = run_scenario(&spec).unwrap();
        let dir = export(&out, &format!("summary-{name}"));
        let gateways: BTreeSet<&str> = spec.gateways.iter().map(|g| g.id.as_str()).collect();
        let counts = pdr_from_files(&dir, &gateways);
        let (_, energy) = read_csv(&dir.join(ENERGY_EVENTS));
        for s in &out.summary {
            let (sent, delivered) = counts.get(&s.radio_id).copied().unwrap_or_default();
            assert_eq!((s.sent, s.delivered), (sent, delivered), "{name} {}", s.radio_id);
            assert_eq!(s.pdr, (sent > 0).then(|| delivered as f64 / sent as f64));
            let last: f64 = energy.iter().rev().find(|r| r[1] == s.radio_id).unwrap()[3].parse().unwrap();
            assert!((last - s.energy_j).abs() <= 1e-5 * s.energy_j.abs(), "{} vs {}", last, s.energy_j);
        }
    }
}

#[test]
fn cumulative_energy_never_decreases_per_radio() {
    let out = run_scenario(&load("ping_pong.toml")).unwrap();
    let dir = export(&out, "energy-monotone");
    let (_, rows) = read_csv(&dir.join(ENERGY_EVENTS));
    let mut last: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in rows {
        let (t, j): (f64, f64) = (r[0].parse().unwrap(), r[3].parse().unwrap());
        if let Some(&(pt, pj)) = last.get(&r[1]) {
            assert!(t >= pt && j >= pj, "{r:?}");
        }
        last.insert(r[1].clone(), (t, j));
    }
    // Every radio closes at the run length.
    assert!(last.values().all(|&(t, _)| t == 120.0));
}

fn build_ping_firmware() -> PathBuf {
    let dest = Path::new(env!("CARGO_TARGET_TMPDIR")).join("scenario_ping.so");
    let status = Command::new("cc")
        .args(["-shared", "-fPIC", "-fasynchronous-unwind-tables", "-I"])
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ping.c"))
        .arg("-o")
        .arg(&dest)
        .status()
        .unwrap();
    assert!(status.success());
    dest
}

#[test]
fn firmware_device_runs_in_a_scenario() {
    let fw = build_ping_firmware();
    let text = format!(
        "version = 1\nlength_s = 120.0\n[[gateways]]\nid = \"gw\"\nlocation = [0.0, 0.0]\n\
         [[devices]]\nid = \"fw\"\nlocation = [30.0, 0.0]\nfirmware = {:?}\n",
        fw.display().to_string()
    );
    let out = run_scenario(&parse_scenario(&text).unwrap()).unwrap();
    let pings = out.packets.iter().filter(|p| p.sender_id == "fw" && p.payload == b"ping").count();
    assert!(pings >= 3, "{pings}");
    assert_eq!(out.server.malformed, pings as u64);
}

#[test]
fn missing_firmware_fails_before_the_run() {
    let text = "version = 1\n[[devices]]\nid = \"fw\"\nlocation = [0.0, 0.0]\nfirmware = \"/nonexistent.so\"\n";
    let err = run_scenario(&parse_scenario(text).unwrap()).unwrap_err();
    assert!(err.to_string().contains("\"fw\""), "{err}");
}

fn lorasim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lorasim")).args(args).output().unwrap()
}

#[test]
fn cli_runs_a_scenario() {
    let dir = scratch("cli");
    let scenario = bundled("ping_pong.toml");
    let out = lorasim(&[
        "run",
        scenario.to_str().unwrap(),
        "--seed",
        "9",
        "--length",
        "60",
        "--out",
        dir.to_str().unwrap(),
        "--log-level",
        "lorawan=info",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("node") && stdout.contains("pdr"), "{stdout}");
    let (_, energy) = read_csv(&dir.join(ENERGY_EVENTS));
    assert_eq!(energy.last().unwrap()[0], "60");

    let mut spec = load("ping_pong.toml");
    spec.seed = 9;
    spec.length_s = 60.0;
    let again = files(&export(&run_scenario(&spec).unwrap(), "cli-lib"));
    assert_eq!(files(&dir), again);
}

#[test]
fn cli_errors_exit_nonzero() {
    let scenario = bundled("ping_pong.toml");
    let s = scenario.to_str().unwrap();
    let bad = Path::new(env!("CARGO_TARGET_TMPDIR")).join("bad.toml");
    std::fs::write(&bad, "version = 1\nbogus = 1\n").unwrap();
    for args in [
        vec!["run", "/nonexistent.toml"],
        vec!["run", bad.to_str().unwrap()],
        vec!["run", s, "--log-level", "radio=debug"],
        vec!["run", s, "--log-level", "phy=loud"],
        vec!["run", s, "--length", "-1"],
        vec!["frobnicate"],
    ] {
        let out = lorasim(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let out = lorasim(&["run", bad.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

// Scenario generators for the round trip.

fn key() -> impl Strategy<Value = [u8; 16]> {
    any::<[u8; 16]>()
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e4f64..1e4, Just(0.0), Just(0.5)]
}

fn location() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(finite(), 2..=3)
}

fn hex_payload() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..40)
}

fn traffic() -> impl Strategy<Value = TrafficSpec> {
    (0.1f64..1e4, 1u8..=223, hex_payload(), any::<bool>(), prop::option::of(0.0f64..1e3)).prop_map(
        |(period_s, fport, payload_hex, confirmed, first_s)| TrafficSpec {
            period_s,
            fport,
            payload_hex,
            confirmed,
            first_s,
        },
    )
}

fn activation(i: usize) -> impl Strategy<Value = ActivationSpec> {
    prop_oneof![
        (any::<u64>(), key()).prop_map(move |(join_eui, app_key)| ActivationSpec::Otaa {
            dev_eui: i as u64,
            join_eui,
            app_key
        }),
        (key(), key()).prop_map(move |(nwk_skey, app_skey)| ActivationSpec::Abp {
            dev_addr: 0x2600_0000 | i as u32,
            nwk_skey,
            app_skey
        }),
    ]
}

fn device(i: usize) -> impl Strategy<Value = DeviceSpec> {
    (
        location(),
        any::<bool>(),
        7u8..=12,
        0.0f64..100.0,
        activation(i),
        prop::option::of(traffic()),
    )
        .prop_map(move |(location, class_c, sf, start_s, activation, traffic)| DeviceSpec {
            id: format!("dev-{i}"),
            location,
            class: if class_c { ClassSpec::C } else { ClassSpec::A },
            sf,
            tx_power_dbm: 14,
            start_s,
            activation: Some(activation),
            traffic,
            firmware: None,
        })
}

fn spec() -> impl Strategy<Value = ScenarioSpec> {
    (
        any::<u64>(),
        0.0f64..1e5,
        prop::option::of(-5.0f64..5.0),
        prop::option::of(0u8..=3),
        prop::collection::vec(location(), 0..3),
        (0usize..4).prop_flat_map(|n| (0..n).map(device).collect::<Vec<_>>()),
        prop::option::of((1u8..=223, prop::option::of(hex_payload()), hex_payload())),
        prop::option::of((key(), traffic())),
    )
        .prop_map(|(seed, length_s, sigma, rx2, gws, devices, app, mc)| {
            let members: Vec<String> = devices.iter().map(|d| d.id.clone()).collect();
            ScenarioSpec {
                version: 1,
                seed,
                length_s,
                tick_s: 1e-6,
                phy: PhySpec {
                    sigma_db: sigma.map(f64::abs),
                    ..PhySpec::default()
                },
                lorawan: LorawanSpec {
                    rx2_sf: rx2.map(|d| 12 - d),
                    ..LorawanSpec::default()
                },
                gateways: gws
                    .into_iter()
                    .enumerate()
                    .map(|(i, location)| GatewaySpec {
                        id: format!("gw-{i}"),
                        location,
                    })
                    .collect(),
                devices,
                applications: app
                    .map(|(fport, match_hex, reply_hex)| ApplicationSpec {
                        fport,
                        match_hex,
                        reply_hex,
                        confirmed: false,
                    })
                    .into_iter()
                    .collect(),
                multicast_groups: mc
                    .map(|(k, traffic)| MulticastSpec {
                        mc_addr: 0xffff_0001,
                        nwk_skey: k,
                        app_skey: k,
                        members,
                        traffic: Some(traffic),
                    })
                    .into_iter()
                    .collect(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn parse_render_round_trip(spec in spec()) {
        prop_assert!(spec.validate().is_ok(), "{:?}", spec.validate());
        let text = spec.to_toml();
        prop_assert_eq!(parse_scenario(&text).unwrap(), spec);
    }
}
