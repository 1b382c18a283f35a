use std::cell::Cell;
use std::rc::Rc;

use lorasim::energy::{EnergyError, PowerConsumer, PowerProfile};
use lorasim::kernel::{Kernel, SimConfig};
use proptest::prelude::*;

fn kernel(tick: f64) -> Kernel {
    Kernel::new(SimConfig {
        tick_duration: tick,
        ..SimConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_draw_all_run() {
    let k = kernel(1e-6);
    let c = PowerConsumer::new(&k);
    c.set_power(0.0).unwrap();
    k.run(100.0).unwrap();
    assert_eq!(c.total_energy(), 0.0);
}

#[test]
fn open_interval_accrual() {
    let k = kernel(1e-6);
    let c = PowerConsumer::new(&k);
    let seen = Rc::new(Cell::new(-1.0));
    let (k2, c2, s2) = (k.clone(), c.clone(), seen.clone());
    k.spawn_root(async move {
        c2.set_power(0.1).unwrap();
        k2.sleep(1.0).await.unwrap();
        s2.set(c2.total_energy());
        k2.sleep(1.0).await.unwrap();
        c2.set_power(0.0).unwrap();
    })
    .unwrap();
    k.run(3.0).unwrap();
    assert!((seen.get() - 0.1).abs() < 1e-12);
    assert!((c.events()[1].cumulative_j - 0.2).abs() < 1e-12);
    assert!((c.total_energy() - 0.2).abs() < 1e-12);
}

#[test]
fn sf7_packet_energy() {
    let k = kernel(1e-6);
    let c = PowerConsumer::new(&k);
    let (k2, c2) = (k.clone(), c.clone());
    let p = PowerProfile::default();
    let tx = p.tx_power_w(14);
    k.spawn_root(async move {
        c2.set_power(tx).unwrap();
        k2.sleep(0.056576).await.unwrap();
        c2.set_power(0.0).unwrap();
    })
    .unwrap();
    k.run(1.0).unwrap();
    assert!((c.total_energy() - 6.789e-3).abs() < 1e-6 + 1e-6 * tx);
}

#[test]
fn negative_rejected() {
    let c = PowerConsumer::new(&kernel(1e-6));
    assert!(matches!(c.set_power(-1.0), Err(EnergyError::NegativePower(_))));
}

#[test]
fn invalid_profile_rejected() {
    let p = PowerProfile {
        rx_w: -0.1,
        ..PowerProfile::default()
    };
    assert!(p.validate().is_err());
}

fn drive(steps: Vec<(u64, f64)>, tick: f64) -> (PowerConsumer, Kernel) {
    let k = kernel(tick);
    let c = PowerConsumer::new(&k);
    let (k2, c2) = (k.clone(), c.clone());
    k.spawn_root(async move {
        for (dt, w) in steps {
            k2.sleep_ticks(dt).await.unwrap();
            c2.set_power(w).unwrap();
        }
    })
    .unwrap();
    (c, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Tick-by-tick left Riemann sum as an independent oracle.
    #[test]
    fn matches_riemann_sum(steps in prop::collection::vec((0u64..200, 0.0f64..0.5), 1..2000)) {
        let tick = 1e-3;
        let total_ticks: u64 = steps.iter().map(|s| s.0).sum::<u64>() + 10;
        let (c, k) = drive(steps.clone(), tick);
        k.run(total_ticks as f64 * tick).unwrap();

        let mut oracle = 0.0;
        let mut level = 0.0;
        let mut changes = Vec::new();
        let mut t = 0;
        for (dt, w) in &steps {
            t += dt;
            changes.push((t, *w));
        }
        let mut next = 0;
        for tick_i in 0..total_ticks {
            while next < changes.len() && changes[next].0 == tick_i {
                level = changes[next].1;
                next += 1;
            }
            oracle += level * tick;
        }
        let max_w = steps.iter().map(|s| s.1).fold(0.0, f64::max);
        prop_assert!((c.total_energy() - oracle).abs() <= tick * max_w + 1e-9,
            "sim {} oracle {}", c.total_energy(), oracle);
        let ev = c.events();
        prop_assert_eq!(ev.len(), steps.len());
        prop_assert!(ev.windows(2).all(|w| w[0].cumulative_j <= w[1].cumulative_j));
    }

    /// Splitting an interval with a same-wattage transition changes nothing.
    #[test]
    fn split_invariance(a in 1u64..1000, b in 1u64..1000, w in 0.0f64..1.0) {
        let (c1, k1) = drive(vec![(0, w), (a + b, 0.0)], 1e-6);
        k1.run(1.0).unwrap();
        let (c2, k2) = drive(vec![(0, w), (a, w), (b, 0.0)], 1e-6);
        k2.run(1.0).unwrap();
        prop_assert!((c1.total_energy() - c2.total_energy()).abs() < 1e-12);
    }
}
