use std::cell::{Cell, RefCell};
use std::future::Future;
use std::rc::Rc;
use std::time::Instant;

use lorasim::kernel::{Kernel, KernelError, QueueClosed, SimConfig, SimQueue, SimTime};
use proptest::prelude::*;

fn kernel() -> Kernel {
    Kernel::new(SimConfig::default()).unwrap()
}

type Trace = Rc<RefCell<Vec<(String, u64)>>>;

fn trace() -> Trace {
    Rc::new(RefCell::new(Vec::new()))
}

#[test]
fn invalid_config_rejected() {
    assert!(Kernel::new(SimConfig {
        tick_duration: 0.0,
        ..SimConfig::default()
    })
    .is_err());
    assert!(Kernel::new(SimConfig {
        length: -1.0,
        ..SimConfig::default()
    })
    .is_err());
}

#[test]
fn sleep_thirty_from_one_second() {
    let k = kernel();
    let t = trace();
    let (k2, t2) = (k.clone(), t.clone());
    k.spawn_root(async move {
        k2.sleep(1.0).await.unwrap();
        k2.sleep(30.0).await.unwrap();
        t2.borrow_mut().push(("done".into(), k2.now().ticks()));
    })
    .unwrap();
    k.run(60.0).unwrap();
    assert_eq!(*t.borrow(), vec![("done".to_string(), 31_000_000)]);
}

#[test]
fn zero_sleep_yields_to_other_tasks() {
    let k = kernel();
    let t = trace();
    for name in ["a", "b"] {
        let (k2, t2) = (k.clone(), t.clone());
        k.spawn_root(async move {
            t2.borrow_mut().push((format!("{name}1"), k2.now().ticks()));
            k2.sleep(0.0).await.unwrap();
            t2.borrow_mut().push((format!("{name}2"), k2.now().ticks()));
        })
        .unwrap();
    }
    k.run(1.0).unwrap();
    let names: Vec<_> = t.borrow().iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, ["a1", "b1", "a2", "b2"]);
    assert!(t.borrow().iter().all(|(_, at)| *at == 0));
}

#[test]
fn equal_wake_times_resume_in_issue_order() {
    let k = kernel();
    let t = trace();
    // Issued in order c, a, b; all wake at 2 s.
    for (name, first) in [("c", 0.5), ("a", 1.0), ("b", 1.5)] {
        let (k2, t2) = (k.clone(), t.clone());
        k.spawn_root(async move {
            k2.sleep(first).await.unwrap();
            k2.sleep_until(SimTime(2_000_000)).await.unwrap();
            t2.borrow_mut().push((name.into(), k2.now().ticks()));
        })
        .unwrap();
    }
    k.run(3.0).unwrap();
    let names: Vec<_> = t.borrow().iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, ["c", "a", "b"]);
}

#[test]
fn sleep_until_now_and_future() {
    let k = kernel();
    let t = trace();
    let (k2, t2) = (k.clone(), t.clone());
    k.spawn_root(async move {
        k2.sleep(1.0).await.unwrap();
        k2.sleep_until(k2.now()).await.unwrap();
        t2.borrow_mut().push(("now".into(), k2.now().ticks()));
        k2.sleep_until(SimTime(2_000_000)).await.unwrap();
        t2.borrow_mut().push(("two".into(), k2.now().ticks()));
    })
    .unwrap();
    k.run(5.0).unwrap();
    assert_eq!(
        *t.borrow(),
        vec![("now".to_string(), 1_000_000), ("two".to_string(), 2_000_000)]
    );
}

#[test]
fn root_tasks_start_in_registration_order() {
    let k = kernel();
    let t = trace();
    for name in ["A", "B", "C"] {
        let t2 = t.clone();
        k.spawn_root(async move { t2.borrow_mut().push((name.into(), 0)) })
            .unwrap();
    }
    k.run(0.0).unwrap();
    let names: Vec<_> = t.borrow().iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, ["A", "B", "C"]);
}

#[test]
fn child_observes_spawn_time() {
    let k = kernel();
    let seen = Rc::new(Cell::new(u64::MAX));
    let (k2, s2) = (k.clone(), seen.clone());
    k.spawn_root(async move {
        k2.sleep(5.0).await.unwrap();
        let k3 = k2.clone();
        let child = k2.spawn(async move { s2.set(k3.now().ticks()) });
        child.join().await;
    })
    .unwrap();
    k.run(10.0).unwrap();
    assert_eq!(seen.get(), 5_000_000);
}

#[test]
fn end_hooks_fire_once_in_order_after_cancelling_tasks() {
    let k = kernel();
    let t = trace();
    let dropped = Rc::new(Cell::new(false));
    struct OnDrop(Rc<Cell<bool>>);
    impl Drop for OnDrop {
        fn drop(&mut self) {
            self.0.set(true);
        }
    }
    let (k2, d2) = (k.clone(), dropped.clone());
    k.spawn_root(async move {
        let _g = OnDrop(d2);
        k2.sleep(100.0).await.unwrap();
    })
    .unwrap();
    for name in ["first", "second"] {
        let (k2, t2, d2) = (k.clone(), t.clone(), dropped.clone());
        k.on_sim_end(move || {
            assert!(d2.get(), "blocked tasks are cancelled before hooks");
            t2.borrow_mut().push((name.into(), k2.now().ticks()));
        });
    }
    k.run(1.0).unwrap();
    assert_eq!(
        *t.borrow(),
        vec![("first".to_string(), 1_000_000), ("second".to_string(), 1_000_000)]
    );
    assert!(matches!(k.run(1.0), Err(KernelError::State(_))));
    assert_eq!(t.borrow().len(), 2);
}

#[test]
fn reentrant_run_is_state_error() {
    let k = kernel();
    let res = Rc::new(RefCell::new(None));
    let (k2, r2) = (k.clone(), res.clone());
    k.spawn_root(async move {
        *r2.borrow_mut() = Some(k2.run(5.0));
    })
    .unwrap();
    k.run(1.0).unwrap();
    assert!(matches!(res.borrow().clone(), Some(Err(KernelError::State(_)))));
}

#[test]
fn empty_run_jumps_to_end() {
    let k = kernel();
    let start = Instant::now();
    k.run(10.0).unwrap();
    assert_eq!(k.now_secs(), 10.0);
    assert!(start.elapsed().as_millis() < 100);
}

#[test]
fn idle_gaps_cost_nothing() {
    fn idle_run(hours: f64) -> std::time::Duration {
        let k = kernel();
        let k2 = k.clone();
        k.spawn_root(async move {
            for _ in 0..1000 {
                k2.sleep(hours * 3600.0 / 1000.0).await.unwrap();
            }
        })
        .unwrap();
        let start = Instant::now();
        k.run(hours * 3600.0).unwrap();
        start.elapsed()
    }
    // Warm up allocator and caches.
    idle_run(1.0);
    let short = idle_run(1.0).as_secs_f64();
    let long = idle_run(1000.0).as_secs_f64();
    assert!(long < 2.0 * short.max(1e-3), "1 h: {short}s, 1000 h: {long}s");
}

#[test]
fn queue_fifo_and_blocking() {
    let k = kernel();
    let q: SimQueue<&'static str> = SimQueue::new(&k);
    let t = trace();
    let (k2, q2, t2) = (k.clone(), q.clone(), t.clone());
    k.spawn_root(async move {
        k2.sleep(1.0).await.unwrap();
        let x = q2.get().await.unwrap();
        t2.borrow_mut().push((x.into(), k2.now().ticks()));
        let y = q2.get().await.unwrap();
        t2.borrow_mut().push((y.into(), k2.now().ticks()));
        let z = q2.get().await.unwrap();
        t2.borrow_mut().push((z.into(), k2.now().ticks()));
    })
    .unwrap();
    let (k3, q3) = (k.clone(), q.clone());
    k.spawn_root(async move {
        k3.sleep(4.0).await.unwrap();
        q3.put("x");
        q3.put("a");
        q3.put("b");
    })
    .unwrap();
    k.run(10.0).unwrap();
    assert_eq!(
        *t.borrow(),
        vec![
            ("x".to_string(), 4_000_000),
            ("a".to_string(), 4_000_000),
            ("b".to_string(), 4_000_000)
        ]
    );
}

#[test]
fn oldest_waiter_served_first() {
    let k = kernel();
    let q: SimQueue<u32> = SimQueue::new(&k);
    let t = trace();
    for name in ["first", "second"] {
        let (q2, t2, k2) = (q.clone(), t.clone(), k.clone());
        k.spawn_root(async move {
            let v = q2.get().await.unwrap();
            t2.borrow_mut().push((name.into(), v as u64 + k2.now().ticks()));
        })
        .unwrap();
    }
    let (k2, q2) = (k.clone(), q.clone());
    k.spawn_root(async move {
        k2.sleep(0.000_001).await.unwrap();
        q2.put(1);
        q2.put(2);
    })
    .unwrap();
    k.run(1.0).unwrap();
    assert_eq!(
        *t.borrow(),
        vec![("first".to_string(), 2), ("second".to_string(), 3)]
    );
}

#[test]
fn get_after_end_reports_closed() {
    let k = kernel();
    let q: SimQueue<u32> = SimQueue::new(&k);
    let res = Rc::new(RefCell::new(None));
    let (q2, r2) = (q.clone(), res.clone());
    k.on_sim_end(move || {
        // Poll a fresh get by hand: it must resolve immediately.
        let waker = std::task::Waker::noop();
        let mut cx = std::task::Context::from_waker(waker);
        let mut fut = std::pin::pin!(q2.get());
        *r2.borrow_mut() = Some(fut.as_mut().poll(&mut cx));
    });
    k.run(1.0).unwrap();
    assert!(matches!(
        res.borrow().as_ref(),
        Some(std::task::Poll::Ready(Err(QueueClosed)))
    ));
}

#[test]
fn timeout_at_reports_elapsed() {
    let k = kernel();
    let q: SimQueue<u32> = SimQueue::new(&k);
    let res = Rc::new(RefCell::new(Vec::new()));
    let (k2, q2, r2) = (k.clone(), q.clone(), res.clone());
    k.spawn_root(async move {
        let got = k2.timeout_at(SimTime(1_000_000), q2.get()).await;
        r2.borrow_mut().push((got.is_err(), k2.now().ticks()));
        q2.put(7);
        let got = k2.timeout_at(SimTime(5_000_000), q2.get()).await;
        r2.borrow_mut().push((got.is_err(), k2.now().ticks()));
    })
    .unwrap();
    k.run(10.0).unwrap();
    assert_eq!(*res.borrow(), vec![(true, 1_000_000), (false, 1_000_000)]);
}

#[test]
fn task_cancel_and_join() {
    let k = kernel();
    let reached = Rc::new(Cell::new(false));
    let (k2, r2) = (k.clone(), reached.clone());
    k.spawn_root(async move {
        let k3 = k2.clone();
        let r3 = r2.clone();
        let child = k2.spawn(async move {
            k3.sleep(10.0).await.unwrap();
            r3.set(true);
        });
        k2.sleep(1.0).await.unwrap();
        child.cancel();
        child.join().await;
        assert!(child.is_finished());
    })
    .unwrap();
    k.run(20.0).unwrap();
    assert!(!reached.get());
}

#[test]
fn abort_stops_the_run() {
    let k = kernel();
    let k2 = k.clone();
    k.spawn_root(async move {
        k2.sleep(2.0).await.unwrap();
        k2.abort("boom");
        k2.sleep(1.0).await.unwrap();
    })
    .unwrap();
    assert_eq!(k.run(10.0), Err(KernelError::Aborted("boom".into())));
    assert_eq!(k.now_secs(), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Resume order equals the sort of (wake tick, issue order).
    #[test]
    fn wakeups_follow_sorted_order(delays in prop::collection::vec(0u64..50, 1..200)) {
        let k = Kernel::new(SimConfig { tick_duration: 1.0, ..SimConfig::default() }).unwrap();
        let order = Rc::new(RefCell::new(Vec::new()));
        for (i, d) in delays.iter().copied().enumerate() {
            let (k2, o2) = (k.clone(), order.clone());
            k.spawn_root(async move {
                k2.sleep_ticks(d).await.unwrap();
                o2.borrow_mut().push((k2.now().ticks(), i));
            }).unwrap();
        }
        k.run(100.0).unwrap();
        let mut expected: Vec<(u64, usize)> = delays.iter().copied().enumerate().map(|(i, d)| (d, i)).collect();
        expected.sort();
        prop_assert_eq!(order.borrow().clone(), expected);
    }

    /// Time never moves between two steps of a task that did not suspend,
    /// even while other tasks hold pending wakeups.
    #[test]
    fn time_frozen_while_task_runs(steps in prop::collection::vec((0u64..20, 1usize..20), 1..30)) {
        let k = Kernel::new(SimConfig { tick_duration: 1.0, ..SimConfig::default() }).unwrap();
        let violations = Rc::new(Cell::new(0));
        for (delay, work) in steps {
            let (k2, v2) = (k.clone(), violations.clone());
            k.spawn_root(async move {
                k2.sleep_ticks(delay).await.unwrap();
                let at = k2.now();
                for _ in 0..work {
                    if k2.now() != at || k2.timer_lock() == 0 {
                        v2.set(v2.get() + 1);
                    }
                }
            }).unwrap();
        }
        k.run(100.0).unwrap();
        prop_assert_eq!(violations.get(), 0);
    }
}
