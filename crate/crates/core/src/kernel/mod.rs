//! Virtual-time discrete-event executor.
//!
//! The kernel drives cooperative tasks (plain Rust futures) on a single
//! logical thread. Virtual time is an integer tick counter that only moves
//! when no task is runnable: the kernel then pops the earliest entry of the
//! wakeup queue and jumps straight to it, so idle stretches cost nothing.
//!
//! Wakeups at the same tick resume in `(wake_at, seq)` order, where `seq` is
//! a global insertion counter.

mod queue;
mod signal;
mod time;

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::{Rc, Weak};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use queue::{Get, QueueClosed, SimQueue};
pub use signal::{Signal, SignalWait};
pub use time::{SimConfig, SimTime};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid kernel state: {0}")]
    State(String),
    #[error("simulation aborted: {0}")]
    Aborted(String),
}

/// Returned by [`Kernel::timeout_at`] when the deadline passes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Elapsed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Ended,
}

type BoxedTask = Pin<Box<dyn Future<Output = ()>>>;

struct ReadyQueue {
    queue: Mutex<VecDeque<u64>>,
    /// Timer-lock: tasks that are woken or currently executing.
    lock: AtomicUsize,
}

struct TaskWaker {
    id: u64,
    queued: AtomicBool,
    ready: Arc<ReadyQueue>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::AcqRel) {
            self.ready.lock.fetch_add(1, Ordering::AcqRel);
            self.ready.queue.lock().unwrap().push_back(self.id);
        }
    }
}

#[derive(Default)]
struct TaskState {
    finished: Cell<bool>,
    joiners: RefCell<Vec<Waker>>,
}

impl TaskState {
    fn finish(&self) {
        self.finished.set(true);
        for w in self.joiners.borrow_mut().drain(..) {
            w.wake();
        }
    }
}

struct TaskSlot {
    future: Option<BoxedTask>,
    waker: Arc<TaskWaker>,
    state: Rc<TaskState>,
}

struct Timer {
    fired: Cell<bool>,
    waker: RefCell<Option<Waker>>,
}

struct WakeEntry {
    wake_at: u64,
    seq: u64,
    timer: Weak<Timer>,
}

impl PartialEq for WakeEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.wake_at, self.seq) == (other.wake_at, other.seq)
    }
}
impl Eq for WakeEntry {}
impl PartialOrd for WakeEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for WakeEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.wake_at, self.seq).cmp(&(other.wake_at, other.seq))
    }
}

struct Inner {
    config: SimConfig,
    ticks_per_sec: Option<u64>,
    now: Cell<u64>,
    seq: Cell<u64>,
    phase: Cell<Phase>,
    wakeups: RefCell<BinaryHeap<Reverse<WakeEntry>>>,
    tasks: RefCell<BTreeMap<u64, TaskSlot>>,
    next_task: Cell<u64>,
    ready: Arc<ReadyQueue>,
    polling: Cell<Option<u64>>,
    cancel_current: Cell<bool>,
    end_hooks: RefCell<Vec<Box<dyn FnOnce()>>>,
    failure: RefCell<Option<String>>,
    next_stream: Cell<u64>,
}

/// Handle to the simulation kernel. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Kernel {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel")
            .field("now", &self.inner.now.get())
            .field("phase", &self.inner.phase.get())
            .finish()
    }
}

impl Kernel {
    pub fn new(config: SimConfig) -> Result<Self, KernelError> {
        config.validate()?;
        let per_sec = 1.0 / config.tick_duration;
        let ticks_per_sec = if per_sec.fract().abs() < 1e-9 || (1.0 - per_sec.fract()) < 1e-9 {
            Some(per_sec.round() as u64)
        } else {
            None
        };
        Ok(Kernel {
            inner: Rc::new(Inner {
                config,
                ticks_per_sec,
                now: Cell::new(0),
                seq: Cell::new(0),
                phase: Cell::new(Phase::Idle),
                wakeups: RefCell::new(BinaryHeap::new()),
                tasks: RefCell::new(BTreeMap::new()),
                next_task: Cell::new(0),
                ready: Arc::new(ReadyQueue {
                    queue: Mutex::new(VecDeque::new()),
                    lock: AtomicUsize::new(0),
                }),
                polling: Cell::new(None),
                cancel_current: Cell::new(false),
                end_hooks: RefCell::new(Vec::new()),
                failure: RefCell::new(None),
                next_stream: Cell::new(0),
            }),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.inner.config
    }

    pub fn tick_duration(&self) -> f64 {
        self.inner.config.tick_duration
    }

    pub fn now(&self) -> SimTime {
        SimTime(self.inner.now.get())
    }

    pub fn now_secs(&self) -> f64 {
        self.to_secs(self.now())
    }

    /// Current time in whole milliseconds, rounded down.
    pub fn now_millis(&self) -> u64 {
        let ticks = self.inner.now.get();
        match self.inner.ticks_per_sec {
            Some(tps) => ((ticks as u128 * 1000) / tps as u128) as u64,
            None => (ticks as f64 * self.tick_duration() * 1000.0 + 1e-9).floor() as u64,
        }
    }

    pub fn to_secs(&self, t: SimTime) -> f64 {
        match self.inner.ticks_per_sec {
            Some(tps) => t.0 as f64 / tps as f64,
            None => t.0 as f64 * self.tick_duration(),
        }
    }

    /// Converts a duration to ticks, rounding to the nearest tick (ties up).
    pub fn ticks(&self, secs: f64) -> Result<u64, KernelError> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(KernelError::Argument(format!(
                "duration must be a finite non-negative number of seconds, got {secs}"
            )));
        }
        Ok((secs / self.tick_duration() + 0.5).floor() as u64)
    }

    pub fn is_running(&self) -> bool {
        self.inner.phase.get() == Phase::Running
    }

    pub fn has_ended(&self) -> bool {
        self.inner.phase.get() == Phase::Ended
    }

    /// Number of tasks that are woken or executing. Time only advances at 0.
    pub fn timer_lock(&self) -> usize {
        self.inner.ready.lock.load(Ordering::Acquire)
    }

    pub fn seed(&self) -> u64 {
        self.inner.config.seed
    }

    /// Hands out an independent random stream derived from the run seed.
    ///
    /// Streams are numbered in request order, so the draws of one component
    /// do not depend on how many draws another component makes.
    pub fn rng_stream(&self) -> ChaCha8Rng {
        let stream = self.inner.next_stream.get();
        self.inner.next_stream.set(stream + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.inner.config.seed);
        rng.set_stream(stream);
        rng
    }

    fn next_seq(&self) -> u64 {
        let s = self.inner.seq.get();
        self.inner.seq.set(s + 1);
        s
    }

    fn schedule_timer(&self, wake_at: u64) -> Rc<Timer> {
        let timer = Rc::new(Timer {
            fired: Cell::new(false),
            waker: RefCell::new(None),
        });
        let entry = WakeEntry {
            wake_at,
            seq: self.next_seq(),
            timer: Rc::downgrade(&timer),
        };
        self.inner.wakeups.borrow_mut().push(Reverse(entry));
        timer
    }

    /// Suspends the calling task for `secs` of virtual time.
    pub fn sleep(&self, secs: f64) -> Sleep {
        match self.ticks(secs) {
            Ok(t) => Sleep::armed(self.schedule_timer(self.inner.now.get() + t)),
            Err(e) => Sleep::failed(e),
        }
    }

    pub fn sleep_ticks(&self, ticks: u64) -> Sleep {
        Sleep::armed(self.schedule_timer(self.inner.now.get() + ticks))
    }

    /// Suspends the calling task until the absolute time `t`.
    pub fn sleep_until(&self, t: SimTime) -> Sleep {
        let now = self.inner.now.get();
        if t.0 < now {
            return Sleep::failed(KernelError::Argument(format!(
                "sleep_until target {} is before now {}",
                t.0, now
            )));
        }
        Sleep::armed(self.schedule_timer(t.0))
    }

    /// Runs `fut` until it completes or virtual time reaches `deadline`.
    pub fn timeout_at<F: Future>(&self, deadline: SimTime, fut: F) -> Timeout<F> {
        let deadline = deadline.max(self.now());
        Timeout {
            fut: Box::pin(fut),
            sleep: self.sleep_until(deadline),
        }
    }

    /// Registers a task that starts at t=0. Only allowed before `run`.
    pub fn spawn_root<F>(&self, fut: F) -> Result<TaskHandle, KernelError>
    where
        F: Future<Output = ()> + 'static,
    {
        if self.inner.phase.get() != Phase::Idle {
            return Err(KernelError::State(
                "root tasks must be registered before the simulation starts".into(),
            ));
        }
        Ok(self.spawn(fut))
    }

    /// Spawns a task that becomes runnable at the current virtual time.
    pub fn spawn<F>(&self, fut: F) -> TaskHandle
    where
        F: Future<Output = ()> + 'static,
    {
        let id = self.inner.next_task.get();
        self.inner.next_task.set(id + 1);
        let waker = Arc::new(TaskWaker {
            id,
            queued: AtomicBool::new(false),
            ready: self.inner.ready.clone(),
        });
        let state = Rc::new(TaskState::default());
        self.inner.tasks.borrow_mut().insert(
            id,
            TaskSlot {
                future: Some(Box::pin(fut)),
                waker: waker.clone(),
                state: state.clone(),
            },
        );
        waker.wake_by_ref();
        TaskHandle {
            id,
            state,
            kernel: Rc::downgrade(&self.inner),
        }
    }

    /// Registers a callback invoked once after the final event of the run.
    pub fn on_sim_end<F: FnOnce() + 'static>(&self, callback: F) {
        self.inner.end_hooks.borrow_mut().push(Box::new(callback));
    }

    /// Stops the run at the next scheduling point; `run` returns the error.
    pub fn abort(&self, reason: impl Into<String>) {
        let mut failure = self.inner.failure.borrow_mut();
        if failure.is_none() {
            *failure = Some(reason.into());
        }
    }

    fn pop_ready(&self) -> Option<u64> {
        self.inner.ready.queue.lock().unwrap().pop_front()
    }

    fn poll_task(&self, id: u64) {
        let taken = {
            let mut tasks = self.inner.tasks.borrow_mut();
            tasks
                .get_mut(&id)
                .and_then(|slot| slot.future.take().map(|f| (f, slot.waker.clone())))
        };
        let Some((mut fut, waker)) = taken else {
            // Cancelled or finished after it was queued.
            self.inner.ready.lock.fetch_sub(1, Ordering::AcqRel);
            return;
        };
        waker.queued.store(false, Ordering::Release);
        let std_waker = Waker::from(waker.clone());
        let mut cx = Context::from_waker(&std_waker);
        self.inner.polling.set(Some(id));
        self.inner.cancel_current.set(false);
        let poll = fut.as_mut().poll(&mut cx);
        self.inner.polling.set(None);
        let cancelled = self.inner.cancel_current.replace(false);
        match poll {
            Poll::Ready(()) => {
                let slot = self.inner.tasks.borrow_mut().remove(&id);
                drop(fut);
                if let Some(slot) = slot {
                    slot.state.finish();
                }
            }
            Poll::Pending if cancelled => {
                let slot = self.inner.tasks.borrow_mut().remove(&id);
                drop(fut);
                if let Some(slot) = slot {
                    slot.state.finish();
                }
            }
            Poll::Pending => {
                if let Some(slot) = self.inner.tasks.borrow_mut().get_mut(&id) {
                    slot.future = Some(fut);
                }
            }
        }
        self.inner.ready.lock.fetch_sub(1, Ordering::AcqRel);
    }

    fn cancel_task(&self, id: u64) {
        if self.inner.polling.get() == Some(id) {
            self.inner.cancel_current.set(true);
            return;
        }
        let slot = self.inner.tasks.borrow_mut().remove(&id);
        if let Some(mut slot) = slot {
            drop(slot.future.take());
            slot.state.finish();
        }
    }

    /// Runs the simulation until virtual time reaches `length` seconds or no
    /// events remain, then cancels blocked tasks and fires end hooks.
    pub fn run(&self, length: f64) -> Result<(), KernelError> {
        match self.inner.phase.get() {
            Phase::Idle => {}
            Phase::Running => {
                return Err(KernelError::State("run() called while already running".into()))
            }
            Phase::Ended => return Err(KernelError::State("simulation already finished".into())),
        }
        let end = self.ticks(length)?;
        self.inner.phase.set(Phase::Running);
        log::debug!(target: "lorasim::kernel", "run start, end tick {end}");

        'events: loop {
            while let Some(id) = self.pop_ready() {
                self.poll_task(id);
                if self.inner.failure.borrow().is_some() {
                    break 'events;
                }
            }
            debug_assert_eq!(self.timer_lock(), 0);
            loop {
                let next = {
                    let mut heap = self.inner.wakeups.borrow_mut();
                    match heap.peek() {
                        Some(Reverse(e)) if e.wake_at <= end => heap.pop().map(|Reverse(e)| e),
                        _ => None,
                    }
                };
                let Some(entry) = next else { break 'events };
                let Some(timer) = entry.timer.upgrade() else { continue };
                if entry.wake_at > self.inner.now.get() {
                    self.inner.now.set(entry.wake_at);
                }
                timer.fired.set(true);
                if let Some(w) = timer.waker.borrow_mut().take() {
                    w.wake();
                }
                break;
            }
        }

        if self.inner.now.get() < end && self.inner.failure.borrow().is_none() {
            self.inner.now.set(end);
        }
        self.finish();
        match self.inner.failure.borrow().clone() {
            Some(reason) => Err(KernelError::Aborted(reason)),
            None => Ok(()),
        }
    }

    fn finish(&self) {
        self.inner.phase.set(Phase::Ended);
        let tasks = std::mem::take(&mut *self.inner.tasks.borrow_mut());
        for (_, mut slot) in tasks {
            drop(slot.future.take());
            slot.state.finish();
        }
        self.inner.ready.queue.lock().unwrap().clear();
        self.inner.ready.lock.store(0, Ordering::Release);
        // Hooks may register further hooks; drain until empty.
        loop {
            let hooks = std::mem::take(&mut *self.inner.end_hooks.borrow_mut());
            if hooks.is_empty() {
                break;
            }
            for hook in hooks {
                hook();
            }
        }
        log::debug!(target: "lorasim::kernel", "run finished at tick {}", self.inner.now.get());
    }
}

/// Future returned by [`Kernel::sleep`] and friends.
pub struct Sleep {
    timer: Option<Rc<Timer>>,
    error: Option<KernelError>,
}

impl Sleep {
    fn armed(timer: Rc<Timer>) -> Self {
        Sleep {
            timer: Some(timer),
            error: None,
        }
    }

    fn failed(e: KernelError) -> Self {
        Sleep {
            timer: None,
            error: Some(e),
        }
    }
}

impl Future for Sleep {
    type Output = Result<(), KernelError>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        if let Some(e) = self.error.take() {
            return Poll::Ready(Err(e));
        }
        match &self.timer {
            Some(t) if t.fired.get() => Poll::Ready(Ok(())),
            Some(t) => {
                *t.waker.borrow_mut() = Some(cx.waker().clone());
                Poll::Pending
            }
            None => Poll::Ready(Ok(())),
        }
    }
}

pub struct Timeout<F> {
    fut: Pin<Box<F>>,
    sleep: Sleep,
}

impl<F: Future> Future for Timeout<F> {
    type Output = Result<F::Output, Elapsed>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        if let Poll::Ready(v) = self.fut.as_mut().poll(cx) {
            return Poll::Ready(Ok(v));
        }
        match Pin::new(&mut self.sleep).poll(cx) {
            Poll::Ready(_) => Poll::Ready(Err(Elapsed)),
            Poll::Pending => Poll::Pending,
        }
    }
}

/// Handle to a spawned task.
pub struct TaskHandle {
    id: u64,
    state: Rc<TaskState>,
    kernel: Weak<Inner>,
}

impl TaskHandle {
    pub fn is_finished(&self) -> bool {
        self.state.finished.get()
    }

    /// Drops the task's future. A task may cancel itself; it then stops at
    /// its next suspension point.
    pub fn cancel(&self) {
        if let Some(inner) = self.kernel.upgrade() {
            Kernel { inner }.cancel_task(self.id);
        }
    }

    /// Resolves once the task has completed or been cancelled.
    pub fn join(&self) -> Join {
        Join {
            state: self.state.clone(),
        }
    }
}

pub struct Join {
    state: Rc<TaskState>,
}

impl Future for Join {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.state.finished.get() {
            Poll::Ready(())
        } else {
            self.state.joiners.borrow_mut().push(cx.waker().clone());
            Poll::Pending
        }
    }
}
