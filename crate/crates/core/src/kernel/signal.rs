use std::cell::{Cell, RefCell};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

#[derive(Default)]
struct SignalState {
    generation: Cell<u64>,
    waiters: RefCell<Vec<Waker>>,
}

/// Broadcast notification: every `wait()` created before a `notify_all()`
/// completes after it.
#[derive(Clone, Default)]
pub struct Signal {
    state: Rc<SignalState>,
}

impl Signal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn notify_all(&self) {
        self.state.generation.set(self.state.generation.get() + 1);
        for w in self.state.waiters.borrow_mut().drain(..) {
            w.wake();
        }
    }

    pub fn wait(&self) -> SignalWait {
        SignalWait {
            state: self.state.clone(),
            generation: self.state.generation.get(),
        }
    }
}

pub struct SignalWait {
    state: Rc<SignalState>,
    generation: u64,
}

impl Future for SignalWait {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.state.generation.get() != self.generation {
            Poll::Ready(())
        } else {
            self.state.waiters.borrow_mut().push(cx.waker().clone());
            Poll::Pending
        }
    }
}
