use std::cell::RefCell;
use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use super::Kernel;

/// The simulation ended while a consumer waited on an empty queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("simulation ended with the queue empty")]
pub struct QueueClosed;

struct Slot<T> {
    item: RefCell<Option<T>>,
    waker: RefCell<Option<Waker>>,
}

struct QueueState<T> {
    items: VecDeque<T>,
    waiters: VecDeque<Rc<Slot<T>>>,
}

/// FIFO queue whose consumers block in virtual time.
pub struct SimQueue<T> {
    state: Rc<RefCell<QueueState<T>>>,
    kernel: Kernel,
}

impl<T> Clone for SimQueue<T> {
    fn clone(&self) -> Self {
        SimQueue {
            state: self.state.clone(),
            kernel: self.kernel.clone(),
        }
    }
}

impl<T> SimQueue<T> {
    pub fn new(kernel: &Kernel) -> Self {
        SimQueue {
            state: Rc::new(RefCell::new(QueueState {
                items: VecDeque::new(),
                waiters: VecDeque::new(),
            })),
            kernel: kernel.clone(),
        }
    }

    /// Appends an item, handing it straight to the oldest blocked consumer.
    pub fn put(&self, item: T) {
        let waiter = self.state.borrow_mut().waiters.pop_front();
        match waiter {
            Some(slot) => {
                *slot.item.borrow_mut() = Some(item);
                if let Some(w) = slot.waker.borrow_mut().take() {
                    w.wake();
                }
            }
            None => self.state.borrow_mut().items.push_back(item),
        }
    }

    pub fn try_get(&self) -> Option<T> {
        self.state.borrow_mut().items.pop_front()
    }

    pub fn get(&self) -> Get<T> {
        Get {
            queue: self.clone(),
            slot: None,
        }
    }

    pub fn len(&self) -> usize {
        self.state.borrow().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.state.borrow_mut().items.clear();
    }
}

pub struct Get<T> {
    queue: SimQueue<T>,
    slot: Option<Rc<Slot<T>>>,
}

impl<T> Future for Get<T> {
    type Output = Result<T, QueueClosed>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        if let Some(slot) = &this.slot {
            let handed = slot.item.borrow_mut().take();
            if let Some(item) = handed {
                this.slot = None;
                return Poll::Ready(Ok(item));
            }
            if this.queue.kernel.has_ended() {
                this.remove_waiter();
                return Poll::Ready(Err(QueueClosed));
            }
            *slot.waker.borrow_mut() = Some(cx.waker().clone());
            return Poll::Pending;
        }
        if let Some(item) = this.queue.try_get() {
            return Poll::Ready(Ok(item));
        }
        if this.queue.kernel.has_ended() {
            return Poll::Ready(Err(QueueClosed));
        }
        let slot = Rc::new(Slot {
            item: RefCell::new(None),
            waker: RefCell::new(Some(cx.waker().clone())),
        });
        this.queue.state.borrow_mut().waiters.push_back(slot.clone());
        this.slot = Some(slot);
        Poll::Pending
    }
}

impl<T> Get<T> {
    fn remove_waiter(&mut self) {
        if let Some(slot) = self.slot.take() {
            let mut st = self.queue.state.borrow_mut();
            st.waiters.retain(|w| !Rc::ptr_eq(w, &slot));
        }
    }
}

impl<T> Drop for Get<T> {
    fn drop(&mut self) {
        let Some(slot) = self.slot.take() else { return };
        self.queue
            .state
            .borrow_mut()
            .waiters
            .retain(|w| !Rc::ptr_eq(w, &slot));
        // An item was handed over but never consumed: pass it on.
        let pending = slot.item.borrow_mut().take();
        if let Some(item) = pending {
            let next = self.queue.state.borrow_mut().waiters.pop_front();
            match next {
                Some(next) => {
                    *next.item.borrow_mut() = Some(item);
                    if let Some(w) = next.waker.borrow_mut().take() {
                        w.wake();
                    }
                }
                None => self.queue.state.borrow_mut().items.push_front(item),
            }
        }
    }
}
