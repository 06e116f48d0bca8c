//! Single-threaded virtual-time executor.
//!
//! Ready tasks are polled in FIFO order. When none are ready, the earliest
//! timer (ordered by time, then creation sequence) fires and the clock jumps
//! to it. Nothing here reads the wall clock.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use futures::channel::oneshot;

use crate::runtime::LocalBoxFuture;

type Timer = Box<dyn FnOnce()>;

struct TaskWaker {
    id: usize,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.ready.lock().expect("ready queue lock").push_back(self.id);
    }
}

pub struct Executor {
    now: Cell<u64>,
    seq: Cell<u64>,
    timers: RefCell<BTreeMap<(u64, u64), Timer>>,
    tasks: RefCell<Vec<Option<LocalBoxFuture<()>>>>,
    free: RefCell<Vec<usize>>,
    // Wakers must be Send + Sync even though only one thread ever runs.
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Executor {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: Cell::new(start_ms),
            seq: Cell::new(0),
            timers: RefCell::default(),
            tasks: RefCell::default(),
            free: RefCell::default(),
            ready: Arc::default(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now.get()
    }

    /// Runs `f` at virtual time `at` (or now, if `at` has passed).
    pub fn schedule(&self, at: u64, f: impl FnOnce() + 'static) {
        let seq = self.seq.get();
        self.seq.set(seq + 1);
        self.timers
            .borrow_mut()
            .insert((at.max(self.now()), seq), Box::new(f));
    }

    pub fn sleep(&self, ms: u64) -> LocalBoxFuture<()> {
        let (tx, rx) = oneshot::channel();
        self.schedule(self.now() + ms, move || {
            let _ = tx.send(());
        });
        Box::pin(async move {
            let _ = rx.await;
        })
    }

    pub fn spawn(&self, task: LocalBoxFuture<()>) {
        let mut tasks = self.tasks.borrow_mut();
        let id = match self.free.borrow_mut().pop() {
            Some(id) => {
                tasks[id] = Some(task);
                id
            }
            None => {
                tasks.push(Some(task));
                tasks.len() - 1
            }
        };
        self.ready.lock().expect("ready queue lock").push_back(id);
    }

    fn run_ready(&self) {
        loop {
            let next = self.ready.lock().expect("ready queue lock").pop_front();
            let Some(id) = next else { return };
            let task = self.tasks.borrow_mut().get_mut(id).and_then(Option::take);
            let Some(mut task) = task else { continue };
            let waker = Waker::from(Arc::new(TaskWaker {
                id,
                ready: self.ready.clone(),
            }));
            match task.as_mut().poll(&mut Context::from_waker(&waker)) {
                Poll::Pending => self.tasks.borrow_mut()[id] = Some(task),
                Poll::Ready(()) => self.free.borrow_mut().push(id),
            }
        }
    }

    /// Fires the earliest timer unless it lies beyond `deadline`. Returns
    /// false when there is nothing left to do before the deadline.
    fn fire_next(&self, deadline: Option<u64>) -> bool {
        let next = {
            let mut timers = self.timers.borrow_mut();
            match timers.first_key_value() {
                Some((&(at, _), _)) if deadline.is_none_or(|d| at <= d) => timers.pop_first(),
                _ => None,
            }
        };
        match next {
            Some(((at, _), f)) => {
                self.now.set(at.max(self.now()));
                f();
                true
            }
            None => false,
        }
    }

    /// Drives everything until `fut` completes. `None` if it has not
    /// completed by virtual time `deadline`, or if the system went idle
    /// with `fut` still pending.
    pub fn run_until<T: 'static>(&self, fut: impl Future<Output = T> + 'static, deadline: Option<u64>) -> Option<T> {
        let slot: Rc<RefCell<Option<T>>> = Rc::default();
        let out = slot.clone();
        self.spawn(Box::pin(async move {
            *out.borrow_mut() = Some(fut.await);
        }));
        loop {
            self.run_ready();
            if let Some(v) = slot.borrow_mut().take() {
                return Some(v);
            }
            if !self.fire_next(deadline) {
                if let Some(d) = deadline {
                    self.now.set(self.now().max(d));
                }
                return None;
            }
        }
    }

    /// Drops every task and timer. Breaks reference cycles between nodes
    /// and the network they run on.
    pub fn clear(&self) {
        let tasks = std::mem::take(&mut *self.tasks.borrow_mut());
        let timers = std::mem::take(&mut *self.timers.borrow_mut());
        self.free.borrow_mut().clear();
        self.ready.lock().expect("ready queue lock").clear();
        drop(tasks);
        drop(timers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timers_fire_in_time_then_creation_order() {
        let ex = Rc::new(Executor::new(0));
        let log = Rc::new(RefCell::new(Vec::new()));
        for (at, name) in [(30, "c"), (10, "a"), (10, "b"), (20, "x")] {
            let log = log.clone();
            ex.schedule(at, move || log.borrow_mut().push(name));
        }
        let ex2 = ex.clone();
        let done = ex.run_until(async move { ex2.sleep(25).await }, None);
        assert_eq!(done, Some(()));
        assert_eq!(*log.borrow(), vec!["a", "b", "x"]);
        assert_eq!(ex.now(), 25);
    }

    #[test]
    fn deadline_stops_unfinished_work() {
        let ex = Rc::new(Executor::new(1000));
        let ex2 = ex.clone();
        let out = ex.run_until(async move { ex2.sleep(500).await }, Some(1200));
        assert_eq!(out, None);
        assert_eq!(ex.now(), 1200);
    }

    #[test]
    fn spawned_tasks_interleave_deterministically() {
        let ex = Rc::new(Executor::new(0));
        let log = Rc::new(RefCell::new(Vec::new()));
        for i in 0..3u64 {
            let (ex2, log) = (ex.clone(), log.clone());
            ex.spawn(Box::pin(async move {
                ex2.sleep(10 - i).await;
                log.borrow_mut().push(i);
            }));
        }
        let ex2 = ex.clone();
        ex.run_until(async move { ex2.sleep(100).await }, None);
        assert_eq!(*log.borrow(), vec![2, 1, 0]);
    }

    #[test]
    fn idle_with_pending_future_returns_none() {
        let ex = Executor::new(0);
        let (_tx, rx) = oneshot::channel::<()>();
        assert_eq!(ex.run_until(async move { rx.await.ok() }, None), None);
    }
}
