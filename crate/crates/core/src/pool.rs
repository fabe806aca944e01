//! Persistent worker pool for the compute engine. Thread creation is
//! expensive under sandboxed kernels, so a training run spawns its workers
//! once and dispatches closures over channels.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::JoinHandle;

struct Job {
    data: *const (),
    call: unsafe fn(*const (), usize),
    t: usize,
}

// The raw closure pointer is only dereferenced while `broadcast` blocks the
// caller, which keeps the referent alive; the closure itself is `Sync`.
unsafe impl Send for Job {}

struct Worker {
    tx: SyncSender<Job>,
    done_rx: Receiver<()>,
    handle: Option<JoinHandle<()>>,
}

/// Fixed set of worker threads executing broadcast closures. The calling
/// thread acts as worker 0.
pub(crate) struct WorkerPool {
    workers: Vec<Worker>,
}

impl WorkerPool {
    /// Pool that runs closures across `threads` lanes in total (the caller
    /// plus `threads - 1` spawned workers).
    pub fn new(threads: usize) -> Self {
        let extra = threads.saturating_sub(1);
        let workers = (0..extra)
            .map(|_| {
                let (tx, rx) = sync_channel::<Job>(1);
                let (done_tx, done_rx) = sync_channel::<()>(1);
                let handle = std::thread::spawn(move || {
                    while let Ok(job) = rx.recv() {
                        unsafe { (job.call)(job.data, job.t) };
                        if done_tx.send(()).is_err() {
                            break;
                        }
                    }
                });
                Worker { tx, done_rx, handle: Some(handle) }
            })
            .collect();
        Self { workers }
    }

    /// Total number of lanes, including the caller.
    pub fn threads(&self) -> usize {
        self.workers.len() + 1
    }

    /// Runs `f(t)` for every lane `t in 0..threads()`, `f(0)` on the caller,
    /// and returns once all lanes finished.
    pub fn broadcast<F: Fn(usize) + Sync>(&self, f: &F) {
        unsafe fn trampoline<F: Fn(usize)>(data: *const (), t: usize) {
            unsafe { (*(data as *const F))(t) }
        }
        for (i, w) in self.workers.iter().enumerate() {
            let job = Job {
                data: f as *const F as *const (),
                call: trampoline::<F>,
                t: i + 1,
            };
            w.tx.send(job).expect("worker thread is alive");
        }
        f(0);
        for w in &self.workers {
            w.done_rx.recv().expect("worker thread completed");
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        for w in &mut self.workers {
            // Closing the job channel ends the worker loop.
            let (closed_tx, _) = sync_channel::<Job>(1);
            let tx = core::mem::replace(&mut w.tx, closed_tx);
            drop(tx);
            if let Some(handle) = w.handle.take() {
                let _ = handle.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn broadcast_runs_every_lane_once() {
        let pool = WorkerPool::new(3);
        assert_eq!(pool.threads(), 3);
        let counter = AtomicUsize::new(0);
        let seen = [AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)];
        pool.broadcast(&|t| {
            counter.fetch_add(1, Ordering::SeqCst);
            seen[t].fetch_add(1, Ordering::SeqCst);
        });
        assert_eq!(counter.load(Ordering::SeqCst), 3);
        for s in &seen {
            assert_eq!(s.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn broadcast_can_borrow_stack_data() {
        let pool = WorkerPool::new(2);
        let mut buf = vec![0u64; 64];
        {
            let (left, right) = buf.split_at_mut(32);
            let parts = [
                std::sync::Mutex::new(left),
                std::sync::Mutex::new(right),
            ];
            pool.broadcast(&|t| {
                for (i, v) in parts[t].lock().unwrap().iter_mut().enumerate() {
                    *v = (t * 1000 + i) as u64;
                }
            });
        }
        assert_eq!(buf[0], 0);
        assert_eq!(buf[33], 1001);
    }

    #[test]
    fn single_lane_pool_runs_inline() {
        let pool = WorkerPool::new(1);
        let flag = AtomicUsize::new(0);
        pool.broadcast(&|t| {
            assert_eq!(t, 0);
            flag.fetch_add(1, Ordering::SeqCst);
        });
        assert_eq!(flag.load(Ordering::SeqCst), 1);
    }
}
