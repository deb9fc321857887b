use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use sha2::{Digest, Sha256};

/// Maps `f` over `items` with at most `workers` threads; output order
/// matches input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

/// Counting semaphore that also records the peak number of holders.
#[derive(Debug)]
pub struct Semaphore {
    state: Mutex<(usize, usize)>,
    cv: Condvar,
    limit: usize,
}

impl Semaphore {
    pub fn new(limit: usize) -> Self {
        Self { state: Mutex::new((0, 0)), cv: Condvar::new(), limit: limit.max(1) }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.limit {
            st = self.cv.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit { sem: self }
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.sem.state.lock().unwrap();
        st.0 -= 1;
        self.sem.cv.notify_one();
    }
}

/// SHA-256 over length-prefixed parts, so that part boundaries matter.
pub fn content_hash(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}
