//! Bounded worker pool whose results reach the sink in job order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::error::Result;

/// Runs `work` over `jobs` on up to `workers` threads. `sink` sees results
/// strictly in job order, so output never depends on scheduling. After the
/// first failure no new jobs start; results before the failing job are
/// still delivered and the error of the earliest failing job is returned.
pub fn run_ordered<J, T, W, S>(jobs: &[J], workers: usize, work: W, mut sink: S) -> Result<()>
where
    J: Sync,
    T: Send,
    W: Fn(&J) -> Result<T> + Sync,
    S: FnMut(usize, T) -> Result<()>,
{
    let workers = workers.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<T>)>(workers);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, failed, work) = (&next, &failed, &work);
            scope.spawn(move || loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = work(&jobs[i]);
                if out.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                if tx.send((i, out)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, Result<T>> = BTreeMap::new();
        let mut emitted = 0;
        let mut first_error = None;
        for (i, out) in rx {
            pending.insert(i, out);
            while let Some(out) = pending.remove(&emitted) {
                match out {
                    Ok(v) if first_error.is_none() => {
                        if let Err(e) = sink(emitted, v) {
                            failed.store(true, Ordering::SeqCst);
                            first_error = Some(e);
                        }
                    }
                    Ok(_) => {}
                    Err(e) => {
                        if first_error.is_none() {
                            first_error = Some(e);
                        }
                    }
                }
                emitted += 1;
            }
        }
        // Jobs after a gap left by an unstarted job are never emitted.
        match first_error {
            Some(e) => Err(e),
            None => {
                debug_assert!(pending.is_empty());
                Ok(())
            }
        }
    })
}
