//! High-water-mark accounting of live tensor payload bytes.
//!
//! Only tensor payloads count: data planes, intermediates saved for
//! backward, and gradient buffers. Shape metadata, op records and optimizer
//! moments are outside the measurement, matching the estimator's exclusions.

use std::cell::Cell;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeterError {
    #[error("nested instrumentation is disallowed: a metered scope is already active on this thread")]
    Nested,
}

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static CURRENT: Cell<u64> = const { Cell::new(0) };
    static PEAK: Cell<u64> = const { Cell::new(0) };
}

/// Called by tensor constructors. Returns whether the allocation was counted,
/// so the matching free only fires for tensors born inside the scope.
pub(super) fn on_alloc(bytes: usize) -> bool {
    ACTIVE.with(|a| {
        if !a.get() {
            return false;
        }
        CURRENT.with(|c| {
            let now = c.get() + bytes as u64;
            c.set(now);
            PEAK.with(|p| {
                if now > p.get() {
                    p.set(now);
                }
            });
        });
        true
    })
}

pub(super) fn on_free(bytes: usize) {
    ACTIVE.with(|a| {
        if a.get() {
            CURRENT.with(|c| c.set(c.get().saturating_sub(bytes as u64)));
        }
    });
}

/// Live tensor bytes in the current scope; 0 when no scope is active.
pub fn meter_current_bytes() -> u64 {
    CURRENT.with(|c| c.get())
}

/// Run `f` with allocation metering active and return the peak number of
/// live tensor payload bytes observed, together with `f`'s result.
///
/// The scope starts from zero: tensors created before the scope are not
/// counted and their drop inside the scope does not decrement the counter.
pub fn instrument_peak<R>(f: impl FnOnce() -> R) -> Result<(u64, R), MeterError> {
    ACTIVE.with(|a| {
        if a.get() {
            return Err(MeterError::Nested);
        }
        a.set(true);
        Ok(())
    })?;
    CURRENT.with(|c| c.set(0));
    PEAK.with(|p| p.set(0));

    let out = f();

    ACTIVE.with(|a| a.set(false));
    let peak = PEAK.with(|p| p.get());
    Ok((peak, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_allocation_is_exact() {
        let (peak, _) = instrument_peak(|| {
            let t = Tensor::<f32>::zeros(&[10, 10]);
            t.numel()
        })
        .unwrap();
        assert_eq!(peak, 400);
    }

    #[test]
    fn peak_tracks_high_water_not_current() {
        let (peak, _) = instrument_peak(|| {
            let a = Tensor::<f64>::zeros(&[100]);
            drop(a);
            let _b = Tensor::<f64>::zeros(&[10]);
        })
        .unwrap();
        assert_eq!(peak, 800);
    }

    #[test]
    fn outside_tensors_do_not_underflow() {
        let outside = Tensor::<f32>::zeros(&[50]);
        let (peak, _) = instrument_peak(|| {
            drop(outside);
            let _t = Tensor::<f32>::zeros(&[25]);
        })
        .unwrap();
        assert_eq!(peak, 100);
    }

    #[test]
    fn nesting_rejected() {
        let res = instrument_peak(|| instrument_peak(|| ()));
        let inner = res.unwrap().1;
        assert!(matches!(inner, Err(MeterError::Nested)));
    }

    #[test]
    fn repeated_runs_identical() {
        let run = || {
            instrument_peak(|| {
                let a = Tensor::<f32>::zeros(&[33, 7]);
                let b = a.clone();
                drop(a);
                let _c = b.scale(2.0);
            })
            .unwrap()
            .0
        };
        assert_eq!(run(), run());
    }
}
