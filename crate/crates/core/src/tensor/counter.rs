use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` multiply-accumulates to the current thread's counter.
///
/// Primitives report nominal counts: convolutions include taps that land in
/// zero padding, attention includes masked score entries.
pub fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the MACs recorded on this thread
/// while it ran. Nested calls are additive.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = MACS.with(|c| c.get());
    let out = f();
    let end = MACS.with(|c| c.get());
    (out, end - start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_counts_add_up() {
        let ((_, inner), outer) = count_macs(|| {
            record_macs(5);
            count_macs(|| record_macs(7))
        });
        assert_eq!(inner, 7);
        assert_eq!(outer, 12);
    }
}
