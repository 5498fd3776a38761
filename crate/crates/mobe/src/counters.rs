//! Thread-local execution counters.
//!
//! Used to assert that disabled components are really never executed: a run
//! with adapters and relation alignment switched off must leave both counters
//! untouched.

use std::cell::Cell;

thread_local! {
    static ADAPTER_APPLICATIONS: Cell<u64> = const { Cell::new(0) };
    static GRAM_COMPUTATIONS: Cell<u64> = const { Cell::new(0) };
}

pub fn count_adapter_application() {
    ADAPTER_APPLICATIONS.with(|c| c.set(c.get() + 1));
}

pub fn count_gram_computation() {
    GRAM_COMPUTATIONS.with(|c| c.set(c.get() + 1));
}

pub fn adapter_applications() -> u64 {
    ADAPTER_APPLICATIONS.with(Cell::get)
}

pub fn gram_computations() -> u64 {
    GRAM_COMPUTATIONS.with(Cell::get)
}

pub fn reset() {
    ADAPTER_APPLICATIONS.with(|c| c.set(0));
    GRAM_COMPUTATIONS.with(|c| c.set(0));
}
