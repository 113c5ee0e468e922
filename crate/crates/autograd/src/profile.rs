//! Multiply-accumulate accounting.
//!
//! Heavy ops (convolutions, matrix products) report their MAC count here while
//! a recording session is active on the current thread. Layers push their
//! full parameter path as a scope; a record is attributed to the innermost one.

use std::cell::RefCell;

#[derive(Debug, Clone, PartialEq)]
pub struct MacRecord {
    /// Innermost scope active when the op ran.
    pub scope: String,
    pub op: &'static str,
    pub macs: u64,
}

#[derive(Default)]
struct Recorder {
    active: bool,
    scopes: Vec<String>,
    records: Vec<MacRecord>,
}

thread_local! {
    static RECORDER: RefCell<Recorder> = RefCell::new(Recorder::default());
}

/// Starts recording on this thread, discarding anything recorded before.
pub fn start() {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        r.active = true;
        r.records.clear();
    });
}

/// Stops recording and returns what was captured.
pub fn finish() -> Vec<MacRecord> {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        r.active = false;
        std::mem::take(&mut r.records)
    })
}

pub fn is_active() -> bool {
    RECORDER.with(|r| r.borrow().active)
}

pub(crate) fn record(op: &'static str, macs: u64) {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        if r.active {
            let scope = r.scopes.iter().rev().find(|s| !s.is_empty()).cloned().unwrap_or_default();
            r.records.push(MacRecord { scope, op, macs });
        }
    });
}

/// Pops its scope when dropped.
pub struct ScopeGuard(());

/// Pushes a scope name for attribution. Cheap when recording is off.
pub fn scope(name: &str) -> ScopeGuard {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        if r.active {
            r.scopes.push(name.to_string());
        } else {
            r.scopes.push(String::new());
        }
    });
    ScopeGuard(())
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        RECORDER.with(|r| {
            r.borrow_mut().scopes.pop();
        });
    }
}
