//! Per-thread operation counter used to trace the FLOPs a forward pass
//! actually executes.
//!
//! Counting follows the cost-model convention: a multiply-accumulate is two
//! FLOPs, softmax is three FLOPs per element, and bias additions are tallied
//! separately. Normalizations, activations and elementwise glue are not
//! counted.

use std::cell::RefCell;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpCategory {
    Conv,
    Linear,
    Matmul,
    Softmax,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceRow {
    pub name: String,
    pub flops: u64,
    pub bias_adds: u64,
    pub conv_flops: u64,
    pub attention_flops: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FlopTrace {
    pub rows: Vec<TraceRow>,
}

impl FlopTrace {
    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_bias_adds(&self) -> u64 {
        self.rows.iter().map(|r| r.bias_adds).sum()
    }

    pub fn row(&self, name: &str) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

#[derive(Default)]
struct State {
    scopes: Vec<String>,
    index: HashMap<String, usize>,
    rows: Vec<TraceRow>,
}

thread_local! {
    static TRACER: RefCell<Option<State>> = const { RefCell::new(None) };
}

pub const UNSCOPED: &str = "(unscoped)";

/// Runs `f` with counting enabled and returns the per-scope tally.
pub fn trace<T>(f: impl FnOnce() -> T) -> (T, FlopTrace) {
    let previous = TRACER.with(|t| t.borrow_mut().replace(State::default()));
    let out = f();
    let state = TRACER.with(|t| std::mem::replace(&mut *t.borrow_mut(), previous));
    let rows = state.map(|s| s.rows).unwrap_or_default();
    (out, FlopTrace { rows })
}

pub fn is_tracing() -> bool {
    TRACER.with(|t| t.borrow().is_some())
}

/// Attributes everything recorded while the guard lives to `name`.
#[must_use]
pub struct ScopeGuard {
    active: bool,
}

pub fn scope(name: impl Into<String>) -> ScopeGuard {
    let active = TRACER.with(|t| match t.borrow_mut().as_mut() {
        Some(state) => {
            state.scopes.push(name.into());
            true
        }
        None => false,
    });
    ScopeGuard { active }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if self.active {
            TRACER.with(|t| {
                if let Some(state) = t.borrow_mut().as_mut() {
                    state.scopes.pop();
                }
            });
        }
    }
}

pub(crate) fn record(category: OpCategory, flops: u64, bias_adds: u64) {
    TRACER.with(|t| {
        let mut guard = t.borrow_mut();
        let Some(state) = guard.as_mut() else { return };
        let name = state.scopes.last().cloned().unwrap_or_else(|| UNSCOPED.to_string());
        let idx = match state.index.get(&name) {
            Some(&i) => i,
            None => {
                state.rows.push(TraceRow {
                    name: name.clone(),
                    ..TraceRow::default()
                });
                state.index.insert(name, state.rows.len() - 1);
                state.rows.len() - 1
            }
        };
        let row = &mut state.rows[idx];
        row.flops += flops;
        row.bias_adds += bias_adds;
        match category {
            OpCategory::Conv | OpCategory::Linear => row.conv_flops += flops,
            OpCategory::Matmul | OpCategory::Softmax => row.attention_flops += flops,
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_attribute_counts() {
        let ((), tr) = trace(|| {
            record(OpCategory::Conv, 10, 2);
            let _g = scope("a");
            record(OpCategory::Matmul, 5, 0);
            {
                let _h = scope("b");
                record(OpCategory::Softmax, 3, 0);
            }
            record(OpCategory::Conv, 1, 1);
        });
        assert_eq!(tr.total_flops(), 19);
        assert_eq!(tr.total_bias_adds(), 3);
        assert_eq!(tr.row("a").unwrap().flops, 6);
        assert_eq!(tr.row("a").unwrap().attention_flops, 5);
        assert_eq!(tr.row("b").unwrap().flops, 3);
        assert_eq!(tr.row(UNSCOPED).unwrap().flops, 10);
    }

    #[test]
    fn recording_outside_trace_is_ignored() {
        record(OpCategory::Conv, 10, 2);
        let _g = scope("x");
        assert!(!is_tracing());
        let ((), tr) = trace(|| ());
        assert!(tr.rows.is_empty());
    }
}
