//! Multiply-count instrumentation.
//!
//! Forward kernels report the number of scalar multiplies they execute to a
//! thread-local counter, attributed to the innermost active scope path
//! (`enc0.branch1.block0.tmsa.core`, ...). Counting is off unless a
//! [`Recording`] is alive on the current thread, in which case scopes cost one
//! string push/pop each. Backward passes are never counted.
//!
//! Accounting convention: only multiplies inside convolutions, matrix
//! products, and bilinear interpolation weight applications are counted.
//! Padded taps of a zero-padded convolution count as executed multiplies.
//! Additions, normalisations, activations and elementwise products are not
//! counted.

use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Default)]
struct State {
    depth: usize,
    path: String,
    marks: Vec<usize>,
    counts: BTreeMap<String, u64>,
    max_abs_offset: f64,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

/// Counts collected while a [`Recording`] was active.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counts {
    pub by_scope: BTreeMap<String, u64>,
    /// Largest |offset| seen by any deformable sampling kernel.
    pub max_abs_offset: f64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }

    /// Sum over every scope equal to `prefix` or nested below it.
    pub fn under(&self, prefix: &str) -> u64 {
        self.by_scope
            .iter()
            .filter(|(k, _)| is_under(k, prefix))
            .map(|(_, v)| *v)
            .sum()
    }
}

fn is_under(path: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || path == prefix
        || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Enables counting on this thread until dropped or [`Recording::finish`]ed.
pub struct Recording {
    _private: (),
}

impl Recording {
    pub fn start() -> Self {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            if s.depth == 0 {
                s.counts.clear();
                s.path.clear();
                s.marks.clear();
                s.max_abs_offset = 0.0;
            }
            s.depth += 1;
        });
        Recording { _private: () }
    }

    pub fn snapshot(&self) -> Counts {
        STATE.with(|s| {
            let s = s.borrow();
            Counts {
                by_scope: s.counts.clone(),
                max_abs_offset: s.max_abs_offset,
            }
        })
    }

    pub fn finish(self) -> Counts {
        self.snapshot()
    }
}

impl Drop for Recording {
    fn drop(&mut self) {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            s.depth = s.depth.saturating_sub(1);
        });
    }
}

/// Run `f` with counting enabled and return its result with the counts.
pub fn record<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let rec = Recording::start();
    let out = f();
    (out, rec.finish())
}

pub fn active() -> bool {
    STATE.with(|s| s.borrow().depth > 0)
}

/// Guard for a named scope; pops on drop.
pub struct Scope {
    pushed: bool,
}

pub fn scope(name: &str) -> Scope {
    let pushed = STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.depth == 0 {
            return false;
        }
        let mark = s.path.len();
        s.marks.push(mark);
        if !s.path.is_empty() {
            s.path.push('.');
        }
        s.path.push_str(name);
        true
    });
    Scope { pushed }
}

impl Drop for Scope {
    fn drop(&mut self) {
        if self.pushed {
            STATE.with(|s| {
                let mut s = s.borrow_mut();
                if let Some(mark) = s.marks.pop() {
                    s.path.truncate(mark);
                }
            });
        }
    }
}

/// Attribute `n` multiplies to the current scope.
#[inline]
pub fn add(n: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.depth == 0 || n == 0 {
            return;
        }
        let key = s.path.clone();
        *s.counts.entry(key).or_insert(0) += n;
    });
}

#[inline]
pub(crate) fn observe_offset(max_abs: f64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.depth > 0 && max_abs > s.max_abs_offset {
            s.max_abs_offset = max_abs;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn off_by_default() {
        add(10);
        let (_, c) = record(|| ());
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn nested_scopes_attribute_to_innermost() {
        let (_, c) = record(|| {
            add(1);
            let _a = scope("a");
            add(2);
            {
                let _b = scope("b");
                add(3);
            }
            add(4);
        });
        assert_eq!(c.by_scope[""], 1);
        assert_eq!(c.by_scope["a"], 6);
        assert_eq!(c.by_scope["a.b"], 3);
        assert_eq!(c.under("a"), 9);
        assert_eq!(c.total(), 10);
    }

    #[test]
    fn prefix_match_respects_segments() {
        let (_, c) = record(|| {
            let _a = scope("ab");
            add(5);
        });
        assert_eq!(c.under("a"), 0);
        assert_eq!(c.under("ab"), 5);
    }
}
