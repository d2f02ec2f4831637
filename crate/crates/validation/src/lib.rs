//! Bookkeeping for the acceptance harness: one line per criterion, and a
//! summary of the ones that failed.

use std::io::Write;
use std::time::Duration;

#[derive(Debug, Default)]
pub struct Scorecard {
    failed: Vec<usize>,
}

impl Scorecard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes `criterion <id> PASS|FAIL <name>: <detail> (<elapsed>)` straight
    /// to stdout, so the line shows even when the test harness captures output.
    pub fn record(&mut self, id: usize, name: &str, passed: bool, detail: &str, elapsed: Duration) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "criterion {id:>2} {} {name}: {detail} ({:.1} s)",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        let _ = out.flush();
        if !passed {
            self.failed.push(id);
        }
    }

    pub fn failed(&self) -> &[usize] {
        &self.failed
    }
}
