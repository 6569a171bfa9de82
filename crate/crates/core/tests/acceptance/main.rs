//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod bench;
mod gradients;
mod locality;
mod oracles;
mod ranking;

use std::process::ExitCode;
use std::time::{Duration, Instant};

pub type Fallible<T> = Result<T, Box<dyn std::error::Error>>;

/// Result of one criterion.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: &'static str, title: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Fallible<Check>) -> Line {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(Ok(c)) => (c.pass, c.detail),
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".to_owned()),
    };
    if let Some(b) = budget {
        if elapsed > b {
            pass = false;
            detail = format!("{detail}; over the {}s budget", b.as_secs());
        }
    }
    let line = Line {
        id,
        title,
        pass,
        detail,
        elapsed,
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    println!(
        "criterion {:>2} {} {:<28} [{:>6.1}s] {}",
        l.id,
        if l.pass { "PASS" } else { "FAIL" },
        l.title,
        l.elapsed.as_secs_f64(),
        l.detail
    );
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut lines = vec![
        run("1", "gradient correctness", Some(secs(120)), gradients::criterion),
        run("2", "formula oracles", Some(secs(60)), oracles::criterion),
        run("3", "ranking oracle", Some(secs(60)), ranking::criterion),
        run("5", "unlearning locality", Some(secs(60)), locality::criterion),
    ];

    let start = Instant::now();
    let suite = bench::Suite::run();
    let bench_time = start.elapsed();
    lines.push(run("4", "desk-scale ordering", None, || {
        let mut c = bench::ordering(&suite)?;
        if bench_time > secs(20 * 60) {
            c.pass = false;
        }
        c.detail = format!("{}; benchmark {:.0}s", c.detail, bench_time.as_secs_f64());
        Ok(c)
    }));
    lines.push(run("6", "meta-generalization", Some(secs(600)), || bench::generalization(&suite)));
    lines.push(run("7", "invariants", None, || bench::invariants(&suite)));
    lines.push(run("8", "determinism", None, || bench::determinism(&suite)));
    lines.push(run("9", "ablation behaviour", None, || bench::ablations(&suite)));

    lines.sort_by_key(|l| l.id.parse::<u32>().unwrap_or(0));
    println!();
    println!("summary");
    for l in &lines {
        print_line(l);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
