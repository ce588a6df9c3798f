//! Wall-clock comparison of the linear scan against the quadratic oracle.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;
use crate::rng::mix_seed;
use crate::suite::wkv_case;
use crate::wkv::{bi_wkv_oracle, bi_wkv_scan, relative_error};

/// Relative error above which a length is reported as a mismatch.
pub const MATCH_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WkvTiming {
    pub t: usize,
    /// Fastest of the repetitions, the least noisy estimate on a shared machine.
    pub scan_ns: u128,
    pub oracle_ns: u128,
    pub max_rel_err: f64,
    pub matches: bool,
}

fn elapsed_ns(f: impl FnOnce() -> Result<()>) -> Result<u128> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_nanos())
}

/// Checks equivalence on one single-precision case per length, then times
/// both implementations on it. Repetitions cycle through all lengths so slow
/// drift in machine speed affects every length alike; the fastest repetition
/// is kept.
pub fn time_wkv(lengths: &[usize], channels: usize, reps: usize, seed: u64) -> Result<Vec<WkvTiming>> {
    let cases: Vec<_> = lengths.iter().map(|&t| wkv_case::<f32>(mix_seed(seed, t as u64), t, channels)).collect();
    let mut rows = lengths
        .iter()
        .zip(&cases)
        .map(|(&t, (k, v, p))| {
            let err = relative_error(&bi_wkv_scan(k, v, p)?, &bi_wkv_oracle(k, v, p)?);
            Ok(WkvTiming { t, scan_ns: u128::MAX, oracle_ns: u128::MAX, max_rel_err: err, matches: err <= MATCH_TOL })
        })
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..reps.max(1) {
        for (row, (k, v, p)) in rows.iter_mut().zip(&cases) {
            row.scan_ns = row.scan_ns.min(elapsed_ns(|| bi_wkv_scan(k, v, p).map(drop))?);
            row.oracle_ns = row.oracle_ns.min(elapsed_ns(|| bi_wkv_oracle(k, v, p).map(drop))?);
        }
    }
    for r in &rows {
        log::info!("T={}: scan {} ns, oracle {} ns, rel err {:.2e}", r.t, r.scan_ns, r.oracle_ns, r.max_rel_err);
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[WkvTiming]) -> String {
    let mut s = String::from("T,scan_ns,oracle_ns,max_rel_err,match\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:e},{}", r.t, r.scan_ns, r.oracle_ns, r.max_rel_err, r.matches);
    }
    s
}

/// Time ratio between lengths `num` and `den` for the scan and the oracle.
pub fn scaling_ratios(rows: &[WkvTiming], num: usize, den: usize) -> Option<(f64, f64)> {
    let find = |t| rows.iter().find(|r| r.t == t);
    let (a, b) = (find(num)?, find(den)?);
    Some((a.scan_ns as f64 / b.scan_ns as f64, a.oracle_ns as f64 / b.oracle_ns as f64))
}
