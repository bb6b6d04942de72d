//! Runtime scaling of the materialized and on-the-fly correlation paths.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{lookup, lookup_onthefly, mac_estimate, pool_features, CorrPath, CorrPyramid};
use crate::error::{Error, Result};
use crate::geometry::grid_coords;
use crate::tensor::Tensor;

/// Largest cross-path difference accepted before anything is timed.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub path: CorrPath,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub r: usize,
    pub threads: usize,
    pub repeat: usize,
    pub median_ms: f64,
    pub mac_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub slope_materialized: Option<f64>,
    pub slope_onthefly: Option<f64>,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Square grid sides.
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub r: usize,
    pub reps: usize,
    pub seed: u64,
}

struct Instance {
    f_i: Tensor,
    f_j: Tensor,
    coords: Tensor,
}

fn instance(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Instance {
    let mut feat = || Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    let (f_i, f_j) = (feat(), feat());
    let coords = grid_coords(h, w).map(|v| v + rng.random_range(-2.0..2.0));
    Instance { f_i, f_j, coords }
}

fn materialized(x: &Instance, r: usize) -> Result<Tensor> {
    let pyr = CorrPyramid::build(&x.f_i, &x.f_j)?;
    lookup(pyr.levels(), &x.coords, None, r)
}

fn onthefly(x: &Instance, r: usize) -> Result<Tensor> {
    let levels = pool_features(&x.f_j)?;
    lookup_onthefly(&x.f_i, &levels, &x.coords, None, r, None)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two distinct `x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Times both paths over the ladder, streaming one record per path and size.
/// Each size is checked for cross-path equivalence first.
pub fn run_bench(opts: &BenchOptions, mut sink: impl FnMut(&BenchRecord)) -> Result<(Vec<BenchRecord>, BenchSummary)> {
    if opts.reps == 0 || opts.sizes.is_empty() {
        return Err(Error::Config("bench needs at least one size and one repetition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let threads = rayon::current_num_threads();
    let mut records = Vec::new();
    let mut max_abs_diff: f64 = 0.0;
    for &side in &opts.sizes {
        let x = instance(&mut rng, opts.channels, side, side);
        let a = materialized(&x, opts.r)?;
        let b = onthefly(&x, opts.r)?;
        let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        max_abs_diff = max_abs_diff.max(diff);
        if !(diff <= EQUIVALENCE_TOL) {
            return Err(Error::Oracle(format!(
                "paths disagree by {diff:e} at {side}×{side}, not timing"
            )));
        }
        drop((a, b));
        for path in [CorrPath::Materialized, CorrPath::Onthefly] {
            let median_ms = match path {
                CorrPath::Materialized => time_reps(opts.reps, || materialized(&x, opts.r))?,
                CorrPath::Onthefly => time_reps(opts.reps, || onthefly(&x, opts.r))?,
            };
            let rec = BenchRecord {
                path,
                h: side,
                w: side,
                c: opts.channels,
                r: opts.r,
                threads,
                repeat: opts.reps,
                median_ms,
                mac_estimate: mac_estimate(path, side, side, opts.channels, opts.r),
            };
            sink(&rec);
            records.push(rec);
        }
    }
    let slope = |path: CorrPath| {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.path == path)
            .map(|r| ((r.h * r.w) as f64, r.median_ms))
            .collect();
        loglog_slope(&pts)
    };
    let summary = BenchSummary {
        slope_materialized: slope(CorrPath::Materialized),
        slope_onthefly: slope(CorrPath::Onthefly),
        max_abs_diff,
    };
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 9.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.7))).collect();
        assert!((loglog_slope(&pts).unwrap() - 1.7).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(2.0, 1.0)]), None);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn single_size_gives_one_record_per_path() {
        let opts = BenchOptions {
            sizes: vec![16],
            channels: 4,
            r: 1,
            reps: 1,
            seed: 3,
        };
        let mut streamed = 0;
        let (recs, summary) = run_bench(&opts, |_| streamed += 1).unwrap();
        assert_eq!(streamed, 2);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].path, CorrPath::Materialized);
        assert_eq!(recs[1].path, CorrPath::Onthefly);
        assert!(summary.max_abs_diff <= EQUIVALENCE_TOL);
        assert_eq!(summary.slope_materialized, None);
        let json = serde_json::to_value(&recs[0]).unwrap();
        for key in ["path", "H", "W", "C", "r", "threads", "repeat", "median_ms", "mac_estimate"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["path"], "materialized");
    }
}
