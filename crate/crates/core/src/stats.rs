//! Aggregate statistics over independent training runs: interquartile mean,
//! percentile-bootstrap intervals, the one-sided Wilcoxon rank-sum test and
//! min-max return normalization, plus learning-curve CSV input/output.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Mean of the middle half of the sorted values. Boundary order statistics
/// are weighted by how much of their unit interval lies inside
/// `[n/4, 3n/4]`, so any `n >= 1` is handled.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("iqm of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        let w = ((i + 1) as f64).min(hi) - (i as f64).max(lo);
        if w > 0.0 {
            acc += w * v;
        }
    }
    Ok(acc / (hi - lo))
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Percentile-bootstrap interval of the IQM.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Invalid("bootstrap of an empty sample".into()));
    }
    if !(0.0..1.0).contains(&level) || resamples == 0 {
        return Err(Error::Invalid(format!(
            "bootstrap needs level in (0, 1) and resamples > 0, got {level} and {resamples}"
        )));
    }
    let mut rng = Rng::for_component(seed, "stats.bootstrap");
    let n = values.len();
    let mut stats = Vec::with_capacity(resamples);
    let mut sample = vec![0.0; n];
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = values[rng.below(n)];
        }
        stats.push(iqm(&sample)?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((quantile(&stats, alpha / 2.0), quantile(&stats, 1.0 - alpha / 2.0)))
}

/// Mid-ranks (1-based) of the pooled sample, doubled so they are integers.
fn doubled_ranks(pooled: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..=j share rank (i + 1 + j + 1) / 2
        for &k in &order[i..=j] {
            ranks[k] = i + j + 2;
        }
        i = j + 1;
    }
    ranks
}

fn validate_samples(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Invalid("rank-sum test needs two non-empty samples".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("rank-sum test on non-finite values".into()));
    }
    Ok(())
}

fn all_identical(xs: &[f64], ys: &[f64]) -> bool {
    xs.iter().chain(ys).all(|&v| v == xs[0])
}

/// Exact `P(W >= w_obs)` for the rank sum `W` of `xs` under random
/// assignment of the pooled mid-ranks, counted by dynamic programming over
/// subset sizes and sums.
pub fn wilcoxon_exact(xs: &[f64], ys: &[f64]) -> Result<f64> {
    validate_samples(xs, ys)?;
    if all_identical(xs, ys) {
        return Ok(0.5);
    }
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let ranks = doubled_ranks(&pooled);
    let n1 = xs.len();
    let observed: usize = ranks[..n1].iter().sum();
    let max_sum: usize = ranks.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in &ranks {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add > 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let total: f64 = ways[n1].iter().sum();
    let upper: f64 = ways[n1][observed..].iter().sum();
    Ok(upper / total)
}

/// Normal approximation of [`wilcoxon_exact`] with tie-corrected variance
/// and a continuity correction of one half.
pub fn wilcoxon_normal(xs: &[f64], ys: &[f64]) -> Result<f64> {
    validate_samples(xs, ys)?;
    if all_identical(xs, ys) {
        return Ok(0.5);
    }
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let ranks = doubled_ranks(&pooled);
    let (n1, n2) = (xs.len() as f64, ys.len() as f64);
    let n = n1 + n2;
    let w = ranks[..xs.len()].iter().sum::<usize>() as f64 / 2.0;
    let mut ties: BTreeMap<usize, f64> = BTreeMap::new();
    for &r in &ranks {
        *ties.entry(r).or_default() += 1.0;
    }
    let tie_term: f64 = ties.values().map(|t| t * t * t - t).sum::<f64>() / (n * (n - 1.0));
    let var = n1 * n2 / 12.0 * (n + 1.0 - tie_term);
    let mean = n1 * (n + 1.0) / 2.0;
    let z = (w - mean - 0.5) / var.sqrt();
    Ok(0.5 * erfc(z / std::f64::consts::SQRT_2))
}

/// Combined size at or below which the exact distribution is used.
pub const EXACT_LIMIT: usize = 20;

/// One-sided Wilcoxon rank-sum test of "xs stochastically greater than ys".
/// Returns `P(W >= w_obs)` under the null. When every value in both samples
/// is the same the statistic carries no information and the result is 0.5
/// by convention.
pub fn wilcoxon_rank_sum_one_sided(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() + ys.len() <= EXACT_LIMIT {
        wilcoxon_exact(xs, ys)
    } else {
        wilcoxon_normal(xs, ys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationRange {
    pub r_min: f64,
    pub r_max: f64,
}

impl NormalizationRange {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min.is_finite() && r_max.is_finite() && r_max > r_min) {
            return Err(Error::Invalid(format!(
                "degenerate normalization range [{r_min}, {r_max}]"
            )));
        }
        Ok(Self { r_min, r_max })
    }
}

/// `(r - R_min) / (R_max - R_min)`; negative below `R_min`.
pub fn normalized_return(r: f64, range: NormalizationRange) -> Result<f64> {
    let range = NormalizationRange::new(range.r_min, range.r_max)?;
    Ok((r - range.r_min) / (range.r_max - range.r_min))
}

// ---- learning curves ----

pub const CURVE_HEADER: [&str; 5] = ["step", "episode", "return", "length", "seed"];

/// One finished episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    /// Environment steps taken when the episode finished.
    pub step: u64,
    pub episode: u64,
    pub ret: f64,
    pub length: u64,
}

/// Learning curve of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl RunRecord {
    pub fn new(method: &str, env: &str, seed: u64) -> Self {
        Self {
            method: method.to_string(),
            env: env.to_string(),
            seed,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, point: CurvePoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if point.step < last.step {
                return Err(Error::Invalid(format!(
                    "curve steps must not decrease ({} after {})",
                    point.step, last.step
                )));
            }
        }
        self.points.push(point);
        Ok(())
    }

    /// Mean return over the last `window` episodes (all, if fewer).
    pub fn final_return(&self, window: usize) -> Option<f64> {
        if self.points.is_empty() || window == 0 {
            return None;
        }
        let tail = &self.points[self.points.len().saturating_sub(window)..];
        Some(tail.iter().map(|p| p.ret).sum::<f64>() / tail.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CURVE_HEADER).map_err(csv_err)?;
        for p in &self.points {
            out.write_record([
                p.step.to_string(),
                p.episode.to_string(),
                format!("{:?}", p.ret),
                p.length.to_string(),
                self.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a learning-curve CSV. Errors name the offending line.
    pub fn read_csv<R: Read>(r: R, method: &str, env: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != CURVE_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header '{}'", CURVE_HEADER.join(",")),
            });
        }
        let mut record = RunRecord::new(method, env, 0);
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(csv_err)?;
            let line = row.position().map_or(i as u64 + 2, |p| p.line());
            let field = |k: usize| -> Result<&str> {
                row.get(k).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("missing column '{}'", CURVE_HEADER[k]),
                })
            };
            let int = |k: usize| -> Result<u64> {
                field(k)?.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!(
                        "column '{}' is not an integer: '{}'",
                        CURVE_HEADER[k],
                        row.get(k).unwrap_or("")
                    ),
                })
            };
            let ret: f64 = field(2)?.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column 'return' is not a number: '{}'", row.get(2).unwrap_or("")),
            })?;
            if !ret.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: "non-finite return".into(),
                });
            }
            let seed = int(4)?;
            if i == 0 {
                record.seed = seed;
            } else if seed != record.seed {
                return Err(Error::Parse {
                    line,
                    msg: format!("seed {seed} differs from {} in the same file", record.seed),
                });
            }
            let point = CurvePoint {
                step: int(0)?,
                episode: int(1)?,
                ret,
                length: int(3)?,
            };
            record.push(point).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(record)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// One row of the `method,env,iqm,ci_lo,ci_hi,n_seeds` summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub env: String,
    pub iqm: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_seeds: usize,
}

/// One row of the `method_a,method_b,p_value` table; p tests "a > b".
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub env: String,
    pub method_a: String,
    pub method_b: String,
    pub p_value: f64,
}

/// Per-run scores (mean of the last `window` episodes) grouped by
/// `(env, method)`.
pub fn final_scores(runs: &[RunRecord], window: usize) -> BTreeMap<(String, String), Vec<f64>> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for run in runs {
        if let Some(s) = run.final_return(window) {
            groups.entry((run.env.clone(), run.method.clone())).or_default().push(s);
        }
    }
    groups
}

pub fn summarize(runs: &[RunRecord], window: usize, resamples: usize, seed: u64) -> Result<Vec<SummaryRow>> {
    final_scores(runs, window)
        .into_iter()
        .map(|((env, method), scores)| {
            let (ci_lo, ci_hi) = bootstrap_ci(&scores, resamples, 0.95, seed)?;
            Ok(SummaryRow {
                iqm: iqm(&scores)?,
                n_seeds: scores.len(),
                method,
                env,
                ci_lo,
                ci_hi,
            })
        })
        .collect()
}

/// Every ordered pair of distinct methods within each environment.
pub fn pairwise(runs: &[RunRecord], window: usize) -> Result<Vec<PairRow>> {
    let groups = final_scores(runs, window);
    let mut rows = Vec::new();
    for ((env_a, a), xs) in &groups {
        for ((env_b, b), ys) in &groups {
            if env_a == env_b && a != b {
                rows.push(PairRow {
                    env: env_a.clone(),
                    method_a: a.clone(),
                    method_b: b.clone(),
                    p_value: wilcoxon_rank_sum_one_sided(xs, ys)?,
                });
            }
        }
    }
    Ok(rows)
}
