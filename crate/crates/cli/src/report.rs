//! Descriptive delay statistics and the report tables written by the
//! regression stage.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::Datelike;
use coorddelay::metrics::CoordinationSample;
use serde::Serialize;

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnualDelays {
    pub year: i32,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelaySummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    /// (tau, quantile) pairs.
    pub quantiles: Vec<(f64, f64)>,
    pub zero_share: f64,
    pub annual: Vec<AnnualDelays>,
}

/// Summary statistics of the delays; `None` for an empty sample.
pub fn summarize_delays(samples: &[CoordinationSample], taus: &[f64]) -> Option<DelaySummary> {
    if samples.is_empty() {
        return None;
    }
    let mut all: Vec<f64> = samples.iter().map(|s| f64::from(s.y)).collect();
    all.sort_by(f64::total_cmp);
    let mut by_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for s in samples {
        by_year.entry(s.t_oss.year()).or_default().push(f64::from(s.y));
    }
    let annual = by_year
        .into_iter()
        .map(|(year, mut v)| {
            v.sort_by(f64::total_cmp);
            AnnualDelays {
                year,
                count: v.len(),
                mean: mean(&v),
                median: quantile(&v, 0.5),
            }
        })
        .collect();
    Some(DelaySummary {
        n: all.len(),
        mean: mean(&all),
        median: quantile(&all, 0.5),
        sd: sd(&all),
        quantiles: taus.iter().map(|&t| (t, quantile(&all, t))).collect(),
        zero_share: all.iter().filter(|&&y| y == 0.0).count() as f64 / all.len() as f64,
        annual,
    })
}

/// `statistic,value` rows.
pub fn write_delay_summary<W: Write>(s: &DelaySummary, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["statistic", "value"])?;
    w.write_record(["n".to_string(), s.n.to_string()])?;
    w.write_record(["mean".to_string(), s.mean.to_string()])?;
    w.write_record(["median".to_string(), s.median.to_string()])?;
    w.write_record(["sd".to_string(), s.sd.to_string()])?;
    for (t, q) in &s.quantiles {
        w.write_record([format!("q{t}"), q.to_string()])?;
    }
    w.write_record(["zero_share".to_string(), s.zero_share.to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn write_annual_delays<W: Write>(s: &DelaySummary, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for a in &s.annual {
        w.serialize(a)?;
    }
    if s.annual.is_empty() {
        w.write_record(["year", "count", "mean", "median"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Formats a difference of two optional values, with an explicit `+` sign.
pub fn fmt_delta(cur: Option<f64>, prev: Option<f64>) -> String {
    match (cur, prev) {
        (Some(c), Some(p)) if c.is_finite() && p.is_finite() => {
            let d = c - p;
            if d > 0.0 {
                format!("+{d}")
            } else {
                d.to_string()
            }
        }
        _ => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn sample(day: &str, y: u32) -> CoordinationSample {
        let t_oss: NaiveDate = day.parse().unwrap();
        CoordinationSample {
            cve_id: format!("CVE-2008-{:04}", y + 1).parse().unwrap(),
            t_oss,
            t_nvd: t_oss + chrono::Days::new(u64::from(y)),
            y,
        }
    }

    #[test]
    fn single_sample() {
        let s = summarize_delays(&[sample("2010-05-05", 7)], &[0.25, 0.5, 0.75, 0.9]).unwrap();
        assert_eq!((s.n, s.mean, s.median, s.sd), (1, 7.0, 7.0, 0.0));
        assert!(s.quantiles.iter().all(|&(_, q)| q == 7.0));
        assert_eq!(s.zero_share, 0.0);
        assert_eq!(s.annual, vec![AnnualDelays { year: 2010, count: 1, mean: 7.0, median: 7.0 }]);
    }

    #[test]
    fn hand_computed() {
        // y = 0, 0, 3, 10, 20; mean 6.6, sd sqrt(291.2 / 4)
        let v = [("2008-03-01", 0), ("2008-04-01", 0), ("2009-01-01", 3), ("2009-02-01", 10), ("2009-03-01", 20)];
        let samples: Vec<_> = v.iter().map(|&(d, y)| sample(d, y)).collect();
        let s = summarize_delays(&samples, &[0.25, 0.9]).unwrap();
        assert!((s.mean - 6.6).abs() < 1e-12);
        assert!((s.sd - (291.2f64 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.median, 3.0);
        // type 7: h = 4 * 0.9 = 3.6 -> 10 + 0.6 * 10
        assert_eq!(s.quantiles[0], (0.25, 0.0));
        assert!((s.quantiles[1].1 - 16.0).abs() < 1e-12);
        assert!((s.zero_share - 0.4).abs() < 1e-15);
        assert_eq!(s.annual[0], AnnualDelays { year: 2008, count: 2, mean: 0.0, median: 0.0 });
        assert_eq!(s.annual[1].median, 10.0);
        assert!(summarize_delays(&[], &[0.5]).is_none());
    }

    #[test]
    fn deltas() {
        assert_eq!(fmt_delta(Some(5.0), Some(2.0)), "+3");
        assert_eq!(fmt_delta(Some(1.0), Some(2.0)), "-1");
        assert_eq!(fmt_delta(Some(1.0), None), "");
        assert_eq!(fmt_delta(Some(f64::NEG_INFINITY), Some(1.0)), "");
    }
}
