//! Evaluation reports, training logs and plot-ready data files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use ramdsir_core::metrics::{summarize, SampleScores};
use ramdsir_core::trainer::EpochLog;
use serde::{Deserialize, Serialize};

pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "lr", "seg_orig", "seg_aug", "rec", "consist", "total"];

/// Scores of one class on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub domain: usize,
    pub class: usize,
    /// Mean Dice in percent.
    pub dice: f64,
    /// Mean ASD in pixels over samples where it is defined.
    pub asd: Option<f64>,
    pub asd_excluded: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassRow>,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn new(per_domain: &[(usize, Vec<SampleScores>)], fingerprint: String, seeds: Vec<u64>) -> Result<Self> {
        let mut rows = Vec::new();
        for (domain, scores) in per_domain {
            for (class, s) in summarize(scores)?.into_iter().enumerate() {
                rows.push(ClassRow {
                    domain: *domain,
                    class,
                    dice: 100.0 * s.dice,
                    asd: s.asd,
                    asd_excluded: s.asd_excluded,
                    samples: scores.len(),
                });
            }
        }
        Ok(Self { rows, fingerprint, seeds })
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.rows.iter().map(|r| r.domain).collect();
        d.dedup();
        d
    }

    /// Class-averaged Dice (%) of a domain.
    pub fn domain_dice(&self, domain: usize) -> Option<f64> {
        let rows: Vec<&ClassRow> = self.rows.iter().filter(|r| r.domain == domain).collect();
        (!rows.is_empty()).then(|| rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64)
    }

    /// Class-averaged ASD of a domain over classes where it is defined.
    pub fn domain_asd(&self, domain: usize) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.domain == domain).filter_map(|r| r.asd).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["domain", "class", "dice", "asd", "asd_excluded", "samples", "fingerprint", "seeds"])?;
        for r in &self.rows {
            w.write_record([
                r.domain.to_string(),
                r.class.to_string(),
                format!("{:.4}", r.dice),
                r.asd.map_or_else(String::new, |a| format!("{a:.4}")),
                r.asd_excluded.to_string(),
                r.samples.to_string(),
                self.fingerprint.clone(),
                seeds.clone(),
            ])?;
        }
        Ok(w.into_inner()?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}  seeds {:?}", self.fingerprint, self.seeds);
        let _ = writeln!(out, "{:>6} {:>5} {:>9} {:>9} {:>8}", "domain", "class", "Dice(%)", "ASD(px)", "samples");
        for r in &self.rows {
            let asd = r.asd.map_or_else(|| "n/a".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(out, "{:>6} {:>5} {:>9.2} {:>9} {:>8}", r.domain, r.class, r.dice, asd, r.samples);
        }
        for d in self.domains() {
            let asd = self.domain_asd(d).map_or_else(|| "n/a".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(out, "{:>6} {:>5} {:>9.2} {:>9}", d, "avg", self.domain_dice(d).unwrap_or(0.0), asd);
        }
        out
    }
}

pub fn train_log_csv(log: &[EpochLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAIN_LOG_HEADER)?;
    for e in log {
        let l = e.losses;
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            l.seg_orig.to_string(),
            l.seg_aug.to_string(),
            l.rec.to_string(),
            l.consist.to_string(),
            l.total.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Header and numeric rows of a CSV file.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().with_context(|| format!("non-numeric value {v:?} in {}", path.display())))
            .collect::<Result<Vec<f64>>>()?;
        ensure!(row.len() == header.len(), "ragged row in {}", path.display());
        rows.push(row);
    }
    Ok((header, rows))
}

/// Whitespace-separated columns with a `#` header line, as gnuplot reads them.
pub fn gnuplot_data(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = format!("# {}\n", header.join(" "));
    for r in rows {
        out.push_str(&r.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ramdsir_core::trainer::LossBreakdown;

    fn scores(d: &[f64], a: &[Option<f64>]) -> SampleScores {
        SampleScores { dice: d.to_vec(), asd: a.to_vec() }
    }

    #[test]
    fn report_aggregates_per_class() {
        let s = vec![scores(&[1.0, 0.5], &[Some(0.0), None]), scores(&[0.5, 0.5], &[Some(2.0), Some(4.0)])];
        let r = EvalReport::new(&[(2, s)], "abc".into(), vec![7, 0]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].dice, 75.0);
        assert_eq!(r.rows[0].asd, Some(1.0));
        assert_eq!(r.rows[1].asd, Some(4.0));
        assert_eq!(r.rows[1].asd_excluded, 1);
        assert_eq!(r.domain_dice(2), Some(62.5));
        let csv = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("domain,class,dice,asd,asd_excluded,samples,fingerprint,seeds\n"));
        assert!(r.to_table().contains("62.50"));
    }

    #[test]
    fn train_log_header() {
        let log = [EpochLog { epoch: 0, lr: 0.001, losses: LossBreakdown::default() }];
        let csv = String::from_utf8(train_log_csv(&log).unwrap()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "epoch,lr,seg_orig,seg_aug,rec,consist,total");
        assert_eq!(csv.lines().count(), 2);
    }
}
