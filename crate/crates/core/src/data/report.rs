//! Cumulative share of images by number of classes present.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub classes: usize,
    /// Percentage of images showing at most `classes` classes.
    pub cum_percent: f64,
}

/// One row per class count from 1 up to the largest count present.
pub fn distribution_report(dataset: &Dataset) -> Vec<DistributionRow> {
    let counts: Vec<usize> = dataset.samples.iter().map(|s| s.present_classes()).collect();
    let max = counts.iter().copied().max().unwrap_or(0);
    let n = counts.len() as f64;
    let mut hist = vec![0usize; max + 1];
    for c in counts {
        hist[c] += 1;
    }
    let mut acc = hist[0];
    (1..=max)
        .map(|c| {
            acc += hist[c];
            DistributionRow {
                classes: c,
                cum_percent: 100.0 * acc as f64 / n,
            }
        })
        .collect()
}

pub fn distribution_report_csv<W: Write>(rows: &[DistributionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["classes", "cum_percent"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_distribution_csv<R: Read>(input: R) -> Result<Vec<DistributionRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["classes", "cum_percent"] {
        return Err(Error::Format(format!("unexpected distribution header {headers:?}")));
    }
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}
