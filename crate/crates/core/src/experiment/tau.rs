use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::AnyModel;
use crate::error::{Error, Result};

/// One `(rank, 1/tau)` pair. Ranks count from 1; a shared-temperature model
/// yields a single row with rank `shared`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub rank: String,
    pub inverse_tau: f64,
}

pub fn dump_tau(model: &AnyModel) -> Vec<TauRow> {
    let (values, shared) = model.inverse_tau();
    tau_rows(&values, shared)
}

pub(crate) fn tau_rows(values: &[f64], shared: bool) -> Vec<TauRow> {
    if shared {
        return vec![TauRow {
            rank: "shared".into(),
            inverse_tau: values[0],
        }];
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| TauRow {
            rank: (i + 1).to_string(),
            inverse_tau: v,
        })
        .collect()
}

pub fn write_tau_csv<W: Write>(rows: &[TauRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tau_csv<R: Read>(input: R) -> Result<Vec<TauRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["rank", "inverse_tau"] {
        return Err(Error::Format(format!("unexpected tau header {headers:?}")));
    }
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}
