use std::io::Write;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::training::LossBreakdown;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub l_sr: f64,
    pub l_xl: f64,
    pub l_st: f64,
    pub l_yl: f64,
    pub l_cp: f64,
    pub l_lm: f64,
    pub total: f64,
    pub grad_norm_preclip: f64,
}

impl LogRow {
    pub fn new(step: usize, l: &LossBreakdown, grad_norm_preclip: f64) -> Self {
        LogRow {
            step,
            l_sr: l.l_sr,
            l_xl: l.l_xl,
            l_st: l.l_st,
            l_yl: l.l_yl,
            l_cp: l.l_cp,
            l_lm: l.l_lm,
            total: l.total,
            grad_norm_preclip,
        }
    }
}

/// In-memory per-step training log with CSV export.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| CoreError::Invalid(format!("csv: {e}")))?;
        }
        if self.rows.is_empty() {
            out.write_record([
                "step",
                "l_sr",
                "l_xl",
                "l_st",
                "l_yl",
                "l_cp",
                "l_lm",
                "total",
                "grad_norm_preclip",
            ])
            .map_err(|e| CoreError::Invalid(format!("csv: {e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}
