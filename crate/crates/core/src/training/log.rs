use std::io::Write;

use crate::error::{Error, Result};
use crate::interpca::Alpha;

/// One training step as it appears in the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// `None` in single-rate training.
    pub rate: Option<(usize, Alpha)>,
    pub lambda: f64,
    /// Bits of the noisy latent over the whole batch.
    pub ry_bits: f64,
    /// Bits of the noisy hyper latent over the whole batch.
    pub rz_bits: f64,
    pub distortion: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub const LOG_HEADER: [&str; 8] = ["step", "j", "alpha", "lambda", "Ry_bits", "Rz_bits", "distortion", "total"];

/// Append-only CSV writer for step logs.
pub struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(LOG_HEADER).map_err(to_err)?;
        Ok(LogWriter { inner })
    }

    /// Appends to a sink that already holds the header.
    pub fn append(out: W) -> Self {
        LogWriter { inner: csv::WriterBuilder::new().has_headers(false).from_writer(out) }
    }

    pub fn write(&mut self, s: &StepLog) -> Result<()> {
        let (j, alpha) = match s.rate {
            Some((j, a)) => (j.to_string(), a.to_string()),
            None => (String::new(), String::new()),
        };
        self.inner
            .write_record([
                s.step.to_string(),
                j,
                alpha,
                s.lambda.to_string(),
                s.ry_bits.to_string(),
                s.rz_bits.to_string(),
                s.distortion.to_string(),
                s.total.to_string(),
            ])
            .map_err(to_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn to_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_header() {
        let mut buf = Vec::new();
        {
            let mut w = LogWriter::new(&mut buf).unwrap();
            let row = StepLog {
                step: 3,
                rate: Some((2, Alpha::HALF)),
                lambda: 230.0,
                ry_bits: 1000.5,
                rz_bits: 20.0,
                distortion: 0.01,
                total: 4.2,
                grad_norm: 0.0,
            };
            w.write(&row).unwrap();
            w.write(&StepLog { rate: None, ..row }).unwrap();
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,j,alpha,lambda,Ry_bits,Rz_bits,distortion,total");
        assert_eq!(lines[1], "3,2,1/2,230,1000.5,20,0.01,4.2");
        assert_eq!(lines[2], "3,,,230,1000.5,20,0.01,4.2");
    }
}
