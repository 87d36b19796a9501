use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::Metric;
use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,split,metric,value,wallclock_s";

/// CSV metrics stream. Without wall-clock logging the time column is 0,
/// so identical runs give identical files.
#[derive(Debug)]
pub struct MetricsLog {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
    start: Instant,
    wallclock: bool,
}

impl MetricsLog {
    pub fn in_memory(wallclock: bool) -> Self {
        Self {
            lines: vec![METRICS_HEADER.to_string()],
            file: None,
            start: Instant::now(),
            wallclock,
        }
    }

    /// Creates (truncates) `path` and writes the header.
    pub fn create(path: &Path, wallclock: bool) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self {
            lines: vec![METRICS_HEADER.to_string()],
            file: Some(file),
            start: Instant::now(),
            wallclock,
        })
    }

    pub fn record(&mut self, m: &Metric) -> Result<()> {
        let wall = if self.wallclock {
            format!("{:.3}", self.start.elapsed().as_secs_f64())
        } else {
            "0".to_string()
        };
        let line = format!("{},{},{},{},{}", m.epoch, m.split, m.kind.name(), m.value, wall);
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::MetricKind;

    #[test]
    fn rows_follow_the_header() {
        let mut log = MetricsLog::in_memory(false);
        log.record(&Metric {
            kind: MetricKind::Bpc,
            value: 1.5,
            split: "valid_full".into(),
            epoch: 3,
        })
        .unwrap();
        assert_eq!(log.to_csv(), "epoch,split,metric,value,wallclock_s\n3,valid_full,bpc,1.5,0\n");
    }

    #[test]
    fn file_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut log = MetricsLog::create(&path, false).unwrap();
        log.record(&Metric {
            kind: MetricKind::Accuracy,
            value: 0.25,
            split: "train".into(),
            epoch: 1,
        })
        .unwrap();
        log.flush().unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_csv());
    }
}
