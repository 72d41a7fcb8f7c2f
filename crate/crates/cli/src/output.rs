//! CSV writers. Wall-clock figures go to their own files so every other output
//! is byte-identical across runs with the same seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};

use crate::experiment::{RunOutput, Summary, SUMMARY_HEADER};

pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("cannot write {}", path.display()))?))
}

pub fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(dir, name)?))
}

pub fn write_run(dir: &Path, out: &RunOutput, elapsed: Duration) -> Result<()> {
    let mut w = csv_writer(dir, "summary.csv")?;
    w.write_record(SUMMARY_HEADER)?;
    w.write_record(out.summary.record())?;
    w.flush()?;

    let mut w = csv_writer(dir, "trace.csv")?;
    w.write_record(["t", "ess", "resampled"])?;
    for (t, ess, resampled) in &out.trace {
        w.write_record([t.to_string(), ess.to_string(), u8::from(*resampled).to_string()])?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "samples.csv")?;
    w.write_record(["index", "state", "reward"])?;
    for (i, (state, r)) in out.samples.iter().enumerate() {
        w.write_record([i.to_string(), state.clone(), r.to_string()])?;
    }
    w.flush()?;

    write_timing(dir, "timing.csv", &[("run".to_string(), elapsed)])
}

pub fn write_timing(dir: &Path, name: &str, rows: &[(String, Duration)]) -> Result<()> {
    let mut w = csv_writer(dir, name)?;
    w.write_record(["label", "seconds"])?;
    for (label, d) in rows {
        w.write_record([label.clone(), d.as_secs_f64().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per grid point, in grid order, plus two-column plot data.
pub fn write_sweep(dir: &Path, parameter: &str, rows: &[(f64, Summary)]) -> Result<()> {
    let mut w = csv_writer(dir, "sweep.csv")?;
    let mut header = vec!["parameter", "value"];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header)?;
    for (x, s) in rows {
        let mut rec = vec![parameter.to_string(), x.to_string()];
        rec.extend(s.record());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut dat = create(dir, "sweep.dat")?;
    writeln!(dat, "# {parameter} mean_reward reward_se")?;
    for (x, s) in rows {
        writeln!(dat, "{x} {} {}", s.mean_reward, s.reward_se)?;
    }
    dat.flush()?;
    Ok(())
}

/// Pretty one-line rendering for the terminal.
pub fn describe(s: &Summary) -> String {
    let mut line = format!(
        "{} on {}: {} samples, mean reward {:.4} (se {:.4}), max {:.4}",
        s.sampler, s.model, s.samples, s.mean_reward, s.reward_se, s.max_reward
    );
    if let Some(tv) = s.tv_to_oracle {
        line += &format!(", TV to oracle {tv:.4}");
    }
    if let Some(e) = s.ess_min {
        line += &format!(", min ESS {e:.1}");
    }
    if let Some(h) = s.fallback_hits {
        line += &format!(", fallback hits {h}");
    }
    line
}
