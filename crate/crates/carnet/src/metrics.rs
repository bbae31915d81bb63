//! Metrics CSV with a fixed, versioned header. Unset fields stay blank.
//! Wallclock timing is opt-in via `CARNET_WALLCLOCK=1` so that default runs
//! are byte-identical across repeats.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};

pub const HEADER: &str = "run_id,phase,step,loss_total,loss_recon,loss_pred,loss_latent,loss_sensor,accuracy,reward_mean,reward_std,wallclock_s";

/// One logging event; every field is optional except phase/step.
#[derive(Debug, Clone, Default)]
pub struct Row {
    pub loss_total: Option<f64>,
    pub loss_recon: Option<f64>,
    pub loss_pred: Option<f64>,
    pub loss_latent: Option<f64>,
    pub loss_sensor: Option<f64>,
    pub accuracy: Option<f64>,
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub struct MetricsWriter {
    file: fs::File,
    run_id: String,
    start: Instant,
    wallclock: bool,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: &str) -> Result<MetricsWriter> {
        let mut file = fs::File::create(path)
            .with_context(|| format!("creating metrics file {}", path.display()))?;
        writeln!(file, "{HEADER}")?;
        Ok(MetricsWriter {
            file,
            run_id: run_id.to_string(),
            start: Instant::now(),
            wallclock: std::env::var("CARNET_WALLCLOCK").as_deref() == Ok("1"),
        })
    }

    pub fn row(&mut self, phase: &str, step: usize, r: &Row) -> Result<()> {
        let wall = if self.wallclock {
            format!("{:.3}", self.start.elapsed().as_secs_f64())
        } else {
            String::new()
        };
        writeln!(
            self.file,
            "{},{phase},{step},{},{},{},{},{},{},{},{},{wall}",
            self.run_id,
            cell(r.loss_total),
            cell(r.loss_recon),
            cell(r.loss_pred),
            cell(r.loss_latent),
            cell(r.loss_sensor),
            cell(r.accuracy),
            cell(r.reward_mean),
            cell(r.reward_std),
        )?;
        Ok(())
    }
}
