use std::path::PathBuf;

use anyhow::Result;
use bubblebloch::bloch::{BlochSolver, MaterialParams};
use bubblebloch::capacity::CapacitySolver;
use bubblebloch::geometry::QuadratureMesh;

use crate::config::RunConfig;
use crate::output::Sink;

pub const CACHE_ENV: &str = "BUBBLEBLOCH_CACHE";

/// Resolved configuration of one command invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub scale: f64,
    pub material: MaterialParams,
    pub sink: Sink,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Run> {
        let scale = cfg.scale()?;
        let material = cfg.material()?;
        let sink = Sink::new(out, cfg.header()?)?;
        Ok(Run { cfg, scale, material, sink })
    }

    /// Bubble in the unit cell; scaled results follow from `omega_s(alpha/s) = omega_1(alpha)/s`.
    pub fn mesh(&self) -> Result<QuadratureMesh> {
        self.cfg.geometry.mesh()
    }

    pub fn solver(&self) -> Result<BlochSolver> {
        let dir = cache_dir()?;
        Ok(BlochSolver::new(&self.mesh()?)?.with_cache(dir))
    }

    pub fn capacity_solver(&self) -> Result<CapacitySolver> {
        let dir = cache_dir()?;
        Ok(CapacitySolver::new(&self.mesh()?)?.with_cache(dir))
    }
}

fn cache_dir() -> Result<Option<PathBuf>> {
    match std::env::var_os(CACHE_ENV) {
        Some(d) if !d.is_empty() => {
            let d = PathBuf::from(d);
            std::fs::create_dir_all(&d)?;
            Ok(Some(d))
        }
        _ => Ok(None),
    }
}
