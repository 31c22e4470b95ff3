use anyhow::Result;
use bubblebloch::lattice_green::{eval_quasi_green, BlochVector, KernelSpec};
use serde::Serialize;

use crate::run::Run;

#[derive(Serialize)]
struct KernelRow {
    x1: f64,
    x2: f64,
    x3: f64,
    re: f64,
    im: f64,
}

/// Ewald-summed `G^{alpha,k}` at the `n^3` cell-centred points of `Y`.
pub fn cmd_kernel(run: &Run, alpha: [f64; 3], k: f64, n: usize) -> Result<bool> {
    let spec = KernelSpec::ewald(BlochVector::new(alpha), k);
    let c = |i: usize| (i as f64 + 0.5) / n as f64 - 0.5;
    let mut rows = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let x = [c(i), c(j), c(l)];
                let g = eval_quasi_green(x, &spec)?;
                rows.push(KernelRow { x1: x[0], x2: x[1], x3: x[2], re: g.re, im: g.im });
            }
        }
    }
    let path = run.sink.csv("kernel.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })?;
    println!("wrote {}", path.display());
    Ok(true)
}
