//! Objective ablation driver: trains one model per arm from the same base
//! configuration and measures each on the held-out stream.

use std::path::Path;

use serde::Serialize;

use super::config::{AblationArm, TrainConfig};
use super::data::load_split;
use super::report::{evaluate_ppl, sparsity_on};
use super::trainer::Trainer;
use crate::error::{Error, Result};

/// Held-out measurements of one trained arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub kind: String,
    pub lambda0: f64,
    pub final_lambda: f64,
    pub tls: f64,
    pub cls8: f64,
    pub reuse: Option<f64>,
    pub ppl: f64,
}

/// Upper bound on held-out windows measured per arm.
pub const EVAL_WINDOWS: usize = 256;

/// Trains every arm. With `out_dir`, each arm logs into `out_dir/<kind>/`
/// and the table is written to `out_dir/ablation.csv`.
pub fn run_ablation(base: &TrainConfig, arms: &[AblationArm], out_dir: Option<&Path>) -> Result<Vec<AblationResult>> {
    if arms.is_empty() {
        return Err(Error::Config("empty ablation matrix".into()));
    }
    let data = load_split(&base.data)?;
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let config = base.with_arm(arm);
        let name = arm.kind.name();
        let mut trainer = Trainer::with_data(&config, data.clone())?;
        let arm_dir = out_dir.map(|d| d.join(&name));
        trainer.run(arm_dir.as_deref())?;
        let eval = if data.heldout.len() > config.data.seq_len { &data.heldout } else { &data.train };
        let s = sparsity_on(&trainer.model, eval, config.data.seq_len, &[8], EVAL_WINDOWS)?;
        results.push(AblationResult {
            kind: name,
            lambda0: config.objective.lambda0,
            final_lambda: trainer.lambda_cs(),
            tls: s.tls,
            cls8: s.cls[&8],
            reuse: s.reuse_ratio,
            ppl: evaluate_ppl(&trainer.model, eval)?,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        for r in &results {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("ablation.csv"), e))?;
    }
    Ok(results)
}
