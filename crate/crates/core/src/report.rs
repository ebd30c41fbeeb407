//! Exports built from a frozen policy: per-layer, per-module mean ranks.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::env::{ModuleKind, RankVector, MODULES_PER_LAYER};
use crate::error::{Error, Result};
use crate::numerics::Checkpoint;
use crate::trainer::{evaluate_detailed, PolicyStack};

/// Mean rank of every (layer, module) cell over `deployed`; one row per layer.
pub fn rank_table(deployed: &[RankVector]) -> Result<Vec<[f64; MODULES_PER_LAYER]>> {
    let first = deployed
        .first()
        .ok_or_else(|| Error::invalid("rank table needs at least one rank vector"))?;
    let layers = first.layers();
    let mut table = vec![[0.0; MODULES_PER_LAYER]; layers];
    for r in deployed {
        if r.layers() != layers {
            return Err(Error::invalid(format!(
                "rank vectors disagree on layer count: {} vs {layers}",
                r.layers()
            )));
        }
        for (layer, module, rank) in r.iter_modules() {
            table[layer][module as usize] += rank as f64;
        }
    }
    let n = deployed.len() as f64;
    for row in &mut table {
        for cell in row.iter_mut() {
            *cell /= n;
        }
    }
    Ok(table)
}

pub fn write_rank_table<W: Write>(table: &[[f64; MODULES_PER_LAYER]], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["layer".to_string()];
    header.extend(ModuleKind::ALL.iter().map(|m| m.name().to_string()));
    w.write_record(&header)?;
    for (layer, row) in table.iter().enumerate() {
        let mut rec = vec![layer.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing rank table: {e}")))?;
    Ok(())
}

/// Rebuilds the configured policy stack and loads `ckpt` into it. A
/// checkpoint from a different mode or network shape is rejected.
pub fn load_stack(config: &RunConfig, ckpt: &Checkpoint) -> Result<PolicyStack> {
    config.validate()?;
    let mut stack = PolicyStack::new(config, &mut ChaCha8Rng::seed_from_u64(config.trainer.seed))?;
    stack.restore(ckpt)?;
    Ok(stack)
}

/// Evaluates a frozen stack for `episodes` episodes and tabulates the
/// deployed ranks.
pub fn rank_report(
    stack: &PolicyStack,
    config: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<[f64; MODULES_PER_LAYER]>> {
    let (_, deployed) = evaluate_detailed(stack, &config.env, &config.channel, episodes, seed)?;
    rank_table(&deployed)
}
