//! Pre-training loop.

use super::config::RunConfig;
use crate::data::{generate_splits, make_batches, read_jsonl, PairedExample};
use crate::error::Result;
use crate::model::Model;
use crate::objectives::{pretrain_step, MetricsRecord};
use crate::rng::{streams, SeededRng};
use std::io::Write;

/// Train and test splits named by the config: files when given, otherwise
/// generated from the corpus settings.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<PairedExample>, Vec<PairedExample>)> {
    let needs_generation = cfg.train_corpus.is_none() || cfg.test_corpus.is_none();
    let (mut train, mut test) = if needs_generation {
        generate_splits(&cfg.data)?
    } else {
        (Vec::new(), Vec::new())
    };
    if let Some(p) = &cfg.train_corpus {
        train = read_jsonl(p)?;
    }
    if let Some(p) = &cfg.test_corpus {
        test = read_jsonl(p)?;
    }
    Ok((train, test))
}

/// Runs `cfg.steps` pre-training steps, cycling through shuffled epochs,
/// and hands every record to `on_record` as soon as it is produced.
pub fn train<F>(cfg: &RunConfig, seed: u64, train_set: &[PairedExample], mut on_record: F) -> Result<Model>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    cfg.validate()?;
    let loss = cfg.loss_config()?;
    let mut model = Model::new(cfg.model_config()?, seed, loss.log_tau_init)?;
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let mut rng = SeededRng::derived(seed, streams::BATCH, epoch);
        for idx in make_batches(train_set.len(), cfg.batch_size, &mut rng)? {
            if step >= cfg.steps {
                break;
            }
            let batch: Vec<&PairedExample> = idx.iter().map(|&i| &train_set[i]).collect();
            let rec = pretrain_step(&mut model, &batch, &cfg.step_config(step)?, seed, step)?;
            on_record(&rec)?;
            step += 1;
        }
        epoch += 1;
    }
    Ok(model)
}

/// Writes one JSON object per line.
pub fn write_record(w: &mut impl Write, rec: &MetricsRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}
