//! CIFAR-10 binary batches from a directory.

use std::fs;
use std::path::{Path, PathBuf};

use nnwm_core::data::{
    channel_means, cifar_tensor, parse_cifar_batch, stratified_indices, subtract_channel_means,
    CifarRecord, CIFAR_CLASSES,
};
use nnwm_core::{Dataset, Split, Targets};

use crate::error::{CliError, Result};

pub const DATA_DIR_ENV: &str = "NNWM_DATA_DIR";
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Explicit directory, else `NNWM_DATA_DIR`.
pub fn resolve_dir(dir: Option<&Path>) -> Result<PathBuf> {
    match dir {
        Some(d) => Ok(d.to_path_buf()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                CliError::config(
                    "dataset.dir",
                    format!("no directory given and {DATA_DIR_ENV} is unset"),
                )
            }),
    }
}

fn read_batches(dir: &Path, names: &[&str]) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    names
        .iter()
        .map(|name| {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            Ok((path, bytes))
        })
        .collect()
}

fn parse_all(files: &[(PathBuf, Vec<u8>)]) -> Result<Vec<CifarRecord<'_>>> {
    let mut records = Vec::new();
    for (path, bytes) in files {
        let parsed = parse_cifar_batch(bytes, 0).map_err(|e| match e {
            nnwm_core::Error::Ingest { offset, reason } => {
                CliError::format(path, format!("byte offset {offset}: {reason}"))
            }
            other => other.into(),
        })?;
        records.extend(parsed);
    }
    Ok(records)
}

fn subset<'a>(
    records: &[CifarRecord<'a>],
    count: usize,
    seed: u64,
) -> Result<Vec<CifarRecord<'a>>> {
    let labels: Vec<usize> = records.iter().map(|r| r.label as usize).collect();
    let idx = stratified_indices(&labels, CIFAR_CLASSES, count, seed)?;
    Ok(idx.into_iter().map(|i| records[i]).collect())
}

/// Loads a class-balanced subset of each split, scaled to `[0, 1]` and
/// centred with the per-channel means of the training subset.
pub fn load_cifar10(
    dir: &Path,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train_files = read_batches(dir, &TRAIN_FILES)?;
    let test_files = read_batches(dir, &[TEST_FILE])?;
    let train_records = subset(&parse_all(&train_files)?, train_count, seed)?;
    let test_records = subset(&parse_all(&test_files)?, test_count, seed.wrapping_add(1))?;

    let (mut train_x, train_y) = cifar_tensor(&train_records)?;
    let (mut test_x, test_y) = cifar_tensor(&test_records)?;
    let means = channel_means(&train_x);
    subtract_channel_means(&mut train_x, &means);
    subtract_channel_means(&mut test_x, &means);
    Ok((
        Dataset::new(
            train_x,
            Targets::Classes(train_y),
            CIFAR_CLASSES,
            Split::Train,
        )?,
        Dataset::new(test_x, Targets::Classes(test_y), CIFAR_CLASSES, Split::Test)?,
    ))
}
