//! CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes (R, G, B planes
//! of 32×32) per record.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, Inputs, Normalization, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = SIDE * SIDE * CHANNELS;
pub const RECORD: usize = 1 + PIXELS;

/// Raw records with pixels re-laid channel-last (H×W×C).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CifarRaw {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar_records(bytes: &[u8], what: &str) -> Result<CifarRaw> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::format(
            what,
            format!("length {} is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut raw = CifarRaw {
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * PIXELS),
    };
    let plane = SIDE * SIDE;
    for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                what,
                format!("label {} outside [0, 10) (offset {})", rec[0], r * RECORD),
            ));
        }
        raw.labels.push(rec[0]);
        let px = &rec[1..];
        for p in 0..plane {
            for c in 0..CHANNELS {
                raw.pixels.push(px[c * plane + p]);
            }
        }
    }
    Ok(raw)
}

pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<CifarRaw> {
    let mut all = CifarRaw::default();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let part = parse_cifar_records(&bytes, &p.display().to_string())?;
        all.labels.extend(part.labels);
        all.pixels.extend(part.pixels);
    }
    Ok(all)
}

/// Per-channel mean and population std of `x / 255`.
pub fn channel_stats(pixels: &[u8], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    for (i, &p) in pixels.iter().enumerate() {
        let x = p as f64 / 255.0;
        sum[i % channels] += x;
        sq[i % channels] += x * x;
    }
    let n = (pixels.len() / channels) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

/// Builds a dataset with `(x / 255 − mean_c) / std_c` applied per channel.
pub fn standardize(raw: &CifarRaw, mean: &[f64], std: &[f64], split: Split) -> Result<Dataset> {
    let c = mean.len();
    if let Some(i) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Data(format!("channel {i} has zero variance")));
    }
    let data = raw
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| (p as f64 / 255.0 - mean[i % c]) / std[i % c])
        .collect();
    let mut ds = Dataset::new(
        Inputs::Dense {
            width: PIXELS,
            data,
        },
        raw.labels.iter().map(|&l| l as usize).collect(),
        10,
        split,
    )?;
    ds.normalization = Normalization::ChannelStandardize {
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    Ok(ds)
}

/// `data_batch_{1..5}.bin` and `test_batch.bin`, normalised with
/// training-split statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_paths: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let test_paths = vec![dir.join("test_batch.bin")];
    for p in train_paths.iter().chain(&test_paths) {
        if !p.exists() {
            return Err(Error::config(
                "dataset.path",
                format!("{} does not exist", p.display()),
            ));
        }
    }
    let train = load_cifar_binary(&train_paths)?;
    let test = load_cifar_binary(&test_paths)?;
    let (mean, std) = channel_stats(&train.pixels, CHANNELS);
    Ok((
        standardize(&train, &mean, &std, Split::Train)?,
        standardize(&test, &mean, &std, Split::Test)?,
    ))
}

/// Writes one record from channel-last pixels.
pub fn write_cifar_record(mut w: impl Write, label: u8, hwc: &[u8]) -> std::io::Result<()> {
    let plane = SIDE * SIDE;
    let mut rec = vec![0u8; RECORD];
    rec[0] = label;
    for p in 0..plane {
        for c in 0..CHANNELS {
            rec[1 + c * plane + p] = hwc[p * CHANNELS + c];
        }
    }
    w.write_all(&rec)
}
