//! Wall-clock throughput of feature extraction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{Error, Result};

pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub device: String,
    pub input_size: [usize; 2],
    pub param_count: usize,
    pub batch_size: usize,
    pub images: usize,
    pub repetitions: usize,
    pub images_per_sec_mean: f64,
    pub images_per_sec_std: f64,
    pub seconds_per_image_mean: f64,
}

/// What is being timed: a name, its metadata, and a batch extraction call.
pub struct BenchTarget<'a> {
    pub model: String,
    pub input_size: [usize; 2],
    pub param_count: usize,
    pub run: Box<dyn FnMut(&[Image]) -> Result<()> + 'a>,
}

/// Runs `warmup` untimed passes, then `repetitions` timed passes over all
/// `images` in chunks of `batch_size`.
pub fn throughput_benchmark(
    target: &mut BenchTarget<'_>,
    images: &[Image],
    batch_size: usize,
    device: &str,
    warmup: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(Error::EmptyList("benchmark images"));
    }
    if batch_size == 0 {
        return Err(Error::ConfigInvalid("bench batch size must be positive".into()));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(Error::ConfigInvalid(format!("bench needs at least {MIN_REPETITIONS} repetitions, got {repetitions}")));
    }
    let pass = |t: &mut BenchTarget<'_>| -> Result<f64> {
        let start = Instant::now();
        for chunk in images.chunks(batch_size) {
            (t.run)(chunk)?;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..warmup {
        pass(target)?;
    }
    let mut rates = Vec::with_capacity(repetitions);
    let mut per_image = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let secs = pass(target)?.max(f64::MIN_POSITIVE);
        rates.push(images.len() as f64 / secs);
        per_image.push(secs / images.len() as f64);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len() - 1) as f64;
    Ok(BenchReport {
        model: target.model.clone(),
        device: device.to_string(),
        input_size: target.input_size,
        param_count: target.param_count,
        batch_size,
        images: images.len(),
        repetitions,
        images_per_sec_mean: mean,
        images_per_sec_std: var.sqrt(),
        seconds_per_image_mean: per_image.iter().sum::<f64>() / per_image.len() as f64,
    })
}
