//! Decode latency measurement: warm-up pass excluded, then `reps` timed
//! passes pinned to one worker for stable numbers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbones::{Probes, TextImage};
use crate::error::{Error, Result};
use crate::harness::eval::System;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub sigma_ms: f64,
    pub reps: usize,
    pub sentences: usize,
    pub decode_loops_per_sentence: f64,
    pub decode_steps_per_sentence: f64,
}

pub fn benchmark_latency(
    system: &System,
    images: &[TextImage],
    max_len: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if images.is_empty() {
        return Err(Error::Input("latency benchmark needs a nonempty corpus".into()));
    }
    if reps < 3 {
        return Err(Error::Input(format!(
            "latency benchmark needs at least 3 repetitions, got {reps}"
        )));
    }
    let mut probes = Probes::default();
    // Warm-up pass, unmeasured.
    for img in images {
        system.translate(img, max_len, &mut Probes::default())?;
    }
    let mut per_rep_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for img in images {
            system.translate(img, max_len, &mut probes)?;
        }
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        per_rep_ms.push(elapsed / images.len() as f64);
    }
    let mean = per_rep_ms.iter().sum::<f64>() / reps as f64;
    let var = per_rep_ms
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (reps - 1) as f64;
    let sentences = images.len() * reps;
    Ok(LatencyStats {
        mean_ms: mean,
        sigma_ms: var.sqrt(),
        reps,
        sentences: images.len(),
        decode_loops_per_sentence: probes.decode_loops as f64 / sentences as f64,
        decode_steps_per_sentence: probes.decode_steps as f64 / sentences as f64,
    })
}
