use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FrameSequence, IntermittentSequence, Mode};
use crate::error::{Error, Result};

/// Masked indices of a `len`-frame window.
///
/// Interpolation drops `floor(rate*len)` random interior indices; extrapolation
/// drops the trailing block, retrospective the leading block.
pub fn mask_indices(len: usize, rate: f64, mode: Mode, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::config(format!("drop rate must be in (0, 1), got {rate}")));
    }
    let drop = (rate * len as f64 + 1e-9).floor() as usize;
    let keep_min = if mode == Mode::Interpolation { 2 } else { 1 };
    if len < keep_min || drop > len - keep_min {
        return Err(Error::config(format!(
            "dropping {drop} of {len} frames leaves too few observations for {mode} mode"
        )));
    }
    let masked = match mode {
        Mode::Interpolation => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = index::sample(&mut rng, len - 2, drop)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            picked.sort_unstable();
            picked
        }
        Mode::Extrapolation => (len - drop..len).collect(),
        Mode::Retrospective => (0..drop).collect(),
    };
    Ok(masked)
}

/// Cuts an intermittent view out of a complete window.
pub fn mask(seq: &FrameSequence, rate: f64, mode: Mode, seed: u64) -> Result<IntermittentSequence> {
    let masked = mask_indices(seq.len(), rate, mode, seed)?;
    let observed: Vec<usize> = (0..seq.len()).filter(|i| masked.binary_search(i).is_err()).collect();
    Ok(IntermittentSequence {
        observed_times: observed.iter().map(|&i| seq.timestamps[i]).collect(),
        observed_frames: observed.iter().map(|&i| seq.frame(i)).collect(),
        query_times: masked.iter().map(|&i| seq.timestamps[i]).collect(),
        mode,
        observed_indices: observed,
        masked_indices: masked,
    })
}
