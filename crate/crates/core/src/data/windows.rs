//! Fixed-length resampling windows over a trial.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub length: usize,
    pub hop: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { length: 300, hop: 200 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.length {
            return Err(Error::InvalidArgument(format!(
                "window hop {} must be in (0, {}]",
                self.hop, self.length
            )));
        }
        Ok(())
    }

    /// Fraction of each window shared with the next one.
    pub fn overlap(&self) -> f64 {
        (self.length - self.hop) as f64 / self.length as f64
    }
}

/// Start frames of the windows covering a trial of `frames` frames.
///
/// Regular hops while the window fits; a trailing remainder gets one extra
/// end-aligned window. Trials shorter than one window yield a single window
/// at 0 that the caller zero-pads.
pub fn window_starts(frames: usize, spec: &WindowSpec) -> Vec<usize> {
    if frames == 0 {
        return Vec::new();
    }
    if frames < spec.length {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * spec.hop).take_while(|s| s + spec.length <= frames).collect();
    let covered = starts.last().map_or(0, |s| s + spec.length);
    if covered < frames {
        starts.push(frames - spec.length);
    }
    starts
}
