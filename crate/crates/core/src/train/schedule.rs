use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One resolution stage of the curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub resolution: usize,
    /// Image–text pairs consumed by the stage.
    pub samples: usize,
    pub batch: usize,
    pub base_lr: f64,
    /// Defaults to 2% of `samples` when omitted.
    #[serde(default)]
    pub warmup_samples: Option<usize>,
}

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.02;

impl StageSchedule {
    pub fn new(resolution: usize, samples: usize, batch: usize, base_lr: f64) -> Self {
        StageSchedule { resolution, samples, batch, base_lr, warmup_samples: None }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_samples.unwrap_or_else(|| (self.samples as f64 * DEFAULT_WARMUP_FRACTION).floor() as usize)
    }

    pub fn steps(&self) -> usize {
        self.samples / self.batch.max(1)
    }

    /// Problems with this stage for a model with the given patch size.
    pub fn problems(&self, patch: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch == 0 {
            errs.push("batch must be positive".into());
        } else if !self.samples.is_multiple_of(self.batch) {
            errs.push(format!("samples {} not divisible by batch {}", self.samples, self.batch));
        }
        if self.samples == 0 {
            errs.push("samples must be positive".into());
        }
        if patch == 0 || self.resolution == 0 || !self.resolution.is_multiple_of(patch) {
            errs.push(format!("resolution {} not divisible by patch {patch}", self.resolution));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            errs.push(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if self.samples > 0 && self.warmup() >= self.samples {
            errs.push(format!("warmup {} must be below samples {}", self.warmup(), self.samples));
        }
        errs
    }
}

/// Learning rate after `samples_seen` pairs of the stage: linear warmup, then
/// half-cosine decay to zero.
pub fn lr_at(s: &StageSchedule, samples_seen: usize) -> Result<f64> {
    if samples_seen > s.samples {
        return Err(Error::Contract(format!("samples_seen {samples_seen} beyond stage budget {}", s.samples)));
    }
    let warm = s.warmup();
    if samples_seen < warm {
        return Ok(s.base_lr * samples_seen as f64 / warm as f64);
    }
    if samples_seen == s.samples {
        return Ok(0.0);
    }
    let t = (samples_seen - warm) as f64 / (s.samples - warm) as f64;
    Ok(0.5 * s.base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Validates a whole curriculum, collecting every problem.
pub fn validate_stages(stages: &[StageSchedule], patch: usize) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Validation(vec!["curriculum needs at least one stage".into()]));
    }
    let errs: Vec<String> =
        stages.iter().enumerate().flat_map(|(i, s)| s.problems(patch).into_iter().map(move |e| format!("stage {i}: {e}"))).collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// Desk curriculum: 50:4:1 sample budgets with 4:2:1 batches and 80:4:1 rates.
pub fn desk_curriculum() -> Vec<StageSchedule> {
    vec![StageSchedule::new(64, 12_800, 32, 8e-4), StageSchedule::new(96, 1_024, 16, 4e-5), StageSchedule::new(128, 256, 8, 1e-5)]
}

/// Budget variants (low-resolution then high-resolution samples), scaled to
/// desk size at 10 pairs per million. A zero low-resolution budget drops
/// that stage.
pub fn budget_variants() -> Vec<(&'static str, Vec<StageSchedule>)> {
    let two = |lo: usize, hi: usize| {
        let mut v = Vec::new();
        if lo > 0 {
            v.push(StageSchedule::new(64, lo, 32, 8e-4));
        }
        v.push(StageSchedule::new(96, hi, 16, 4e-5));
        v
    };
    vec![
        ("budget-512-128", two(5_120, 1_280)),
        ("budget-1024-256", two(10_240, 2_560)),
        ("budget-512-512", two(5_120, 5_120)),
        ("budget-0-768", {
            let mut v = two(0, 7_680);
            v[0].base_lr = 8e-4;
            v
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoint_and_decay() {
        let s = StageSchedule { warmup_samples: Some(100), ..StageSchedule::new(32, 1100, 10, 0.5) };
        assert_eq!(lr_at(&s, 100).unwrap(), 0.5);
        assert_eq!(lr_at(&s, 1100).unwrap(), 0.0);
        assert!((lr_at(&s, 600).unwrap() - 0.25).abs() <= 1e-12);
        assert_eq!(lr_at(&s, 50).unwrap(), 0.25);
        assert!(lr_at(&s, 1101).is_err());
    }

    #[test]
    fn desk_and_variants_validate() {
        validate_stages(&desk_curriculum(), 16).unwrap();
        for (_, v) in budget_variants() {
            validate_stages(&v, 16).unwrap();
        }
        assert!(validate_stages(&[StageSchedule::new(30, 10, 3, 1.0)], 16).is_err());
    }
}
