//! Temperature as a function of the training epoch.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::loss::TauVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    LinearOscillation,
    Step,
    Random,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::LinearOscillation => "linear_oscillation",
            ScheduleKind::Step => "step",
            ScheduleKind::Random => "random",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "constant" => ScheduleKind::Constant,
            "cosine" => ScheduleKind::Cosine,
            "linear_oscillation" | "oscil" => ScheduleKind::LinearOscillation,
            "step" => ScheduleKind::Step,
            "random" => ScheduleKind::Random,
            other => return Err(format!("unknown schedule kind `{other}`")),
        })
    }
}

/// A validated temperature schedule. Construct with [`ScheduleConfig::new`]
/// or one of the shorthand constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    kind: ScheduleKind,
    tau_minus: f64,
    tau_plus: f64,
    period: u32,
    step_length: u32,
    seed: u64,
    constant_tau: f64,
}

impl ScheduleConfig {
    pub fn new(
        kind: ScheduleKind,
        tau_minus: f64,
        tau_plus: f64,
        period: u32,
        step_length: u32,
        seed: u64,
        constant_tau: f64,
    ) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("tau_minus", tau_minus)?;
        positive("tau_plus", tau_plus)?;
        if tau_minus > tau_plus {
            return Err(Error::Config(format!(
                "tau_minus ({tau_minus}) must not exceed tau_plus ({tau_plus})"
            )));
        }
        if period < 1 {
            return Err(Error::Config("period_T must be at least 1".into()));
        }
        if kind == ScheduleKind::Step && step_length < 1 {
            return Err(Error::Config("step_length must be at least 1".into()));
        }
        if kind == ScheduleKind::Constant {
            positive("constant_tau", constant_tau)?;
        }
        Ok(Self {
            kind,
            tau_minus,
            tau_plus,
            period,
            step_length,
            seed,
            constant_tau,
        })
    }

    /// A fixed temperature. Bounds collapse onto the constant.
    pub fn constant(tau: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, tau, tau, 1, 1, 0, tau)
    }

    pub fn cosine(tau_minus: f64, tau_plus: f64, period: u32) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, tau_minus, tau_plus, period, 1, 0, tau_plus)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn tau_minus(&self) -> f64 {
        self.tau_minus
    }

    pub fn tau_plus(&self) -> f64 {
        self.tau_plus
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn step_length(&self) -> u32 {
        self.step_length
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn constant_tau(&self) -> f64 {
        self.constant_tau
    }

    /// Temperature for epoch `t`.
    pub fn tau_at(&self, t: u64) -> f64 {
        let (lo, hi) = (self.tau_minus, self.tau_plus);
        let v = match self.kind {
            ScheduleKind::Constant => return self.constant_tau,
            ScheduleKind::Cosine => {
                // cos(2πp) = cos(2π(1-p)); folding keeps mirrored epochs bitwise equal.
                let r = t % self.period as u64;
                let r = r.min(self.period as u64 - r);
                let phase = r as f64 / self.period as f64;
                let w = (1.0 + (2.0 * PI * phase).cos()) / 2.0;
                interpolate(lo, hi, w)
            }
            ScheduleKind::LinearOscillation => {
                let phase = (t % self.period as u64) as f64 / self.period as f64;
                interpolate(lo, hi, (1.0 - 2.0 * phase).abs())
            }
            ScheduleKind::Step => {
                if (t / self.step_length as u64) % 2 == 0 {
                    lo
                } else {
                    hi
                }
            }
            ScheduleKind::Random => {
                let mut r = rng::stream(self.seed, &[rng::TAG_SCHEDULE, t]);
                interpolate(lo, hi, r.random::<f64>())
            }
        };
        v.clamp(lo, hi)
    }

    /// `epoch,tau` rows for epochs `0..epochs`.
    pub fn preview_csv(&self, epochs: u64) -> String {
        let mut out = String::from("epoch,tau\n");
        for t in 0..epochs {
            let _ = writeln!(out, "{t},{}", self.tau_at(t));
        }
        out
    }
}

/// `lo + (hi - lo) * w`, returning the bounds themselves at `w = 0` and `w = 1`.
fn interpolate(lo: f64, hi: f64, w: f64) -> f64 {
    if w <= 0.0 {
        lo
    } else if w >= 1.0 {
        hi
    } else if w == 0.5 {
        (lo + hi) / 2.0
    } else {
        lo + (hi - lo) * w
    }
}

/// Temperature by anchor class: one value for the frequent classes, another
/// for the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseTauConfig {
    head_classes: BTreeSet<usize>,
    tau_head: f64,
    tau_tail: f64,
}

impl CoarseTauConfig {
    pub fn new(
        head_classes: BTreeSet<usize>,
        tau_head: f64,
        tau_tail: f64,
        num_classes: usize,
    ) -> Result<Self> {
        if head_classes.is_empty() {
            return Err(Error::Config("head class set is empty".into()));
        }
        if let Some(&c) = head_classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "head class {c} out of range for {num_classes} classes"
            )));
        }
        if head_classes.len() >= num_classes {
            return Err(Error::Config("head classes must be a strict subset of all classes".into()));
        }
        for (name, v) in [("tau_head", tau_head), ("tau_tail", tau_tail)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(Self {
            head_classes,
            tau_head,
            tau_tail,
        })
    }

    pub fn head_classes(&self) -> &BTreeSet<usize> {
        &self.head_classes
    }

    pub fn tau_head(&self) -> f64 {
        self.tau_head
    }

    pub fn tau_tail(&self) -> f64 {
        self.tau_tail
    }
}

pub fn per_anchor_tau(labels: &[usize], coarse: &CoarseTauConfig) -> Result<TauVector> {
    TauVector::new(
        labels
            .iter()
            .map(|l| {
                if coarse.head_classes.contains(l) {
                    coarse.tau_head
                } else {
                    coarse.tau_tail
                }
            })
            .collect(),
    )
}

/// The epoch `round((n - 0.3) T)` where `n` counts complete periods, i.e. at
/// 70% of the last full period.
pub fn recommended_eval_epoch(total_epochs: u64, period: u64) -> Result<u64> {
    if total_epochs == 0 || period == 0 {
        return Err(Error::Config("total_epochs and period must be positive".into()));
    }
    if total_epochs < period {
        return Err(Error::Config(format!(
            "run of {total_epochs} epochs is shorter than one period ({period}); \
             use a fixed temperature or a shorter period"
        )));
    }
    let n = total_epochs / period;
    let e = ((n as f64 - 0.3) * period as f64).round() as u64;
    Ok(e.clamp(1, total_epochs))
}
