use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStep {
    /// 1-based epoch at which the frame pool is refreshed.
    pub epoch: usize,
    /// Share of target frames admitted from that epoch on.
    pub fraction: f64,
}

/// When the frame pool is refreshed and how large it becomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Curriculum {
    /// Explicit (epoch, fraction) list.
    Schedule { steps: Vec<CurriculumStep> },
    /// Start at `initial_fraction` and double the pool every `every` epochs.
    Doubling { initial_fraction: f64, every: usize },
}

impl Default for Curriculum {
    fn default() -> Self {
        let steps = [(1, 0.3), (11, 0.5), (21, 0.7), (31, 1.0)]
            .into_iter()
            .map(|(epoch, fraction)| CurriculumStep { epoch, fraction })
            .collect();
        Curriculum::Schedule { steps }
    }
}

impl Curriculum {
    pub fn validate(&self) -> Result<()> {
        match self {
            Curriculum::Schedule { steps } => {
                let Some(last) = steps.last() else {
                    return Err(Error::Config("curriculum schedule is empty".into()));
                };
                if steps[0].epoch != 1 {
                    return Err(Error::Config("curriculum schedule must start at epoch 1".into()));
                }
                for pair in steps.windows(2) {
                    if pair[1].epoch <= pair[0].epoch || pair[1].fraction < pair[0].fraction {
                        return Err(Error::Config(format!(
                            "curriculum steps must have increasing epochs and non-decreasing fractions: {pair:?}"
                        )));
                    }
                }
                if steps.iter().any(|s| !(s.fraction > 0.0 && s.fraction <= 1.0)) || last.fraction != 1.0 {
                    return Err(Error::Config("curriculum fractions must lie in (0, 1] and end at 1".into()));
                }
                Ok(())
            }
            Curriculum::Doubling { initial_fraction, every } => {
                if !(*initial_fraction > 0.0 && *initial_fraction <= 1.0) || *every == 0 {
                    return Err(Error::Config(format!(
                        "doubling curriculum needs initial_fraction in (0, 1] and every > 0, got {initial_fraction} / {every}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// The pool fraction to switch to at `epoch`, or `None` if the pool is
    /// not refreshed then.
    pub fn refresh_fraction(&self, epoch: usize) -> Option<f64> {
        match self {
            Curriculum::Schedule { steps } => steps.iter().find(|s| s.epoch == epoch).map(|s| s.fraction),
            Curriculum::Doubling { initial_fraction, every } => {
                if epoch == 0 || (epoch - 1) % every != 0 {
                    return None;
                }
                let doublings = ((epoch - 1) / every) as i32;
                Some((initial_fraction * 2f64.powi(doublings)).min(1.0))
            }
        }
    }
}

/// Frame uncertainties and the current pool size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSamplingState {
    pub u_frame: BTreeMap<String, f64>,
    pub n_sub: usize,
    pub schedule: Curriculum,
    pub n_t: usize,
}

impl FrameSamplingState {
    /// All frames start at the sentinel uncertainty; the pool starts full.
    pub fn new(frame_ids: impl IntoIterator<Item = String>, schedule: Curriculum) -> Result<Self> {
        schedule.validate()?;
        let u_frame: BTreeMap<String, f64> = frame_ids.into_iter().map(|id| (id, super::FRAME_AU_SENTINEL)).collect();
        let n_t = u_frame.len();
        Ok(Self {
            u_frame,
            n_sub: n_t,
            schedule,
            n_t,
        })
    }

    /// Pool size `ceil(fraction · n_t)`, at least one frame when any exist.
    pub fn set_fraction(&mut self, fraction: f64) {
        let n = (fraction * self.n_t as f64).ceil() as usize;
        self.n_sub = n.clamp(usize::from(self.n_t > 0), self.n_t);
    }
}

/// The `n_sub` frames with the smallest uncertainty, ties by frame id.
pub fn select_frames(state: &FrameSamplingState) -> Result<Vec<String>> {
    if state.n_sub > state.n_t || state.n_t != state.u_frame.len() {
        return Err(Error::InvalidState(format!(
            "cannot select {} of {} frames ({} uncertainties known)",
            state.n_sub,
            state.n_t,
            state.u_frame.len()
        )));
    }
    let mut ranked: Vec<(&String, f64)> = state.u_frame.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(state.n_sub).map(|(k, _)| k.clone()).collect())
}
