use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::RngStream;
use crate::tokenizer::Modality;

/// Which modality stage-2 iterations use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityRule {
    /// image, video, image, … starting at the first stage-2 iteration
    Alternate,
    /// video batches only (the video-only ablation)
    VideoOnly,
    /// image batches only
    ImageOnly,
}

impl ModalityRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityRule::Alternate => "alternate",
            ModalityRule::VideoOnly => "video-only",
            ModalityRule::ImageOnly => "image-only",
        }
    }
}

impl fmt::Display for ModalityRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternate" => Ok(ModalityRule::Alternate),
            "video-only" => Ok(ModalityRule::VideoOnly),
            "image-only" => Ok(ModalityRule::ImageOnly),
            other => Err(Error::Config(format!("unknown modality rule '{other}'"))),
        }
    }
}

/// Progressive two-stage schedule: fixed-resolution images, then joint
/// image/video training over a set of resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub image_res_stage1: usize,
    pub joint_res_set: Vec<usize>,
    pub modality_rule: ModalityRule,
    /// frames per video clip
    pub video_len: usize,
}

impl StageSchedule {
    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    /// Checks every resolution against the patch and window sizes.
    pub fn validate(&self, patch: usize, window: usize) -> Result<()> {
        if self.stage2_iters > 0 && self.joint_res_set.is_empty() {
            return Err(Error::Config("joint_res_set is empty".into()));
        }
        let unit = patch * window;
        let stage1 = (self.stage1_iters > 0).then_some(self.image_res_stage1);
        for r in stage1.into_iter().chain(self.joint_res_set.iter().copied()) {
            if r == 0 || r % unit != 0 {
                return Err(Error::Config(format!(
                    "resolution {r} is not a multiple of patch·window = {unit}"
                )));
            }
        }
        Ok(())
    }

    /// Every resolution the schedule may ask for.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = self.joint_res_set.clone();
        if self.stage1_iters > 0 {
            r.push(self.image_res_stage1);
        }
        r.sort_unstable();
        r.dedup();
        r
    }
}

/// What one training iteration trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Directive {
    pub stage: u8,
    pub modality: Modality,
    pub resolution: usize,
}

const SCHEDULE_STREAM: u64 = 0x5c4e;

/// Directive for `iter`; deterministic in `(iter, seed)`.
pub fn schedule_at(iter: usize, s: &StageSchedule, seed: u64) -> Result<Directive> {
    if iter >= s.total_iters() {
        return Err(Error::invalid(format!(
            "iteration {iter} outside schedule of {} iterations",
            s.total_iters()
        )));
    }
    if iter < s.stage1_iters {
        return Ok(Directive {
            stage: 1,
            modality: Modality::Image,
            resolution: s.image_res_stage1,
        });
    }
    let k = iter - s.stage1_iters;
    let modality = match s.modality_rule {
        ModalityRule::Alternate if k % 2 == 0 => Modality::Image,
        ModalityRule::Alternate => Modality::Video,
        ModalityRule::VideoOnly => Modality::Video,
        ModalityRule::ImageOnly => Modality::Image,
    };
    let mut rng = RngStream::new(seed).split(SCHEDULE_STREAM).split(iter as u64);
    let resolution = s.joint_res_set[rng.below(s.joint_res_set.len())];
    Ok(Directive {
        stage: 2,
        modality,
        resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> StageSchedule {
        StageSchedule {
            stage1_iters: 3,
            stage2_iters: 10_000,
            image_res_stage1: 32,
            joint_res_set: vec![32, 48, 64],
            modality_rule: ModalityRule::Alternate,
            video_len: 9,
        }
    }

    #[test]
    fn stage_one_is_fixed_images() {
        let s = sched();
        for i in 0..3 {
            let d = schedule_at(i, &s, 1).unwrap();
            assert_eq!((d.stage, d.modality, d.resolution), (1, Modality::Image, 32));
        }
    }

    #[test]
    fn stage_two_alternates_starting_with_images() {
        let s = sched();
        assert_eq!(schedule_at(3, &s, 1).unwrap().modality, Modality::Image);
        assert_eq!(schedule_at(4, &s, 1).unwrap().modality, Modality::Video);
        assert_eq!(schedule_at(5, &s, 1).unwrap().modality, Modality::Image);
    }

    #[test]
    fn resolution_draws_cover_the_set() {
        let s = sched();
        let mut counts = [0usize; 3];
        for i in 3..s.total_iters() {
            let r = schedule_at(i, &s, 7).unwrap().resolution;
            counts[s.joint_res_set.iter().position(|&x| x == r).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 3000), "{counts:?}");
    }

    #[test]
    fn out_of_range_iteration_errors() {
        assert!(schedule_at(10_003, &sched(), 0).is_err());
    }

    #[test]
    fn validate_rejects_misaligned_resolution() {
        let mut s = sched();
        s.joint_res_set.push(40);
        assert!(s.validate(8, 2).is_err());
        assert!(sched().validate(8, 2).is_ok());
    }
}
