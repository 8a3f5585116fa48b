use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{Contrast, KSpaceCase};

/// Frame selection used to cut training inputs from a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// One random 12-frame clip (first training stage).
    Clip12,
    /// Five-frame windows reconstructing their middle frame (second stage).
    Win5,
}

pub const WIN5_LEN: usize = 5;
pub const CLIP_LEN: usize = 12;

/// Input frames and the positions within `frames` that are reconstruction
/// targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingWindow {
    pub frames: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainingWindow {
    /// Absolute frame indices of the targets.
    pub fn target_frames(&self) -> Vec<usize> {
        self.targets.iter().map(|&p| self.frames[p]).collect()
    }
}

/// Cuts a `t`-frame sequence into training windows.
///
/// `Win5` returns one window per frame: frames `f-2..=f+2`, shifted inward at
/// the sequence ends (the target position moves accordingly). Sequences
/// shorter than five frames become a single window whose every frame is a
/// target. `Clip12` returns one random contiguous clip of twelve frames, or
/// the whole sequence when it is not longer than that.
pub fn window_frames(t: usize, policy: WindowPolicy, seed: u64) -> Vec<TrainingWindow> {
    let whole = || TrainingWindow {
        frames: (0..t).collect(),
        targets: (0..t).collect(),
    };
    match policy {
        WindowPolicy::Win5 if t < WIN5_LEN => vec![whole()],
        WindowPolicy::Win5 => (0..t)
            .map(|target| {
                let start = target.saturating_sub(WIN5_LEN / 2).min(t - WIN5_LEN);
                TrainingWindow {
                    frames: (start..start + WIN5_LEN).collect(),
                    targets: vec![target - start],
                }
            })
            .collect(),
        WindowPolicy::Clip12 if t <= CLIP_LEN => vec![whole()],
        WindowPolicy::Clip12 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = rng.random_range(0..=t - CLIP_LEN);
            vec![TrainingWindow {
                frames: (start..start + CLIP_LEN).collect(),
                targets: (0..CLIP_LEN).collect(),
            }]
        }
    }
}

/// Draws case indices so that every contrast class is equally likely,
/// regardless of how many cases each class holds. Within a class cases are
/// drawn uniformly with replacement.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    classes: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl BalancedSampler {
    pub fn new(contrasts: &[Contrast], samples: usize, seed: u64) -> Self {
        let mut by_class: BTreeMap<Contrast, Vec<usize>> = BTreeMap::new();
        for (i, c) in contrasts.iter().enumerate() {
            by_class.entry(*c).or_default().push(i);
        }
        BalancedSampler {
            classes: by_class.into_values().collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: samples,
        }
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 || self.classes.is_empty() {
            return None;
        }
        self.remaining -= 1;
        let class = &self.classes[self.rng.random_range(0..self.classes.len())];
        Some(class[self.rng.random_range(0..class.len())])
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = if self.classes.is_empty() { 0 } else { self.remaining };
        (n, Some(n))
    }
}

/// Sampler over the case ids of a dataset.
pub fn balanced_sampler(
    cases: &[KSpaceCase],
    samples_per_epoch: usize,
    seed: u64,
) -> impl Iterator<Item = &str> + '_ {
    let contrasts: Vec<Contrast> = cases.iter().map(|c| c.meta.contrast).collect();
    BalancedSampler::new(&contrasts, samples_per_epoch, seed).map(move |i| cases[i].id.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_sequence_is_one_window() {
        let w = window_frames(3, WindowPolicy::Win5, 0);
        assert_eq!(
            w,
            vec![TrainingWindow {
                frames: vec![0, 1, 2],
                targets: vec![0, 1, 2]
            }]
        );
    }

    #[test]
    fn win5_enumerates_every_target_once() {
        let ws = window_frames(10, WindowPolicy::Win5, 0);
        assert_eq!(ws.len(), 10);
        let targets: Vec<usize> = ws.iter().flat_map(|w| w.target_frames()).collect();
        assert_eq!(targets, (0..10).collect::<Vec<_>>());
        assert_eq!(ws[0].frames, vec![0, 1, 2, 3, 4]);
        assert_eq!(ws[0].targets, vec![0]);
        assert_eq!(ws[1].targets, vec![1]);
        assert_eq!(ws[5].frames, vec![3, 4, 5, 6, 7]);
        assert_eq!(ws[5].targets, vec![2]);
        assert_eq!(ws[9].frames, vec![5, 6, 7, 8, 9]);
        assert_eq!(ws[9].targets, vec![4]);
        assert!(ws.iter().all(|w| w.frames.len() == 5));
    }

    #[test]
    fn clip12_is_contiguous_and_seeded() {
        let a = window_frames(20, WindowPolicy::Clip12, 9);
        assert_eq!(a, window_frames(20, WindowPolicy::Clip12, 9));
        assert_eq!(a.len(), 1);
        let f = &a[0].frames;
        assert_eq!(f.len(), 12);
        assert!(f.windows(2).all(|p| p[1] == p[0] + 1));
        assert!(*f.last().unwrap() < 20);
        assert_eq!(window_frames(8, WindowPolicy::Clip12, 1)[0].frames, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_single_class_and_determinism() {
        let one = vec![Contrast::Cine; 4];
        assert!(BalancedSampler::new(&one, 50, 1).all(|i| i < 4));
        let mixed = [Contrast::Cine, Contrast::T1w, Contrast::T1w];
        let a: Vec<usize> = BalancedSampler::new(&mixed, 100, 3).collect();
        let b: Vec<usize> = BalancedSampler::new(&mixed, 100, 3).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(BalancedSampler::new(&[], 10, 0).count(), 0);
    }

    #[test]
    fn sampler_balances_unequal_classes() {
        let mut contrasts = vec![Contrast::Cine; 100];
        contrasts.extend(vec![Contrast::T2w; 10]);
        // binomial(1000, 0.5) has std ~15.8; 60 is a ~3.8 sigma band
        for seed in 0..20 {
            let small = BalancedSampler::new(&contrasts, 1000, seed).filter(|&i| i >= 100).count();
            assert!((440..=560).contains(&small), "seed {seed}: {small}");
        }
    }
}
