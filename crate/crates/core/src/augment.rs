//! Offline, segment-consistent augmentation and class rebalancing.
//!
//! One policy is sampled per augmented segment copy and applied with
//! identical parameters to every frame of that copy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayViewMut3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip::ClipTensor;
use crate::dataset::{BinaryTask, EventClass, EventSegment, SegmentRef};
use crate::seed::SeedHasher;

pub const FLIP_PROBABILITY: f64 = 0.5;
/// Probability with which each non-spatial transform (and blur) is enabled.
pub const TRANSFORM_PROBABILITY: f64 = 0.5;
pub const BLUR_SIGMA: f64 = 5.0;
pub const GAMMA: f64 = 0.5;
pub const MAX_BRIGHTNESS_DELTA: f64 = 0.3;
pub const SATURATION_FACTOR: f64 = 1.5;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("non-finite value in frame {frame}")]
    NonFinite { frame: usize },
    #[error("invalid policy string '{0}'")]
    BadPolicy(String),
    #[error("both classes must be non-empty to rebalance")]
    EmptyClass,
    #[error("augmented manifest {}: {message}", path.display())]
    Manifest {
        path: std::path::PathBuf,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub hflip: bool,
    pub blur_sigma: f64,
    pub gamma: f64,
    pub brightness_delta: f64,
    pub saturation_factor: f64,
}

impl AugmentationPolicy {
    pub const IDENTITY: AugmentationPolicy = AugmentationPolicy {
        hflip: false,
        blur_sigma: 0.0,
        gamma: 1.0,
        brightness_delta: 0.0,
        saturation_factor: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Compact `key=value;...` form used in manifests.
impl fmt::Display for AugmentationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hflip={};blur={};gamma={};brightness={};saturation={}",
            u8::from(self.hflip),
            self.blur_sigma,
            self.gamma,
            self.brightness_delta,
            self.saturation_factor
        )
    }
}

impl FromStr for AugmentationPolicy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AugmentError::BadPolicy(s.to_string());
        let mut p = AugmentationPolicy::IDENTITY;
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            let num = || value.parse::<f64>().map_err(|_| bad());
            match key {
                "hflip" => {
                    p.hflip = match value {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad()),
                    }
                }
                "blur" => p.blur_sigma = num()?,
                "gamma" => p.gamma = num()?,
                "brightness" => p.brightness_delta = num()?,
                "saturation" => p.saturation_factor = num()?,
                _ => return Err(bad()),
            }
        }
        Ok(p)
    }
}

pub fn sample_policy(rng_seed: u64) -> AugmentationPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let hflip = rng.random_bool(FLIP_PROBABILITY);
    let blur_sigma = if rng.random_bool(TRANSFORM_PROBABILITY) {
        BLUR_SIGMA
    } else {
        0.0
    };
    let gamma = if rng.random_bool(TRANSFORM_PROBABILITY) {
        GAMMA
    } else {
        1.0
    };
    let brightness_delta = if rng.random_bool(TRANSFORM_PROBABILITY) {
        rng.random_range(-MAX_BRIGHTNESS_DELTA..=MAX_BRIGHTNESS_DELTA)
    } else {
        0.0
    };
    let saturation_factor = if rng.random_bool(TRANSFORM_PROBABILITY) {
        SATURATION_FACTOR
    } else {
        1.0
    };
    AugmentationPolicy {
        hflip,
        blur_sigma,
        gamma,
        brightness_delta,
        saturation_factor,
    }
}

/// Applies `policy` to every frame of a `T x H x W x 3` clip.
///
/// Order: flip, blur, gamma, brightness, saturation. Values are clamped to
/// `[0, 1]` after each intensity step.
pub fn apply_policy(
    frames: &ClipTensor,
    policy: &AugmentationPolicy,
) -> Result<ClipTensor, AugmentError> {
    for (t, frame) in frames.outer_iter().enumerate() {
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(AugmentError::NonFinite { frame: t });
        }
    }
    let mut out = frames.clone();
    if policy.is_identity() {
        return Ok(out);
    }
    let kernel = (policy.blur_sigma > 0.0).then(|| gaussian_kernel(policy.blur_sigma));
    for mut frame in out.outer_iter_mut() {
        transform_frame(&mut frame, policy, kernel.as_deref());
    }
    Ok(out)
}

fn transform_frame(
    frame: &mut ArrayViewMut3<f32>,
    policy: &AugmentationPolicy,
    kernel: Option<&[f32]>,
) {
    if policy.hflip {
        frame.invert_axis(Axis(1));
        // invert_axis only changes the view; materialize the flip in place
        let flipped = frame.to_owned();
        frame.invert_axis(Axis(1));
        frame.assign(&flipped);
    }
    if let Some(kernel) = kernel {
        for c in 0..3 {
            let mut plane = frame.index_axis(Axis(2), c).to_owned();
            blur_plane(&mut plane, kernel);
            frame.index_axis_mut(Axis(2), c).assign(&plane);
        }
    }
    if policy.gamma != 1.0 {
        let g = policy.gamma as f32;
        frame.mapv_inplace(|v| v.powf(g).clamp(0.0, 1.0));
    }
    if policy.brightness_delta != 0.0 {
        let d = policy.brightness_delta as f32;
        frame.mapv_inplace(|v| (v + d).clamp(0.0, 1.0));
    }
    if policy.saturation_factor != 1.0 {
        let f = policy.saturation_factor as f32;
        for mut px in frame.lanes_mut(Axis(2)) {
            let gray = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
            for v in px.iter_mut() {
                *v = (gray + f * (*v - gray)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Normalized Gaussian taps with radius `ceil(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (2.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Separable convolution with reflect padding.
pub fn blur_plane(plane: &mut Array2<f32>, kernel: &[f32]) {
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = plane.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in kernel.iter().enumerate() {
                acc += wt * plane[[y, reflect(x as i64 + k as i64 - radius, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in kernel.iter().enumerate() {
                acc += wt * tmp[[reflect(y as i64 + k as i64 - radius, h), x]];
            }
            plane[[y, x]] = acc;
        }
    }
}

/// One row of the augmented training listing. Originals carry copy index 0
/// and the identity policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEntry {
    pub segment: SegmentRef,
    pub policy: AugmentationPolicy,
    pub copy_index: usize,
}

pub fn copy_policy_seed(seed: u64, segment: &SegmentRef, copy_index: usize) -> u64 {
    SeedHasher::new("augment", seed)
        .str(&segment.case_id)
        .str(segment.segment.label.as_str())
        .u64(segment.segment.start_sec.to_bits())
        .u64(segment.segment.end_sec.to_bits())
        .u64(copy_index as u64)
        .finish()
}

/// Adds augmented copies of the minority class until its segment count
/// reaches `target_ratio` times the majority count. Copies are spread
/// round-robin over the minority segments.
pub fn balance_classes(
    task: &BinaryTask,
    target_ratio: f64,
    rng_seed: u64,
) -> Result<Vec<AugmentedEntry>, AugmentError> {
    if task.positives.is_empty() || task.negatives.is_empty() {
        return Err(AugmentError::EmptyClass);
    }
    let (minority, majority) = if task.positives.len() <= task.negatives.len() {
        (&task.positives, &task.negatives)
    } else {
        (&task.negatives, &task.positives)
    };
    let target = (majority.len() as f64 * target_ratio).round() as usize;
    let copies = target.saturating_sub(minority.len());

    let mut out: Vec<AugmentedEntry> = task
        .positives
        .iter()
        .chain(&task.negatives)
        .map(|s| AugmentedEntry {
            segment: s.clone(),
            policy: AugmentationPolicy::IDENTITY,
            copy_index: 0,
        })
        .collect();
    for k in 0..copies {
        let segment = &minority[k % minority.len()];
        let copy_index = k / minority.len() + 1;
        out.push(AugmentedEntry {
            segment: segment.clone(),
            policy: sample_policy(copy_policy_seed(rng_seed, segment, copy_index)),
            copy_index,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct AugmentedRow {
    case_id: String,
    label: EventClass,
    start_sec: f64,
    end_sec: f64,
    policy: String,
    copy_index: usize,
}

pub fn write_augmented_manifest(
    path: &Path,
    entries: &[AugmentedEntry],
) -> Result<(), AugmentError> {
    let err = |e: &dyn fmt::Display| AugmentError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for e in entries {
        w.serialize(AugmentedRow {
            case_id: e.segment.case_id.clone(),
            label: e.segment.segment.label,
            start_sec: e.segment.segment.start_sec,
            end_sec: e.segment.segment.end_sec,
            policy: e.policy.to_string(),
            copy_index: e.copy_index,
        })
        .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))?;
    Ok(())
}

pub fn read_augmented_manifest(path: &Path) -> Result<Vec<AugmentedEntry>, AugmentError> {
    let err = |e: &dyn fmt::Display| AugmentError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(&e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<AugmentedRow>() {
        let row = row.map_err(|e| err(&e))?;
        out.push(AugmentedEntry {
            segment: SegmentRef::new(
                row.case_id,
                EventSegment::new(row.label, row.start_sec, row.end_sec),
            ),
            policy: row.policy.parse()?,
            copy_index: row.copy_index,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array4};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> ClipTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((t, h, w, 3), |_| rng.random::<f32>())
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let clip = random_clip(1, 3, 16, 12);
        assert_eq!(
            apply_policy(&clip, &AugmentationPolicy::IDENTITY).unwrap(),
            clip
        );
    }

    #[test]
    fn double_flip_restores_frames() {
        let clip = random_clip(2, 2, 9, 7);
        let flip = AugmentationPolicy {
            hflip: true,
            ..AugmentationPolicy::IDENTITY
        };
        let once = apply_policy(&clip, &flip).unwrap();
        assert_ne!(once, clip);
        assert_eq!(once[[0, 3, 0, 1]], clip[[0, 3, 6, 1]]);
        assert_eq!(apply_policy(&once, &flip).unwrap(), clip);
    }

    #[test]
    fn saturation_leaves_gray_frames_alone() {
        let gray = Array4::from_shape_fn((2, 8, 8, 3), |(t, y, x, _)| {
            ((t * 64 + y * 8 + x) % 97) as f32 / 97.0
        });
        let sat = AugmentationPolicy {
            saturation_factor: SATURATION_FACTOR,
            ..AugmentationPolicy::IDENTITY
        };
        let out = apply_policy(&gray, &sat).unwrap();
        for (a, b) in out.iter().zip(gray.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_half_takes_square_root() {
        let clip = ClipTensor::from_elem((1, 4, 4, 3), 0.25);
        let p = AugmentationPolicy {
            gamma: 0.5,
            ..AugmentationPolicy::IDENTITY
        };
        assert!(apply_policy(&clip, &p).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut clip = ClipTensor::zeros((2, 4, 4, 3));
        clip[[1, 0, 0, 0]] = f32::NAN;
        assert!(matches!(
            apply_policy(&clip, &AugmentationPolicy::IDENTITY),
            Err(AugmentError::NonFinite { frame: 1 })
        ));
    }

    #[test]
    fn blur_keeps_linear_ramps_in_the_interior() {
        let kernel = gaussian_kernel(BLUR_SIGMA);
        assert_eq!(kernel.len(), 21);
        let mut plane =
            Array2::from_shape_fn((64, 64), |(y, x)| 0.2 + 0.004 * x as f32 + 0.003 * y as f32);
        let before = plane.clone();
        blur_plane(&mut plane, &kernel);
        let interior = s![10..54, 10..54];
        let diff =
            (plane.slice(interior).mean().unwrap() - before.slice(interior).mean().unwrap()).abs();
        assert!(diff < 1e-3, "{diff}");
        let mut flat = Array2::from_elem((5, 5), 0.7f32);
        blur_plane(&mut flat, &kernel);
        assert!(flat.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn policy_sampling_is_deterministic_with_expected_rates() {
        assert_eq!(sample_policy(42), sample_policy(42));
        let n = 10_000;
        let mut flips = 0;
        let mut abs_sum = 0.0;
        let mut enabled = 0;
        for seed in 0..n {
            let p = sample_policy(seed);
            flips += usize::from(p.hflip);
            assert!(p.blur_sigma == 0.0 || p.blur_sigma == BLUR_SIGMA);
            assert!(p.gamma == 1.0 || p.gamma == GAMMA);
            assert!(p.saturation_factor == 1.0 || p.saturation_factor == SATURATION_FACTOR);
            assert!(p.brightness_delta.abs() <= MAX_BRIGHTNESS_DELTA);
            if p.brightness_delta != 0.0 {
                enabled += 1;
                abs_sum += p.brightness_delta.abs();
            }
        }
        assert!((flips as f64 / n as f64 - 0.5).abs() <= 0.02);
        assert!((abs_sum / enabled as f64 - 0.15).abs() <= 0.01);
    }

    #[test]
    fn policy_string_round_trips() {
        for seed in 0..50 {
            let p = sample_policy(seed);
            assert_eq!(p.to_string().parse::<AugmentationPolicy>().unwrap(), p);
        }
        assert!("hflip=2".parse::<AugmentationPolicy>().is_err());
        assert!("tint=3".parse::<AugmentationPolicy>().is_err());
    }

    fn task(n_pos: usize, n_neg: usize) -> BinaryTask {
        let mk = |label, i: usize| {
            SegmentRef::new("c", EventSegment::new(label, i as f64, i as f64 + 1.0))
        };
        BinaryTask {
            positive_class: EventClass::Bleeding,
            positives: (0..n_pos).map(|i| mk(EventClass::Bleeding, i)).collect(),
            negatives: (0..n_neg)
                .map(|i| mk(EventClass::Irrelevant, 100 + i))
                .collect(),
        }
    }

    #[test]
    fn balancing_adds_minority_copies() {
        assert_eq!(balance_classes(&task(10, 10), 1.0, 0).unwrap().len(), 20);
        let entries = balance_classes(&task(10, 40), 1.0, 3).unwrap();
        let copies: Vec<_> = entries.iter().filter(|e| e.copy_index > 0).collect();
        assert_eq!(copies.len(), 30);
        assert!(copies
            .iter()
            .all(|e| e.segment.segment.label == EventClass::Bleeding));
        assert_eq!(copies.iter().map(|e| e.copy_index).max(), Some(3));
        assert_eq!(entries, balance_classes(&task(10, 40), 1.0, 3).unwrap());
        assert!(matches!(
            balance_classes(&task(0, 4), 1.0, 0),
            Err(AugmentError::EmptyClass)
        ));
    }

    #[test]
    fn augmented_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.csv");
        let entries = balance_classes(&task(3, 8), 1.0, 5).unwrap();
        write_augmented_manifest(&path, &entries).unwrap();
        assert_eq!(read_augmented_manifest(&path).unwrap(), entries);
    }

    fn arb_policy() -> impl Strategy<Value = AugmentationPolicy> {
        (
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
            -0.3f64..=0.3,
            any::<bool>(),
        )
            .prop_map(|(hflip, blur, gamma, delta, sat)| AugmentationPolicy {
                hflip,
                blur_sigma: if blur { BLUR_SIGMA } else { 0.0 },
                gamma: if gamma { GAMMA } else { 1.0 },
                brightness_delta: delta,
                saturation_factor: if sat { SATURATION_FACTOR } else { 1.0 },
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn outputs_stay_in_unit_range(policy in arb_policy(), seed in any::<u64>()) {
            let out = apply_policy(&random_clip(seed, 2, 12, 10), &policy).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn transforms_commute_with_frame_selection(policy in arb_policy(), seed in any::<u64>()) {
            let clip = random_clip(seed, 6, 10, 10);
            let picks = [0usize, 2, 5];
            let select = |c: &ClipTensor| c.select(Axis(0), &picks);
            let a = apply_policy(&select(&clip), &policy).unwrap();
            let b = select(&apply_policy(&clip, &policy).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
