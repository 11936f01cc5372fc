//! Small generated datasets: annotations plus one directory of PNG frames
//! per case, each event drawn with its own colour tint.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use image::{Rgb, RgbImage};

use lapse_core::dataset::{serialize_annotations, CaseAnnotation, EventClass, EventSegment};
use lapse_core::seed::SeedHasher;

use crate::{invalid, GlobalArgs, SynthArgs};

fn tint(label: Option<EventClass>) -> [f32; 3] {
    match label {
        Some(EventClass::AbdominalAccess) => [0.85, 0.8, 0.2],
        Some(EventClass::NeedlePassing) => [0.2, 0.3, 0.85],
        Some(EventClass::Bleeding) => [0.8, 0.1, 0.1],
        Some(EventClass::CoagTransection) => [0.2, 0.75, 0.25],
        _ => [0.45, 0.4, 0.4],
    }
}

/// Uniform draw in `[lo, hi)` keyed by case and slot.
fn draw(seed: u64, case: &str, slot: u64, lo: f64, hi: f64) -> f64 {
    let bits = SeedHasher::new("synth", seed).str(case).u64(slot).finish();
    lo + (hi - lo) * (bits >> 11) as f64 / (1u64 << 53) as f64
}

fn layout(seed: u64, case_id: &str, index: usize, duration: f64) -> Vec<EventSegment> {
    let mut segments = Vec::new();
    let mut t = draw(seed, case_id, 0, 0.5, 2.0);
    let mut slot = 1;
    loop {
        let event = EventClass::RELEVANT[(index + segments.len()) % 4];
        let length = draw(seed, case_id, slot, 2.5, 5.0);
        if t + length > duration - 0.5 {
            break;
        }
        segments.push(EventSegment::new(event, round2(t), round2(t + length)));
        t += length + draw(seed, case_id, slot + 1, 2.5, 4.0);
        slot += 2;
    }
    segments
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn frame(size: u32, color: [f32; 3], index: usize) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let texture = 0.06 * (((x + y) as f32 * 0.7 + index as f32 * 0.3).sin());
        Rgb(color.map(|c| ((c + texture).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn run(global: &GlobalArgs, args: SynthArgs) -> anyhow::Result<()> {
    if args.cases == 0
        || !(args.duration.is_finite() && args.duration >= 4.0)
        || !(args.fps.is_finite() && args.fps > 0.0)
        || args.frame_size == 0
    {
        bail!(invalid(
            "synth needs at least one case, duration >= 4 s, positive fps and frame size"
        ));
    }
    let seed = global.seed.unwrap_or(0);
    let mut cases = Vec::with_capacity(args.cases);
    for index in 0..args.cases {
        let case_id = format!("case-{:02}", index + 1);
        let segments = layout(seed, &case_id, index, args.duration);
        let video_path = format!("videos/{case_id}");
        let dir = args.out.join(&video_path);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let frames = (args.duration * args.fps).round() as usize;
        for i in 0..frames {
            let t = (i as f64 + 0.5) / args.fps;
            let label = segments
                .iter()
                .find(|s| s.start_sec <= t && t < s.end_sec)
                .map(|s| s.label);
            let path = dir.join(format!("frame_{i:05}.png"));
            frame(args.frame_size, tint(label), i)
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        cases.push(CaseAnnotation {
            case_id,
            fps: args.fps,
            duration_sec: args.duration,
            video_path,
            segments,
        });
    }
    write_annotations(&args.out, &cases)?;
    let segments: usize = cases.iter().map(|c| c.segments.len()).sum();
    println!(
        "{} cases, {segments} segments -> {}",
        cases.len(),
        args.out.display()
    );
    Ok(())
}

fn write_annotations(out: &Path, cases: &[CaseAnnotation]) -> anyhow::Result<()> {
    let path = out.join("annotations.json");
    fs::write(&path, serialize_annotations(cases))
        .with_context(|| format!("writing {}", path.display()))
}
