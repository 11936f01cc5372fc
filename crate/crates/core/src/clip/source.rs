use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{s, Array3, Array4};

use super::{ClipError, ClipSpec, FrameIndexSet, FRAME_SIZE};
use crate::dataset::CaseAnnotation;

/// One RGB frame, `H x W x 3`, values in `[0, 1]`.
pub type Frame = Array3<f32>;
/// A sampled clip, `T x H x W x 3`.
pub type ClipTensor = Array4<f32>;

/// The video decoding boundary.
///
/// Implementations return 224x224 RGB frames normalized to `[0, 1]`, and
/// `read_frame` must be deterministic for a fixed video and index.
pub trait FrameSource: Send {
    fn frame_count(&self) -> usize;
    fn read_frame(&mut self, index: usize) -> Result<Frame, ClipError>;
}

/// Opens the frame source backing a case.
pub trait SourceOpener: Sync {
    fn open(&self, case: &CaseAnnotation) -> Result<Box<dyn FrameSource>, ClipError>;
}

impl<F> SourceOpener for F
where
    F: Fn(&CaseAnnotation) -> Result<Box<dyn FrameSource>, ClipError> + Sync,
{
    fn open(&self, case: &CaseAnnotation) -> Result<Box<dyn FrameSource>, ClipError> {
        self(case)
    }
}

/// Gathers the sampled frames of `clip` in chronological order.
pub fn load_clip_frames(
    source: &mut dyn FrameSource,
    clip: &ClipSpec,
    frames: &FrameIndexSet,
) -> Result<ClipTensor, ClipError> {
    let mut out = ClipTensor::zeros((frames.len(), FRAME_SIZE, FRAME_SIZE, 3));
    let limit = source.frame_count();
    for (t, &offset) in frames.indices().iter().enumerate() {
        if offset >= clip.length_frames {
            return Err(ClipError::OutOfBounds {
                index: offset,
                limit: clip.length_frames,
            });
        }
        let index = clip.start_frame + offset;
        if index >= limit {
            return Err(ClipError::OutOfBounds { index, limit });
        }
        let frame = source.read_frame(index)?;
        if frame.dim() != (FRAME_SIZE, FRAME_SIZE, 3) {
            return Err(ClipError::Decode {
                index,
                message: format!("frame has shape {:?}", frame.dim()),
            });
        }
        out.slice_mut(s![t, .., .., ..]).assign(&frame);
    }
    Ok(out)
}

/// A video stored as a directory of numbered image files.
///
/// Files are ordered by name; every file is resized to 224x224 on read.
pub struct ImageSequenceSource {
    root: PathBuf,
    files: Vec<PathBuf>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

impl ImageSequenceSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ClipError> {
        let root = path.as_ref().to_path_buf();
        let open_err = |message: String| ClipError::Open {
            path: root.display().to_string(),
            message,
        };
        let entries = std::fs::read_dir(&root).map_err(|e| open_err(e.to_string()))?;
        let mut files = Vec::new();
        for entry in entries {
            let p = entry.map_err(|e| open_err(e.to_string()))?.path();
            let is_image = p
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false);
            if is_image {
                files.push(p);
            }
        }
        if files.is_empty() {
            return Err(open_err("no image frames found".into()));
        }
        files.sort();
        Ok(Self { root, files })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FrameSource for ImageSequenceSource {
    fn frame_count(&self) -> usize {
        self.files.len()
    }

    fn read_frame(&mut self, index: usize) -> Result<Frame, ClipError> {
        let path = self.files.get(index).ok_or(ClipError::OutOfBounds {
            index,
            limit: self.files.len(),
        })?;
        let img = image::open(path).map_err(|e| ClipError::Decode {
            index,
            message: e.to_string(),
        })?;
        let size = FRAME_SIZE as u32;
        let img = if img.width() != size || img.height() != size {
            img.resize_exact(size, size, FilterType::Triangle)
        } else {
            img
        };
        let rgb = img.to_rgb8();
        Ok(Frame::from_shape_fn(
            (FRAME_SIZE, FRAME_SIZE, 3),
            |(y, x, c)| f32::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0,
        ))
    }
}

/// Opens `video_path` of each case as an image-sequence directory.
pub struct ImageSequenceOpener {
    pub data_root: Option<PathBuf>,
    pub fallback: PathBuf,
}

impl SourceOpener for ImageSequenceOpener {
    fn open(&self, case: &CaseAnnotation) -> Result<Box<dyn FrameSource>, ClipError> {
        let path = case.resolve_video_path(self.data_root.as_deref(), &self.fallback);
        Ok(Box::new(ImageSequenceSource::open(path)?))
    }
}

type FrameFn = dyn Fn(usize, &mut Frame) + Send + Sync;

/// In-memory video whose frames are produced by a function of the index.
pub struct SyntheticSource {
    frame_count: usize,
    generate: std::sync::Arc<FrameFn>,
    failures: BTreeSet<usize>,
}

impl SyntheticSource {
    pub fn new(
        frame_count: usize,
        generate: impl Fn(usize, &mut Frame) + Send + Sync + 'static,
    ) -> Self {
        Self {
            frame_count,
            generate: std::sync::Arc::new(generate),
            failures: BTreeSet::new(),
        }
    }

    /// Frames whose value is `value(index)` in every pixel and channel.
    pub fn constant(
        frame_count: usize,
        value: impl Fn(usize) -> f32 + Send + Sync + 'static,
    ) -> Self {
        Self::new(frame_count, move |i, f| f.fill(value(i)))
    }

    /// Makes the listed frames fail to decode.
    pub fn with_failures(mut self, failures: impl IntoIterator<Item = usize>) -> Self {
        self.failures.extend(failures);
        self
    }
}

impl Clone for SyntheticSource {
    fn clone(&self) -> Self {
        Self {
            frame_count: self.frame_count,
            generate: self.generate.clone(),
            failures: self.failures.clone(),
        }
    }
}

impl FrameSource for SyntheticSource {
    fn frame_count(&self) -> usize {
        self.frame_count
    }

    fn read_frame(&mut self, index: usize) -> Result<Frame, ClipError> {
        if index >= self.frame_count {
            return Err(ClipError::OutOfBounds {
                index,
                limit: self.frame_count,
            });
        }
        if self.failures.contains(&index) {
            return Err(ClipError::Decode {
                index,
                message: "injected failure".into(),
            });
        }
        let mut frame = Frame::zeros((FRAME_SIZE, FRAME_SIZE, 3));
        (self.generate)(index, &mut frame);
        Ok(frame)
    }
}
