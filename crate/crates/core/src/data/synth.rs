//! Moving-shape clips with exact masks and motion-class labels.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedClip, ClipTensor, Dataset, MaskVolume};
use crate::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Left,
    Right,
    Up,
    Down,
    DiagNe,
    DiagSw,
    Circular,
    Grow,
}

impl MotionClass {
    pub const ALL: [MotionClass; 8] = [
        MotionClass::Left,
        MotionClass::Right,
        MotionClass::Up,
        MotionClass::Down,
        MotionClass::DiagNe,
        MotionClass::DiagSw,
        MotionClass::Circular,
        MotionClass::Grow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Left => "left",
            MotionClass::Right => "right",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
            MotionClass::DiagNe => "diag_ne",
            MotionClass::DiagSw => "diag_sw",
            MotionClass::Circular => "circular",
            MotionClass::Grow => "grow",
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionClass::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown motion class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Solid,
    Gradient,
    Noise,
}

/// Generator settings. The background is static over a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub motion_classes: Vec<MotionClass>,
    pub frame_size: usize,
    pub frames: usize,
    pub channels: usize,
    pub background: Background,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_shapes: 1,
            shape_kinds: vec![ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle],
            motion_classes: MotionClass::ALL.to_vec(),
            frame_size: 64,
            frames: 16,
            channels: 3,
            background: Background::Noise,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_shapes == 0 {
            return Err(Error::Spec("num_shapes must be at least 1".into()));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Spec("shape_kinds must not be empty".into()));
        }
        if self.motion_classes.is_empty() {
            return Err(Error::Spec("motion_classes must not be empty".into()));
        }
        if self.frame_size < 8 || self.frames < 2 {
            return Err(Error::Spec(format!(
                "frame_size {} / frames {} too small",
                self.frame_size, self.frames
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Spec(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.motion_classes.len()
    }
}

/// Retries allowed while shrinking an amplitude that does not fit the frame.
const MAX_ATTEMPTS: usize = 8;
/// Background values stay inside this magnitude; shape colours stay outside
/// it, so every shape pixel differs from the background it covers.
const BG_LIMIT: f64 = 0.5;

struct Trajectory {
    centers: Vec<(f64, f64)>,
    half_sizes: Vec<f64>,
}

fn trajectory<R: Rng + ?Sized>(motion: MotionClass, spec: &SynthSpec, rng: &mut R) -> Result<Trajectory> {
    let f = spec.frame_size as f64;
    let t_count = spec.frames;
    let progress = |t: usize| t as f64 / (t_count - 1) as f64;
    let base_half = rng.random_range(0.125 * f..0.17 * f);
    let mut amplitude = rng.random_range(0.25 * f..0.375 * f);
    let phase = rng.random_range(0.0..2.0 * PI);
    for _ in 0..MAX_ATTEMPTS {
        let (offsets, half_sizes): (Vec<(f64, f64)>, Vec<f64>) = (0..t_count)
            .map(|t| {
                let s = progress(t);
                let diag = amplitude * s / 2f64.sqrt();
                match motion {
                    MotionClass::Left => ((-amplitude * s, 0.0), base_half),
                    MotionClass::Right => ((amplitude * s, 0.0), base_half),
                    MotionClass::Up => ((0.0, -amplitude * s), base_half),
                    MotionClass::Down => ((0.0, amplitude * s), base_half),
                    MotionClass::DiagNe => ((diag, -diag), base_half),
                    MotionClass::DiagSw => ((-diag, diag), base_half),
                    MotionClass::Circular => {
                        let r = amplitude / 2.0;
                        let a = phase + 1.5 * PI * s;
                        ((r * a.cos(), r * a.sin()), base_half)
                    }
                    MotionClass::Grow => ((0.0, 0.0), base_half * (0.6 + 0.8 * s)),
                }
            })
            .unzip();
        let lo = |axis: fn(&(f64, f64)) -> f64| {
            offsets
                .iter()
                .zip(&half_sizes)
                .map(|(o, h)| h - axis(o))
                .fold(f64::MIN, f64::max)
        };
        let hi = |axis: fn(&(f64, f64)) -> f64| {
            offsets
                .iter()
                .zip(&half_sizes)
                .map(|(o, h)| f - h - axis(o))
                .fold(f64::MAX, f64::min)
        };
        let (x_lo, x_hi) = (lo(|o| o.0), hi(|o| o.0));
        let (y_lo, y_hi) = (lo(|o| o.1), hi(|o| o.1));
        if x_lo <= x_hi && y_lo <= y_hi {
            let cx = if x_lo < x_hi { rng.random_range(x_lo..x_hi) } else { x_lo };
            let cy = if y_lo < y_hi { rng.random_range(y_lo..y_hi) } else { y_lo };
            return Ok(Trajectory {
                centers: offsets.iter().map(|o| (cx + o.0, cy + o.1)).collect(),
                half_sizes,
            });
        }
        amplitude *= 0.8;
    }
    Err(Error::Spec(format!(
        "motion {motion} cannot stay inside a {}px frame",
        spec.frame_size
    )))
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, half: f64) -> bool {
    match kind {
        ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
        ShapeKind::Circle => dx * dx + dy * dy <= half * half,
        // Apex up, base down.
        ShapeKind::Triangle => dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0,
    }
}

fn background<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<f32> {
    let (n, c) = (spec.frame_size, spec.channels);
    let color = |rng: &mut R| -> Vec<f64> { (0..c).map(|_| rng.random_range(-BG_LIMIT..BG_LIMIT)).collect() };
    match spec.background {
        Background::Solid => {
            let col = color(rng);
            (0..n * n).flat_map(|_| col.iter().map(|&v| v as f32)).collect()
        }
        Background::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let mut out = Vec::with_capacity(n * n * c);
            for y in 0..n {
                for x in 0..n {
                    let s = (x + y) as f64 / (2 * (n - 1)) as f64;
                    out.extend(a.iter().zip(&b).map(|(&p, &q)| (p + (q - p) * s) as f32));
                }
            }
            out
        }
        Background::Noise => (0..n * n * c)
            .map(|_| rng.random_range(-BG_LIMIT..BG_LIMIT) as f32)
            .collect(),
    }
}

/// Renders one clip of the motion class `spec.motion_classes[class_idx]`.
/// The mask is exactly the rendered shape support.
pub fn synth_clip<R: Rng + ?Sized>(spec: &SynthSpec, class_idx: usize, rng: &mut R) -> Result<AnnotatedClip> {
    spec.validate()?;
    let motion = *spec.motion_classes.get(class_idx).ok_or_else(|| {
        Error::Spec(format!(
            "class index {class_idx} outside {} motion classes",
            spec.motion_classes.len()
        ))
    })?;
    let (t_count, n, c) = (spec.frames, spec.frame_size, spec.channels);
    let bg = background(spec, rng);
    let mut shapes = Vec::with_capacity(spec.num_shapes);
    for _ in 0..spec.num_shapes {
        let kind = spec.shape_kinds[rng.random_range(0..spec.shape_kinds.len())];
        let color: Vec<f32> = (0..c)
            .map(|_| {
                let mag = rng.random_range(0.7..0.95);
                if rng.random_bool(0.5) { mag } else { -mag }
            })
            .collect();
        shapes.push((kind, color, trajectory(motion, spec, rng)?));
    }
    let mut values = Vec::with_capacity(t_count * n * n * c);
    let mut mask = vec![0u8; t_count * n * n];
    for t in 0..t_count {
        let mut frame = bg.clone();
        for (kind, color, traj) in &shapes {
            let (cx, cy) = traj.centers[t];
            let half = traj.half_sizes[t];
            for y in 0..n {
                for x in 0..n {
                    if inside(*kind, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, half) {
                        let p = y * n + x;
                        frame[p * c..(p + 1) * c].copy_from_slice(color);
                        mask[t * n * n + p] = 1;
                    }
                }
            }
        }
        values.extend(frame);
    }
    let clip = ClipTensor::new([t_count, n, n, c], values)?;
    let mask = MaskVolume::new([t_count, n, n], mask)?;
    AnnotatedClip::new(clip, Some(mask), Some(class_idx), format!("synth-{}", motion))
}

/// Lazily rendered, balanced synthetic dataset. Item `i` has class
/// `i % num_classes` and is generated from a seed derived from
/// `(spec.seed, i)`, so any item can be produced independently.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    spec: SynthSpec,
    clips_per_class: usize,
}

impl SynthDataset {
    pub fn new(spec: SynthSpec, clips_per_class: usize) -> Result<Self> {
        spec.validate()?;
        if clips_per_class == 0 {
            return Err(Error::Spec("clips_per_class must be at least 1".into()));
        }
        Ok(SynthDataset {
            spec,
            clips_per_class,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }
}

impl Dataset for SynthDataset {
    fn len(&self) -> usize {
        self.clips_per_class * self.spec.num_classes()
    }

    fn get(&self, index: usize) -> Result<AnnotatedClip> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, index as u64));
        let mut item = synth_clip(&self.spec, index % self.spec.num_classes(), &mut rng)?;
        item.source_id = self.source_id(index);
        Ok(item)
    }

    fn source_id(&self, index: usize) -> String {
        format!("synth-{:016x}-{index:06}", self.spec.seed)
    }

    fn label(&self, index: usize) -> Option<usize> {
        Some(index % self.spec.num_classes())
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.spec.num_classes())
    }

    fn clip_dims(&self) -> [usize; 4] {
        [
            self.spec.frames,
            self.spec.frame_size,
            self.spec.frame_size,
            self.spec.channels,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::label_histogram;

    fn centroid_x(mask: &MaskVolume, t: usize) -> f64 {
        let w = mask.dims()[2];
        let (sum, count) = mask
            .frame(t)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .fold((0.0, 0.0), |(s, n), (i, _)| (s + (i % w) as f64, n + 1.0));
        sum / count
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SynthSpec::default();
        let a = synth_clip(&spec, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = synth_clip(&spec, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rightward_centroid_strictly_increases() {
        let spec = SynthSpec::default();
        let right = spec.motion_classes.iter().position(|&m| m == MotionClass::Right).unwrap();
        for seed in 0..20 {
            let item = synth_clip(&spec, right, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mask = item.mask.unwrap();
            let xs: Vec<f64> = (0..spec.frames).map(|t| centroid_x(&mask, t)).collect();
            assert!(xs.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {xs:?}");
        }
    }

    #[test]
    fn mask_marks_exactly_the_pixels_that_differ_from_background() {
        for background in [Background::Solid, Background::Gradient, Background::Noise] {
            let spec = SynthSpec {
                background,
                num_shapes: 2,
                ..SynthSpec::default()
            };
            for class in 0..spec.num_classes() {
                let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
                let item = synth_clip(&spec, class, &mut rng).unwrap();
                // Re-draw the background from the same stream position.
                let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
                let bg = super::background(&spec, &mut rng);
                let mask = item.mask.unwrap();
                let c = spec.channels;
                let plane = spec.frame_size * spec.frame_size;
                for t in 0..spec.frames {
                    let frame = &item.clip.values()[t * plane * c..(t + 1) * plane * c];
                    for p in 0..plane {
                        let differs = frame[p * c..(p + 1) * c] != bg[p * c..(p + 1) * c];
                        assert_eq!(differs, mask.frame(t)[p] == 1);
                    }
                }
            }
        }
    }

    #[test]
    fn every_class_stays_inside_the_frame() {
        let spec = SynthSpec::default();
        for class in 0..spec.num_classes() {
            for seed in 0..10 {
                let item = synth_clip(&spec, class, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let mask = item.mask.unwrap();
                let areas: Vec<usize> = (0..spec.frames).map(|t| mask.foreground_area(t)).collect();
                assert!(areas.iter().all(|&a| a > 0), "class {class} lost its shape");
                if spec.motion_classes[class] != MotionClass::Grow {
                    // A shape clipped by the border would lose area.
                    let (lo, hi) = (areas.iter().min().unwrap(), areas.iter().max().unwrap());
                    assert!((*hi as f64) < 1.3 * *lo as f64, "class {class}: {areas:?}");
                }
            }
        }
    }

    #[test]
    fn bad_class_index_and_tiny_frames_are_spec_errors() {
        let spec = SynthSpec::default();
        assert!(matches!(
            synth_clip(&spec, 8, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Spec(_))
        ));
        let empty = SynthSpec {
            motion_classes: vec![],
            ..SynthSpec::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let spec = SynthSpec {
            frame_size: 16,
            frames: 4,
            ..SynthSpec::default()
        };
        let ds = SynthDataset::new(spec, 5).unwrap();
        assert_eq!(ds.len(), 40);
        let hist = label_histogram(&ds);
        assert!(hist.values().all(|&n| n == 5));
        assert_eq!(hist.len(), 8);
        assert_eq!(ds.get(17).unwrap(), ds.get(17).unwrap());
        assert_ne!(ds.get(17).unwrap().clip, ds.get(25).unwrap().clip);
    }

    #[test]
    fn motion_names_round_trip() {
        for m in MotionClass::ALL {
            assert_eq!(m.name().parse::<MotionClass>().unwrap(), m);
        }
    }
}
