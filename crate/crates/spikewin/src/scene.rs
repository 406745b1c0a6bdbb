//! Synthetic scenes: solid rectangles gliding over a flat background,
//! rendered at a fixed frame rate with exact box labels. Motion between
//! frames is what drives the event simulator, texture is what the dense
//! branch sees, so one scene exercises both modalities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{voxelize, EventStream, FrameSequence};
use crate::model::{Sample, TargetBox};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct SceneObject {
    /// Top-left corner at t = 0, pixels.
    pub x: f64,
    pub y: f64,
    /// Size in pixels.
    pub w: f64,
    pub h: f64,
    /// Velocity, pixels per second.
    pub vx: f64,
    pub vy: f64,
    /// Solid RGB fill, each in [0, 1].
    pub color: [f64; 3],
}

impl SceneObject {
    /// Top-left corner at time `t_s`.
    pub fn at(&self, t_s: f64) -> (f64, f64) {
        (self.x + self.vx * t_s, self.y + self.vy * t_s)
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub duration_s: f64,
    pub frame_hz: f64,
    /// Log-intensity step for the event simulator.
    pub threshold: f64,
    /// Background gray level.
    pub background: f64,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Seeded scene with `count` rectangles. Start and end positions are
    /// drawn inside the canvas and the velocity interpolates between
    /// them, so linear motion keeps every object in-frame for the whole
    /// duration by construction.
    pub fn random(
        height: usize,
        width: usize,
        count: usize,
        duration_s: f64,
        seed: u64,
    ) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let w = rng.gen_range(width as f64 / 6.0..=width as f64 / 3.0).max(1.0);
            let h = rng.gen_range(height as f64 / 6.0..=height as f64 / 3.0).max(1.0);
            let x0 = rng.gen_range(0.0..=(width as f64 - w));
            let y0 = rng.gen_range(0.0..=(height as f64 - h));
            let x1 = rng.gen_range(0.0..=(width as f64 - w));
            let y1 = rng.gen_range(0.0..=(height as f64 - h));
            let color = [
                rng.gen_range(0.35..=1.0),
                rng.gen_range(0.35..=1.0),
                rng.gen_range(0.35..=1.0),
            ];
            objects.push(SceneObject {
                x: x0,
                y: y0,
                w,
                h,
                vx: (x1 - x0) / duration_s,
                vy: (y1 - y0) / duration_s,
                color,
            });
        }
        let spec = SceneSpec {
            height,
            width,
            duration_s,
            frame_hz: 20.0,
            threshold: 0.25,
            background: 0.1,
            objects,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene canvas must be non-empty"));
        }
        if !(self.duration_s > 0.0) || !(self.frame_hz > 0.0) {
            return Err(Error::config(format!(
                "scene needs positive duration and frame rate, got {} s at {} Hz",
                self.duration_s, self.frame_hz
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config(format!(
                "event threshold {} must be positive",
                self.threshold
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.w < 1.0 || o.h < 1.0 {
                return Err(Error::config(format!(
                    "object {i} smaller than one pixel ({} x {})",
                    o.w, o.h
                )));
            }
            // linear motion: checking both endpoints bounds the whole path
            for t in [0.0, self.duration_s] {
                let (x, y) = o.at(t);
                if x < 0.0
                    || y < 0.0
                    || x + o.w > self.width as f64
                    || y + o.h > self.height as f64
                {
                    return Err(Error::config(format!(
                        "object {i} leaves the canvas at t={t} s"
                    )));
                }
            }
            for c in o.color {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::config(format!(
                        "object {i} color component {c} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Frames at t = 0, 1/hz, 2/hz, … strictly inside the duration.
    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.frame_hz).round() as usize
    }

    pub fn dt_us(&self) -> i64 {
        (1.0e6 / self.frame_hz).round() as i64
    }

    /// H·W·3 interleaved RGB at time `t_s`. A pixel belongs to a
    /// rectangle when its center falls inside; later objects paint over
    /// earlier ones.
    pub fn render_frame(&self, t_s: f64) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut img = vec![self.background; h * w * 3];
        for o in &self.objects {
            let (ox, oy) = o.at(t_s);
            let x_lo = (ox - 0.5).ceil().max(0.0) as usize;
            let y_lo = (oy - 0.5).ceil().max(0.0) as usize;
            let x_hi = ((ox + o.w - 0.5).ceil() as usize).min(w);
            let y_hi = ((oy + o.h - 0.5).ceil() as usize).min(h);
            for py in y_lo..y_hi {
                for px in x_lo..x_hi {
                    let base = (py * w + px) * 3;
                    img[base..base + 3].copy_from_slice(&o.color);
                }
            }
        }
        img
    }

    /// Normalized center-format labels at time `t_s`, one per object.
    pub fn boxes_at(&self, t_s: f64) -> Vec<TargetBox> {
        self.objects
            .iter()
            .map(|o| {
                let (x, y) = o.at(t_s);
                TargetBox {
                    cx: (x + o.w / 2.0) / self.width as f64,
                    cy: (y + o.h / 2.0) / self.height as f64,
                    w: o.w / self.width as f64,
                    h: o.h / self.height as f64,
                }
            })
            .collect()
    }

    /// Render every frame with its labels.
    pub fn render(&self) -> Result<(FrameSequence, Vec<Vec<TargetBox>>)> {
        self.validate()?;
        let mut seq = FrameSequence::new(self.width as u16, self.height as u16, 0, self.dt_us())?;
        let mut boxes = Vec::new();
        for i in 0..self.frame_count() {
            let t_us = i as i64 * self.dt_us();
            let t_s = t_us as f64 / 1.0e6;
            seq.push_frame(self.render_frame(t_s))?;
            boxes.push(self.boxes_at(t_s));
        }
        Ok((seq, boxes))
    }
}

/// Interleaved frame `idx` as a channel-planar `[3, H, W]` tensor.
pub fn frame_chw<R: Real>(frames: &FrameSequence, idx: usize) -> Result<Tensor<R>> {
    let (h, w) = (frames.height() as usize, frames.width() as usize);
    let src = frames.frame(idx);
    let mut data = vec![R::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = R::of(src[(y * w + x) * 3 + c]);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// One training sample per frame after the first: the frame itself plus
/// the events of the preceding inter-frame gap, voxelized into `t_bins`.
pub fn training_samples<R: Real>(
    frames: &FrameSequence,
    boxes: &[Vec<TargetBox>],
    stream: &EventStream,
    t_bins: usize,
) -> Result<Vec<Sample<R>>> {
    if frames.len() != boxes.len() {
        return Err(Error::shape(format!(
            "{} frames vs {} label sets",
            frames.len(),
            boxes.len()
        )));
    }
    if frames.len() < 2 {
        return Err(Error::config("need at least two frames to form a sample"));
    }
    let mut out = Vec::with_capacity(frames.len() - 1);
    for i in 1..frames.len() {
        let (start, end) = (frames.timestamp_us(i - 1), frames.timestamp_us(i));
        let voxels = voxelize(stream, start, end, t_bins)?;
        out.push(Sample {
            frame: frame_chw::<R>(frames, i)?,
            voxels: Some(voxels),
            boxes: boxes[i].clone(),
        });
    }
    Ok(out)
}
