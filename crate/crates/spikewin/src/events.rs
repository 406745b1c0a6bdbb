//! Event-camera data model: synthetic event generation from frame
//! sequences, voxelization into timestep bins, sliding-window sampling for
//! asynchronous inference, and file I/O.
//!
//! Timestamps are integer microseconds throughout, so window arithmetic is
//! exact. The generator keeps a per-pixel residual log-intensity ledger:
//! each frame transition emits `floor(|accumulated| / theta)` events of the
//! matching polarity and carries the remainder forward, which is the
//! standard discrete extension of a single-crossing threshold rule.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{narrow, Real, Tensor};

/// Default generation threshold on log intensity.
pub const DEFAULT_THETA: f64 = 0.2;
/// Default sliding-window length: 0.05 s.
pub const WINDOW_LEN_US: i64 = 50_000;
/// Default sliding-window stride: 0.0125 s (an 80 Hz output rate).
pub const WINDOW_STRIDE_US: i64 = 12_500;
/// Default frame rate: 20 Hz.
pub const FRAME_DT_US: i64 = 50_000;

/// One polarity event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds.
    pub t: i64,
    pub x: u16,
    pub y: u16,
    /// +1 or -1.
    pub p: i8,
}

/// An ordered event sequence with its sensor geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
    /// Present when the stream came from the synthetic generator.
    pub theta: Option<f64>,
}

impl EventStream {
    pub fn new(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
            theta: None,
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First/last timestamp, if any events exist.
    pub fn span(&self) -> Option<(i64, i64)> {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => Some((a.t, b.t)),
            _ => None,
        }
    }

    /// Append an event, enforcing bounds and time ordering.
    pub fn push(&mut self, ev: Event) -> Result<()> {
        if ev.x >= self.width || ev.y >= self.height {
            return Err(Error::shape(format!(
                "event at ({}, {}) outside {}x{} sensor",
                ev.x, ev.y, self.width, self.height
            )));
        }
        if ev.p != 1 && ev.p != -1 {
            return Err(Error::Domain(format!("event polarity {} not in {{-1, 1}}", ev.p)));
        }
        if let Some(last) = self.events.last() {
            if ev.t < last.t {
                return Err(Error::Ordering(format!(
                    "event timestamp {} after {}",
                    ev.t, last.t
                )));
            }
        }
        self.events.push(ev);
        Ok(())
    }
}

/// Fixed-rate RGB frames with intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct FrameSequence {
    width: u16,
    height: u16,
    t0: i64,
    dt: i64,
    /// Row-major H*W*3 per frame.
    frames: Vec<Vec<f64>>,
}

impl FrameSequence {
    pub fn new(width: u16, height: u16, t0_us: i64, dt_us: i64) -> Result<Self> {
        if dt_us <= 0 {
            return Err(Error::config(format!("frame spacing {dt_us} us must be positive")));
        }
        Ok(FrameSequence {
            width,
            height,
            t0: t0_us,
            dt: dt_us,
            frames: Vec::new(),
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt_us(&self) -> i64 {
        self.dt
    }

    pub fn timestamp_us(&self, idx: usize) -> i64 {
        self.t0 + self.dt * idx as i64
    }

    pub fn frame(&self, idx: usize) -> &[f64] {
        &self.frames[idx]
    }

    pub fn push_frame(&mut self, rgb: Vec<f64>) -> Result<()> {
        let want = self.width as usize * self.height as usize * 3;
        if rgb.len() != want {
            return Err(Error::shape(format!(
                "frame has {} values, sensor {}x{} needs {}",
                rgb.len(),
                self.width,
                self.height,
                want
            )));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("frame intensity outside [0, 1]".into()));
        }
        self.frames.push(rgb);
        Ok(())
    }

    /// Grayscale frame as a (1, H, W) tensor (mean of RGB).
    pub fn luma_tensor<R: Real>(&self, idx: usize) -> Tensor<R> {
        let (w, h) = (self.width as usize, self.height as usize);
        let f = &self.frames[idx];
        let lum: Vec<f64> = (0..h * w)
            .map(|i| (f[3 * i] + f[3 * i + 1] + f[3 * i + 2]) / 3.0)
            .collect();
        Tensor::new(&[1, h, w], narrow(&lum)).expect("sized by construction")
    }
}

/// Count/remainder step of the residual ledger: how many threshold
/// multiples a carried log-intensity change crosses, and what remains.
pub fn ledger_emit(acc: f64, theta: f64) -> (u32, f64) {
    let n = (acc.abs() / theta).floor();
    let residual = acc - acc.signum() * n * theta;
    (n as u32, residual)
}

/// Generate events from a frame sequence by thresholded log-intensity
/// change with per-pixel residual carry. Timestamps interpolate linearly
/// between the two frame times at the threshold-crossing points.
pub fn simulate_events(frames: &FrameSequence, theta: f64) -> Result<EventStream> {
    if theta <= 0.0 || !theta.is_finite() {
        return Err(Error::config(format!("threshold {theta} must be positive")));
    }
    if frames.len() < 2 {
        return Err(Error::config(format!(
            "event generation needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = (frames.width() as usize, frames.height() as usize);
    let mut stream = EventStream::new(frames.width(), frames.height());
    stream.theta = Some(theta);

    let log_lum = |frame: &[f64], i: usize| -> f64 {
        let lum = (frame[3 * i] + frame[3 * i + 1] + frame[3 * i + 2]) / 3.0;
        lum.max(1e-3).ln()
    };

    let mut prev_log: Vec<f64> = (0..h * w).map(|i| log_lum(frames.frame(0), i)).collect();
    let mut residual = vec![0.0f64; h * w];
    let mut scratch: Vec<Event> = Vec::new();

    for k in 1..frames.len() {
        scratch.clear();
        let t_prev = frames.timestamp_us(k - 1);
        let dt = (frames.timestamp_us(k) - t_prev) as f64;
        let cur = frames.frame(k);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let cur_log = log_lum(cur, i);
                let acc = residual[i] + (cur_log - prev_log[i]);
                let (n, rem) = ledger_emit(acc, theta);
                if n > 0 {
                    let pol: i8 = if acc >= 0.0 { 1 } else { -1 };
                    // crossing j sits where the linear ledger path passes
                    // the j-th threshold multiple
                    let d = acc - residual[i];
                    for j in 1..=n {
                        let level = pol as f64 * j as f64 * theta;
                        let alpha = ((level - residual[i]) / d).clamp(0.0, 1.0);
                        scratch.push(Event {
                            t: t_prev + (dt * alpha).round() as i64,
                            x: x as u16,
                            y: y as u16,
                            p: pol,
                        });
                    }
                }
                residual[i] = rem;
                prev_log[i] = cur_log;
            }
        }
        scratch.sort_by_key(|e| (e.t, e.y, e.x, e.p));
        for &ev in &scratch {
            stream.push(ev)?;
        }
    }
    Ok(stream)
}

/// T-bin, 2-polarity-channel spatial event histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    t_bins: usize,
    height: usize,
    width: usize,
    /// Row-major T*2*H*W.
    data: Vec<f64>,
    pub start_us: i64,
    pub end_us: i64,
    /// Events outside the interval, skipped rather than rejected.
    pub ignored: usize,
}

impl VoxelGrid {
    pub fn t_bins(&self) -> usize {
        self.t_bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, bin: usize, channel: usize, y: usize, x: usize) -> f64 {
        self.data[((bin * 2 + channel) * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Divide by the max cell value (no-op on an empty grid).
    pub fn normalize_max(&mut self) {
        let mx = self.data.iter().cloned().fold(0.0f64, f64::max);
        if mx > 0.0 {
            for v in &mut self.data {
                *v /= mx;
            }
        }
    }

    /// One timestep as a (2, H, W) tensor.
    pub fn bin_tensor<R: Real>(&self, bin: usize) -> Tensor<R> {
        let plane = 2 * self.height * self.width;
        let slice = &self.data[bin * plane..(bin + 1) * plane];
        Tensor::new(&[2, self.height, self.width], narrow(slice)).expect("sized by construction")
    }
}

/// Histogram the events of `[start_us, end_us]` into `t_bins` time bins.
/// The bin index is `floor(t_bins * (t - start) / len)`, clamped onto the
/// last bin at the right edge; polarity +1 fills channel 0, -1 channel 1.
pub fn voxelize(
    stream: &EventStream,
    start_us: i64,
    end_us: i64,
    t_bins: usize,
) -> Result<VoxelGrid> {
    if t_bins == 0 {
        return Err(Error::config("voxelize needs at least one time bin"));
    }
    if end_us <= start_us {
        return Err(Error::config(format!(
            "empty voxelize interval [{start_us}, {end_us}]"
        )));
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut grid = VoxelGrid {
        t_bins,
        height: h,
        width: w,
        data: vec![0.0; t_bins * 2 * h * w],
        start_us,
        end_us,
        ignored: 0,
    };
    let len = (end_us - start_us) as i128;
    for ev in stream.events() {
        if ev.t < start_us || ev.t > end_us {
            grid.ignored += 1;
            continue;
        }
        let rel = (ev.t - start_us) as i128;
        let mut bin = (t_bins as i128 * rel / len) as usize;
        if bin >= t_bins {
            bin = t_bins - 1;
        }
        let ch = if ev.p > 0 { 0 } else { 1 };
        grid.data[((bin * 2 + ch) * h + ev.y as usize) * w + ev.x as usize] += 1.0;
    }
    Ok(grid)
}

/// Window start/end pairs covering the stream: starts at the first event
/// time, advancing by `stride_us` while the full window still fits.
pub fn sliding_windows(
    stream: &EventStream,
    length_us: i64,
    stride_us: i64,
) -> Result<Vec<(i64, i64)>> {
    if stride_us <= 0 {
        return Err(Error::config(format!("window stride {stride_us} us must be positive")));
    }
    if length_us < stride_us {
        return Err(Error::config(format!(
            "window length {length_us} us shorter than stride {stride_us} us"
        )));
    }
    let mut out = Vec::new();
    let Some((t0, t1)) = stream.span() else {
        return Ok(out);
    };
    let mut start = t0;
    while start + length_us <= t1 {
        out.push((start, start + length_us));
        start += stride_us;
    }
    Ok(out)
}

// ---- event file I/O ---------------------------------------------------
//
// Text format: header line `w,h`, then one `t_us,x,y,p` line per event in
// ascending time with p in {-1, 1}.

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{},{}", stream.width(), stream.height())?;
    for ev in stream.events() {
        writeln!(out, "{},{},{},{}", ev.t, ev.x, ev.y, ev.p)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing `w,h` header".into(),
    })?;
    let parse_u16 = |s: &str, line: usize, what: &str| -> Result<u16> {
        s.trim().parse::<u16>().map_err(|_| Error::Parse {
            line,
            msg: format!("bad {what} '{s}'"),
        })
    };
    let mut hp = header.split(',');
    let (ws, hs) = (hp.next().unwrap_or(""), hp.next().unwrap_or(""));
    if hp.next().is_some() {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be exactly `w,h`".into(),
        });
    }
    let width = parse_u16(ws, 1, "width")?;
    let height = parse_u16(hs, 1, "height")?;
    let mut stream = EventStream::new(width, height);

    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected `t_us,x,y,p`, got '{raw}'"),
            });
        }
        let t: i64 = fields[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad timestamp '{}'", fields[0]),
        })?;
        let x = parse_u16(fields[1], line, "x")?;
        let y = parse_u16(fields[2], line, "y")?;
        let p: i8 = fields[3].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad polarity '{}'", fields[3]),
        })?;
        if p != 1 && p != -1 {
            return Err(Error::Parse {
                line,
                msg: format!("polarity {p} not in {{-1, 1}}"),
            });
        }
        if x >= width || y >= height {
            return Err(Error::Parse {
                line,
                msg: format!("pixel ({x}, {y}) outside {width}x{height} sensor"),
            });
        }
        stream.push(Event { t, x, y, p })?;
    }
    Ok(stream)
}

// ---- frame file I/O -----------------------------------------------------
//
// Frames are binary PPM (P6) files named by an index file holding one
// `timestamp_us,path` line each; paths are relative to the index file.

pub fn write_frames(dir: &Path, index_name: &str, frames: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(fs::File::create(dir.join(index_name))?);
    for k in 0..frames.len() {
        let name = format!("frame_{k:05}.ppm");
        let mut f = BufWriter::new(fs::File::create(dir.join(&name))?);
        write!(f, "P6\n{} {}\n255\n", frames.width(), frames.height())?;
        let bytes: Vec<u8> = frames
            .frame(k)
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        f.flush()?;
        writeln!(index, "{},{}", frames.timestamp_us(k), name)?;
    }
    index.flush()?;
    Ok(())
}

pub fn read_frames(index_path: &Path) -> Result<FrameSequence> {
    let text = fs::read_to_string(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<(i64, PathBuf)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (ts, path) = raw.split_once(',').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `timestamp_us,path`, got '{raw}'"),
        })?;
        let t: i64 = ts.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad timestamp '{ts}'"),
        })?;
        entries.push((t, base.join(path.trim())));
    }
    if entries.len() < 2 {
        return Err(Error::config(format!(
            "frame index {} lists {} frames; need at least 2",
            index_path.display(),
            entries.len()
        )));
    }
    let dt = entries[1].0 - entries[0].0;
    for pair in entries.windows(2) {
        if pair[1].0 - pair[0].0 != dt {
            return Err(Error::config(format!(
                "frame timestamps are not uniformly spaced ({} then {})",
                dt,
                pair[1].0 - pair[0].0
            )));
        }
    }
    let first = read_ppm(&entries[0].1)?;
    let mut frames = FrameSequence::new(first.0, first.1, entries[0].0, dt)?;
    frames.push_frame(first.2)?;
    for (_, path) in &entries[1..] {
        let (w, h, rgb) = read_ppm(path)?;
        if w != frames.width() || h != frames.height() {
            return Err(Error::shape(format!(
                "frame {} is {}x{}, sequence is {}x{}",
                path.display(),
                w,
                h,
                frames.width(),
                frames.height()
            )));
        }
        frames.push_frame(rgb)?;
    }
    Ok(frames)
}

fn read_ppm(path: &Path) -> Result<(u16, u16, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Parse {
        line: 1,
        msg: format!("{}: {msg}", path.display()),
    };
    // header: "P6" whitespace w whitespace h whitespace maxval single-ws
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                line: 1,
                msg: format!("{}: truncated header", path.display()),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6) file"));
    }
    let w: u16 = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: u16 = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = w as usize * h as usize * 3;
    if bytes.len() < pos + need {
        return Err(bad("pixel payload truncated"));
    }
    let rgb: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((w, h, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_frames(levels: &[f64], w: u16, h: u16) -> FrameSequence {
        let mut fs = FrameSequence::new(w, h, 0, FRAME_DT_US).unwrap();
        for &v in levels {
            fs.push_frame(vec![v; w as usize * h as usize * 3]).unwrap();
        }
        fs
    }

    #[test]
    fn ledger_rule_examples() {
        let (n, r) = ledger_emit(0.45, 0.2);
        assert_eq!(n, 2);
        assert!((r - 0.05).abs() < 1e-12);

        let (n, r) = ledger_emit(-0.2, 0.2);
        assert_eq!(n, 1);
        assert!(r.abs() < 1e-12);

        let (n, r) = ledger_emit(0.1, 0.2);
        assert_eq!(n, 0);
        assert!((r - 0.1).abs() < 1e-12);
    }

    #[test]
    fn constant_frames_emit_nothing() {
        let frames = gray_frames(&[0.5, 0.5, 0.5, 0.5], 4, 3);
        let stream = simulate_events(&frames, DEFAULT_THETA).unwrap();
        assert!(stream.is_empty());
    }

    #[test]
    fn log_step_event_count_and_residual_carry() {
        // single pixel jumping by +0.45 in log space: 2 events, then the
        // residual 0.05 plus another +0.15 crosses once more
        let i0 = 0.1f64;
        let i1 = i0 * (0.45f64).exp();
        let i2 = i1 * (0.15f64).exp();
        let frames = gray_frames(&[i0, i1, i2], 1, 1);
        let stream = simulate_events(&frames, 0.2).unwrap();
        let pols: Vec<i8> = stream.events().iter().map(|e| e.p).collect();
        assert_eq!(pols, vec![1, 1, 1]);
        // first two inside transition one, third inside transition two
        assert!(stream.events()[1].t <= FRAME_DT_US);
        assert!(stream.events()[2].t > FRAME_DT_US);
    }

    #[test]
    fn polarity_flips_with_direction() {
        let frames_up = gray_frames(&[0.1, 0.1 * (0.45f64).exp()], 1, 1);
        let frames_down = gray_frames(&[0.1 * (0.45f64).exp(), 0.1], 1, 1);
        let up = simulate_events(&frames_up, 0.2).unwrap();
        let down = simulate_events(&frames_down, 0.2).unwrap();
        assert_eq!(up.len(), down.len());
        assert!(up.events().iter().all(|e| e.p == 1));
        assert!(down.events().iter().all(|e| e.p == -1));
    }

    #[test]
    fn bad_threshold_rejected() {
        let frames = gray_frames(&[0.5, 0.6], 1, 1);
        assert!(matches!(simulate_events(&frames, 0.0), Err(Error::Config(_))));
        assert!(matches!(simulate_events(&frames, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn dark_pixels_are_clamped_before_log() {
        let frames = gray_frames(&[0.0, 0.0], 2, 2);
        let stream = simulate_events(&frames, 0.2).unwrap();
        assert!(stream.is_empty());
    }

    #[test]
    fn voxel_counts_concentrate_and_conserve() {
        let mut s = EventStream::new(4, 4);
        for _ in 0..3 {
            s.push(Event { t: 10, x: 1, y: 2, p: 1 }).unwrap();
        }
        let g = voxelize(&s, 0, 1000, 5).unwrap();
        assert_eq!(g.get(0, 0, 2, 1), 3.0);
        assert_eq!(g.sum(), 3.0);
        assert_eq!(g.ignored, 0);
    }

    #[test]
    fn right_edge_clamps_into_last_bin() {
        let mut s = EventStream::new(2, 2);
        s.push(Event { t: 1000, x: 0, y: 0, p: -1 }).unwrap();
        let g = voxelize(&s, 0, 1000, 4).unwrap();
        assert_eq!(g.get(3, 1, 0, 0), 1.0);
    }

    #[test]
    fn out_of_interval_events_are_counted_not_fatal() {
        let mut s = EventStream::new(2, 2);
        s.push(Event { t: 5, x: 0, y: 0, p: 1 }).unwrap();
        s.push(Event { t: 50, x: 0, y: 0, p: 1 }).unwrap();
        s.push(Event { t: 500, x: 0, y: 0, p: 1 }).unwrap();
        let g = voxelize(&s, 10, 100, 2).unwrap();
        assert_eq!(g.sum(), 1.0);
        assert_eq!(g.ignored, 2);
    }

    #[test]
    fn voxel_bins_match_histogram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = EventStream::new(8, 8);
        let mut ts: Vec<i64> = (0..200).map(|_| rng.gen_range(0..=10_000)).collect();
        ts.sort_unstable();
        let evs: Vec<Event> = ts
            .iter()
            .map(|&t| Event {
                t,
                x: rng.gen_range(0..8),
                y: rng.gen_range(0..8),
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        for &e in &evs {
            s.push(e).unwrap();
        }
        let t_bins = 7usize;
        let g = voxelize(&s, 0, 10_000, t_bins).unwrap();
        let mut oracle = vec![0.0f64; t_bins * 2 * 8 * 8];
        for e in &evs {
            let bin = ((t_bins as i64 * e.t / 10_000) as usize).min(t_bins - 1);
            let ch = if e.p > 0 { 0 } else { 1 };
            oracle[((bin * 2 + ch) * 8 + e.y as usize) * 8 + e.x as usize] += 1.0;
        }
        assert_eq!(g.data(), &oracle[..]);
    }

    #[test]
    fn window_starts_match_rate_arithmetic() {
        let mut s = EventStream::new(2, 2);
        s.push(Event { t: 0, x: 0, y: 0, p: 1 }).unwrap();
        s.push(Event { t: 100_000, x: 0, y: 0, p: 1 }).unwrap();
        let w = sliding_windows(&s, WINDOW_LEN_US, WINDOW_STRIDE_US).unwrap();
        let starts: Vec<i64> = w.iter().map(|&(a, _)| a).collect();
        assert_eq!(starts, vec![0, 12_500, 25_000, 37_500, 50_000]);
        assert!(w.iter().all(|&(a, b)| b - a == WINDOW_LEN_US));
    }

    #[test]
    fn stride_equal_length_tiles() {
        let mut s = EventStream::new(2, 2);
        s.push(Event { t: 0, x: 0, y: 0, p: 1 }).unwrap();
        s.push(Event { t: 30, x: 0, y: 0, p: 1 }).unwrap();
        let w = sliding_windows(&s, 10, 10).unwrap();
        assert_eq!(w, vec![(0, 10), (10, 20), (20, 30)]);
    }

    #[test]
    fn short_stream_yields_no_windows() {
        let mut s = EventStream::new(2, 2);
        s.push(Event { t: 0, x: 0, y: 0, p: 1 }).unwrap();
        s.push(Event { t: 49_000, x: 0, y: 0, p: 1 }).unwrap();
        let w = sliding_windows(&s, WINDOW_LEN_US, WINDOW_STRIDE_US).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn event_file_roundtrip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = EventStream::new(32, 24);
        let mut t = 0i64;
        for _ in 0..1000 {
            t += rng.gen_range(0..50);
            s.push(Event {
                t,
                x: rng.gen_range(0..32),
                y: rng.gen_range(0..24),
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            })
            .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.events");
        let p2 = dir.path().join("b.events");
        write_events(&p1, &s).unwrap();
        let back = read_events(&p1).unwrap();
        assert_eq!(back, s);
        write_events(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn header_only_file_is_an_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.events");
        fs::write(&p, "16,16\n").unwrap();
        let s = read_events(&p).unwrap();
        assert!(s.is_empty());
        assert_eq!((s.width(), s.height()), (16, 16));
    }

    #[test]
    fn zero_polarity_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.events");
        fs::write(&p, "4,4\n10,1,1,1\n20,2,2,0\n").unwrap();
        match read_events(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn timestamp_regression_is_an_ordering_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("regress.events");
        fs::write(&p, "4,4\n100,1,1,1\n50,1,1,1\n").unwrap();
        assert!(matches!(read_events(&p), Err(Error::Ordering(_))));
    }

    #[test]
    fn frame_files_roundtrip_to_quantization() {
        let mut frames = FrameSequence::new(6, 4, 1000, 50_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            frames
                .push_frame((0..6 * 4 * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), "index.txt", &frames).unwrap();
        let back = read_frames(&dir.path().join("index.txt")).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.timestamp_us(0), 1000);
        assert_eq!(back.dt_us(), 50_000);
        for k in 0..3 {
            for (a, b) in back.frame(k).iter().zip(frames.frame(k)) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }
}
