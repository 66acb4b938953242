//! DVS event streams: the `.evt` codec, index-sliced frame integration and a
//! log-luminance event simulator.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "EVT1" | width u16 | height u16 | count u32 | count x (t u32 | x u16 | y u16 | p u8)
//! ```

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EVT1";
pub const HEADER_LEN: usize = 12;
pub const RECORD_LEN: usize = 9;

/// Floor applied to intensities before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("truncated header: {len} bytes, need {HEADER_LEN}")]
    TruncatedHeader { len: usize },
    #[error("truncated record at byte {offset}")]
    TruncatedRecord { offset: usize },
    #[error("{extra} trailing bytes after last record at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("coordinate ({x}, {y}) out of range for {width}x{height} sensor at byte {offset}")]
    CoordinateOutOfRange {
        offset: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("polarity byte {value} is not 0 or 1 at byte {offset}")]
    InvalidPolarity { offset: usize, value: u8 },
    #[error("timestamp decreases at byte {offset}")]
    NonMonotonicTimestamp { offset: usize },
    #[error("event {index} is invalid for a {width}x{height} sensor")]
    InvalidEvent { index: usize, width: u16, height: u16 },
    #[error("events are not sorted by timestamp at index {index}")]
    UnsortedEvents { index: usize },
    #[error("number of slices must be at least 1")]
    ZeroSlices,
    #[error("contrast threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("simulation needs at least two frames, got {0}")]
    EmptySequence(usize),
    #[error("frame {index} has shape {got:?}, expected {expected:?}")]
    FrameShape {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("frame {index} has a negative or non-finite intensity")]
    InvalidIntensity { index: usize },
    #[error("frame timestamps decrease at frame {index}")]
    UnorderedFrames { index: usize },
    #[error("sensor geometry {width}x{height} exceeds the u16 range")]
    GeometryTooLarge { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    /// Channel index used by frame tensors (0 = OFF, 1 = ON).
    pub fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds.
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u32, x: u16, y: u16, p: Polarity) -> Self {
        Event { t, x, y, p }
    }
}

/// Time-ordered events from a `width` x `height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self, EventError> {
        for (index, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EventError::InvalidEvent {
                    index,
                    width,
                    height,
                });
            }
        }
        if let Some(index) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(EventError::UnsortedEvents { index: index + 1 });
        }
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
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

    /// Time between first and last event in microseconds.
    pub fn duration(&self) -> u32 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }

    /// (OFF count, ON count).
    pub fn polarity_totals(&self) -> (usize, usize) {
        let on = self.events.iter().filter(|e| e.p == Polarity::On).count();
        (self.events.len() - on, on)
    }
}

pub fn encode_event_file(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_event_file(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(EventError::BadMagic { offset: 0 });
    }
    if bytes.len() < HEADER_LEN {
        return Err(EventError::TruncatedHeader { len: bytes.len() });
    }
    let width = u16_at(bytes, 4);
    let height = u16_at(bytes, 6);
    let count = u32_at(bytes, 8) as usize;

    let mut events = Vec::with_capacity(count.min((bytes.len() - HEADER_LEN) / RECORD_LEN));
    let mut last_t = 0u32;
    for i in 0..count {
        let offset = HEADER_LEN + i * RECORD_LEN;
        if offset + RECORD_LEN > bytes.len() {
            return Err(EventError::TruncatedRecord { offset });
        }
        let t = u32_at(bytes, offset);
        let x = u16_at(bytes, offset + 4);
        let y = u16_at(bytes, offset + 6);
        let pb = bytes[offset + 8];
        if x >= width || y >= height {
            return Err(EventError::CoordinateOutOfRange {
                offset,
                x,
                y,
                width,
                height,
            });
        }
        let p = Polarity::from_bit(pb).ok_or(EventError::InvalidPolarity {
            offset: offset + 8,
            value: pb,
        })?;
        if i > 0 && t < last_t {
            return Err(EventError::NonMonotonicTimestamp { offset });
        }
        last_t = t;
        events.push(Event { t, x, y, p });
    }
    let end = HEADER_LEN + count * RECORD_LEN;
    if bytes.len() > end {
        return Err(EventError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    Ok(EventStream {
        width,
        height,
        events,
    })
}

/// Per-polarity event counts, laid out row-major as `[T, 2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    slices: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FrameTensor {
    pub fn zeros(slices: usize, height: usize, width: usize) -> Self {
        FrameTensor {
            slices,
            height,
            width,
            values: vec![0.0; slices * 2 * height * width],
        }
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.slices, 2, self.height, self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn index(&self, slice: usize, channel: usize, y: usize, x: usize) -> usize {
        ((slice * 2 + channel) * self.height + y) * self.width + x
    }

    pub fn get(&self, slice: usize, channel: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(slice, channel, y, x)]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Bins events into `slices` frames by event index: slice `j` takes events
/// `[floor(N/T)*j, floor(N/T)*(j+1))`. The trailing `N mod T` events are
/// dropped.
pub fn integrate_frames(stream: &EventStream, slices: usize) -> Result<FrameTensor, EventError> {
    if slices < 1 {
        return Err(EventError::ZeroSlices);
    }
    let mut frames = FrameTensor::zeros(
        slices,
        stream.height as usize,
        stream.width as usize,
    );
    let per_slice = stream.len() / slices;
    for j in 0..slices {
        for e in &stream.events[per_slice * j..per_slice * (j + 1)] {
            let at = frames.index(j, e.p.channel(), e.y as usize, e.x as usize);
            frames.values[at] += 1.0;
        }
    }
    Ok(frames)
}

/// A timestamped intensity image, row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuminanceFrame {
    pub t: u32,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LuminanceFrame {
    pub fn new(t: u32, height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width, "frame buffer size");
        LuminanceFrame {
            t,
            height,
            width,
            values,
        }
    }
}

fn log_intensity(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// Number of whole thresholds contained in `delta`, tolerant to rounding
/// right at a multiple of the threshold.
fn crossings(delta: f64, threshold: f64) -> u32 {
    let ratio = delta / threshold;
    (ratio + 1e-9).floor().max(0.0) as u32
}

/// Emits an event each time a pixel's log intensity moves a full contrast
/// threshold away from its reference level. The reference level starts at the
/// first frame and moves by one threshold per emitted event.
pub fn simulate_dvs(frames: &[LuminanceFrame], threshold: f64) -> Result<EventStream, EventError> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(EventError::NonPositiveThreshold(threshold));
    }
    if frames.len() < 2 {
        return Err(EventError::EmptySequence(frames.len()));
    }
    let (height, width) = (frames[0].height, frames[0].width);
    if width > u16::MAX as usize || height > u16::MAX as usize {
        return Err(EventError::GeometryTooLarge { width, height });
    }
    for (index, f) in frames.iter().enumerate() {
        if (f.height, f.width) != (height, width) || f.values.len() != height * width {
            return Err(EventError::FrameShape {
                index,
                got: (f.height, f.width),
                expected: (height, width),
            });
        }
        if f.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(EventError::InvalidIntensity { index });
        }
        if index > 0 && f.t < frames[index - 1].t {
            return Err(EventError::UnorderedFrames { index });
        }
    }

    let mut reference: Vec<f64> = frames[0].values.iter().map(|&v| log_intensity(v)).collect();
    let mut events = Vec::new();
    for frame in &frames[1..] {
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let delta = log_intensity(frame.values[i]) - reference[i];
                let (n, p) = if delta > 0.0 {
                    (crossings(delta, threshold), Polarity::On)
                } else {
                    (crossings(-delta, threshold), Polarity::Off)
                };
                if n == 0 {
                    continue;
                }
                let step = if p == Polarity::On { threshold } else { -threshold };
                reference[i] += step * n as f64;
                for _ in 0..n {
                    events.push(Event::new(frame.t, x as u16, y as u16, p));
                }
            }
        }
    }
    // Already grouped by frame and scanned in (y, x) order; the stable sort
    // makes the (t, y, x, p) ordering explicit.
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    Ok(EventStream {
        width: width as u16,
        height: height as u16,
        events,
    })
}
