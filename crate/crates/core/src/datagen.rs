//! Deterministic synthetic videos, keyframes, thought videos and QA annotations.
//!
//! Each video shows one 3×3 bright block moving with integer velocity on a
//! `G×G` grid. Screen coordinates: `x` is the column, `y` the row, and
//! "down" means increasing `y`. With probability `event_prob` the block
//! turns once at an interior frame.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{Result, StormError};
use crate::model::Vocab;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "samples.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Frames per video (`T`).
    pub frames: usize,
    /// Grid side (`G`).
    pub grid: usize,
    pub channels: usize,
    pub block: usize,
    pub event_prob: f64,
    /// Thought-video sub-steps per original frame interval.
    pub density: usize,
    /// QA samples generated per source video (1..=4). Question kinds cycle
    /// over the sample index, independent of the video grouping.
    pub questions_per_video: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: 6,
            grid: 8,
            channels: 1,
            block: 3,
            event_prob: 0.5,
            density: 2,
            questions_per_video: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(StormError::Config(m.to_string()));
        if self.frames < 2 {
            return fail("need at least 2 frames");
        }
        if self.grid < 4 {
            return fail("grid must be at least 4");
        }
        if self.block == 0 || self.block > self.grid {
            return fail("block does not fit the grid");
        }
        if self.channels == 0 {
            return fail("channels must be positive");
        }
        if !(0.0..=1.0).contains(&self.event_prob) {
            return fail("event_prob must lie in [0, 1]");
        }
        if self.density == 0 {
            return fail("density must be at least 1");
        }
        if !(1..=QuestionKind::ALL.len()).contains(&self.questions_per_video) {
            return fail("questions_per_video must be in 1..=4");
        }
        Ok(())
    }
}

pub type Pos = (i32, i32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Top-left corner of the block in frame 0.
    pub start: Pos,
    pub velocity_before: Pos,
    /// Equal to `velocity_before` when there is no event.
    pub velocity_after: Pos,
    pub event_frame: Option<usize>,
}

impl MotionSpec {
    /// Block positions for `frames` frames. Velocity switches after the
    /// event frame; a component that would leave `[0, grid-block]` reflects.
    pub fn positions(&self, frames: usize, grid: usize, block: usize) -> Vec<Pos> {
        let hi = (grid - block) as i32;
        let mut p = self.start;
        let mut v = self.velocity_before;
        let mut switched = false;
        let mut out = Vec::with_capacity(frames);
        out.push(p);
        for t in 1..frames {
            if !switched && self.event_frame.is_some_and(|e| t > e) {
                v = self.velocity_after;
                switched = true;
            }
            let mut next = (p.0 + v.0, p.1 + v.1);
            if next.0 < 0 || next.0 > hi {
                next.0 = if next.0 < 0 { -next.0 } else { 2 * hi - next.0 };
                v.0 = -v.0;
            }
            if next.1 < 0 || next.1 > hi {
                next.1 = if next.1 < 0 { -next.1 } else { 2 * hi - next.1 };
                v.1 = -v.1;
            }
            p = next;
            out.push(p);
        }
        out
    }

    /// Plain-text teacher plan that conditions thought-video rendering.
    pub fn teacher_plan(&self) -> String {
        let mut s = format!(
            "start at column {} row {}; move {}",
            self.start.0,
            self.start.1,
            direction_name(self.velocity_before)
        );
        if let Some(e) = self.event_frame {
            s.push_str(&format!("; at frame {e} turn {}", direction_name(self.velocity_after)));
        }
        s
    }
}

/// Direction word for a nonzero velocity under screen coordinates.
pub fn direction_name(v: Pos) -> &'static str {
    if v.0.abs() >= v.1.abs() {
        if v.0 > 0 {
            "right"
        } else {
            "left"
        }
    } else if v.1 > 0 {
        "down"
    } else {
        "up"
    }
}

fn axis_name(v: Pos) -> char {
    if v.0 != 0 {
        'h'
    } else {
        'v'
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QuestionKind {
    DirectionBefore,
    DirectionAfter,
    HasEvent,
    Order,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [
        QuestionKind::DirectionBefore,
        QuestionKind::DirectionAfter,
        QuestionKind::HasEvent,
        QuestionKind::Order,
    ];

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    /// Direction and event questions, the ones the accuracy target covers.
    pub fn is_direction_or_event(self) -> bool {
        !matches!(self, QuestionKind::Order)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::DirectionBefore => "DIRECTION_BEFORE",
            QuestionKind::DirectionAfter => "DIRECTION_AFTER",
            QuestionKind::HasEvent => "HAS_EVENT",
            QuestionKind::Order => "ORDER",
        }
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionKind {
    type Err = StormError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| StormError::Config(format!("unknown question kind {s:?}")))
    }
}

/// One `G×G×C` frame, row-major with interleaved channels; `255` is fully bright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame(pub Vec<u8>);

impl Frame {
    pub fn render(grid: usize, channels: usize, block: usize, at: Pos) -> Frame {
        let mut px = vec![0u8; grid * grid * channels];
        for row in 0..grid {
            for col in 0..grid {
                let (x, y) = (col as i32, row as i32);
                if x >= at.0 && x < at.0 + block as i32 && y >= at.1 && y < at.1 + block as i32 {
                    for c in 0..channels {
                        px[(row * grid + col) * channels + c] = 255;
                    }
                }
            }
        }
        Frame(px)
    }

    pub fn pixel(&self, grid: usize, channels: usize, row: usize, col: usize, ch: usize) -> u8 {
        self.0[(row * grid + col) * channels + ch]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaAnnotation {
    pub kind: QuestionKind,
    pub question: Vec<u32>,
    pub options: [u32; 4],
    pub answer: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub sample_id: u32,
    pub video_id: u32,
    pub seed: u64,
    pub grid: usize,
    pub channels: usize,
    pub block: usize,
    pub frames: Vec<Frame>,
    pub motion: MotionSpec,
    pub keyframes: Vec<usize>,
    pub thought_frames: Vec<Frame>,
    pub qa: QaAnnotation,
}

impl VideoSample {
    pub fn event_frame(&self) -> Option<usize> {
        self.motion.event_frame
    }

    pub fn keyframe_images(&self) -> Vec<&Frame> {
        self.keyframes.iter().map(|&k| &self.frames[k]).collect()
    }
}

const DIRECTIONS: [Pos; 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Renders one video (frames and motion only) from a per-video seed.
pub fn gen_video(seed: u64, config: &GenConfig) -> Result<VideoSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = config.frames;
    let before = DIRECTIONS[rng.gen_range(0..4)];
    let event = if t >= 3 && rng.gen_bool(config.event_prob) {
        let e = rng.gen_range(1..=t - 2);
        let others: Vec<Pos> = DIRECTIONS.iter().copied().filter(|&d| d != before).collect();
        Some((e, others[rng.gen_range(0..others.len())]))
    } else {
        None
    };
    let after = event.map_or(before, |(_, v)| v);

    // Offsets relative to the start, ignoring borders; the start is then drawn
    // so the whole path stays inside the grid and no reflection happens.
    let mut off = (0i32, 0i32);
    let (mut lo, mut hi) = ((0i32, 0i32), (0i32, 0i32));
    for step in 1..t {
        let v = match event {
            Some((e, _)) if step > e => after,
            _ => before,
        };
        off = (off.0 + v.0, off.1 + v.1);
        lo = (lo.0.min(off.0), lo.1.min(off.1));
        hi = (hi.0.max(off.0), hi.1.max(off.1));
    }
    let top = (config.grid - config.block) as i32;
    let (x_min, x_max) = (-lo.0, top - hi.0);
    let (y_min, y_max) = (-lo.1, top - hi.1);
    if x_min > x_max || y_min > y_max {
        return Err(StormError::Config(format!(
            "a {}-frame trajectory cannot fit a {}-wide grid with a {}-wide block",
            t, config.grid, config.block
        )));
    }
    let start = (rng.gen_range(x_min..=x_max), rng.gen_range(y_min..=y_max));
    let motion = MotionSpec {
        start,
        velocity_before: before,
        velocity_after: after,
        event_frame: event.map(|(e, _)| e),
    };
    Ok(render_video(seed, config, motion))
}

/// Builds a sample from an explicit motion specification.
pub fn render_video(seed: u64, config: &GenConfig, motion: MotionSpec) -> VideoSample {
    let frames = motion
        .positions(config.frames, config.grid, config.block)
        .into_iter()
        .map(|p| Frame::render(config.grid, config.channels, config.block, p))
        .collect();
    VideoSample {
        sample_id: 0,
        video_id: 0,
        seed,
        grid: config.grid,
        channels: config.channels,
        block: config.block,
        frames,
        motion,
        keyframes: Vec::new(),
        thought_frames: Vec::new(),
        qa: QaAnnotation {
            kind: QuestionKind::DirectionBefore,
            question: Vec::new(),
            options: [0; 4],
            answer: 0,
        },
    }
}

/// First frame, the turning frame (if any) and the last frame, sorted and unique.
pub fn select_keyframes(sample: &VideoSample) -> Vec<usize> {
    let last = sample.frames.len().saturating_sub(1);
    let mut k = vec![0, last];
    if let Some(e) = sample.event_frame() {
        k.push(e.min(last));
    }
    k.sort_unstable();
    k.dedup();
    k
}

/// Dense rendering of the true trajectory between the first and last keyframe,
/// `density` sub-steps per frame interval with positions rounded to the grid.
pub fn gen_thought_video(sample: &VideoSample, density: usize) -> Vec<Frame> {
    let density = density.max(1);
    let t = sample.frames.len();
    let pos = sample.motion.positions(t, sample.grid, sample.block);
    let (first, last) = match (sample.keyframes.first(), sample.keyframes.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, t - 1),
    };
    let mut out = Vec::with_capacity(density * (last - first) + 1);
    for i in first..last {
        let (a, b) = (pos[i], pos[i + 1]);
        for s in 0..density {
            let f = s as f64 / density as f64;
            let x = (a.0 as f64 + (b.0 - a.0) as f64 * f).round() as i32;
            let y = (a.1 as f64 + (b.1 - a.1) as f64 * f).round() as i32;
            out.push(Frame::render(sample.grid, sample.channels, sample.block, (x, y)));
        }
    }
    out.push(Frame::render(sample.grid, sample.channels, sample.block, pos[last]));
    out
}

fn words(vocab: &Vocab, w: &[&str]) -> Vec<u32> {
    w.iter().map(|s| vocab.expect(s)).collect()
}

/// Templated question, four options and the answer token.
pub fn gen_qa_sample(sample: &VideoSample, kind: QuestionKind) -> QaAnnotation {
    let v = Vocab::standard();
    let m = &sample.motion;
    let dirs = ["up", "down", "left", "right"];
    let (template, opts, answer): (&[&str], [&str; 4], String) = match kind {
        QuestionKind::DirectionBefore => (
            &["which", "direction", "before", "the", "turn", "?"],
            dirs,
            direction_name(m.velocity_before).to_string(),
        ),
        QuestionKind::DirectionAfter => (
            &["which", "direction", "after", "the", "turn", "?"],
            dirs,
            direction_name(m.velocity_after).to_string(),
        ),
        QuestionKind::HasEvent => (
            &["did", "the", "motion", "change", "?"],
            ["yes", "no", "maybe", "unsure"],
            if m.event_frame.is_some() { "yes" } else { "no" }.to_string(),
        ),
        QuestionKind::Order => (
            &["order", "of", "motion", "axes", "?"],
            ["hv", "vh", "hh", "vv"],
            format!("{}{}", axis_name(m.velocity_before), axis_name(m.velocity_after)),
        ),
    };
    let mut question = words(&v, template);
    question.push(v.expect("options"));
    let options = [v.expect(opts[0]), v.expect(opts[1]), v.expect(opts[2]), v.expect(opts[3])];
    question.extend_from_slice(&options);
    QaAnnotation {
        kind,
        question,
        options,
        answer: v.expect(&answer),
    }
}

/// Answer token recomputed by re-simulating the kinematics and reading
/// displacements between keyframes.
pub fn kinematics_answer(motion: &MotionSpec, frames: usize, grid: usize, block: usize, kind: QuestionKind) -> u32 {
    let v = Vocab::standard();
    let pos = motion.positions(frames, grid, block);
    let turn = motion.event_frame.unwrap_or(frames - 1);
    let delta = |a: usize, b: usize| (pos[b].0 - pos[a].0, pos[b].1 - pos[a].1);
    let before = delta(0, turn.max(1).min(frames - 1));
    let after = if motion.event_frame.is_some() {
        delta(turn, frames - 1)
    } else {
        before
    };
    let word = match kind {
        QuestionKind::DirectionBefore => direction_name(before).to_string(),
        QuestionKind::DirectionAfter => direction_name(after).to_string(),
        QuestionKind::HasEvent => if motion.event_frame.is_some() { "yes" } else { "no" }.to_string(),
        QuestionKind::Order => format!("{}{}", axis_name(before), axis_name(after)),
    };
    v.expect(&word)
}

/// Complete sample `sample_id` of a dataset: video, keyframes, thought video and QA.
pub fn build_sample(config: &GenConfig, seed: u64, sample_id: u32) -> Result<VideoSample> {
    let qpv = config.questions_per_video as u32;
    let video_id = sample_id / qpv;
    let video_seed = seed.wrapping_add(video_id as u64);
    let kind = QuestionKind::ALL[sample_id as usize % QuestionKind::ALL.len()];
    let mut s = gen_video(video_seed, config)?;
    s.sample_id = sample_id;
    s.video_id = video_id;
    s.keyframes = select_keyframes(&s);
    s.thought_frames = gen_thought_video(&s, config.density);
    s.qa = gen_qa_sample(&s, kind);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sample_count: usize,
    pub seed: u64,
    pub generator: GenConfig,
    pub vocab: Vec<String>,
    pub blob: String,
    /// Byte offset of each sample record in the blob.
    pub offsets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    /// Generates `n` samples in memory.
    pub fn generate(config: &GenConfig, n: usize, seed: u64) -> Result<Dataset> {
        config.validate()?;
        let samples = (0..n)
            .map(|i| build_sample(config, seed, i as u32))
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(n);
        let mut at = 0u64;
        for s in &samples {
            offsets.push(at);
            at += encode_sample(s).len() as u64;
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                format_version: FORMAT_VERSION,
                sample_count: n,
                seed,
                generator: config.clone(),
                vocab: Vocab::standard().tokens().to_vec(),
                blob: BLOB_FILE.to_string(),
                offsets,
            },
            samples,
        })
    }

    /// Number of training samples; the last 10% (rounded up) are held out.
    pub fn train_len(&self) -> usize {
        let n = self.samples.len();
        n - n.div_ceil(10)
    }

    pub fn train(&self) -> &[VideoSample] {
        &self.samples[..self.train_len()]
    }

    pub fn heldout(&self) -> &[VideoSample] {
        &self.samples[self.train_len()..]
    }

    pub fn split(&self, name: &str) -> Result<&[VideoSample]> {
        match name {
            "train" => Ok(self.train()),
            "heldout" => Ok(self.heldout()),
            "all" => Ok(&self.samples),
            other => Err(StormError::Config(format!(
                "unknown split {other:?} (expected train, heldout or all)"
            ))),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| StormError::io(dir, e))?;
        let mut blob = Vec::new();
        for s in &self.samples {
            blob.extend(encode_sample(s));
        }
        let blob_path = dir.join(&self.manifest.blob);
        fs::write(&blob_path, &blob).map_err(|e| StormError::io(&blob_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| StormError::Config(format!("manifest serialization: {e}")))?;
        fs::write(&manifest_path, text + "\n").map_err(|e| StormError::io(&manifest_path, e))
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| StormError::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| StormError::format(&manifest_path, e.to_string()))?;
        if manifest.offsets.len() != manifest.sample_count
            || manifest.offsets.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(StormError::format(&manifest_path, "offsets must be strictly increasing, one per sample"));
        }
        let blob_path: PathBuf = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| StormError::io(&blob_path, e))?;
        let mut r = Reader::new(&blob, &blob_path);
        let mut samples = Vec::with_capacity(manifest.sample_count);
        for &off in &manifest.offsets {
            r.seek(off as usize);
            samples.push(decode_sample(&mut r)?);
        }
        Ok(Dataset { manifest, samples })
    }
}

/// Generates `n` samples from `seed` and writes manifest and blob into `dir`.
pub fn build_dataset(config: &GenConfig, n: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = Dataset::generate(config, n, seed)?;
    ds.write(dir)?;
    Ok(ds.manifest)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_frames(out: &mut Vec<u8>, frames: &[Frame]) {
    put_u32(out, frames.len() as u32);
    for f in frames {
        out.extend_from_slice(&f.0);
    }
}

/// Little-endian sample record.
fn encode_sample(s: &VideoSample) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, s.sample_id);
    put_u32(&mut out, s.video_id);
    out.extend_from_slice(&s.seed.to_le_bytes());
    put_u32(&mut out, s.grid as u32);
    put_u32(&mut out, s.channels as u32);
    put_u32(&mut out, s.block as u32);
    put_frames(&mut out, &s.frames);
    let m = &s.motion;
    for v in [
        m.start.0,
        m.start.1,
        m.velocity_before.0,
        m.velocity_before.1,
        m.velocity_after.0,
        m.velocity_after.1,
        m.event_frame.map_or(-1, |e| e as i32),
    ] {
        put_i32(&mut out, v);
    }
    put_u32(&mut out, s.keyframes.len() as u32);
    for &k in &s.keyframes {
        put_u32(&mut out, k as u32);
    }
    put_frames(&mut out, &s.thought_frames);
    out.push(s.qa.kind.tag());
    put_u32(&mut out, s.qa.question.len() as u32);
    for &q in &s.qa.question {
        put_u32(&mut out, q);
    }
    for &o in &s.qa.options {
        put_u32(&mut out, o);
    }
    put_u32(&mut out, s.qa.answer);
    out
}

fn decode_sample(r: &mut Reader<'_>) -> Result<VideoSample> {
    let sample_id = r.u32()?;
    let video_id = r.u32()?;
    let seed = u64::from_le_bytes(r.bytes(8)?.try_into().unwrap());
    let grid = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let block = r.u32()? as usize;
    let frame_len = grid * grid * channels;
    let frames_of = |r: &mut Reader<'_>| -> Result<Vec<Frame>> {
        let n = r.u32()? as usize;
        (0..n).map(|_| Ok(Frame(r.bytes(frame_len)?.to_vec()))).collect()
    };
    let frames = frames_of(r)?;
    let mut ints = [0i32; 7];
    for v in ints.iter_mut() {
        *v = r.i32()?;
    }
    let motion = MotionSpec {
        start: (ints[0], ints[1]),
        velocity_before: (ints[2], ints[3]),
        velocity_after: (ints[4], ints[5]),
        event_frame: (ints[6] >= 0).then_some(ints[6] as usize),
    };
    let nk = r.u32()? as usize;
    let keyframes = (0..nk).map(|_| r.u32().map(|k| k as usize)).collect::<Result<Vec<_>>>()?;
    let thought_frames = frames_of(r)?;
    let kind = QuestionKind::from_tag(r.u8()?).ok_or_else(|| r.fail("unknown question kind"))?;
    let nq = r.u32()? as usize;
    let question = (0..nq).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let options = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let answer = r.u32()?;
    Ok(VideoSample {
        sample_id,
        video_id,
        seed,
        grid,
        channels,
        block,
        frames,
        motion,
        keyframes,
        thought_frames,
        qa: QaAnnotation {
            kind,
            question,
            options,
            answer,
        },
    })
}
