//! Raw interaction events, motor-step grouping, and observed step timing.
//!
//! A trace bundle on disk is a directory holding `events.jsonl`, a
//! `screens/` directory and `meta.json`. Grouped steps are persisted as
//! `steps.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const META_FILE: &str = "meta.json";
pub const SCREENS_DIR: &str = "screens";
pub const STEPS_FILE: &str = "steps.json";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("event {index}: timestamp {timestamp} precedes previous timestamp {previous}")]
    NonMonotonicTimestamp {
        index: usize,
        timestamp: u64,
        previous: u64,
    },
    #[error("steps {previous} and {next} overlap: step {next} starts at {start} before step {previous} ends at {end}")]
    OverlappingSteps {
        previous: usize,
        next: usize,
        start: u64,
        end: u64,
    },
    #[error("step index {index} out of range for trace with {len} steps")]
    StepOutOfRange { index: usize, len: usize },
    #[error("step {index}: {reason}")]
    InvalidStep { index: usize, reason: String },
    #[error("event {index}: screenshot '{screenshot}' not found in bundle")]
    MissingScreenshot { index: usize, screenshot: String },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TraceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    MouseClick,
    MouseDrag,
    MouseScroll,
    KeyPress,
    KeyRelease,
    Hotkey,
}

impl EventKind {
    pub fn is_key(self) -> bool {
        matches!(self, EventKind::KeyPress | EventKind::KeyRelease)
    }
}

/// Phase marker for drag events. A drag without phases is a single event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DragPhase {
    Press,
    Move,
    Release,
}

/// Kind-specific event detail. Every field is optional; recorders fill what
/// they know.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub button: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<DragPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub index: usize,
    /// Milliseconds since the start of the recording.
    pub timestamp: u64,
    pub kind: EventKind,
    #[serde(default)]
    pub payload: EventPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Click,
    Drag,
    Scroll,
    TextInput,
    Hotkey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorStep {
    pub step_index: usize,
    pub kind: StepKind,
    pub start_ts: u64,
    pub end_ts: u64,
    /// Indices of the raw events grouped into this step.
    pub source_events: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub task_id: String,
    pub user_id: String,
    pub steps: Vec<MotorStep>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    /// Recording start; the previous "end" used to time step 0.
    #[serde(default)]
    pub start_ts: u64,
}

impl Trace {
    /// Builds a trace and checks step invariants (dense indices, ordering,
    /// contiguous non-empty source runs, no overlap).
    pub fn new(
        task_id: impl Into<String>,
        user_id: impl Into<String>,
        steps: Vec<MotorStep>,
        metadata: BTreeMap<String, String>,
        start_ts: u64,
    ) -> Result<Self> {
        let trace = Trace {
            task_id: task_id.into(),
            user_id: user_id.into(),
            steps,
            metadata,
            start_ts,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Identifier of a trace within a project: `<user_id>_<task_id>`.
    pub fn id(&self) -> String {
        trace_id(&self.user_id, &self.task_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev_end: Option<(usize, u64)> = None;
        for (pos, step) in self.steps.iter().enumerate() {
            if step.step_index != pos {
                return Err(TraceError::InvalidStep {
                    index: pos,
                    reason: format!("step_index {} breaks dense 0..n ordering", step.step_index),
                });
            }
            if step.start_ts > step.end_ts {
                return Err(TraceError::InvalidStep {
                    index: pos,
                    reason: format!("start_ts {} > end_ts {}", step.start_ts, step.end_ts),
                });
            }
            if step.source_events.is_empty() {
                return Err(TraceError::InvalidStep {
                    index: pos,
                    reason: "no source events".into(),
                });
            }
            if step.source_events.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(TraceError::InvalidStep {
                    index: pos,
                    reason: "source events are not a contiguous run".into(),
                });
            }
            if let Some((prev, end)) = prev_end {
                if step.start_ts < end {
                    return Err(TraceError::OverlappingSteps {
                        previous: prev,
                        next: pos,
                        start: step.start_ts,
                        end,
                    });
                }
            }
            prev_end = Some((pos, step.end_ts));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn trace_id(user_id: &str, task_id: &str) -> String {
    format!("{user_id}_{task_id}")
}

/// Rule set for [`group_events`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    /// Key events closer than this merge into one TextInput step.
    pub idle_gap_ms: u64,
    /// Merge consecutive scroll events closer than `idle_gap_ms`.
    pub merge_scroll_runs: bool,
    /// Collapse two clicks of the same button within this window.
    pub double_click_ms: Option<u64>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            idle_gap_ms: 2000,
            merge_scroll_runs: false,
            double_click_ms: None,
        }
    }
}

fn check_monotone(events: &[RawEvent]) -> Result<()> {
    for w in events.windows(2) {
        if w[1].timestamp < w[0].timestamp {
            return Err(TraceError::NonMonotonicTimestamp {
                index: w[1].index,
                timestamp: w[1].timestamp,
                previous: w[0].timestamp,
            });
        }
    }
    Ok(())
}

/// Length of the run of events starting at `start` that forms one step.
fn run_length(events: &[RawEvent], start: usize, rules: &GroupingConfig) -> usize {
    let first = &events[start];
    let within_gap = |a: &RawEvent, b: &RawEvent| b.timestamp - a.timestamp < rules.idle_gap_ms;
    let mut end = start + 1;
    match first.kind {
        EventKind::KeyPress | EventKind::KeyRelease => {
            while end < events.len()
                && events[end].kind.is_key()
                && within_gap(&events[end - 1], &events[end])
            {
                end += 1;
            }
        }
        EventKind::MouseDrag => {
            // A phased drag runs from press through release; unphased drag
            // events stand alone.
            if first.payload.phase == Some(DragPhase::Press) {
                let phase_at = |i: usize| {
                    events
                        .get(i)
                        .filter(|e| e.kind == EventKind::MouseDrag)
                        .and_then(|e| e.payload.phase)
                };
                while phase_at(end) == Some(DragPhase::Move) {
                    end += 1;
                }
                if phase_at(end) == Some(DragPhase::Release) {
                    end += 1;
                }
            }
        }
        EventKind::MouseScroll => {
            if rules.merge_scroll_runs {
                while end < events.len()
                    && events[end].kind == EventKind::MouseScroll
                    && within_gap(&events[end - 1], &events[end])
                {
                    end += 1;
                }
            }
        }
        EventKind::MouseClick => {
            if let Some(window) = rules.double_click_ms {
                if let Some(next) = events.get(end) {
                    if next.kind == EventKind::MouseClick
                        && next.payload.button == first.payload.button
                        && next.timestamp - first.timestamp <= window
                    {
                        end += 1;
                    }
                }
            }
        }
        EventKind::Hotkey => {}
    }
    end - start
}

fn step_kind(kind: EventKind) -> StepKind {
    match kind {
        EventKind::MouseClick => StepKind::Click,
        EventKind::MouseDrag => StepKind::Drag,
        EventKind::MouseScroll => StepKind::Scroll,
        EventKind::KeyPress | EventKind::KeyRelease => StepKind::TextInput,
        EventKind::Hotkey => StepKind::Hotkey,
    }
}

/// Partitions a timestamp-ordered event stream into motor steps.
pub fn group_events(events: &[RawEvent], rules: &GroupingConfig) -> Result<Vec<MotorStep>> {
    check_monotone(events)?;
    let mut steps = Vec::new();
    let mut start = 0;
    while start < events.len() {
        let len = run_length(events, start, rules);
        let run = &events[start..start + len];
        steps.push(MotorStep {
            step_index: steps.len(),
            kind: step_kind(run[0].kind),
            start_ts: run[0].timestamp,
            end_ts: run[len - 1].timestamp,
            source_events: run.iter().map(|e| e.index).collect(),
            semantic: None,
            screenshot_ref: run.iter().find_map(|e| e.screenshot_ref.clone()),
        });
        start += len;
    }
    Ok(steps)
}

/// Observed time of step `i`: its start minus the previous step's end. Step 0
/// is measured from the trace's recording start.
pub fn step_time(trace: &Trace, i: usize) -> Result<u64> {
    let step = trace.steps.get(i).ok_or(TraceError::StepOutOfRange {
        index: i,
        len: trace.steps.len(),
    })?;
    let prev_end = if i == 0 {
        trace.start_ts
    } else {
        trace.steps[i - 1].end_ts
    };
    step.start_ts
        .checked_sub(prev_end)
        .ok_or(TraceError::OverlappingSteps {
            previous: i.saturating_sub(1),
            next: i,
            start: step.start_ts,
            end: prev_end,
        })
}

/// Step times for every step of the trace, step 0 included.
pub fn step_times(trace: &Trace) -> Result<Vec<u64>> {
    (0..trace.steps.len()).map(|i| step_time(trace, i)).collect()
}

/// Metadata stored in a bundle's `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub task_id: String,
    pub user_id: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub start_ts: u64,
}

/// A recorded trace bundle loaded from disk.
#[derive(Debug, Clone)]
pub struct TraceBundle {
    pub dir: PathBuf,
    pub meta: TraceMeta,
    pub events: Vec<RawEvent>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl TraceBundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: TraceMeta =
            serde_json::from_str(&meta_text).map_err(|source| TraceError::Parse {
                path: meta_path.clone(),
                line: 0,
                source,
            })?;
        let events_path = dir.join(EVENTS_FILE);
        let events_text = fs::read_to_string(&events_path).map_err(io_err(&events_path))?;
        let mut events = Vec::new();
        for (line_no, line) in events_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: RawEvent =
                serde_json::from_str(line).map_err(|source| TraceError::Parse {
                    path: events_path.clone(),
                    line: line_no + 1,
                    source,
                })?;
            events.push(event);
        }
        let bundle = TraceBundle {
            dir: dir.to_path_buf(),
            meta,
            events,
        };
        bundle.check_screenshots()?;
        check_monotone(&bundle.events)?;
        Ok(bundle)
    }

    fn check_screenshots(&self) -> Result<()> {
        for event in &self.events {
            if let Some(shot) = &event.screenshot_ref {
                if !self.screenshot_path(shot).is_file() {
                    return Err(TraceError::MissingScreenshot {
                        index: event.index,
                        screenshot: shot.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn screenshot_path(&self, screenshot_ref: &str) -> PathBuf {
        self.dir.join(SCREENS_DIR).join(screenshot_ref)
    }

    pub fn trace_id(&self) -> String {
        trace_id(&self.meta.user_id, &self.meta.task_id)
    }

    /// Groups the bundle's events and builds the trace.
    pub fn to_trace(&self, rules: &GroupingConfig) -> Result<Trace> {
        let steps = group_events(&self.events, rules)?;
        Trace::new(
            self.meta.task_id.clone(),
            self.meta.user_id.clone(),
            steps,
            self.meta.metadata.clone(),
            self.meta.start_ts,
        )
    }

    /// Writes a bundle directory. Screenshots are copied from `screens`,
    /// keyed by their reference name.
    pub fn write(
        dir: impl AsRef<Path>,
        meta: &TraceMeta,
        events: &[RawEvent],
        screens: &[(String, Vec<u8>)],
    ) -> Result<()> {
        let dir = dir.as_ref();
        let screens_dir = dir.join(SCREENS_DIR);
        fs::create_dir_all(&screens_dir).map_err(io_err(&screens_dir))?;
        let meta_path = dir.join(META_FILE);
        let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
        fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;
        let mut lines = String::new();
        for e in events {
            lines.push_str(&serde_json::to_string(e).expect("event serializes"));
            lines.push('\n');
        }
        let events_path = dir.join(EVENTS_FILE);
        fs::write(&events_path, lines).map_err(io_err(&events_path))?;
        for (name, bytes) in screens {
            let path = screens_dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

pub fn read_steps(path: impl AsRef<Path>) -> Result<Vec<MotorStep>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| TraceError::Parse {
        path: path.to_path_buf(),
        line: 0,
        source,
    })
}
