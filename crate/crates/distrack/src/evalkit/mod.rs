//! One-pass evaluation: run a tracker once per sequence from the first
//! frame's ground truth, then summarize success/precision curves, AUC and
//! the distractor lock-on rate.

pub mod plot;
pub mod report;

use crate::error::Result;
use crate::geom::{center_error, iou, BoundingBox};
use crate::img::Image;
use crate::seqgen::SequenceRecord;

/// Success thresholds: 21 points at 0.00, 0.05, ..., 1.00.
pub const SUCCESS_POINTS: usize = 21;
/// Precision thresholds: 51 points at 0, 1, ..., 50 px.
pub const PRECISION_POINTS: usize = 51;

/// A tracker as the evaluation loop sees it: initialized once, then asked
/// for one box per subsequent frame.
pub trait SequenceTracker {
    fn init(&mut self, frame: &Image, gt: &BoundingBox) -> Result<()>;
    fn track(&mut self, frame: &Image) -> Result<BoundingBox>;
}

/// Echoes the ground truth (upper bound for every metric).
pub struct OracleTracker {
    gt: Vec<BoundingBox>,
    cursor: usize,
}

impl OracleTracker {
    pub fn new(gt: Vec<BoundingBox>) -> Self {
        OracleTracker { gt, cursor: 0 }
    }
}

impl SequenceTracker for OracleTracker {
    fn init(&mut self, _frame: &Image, _gt: &BoundingBox) -> Result<()> {
        self.cursor = 0;
        Ok(())
    }

    fn track(&mut self, _frame: &Image) -> Result<BoundingBox> {
        self.cursor += 1;
        Ok(self.gt[self.cursor.min(self.gt.len() - 1)])
    }
}

/// Repeats the initialization box forever (lower-bound baseline).
pub struct StaticTracker {
    bbox: Option<BoundingBox>,
}

impl StaticTracker {
    pub fn new() -> Self {
        StaticTracker { bbox: None }
    }
}

impl Default for StaticTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl SequenceTracker for StaticTracker {
    fn init(&mut self, _frame: &Image, gt: &BoundingBox) -> Result<()> {
        self.bbox = Some(*gt);
        Ok(())
    }

    fn track(&mut self, _frame: &Image) -> Result<BoundingBox> {
        self.bbox
            .ok_or_else(|| crate::error::Error::usage("static tracker used before init"))
    }
}

/// The model-backed tracker behind the evaluation trait.
pub struct ModelTracker<'m> {
    tracker: crate::tracker::Tracker<'m>,
    state: Option<crate::tracker::TrackerState>,
}

impl<'m> ModelTracker<'m> {
    pub fn new(model: &'m crate::model::Model, cfg: crate::tracker::TrackerConfig) -> Self {
        ModelTracker {
            tracker: crate::tracker::Tracker::new(model, cfg),
            state: None,
        }
    }
}

impl SequenceTracker for ModelTracker<'_> {
    fn init(&mut self, frame: &Image, gt: &BoundingBox) -> Result<()> {
        self.state = Some(self.tracker.init(frame, gt)?);
        Ok(())
    }

    fn track(&mut self, frame: &Image) -> Result<BoundingBox> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| crate::error::Error::usage("tracker used before init"))?;
        Ok(self.tracker.track_frame(state, frame)?.bbox)
    }
}

/// One sequence's tracking output.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub seq_id: String,
    pub boxes: Vec<BoundingBox>,
    pub failed: bool,
}

/// Run the one-pass protocol: initialize on frame 0 ground truth, track to
/// the end, never re-initialize. A tracker error marks the sequence failed
/// and evaluation continues with the remaining sequences.
pub fn run_ope<F>(dataset: &[(String, SequenceRecord)], mut make_tracker: F) -> Vec<SequenceTrace>
where
    F: FnMut(&SequenceRecord) -> Result<Box<dyn SequenceTracker + '_>>,
{
    let mut traces = Vec::with_capacity(dataset.len());
    for (seq_id, record) in dataset {
        let trace = track_one(record, &mut make_tracker);
        match trace {
            Ok(boxes) => traces.push(SequenceTrace {
                seq_id: seq_id.clone(),
                boxes,
                failed: false,
            }),
            Err(_) => traces.push(SequenceTrace {
                seq_id: seq_id.clone(),
                boxes: Vec::new(),
                failed: true,
            }),
        }
    }
    traces
}

fn track_one<F>(record: &SequenceRecord, make_tracker: &mut F) -> Result<Vec<BoundingBox>>
where
    F: FnMut(&SequenceRecord) -> Result<Box<dyn SequenceTracker + '_>>,
{
    let mut tracker = make_tracker(record)?;
    let init_box = record.target_boxes[0];
    tracker.init(&record.frames[0], &init_box)?;
    let mut boxes = vec![init_box];
    for frame in &record.frames[1..] {
        boxes.push(tracker.track(frame)?);
    }
    Ok(boxes)
}

/// Per-frame IoU between a trace and ground truth; degenerate ground-truth
/// boxes yield `None` (excluded from the curves but counted).
pub fn iou_trace(pred: &[BoundingBox], gt: &[BoundingBox]) -> Vec<Option<f64>> {
    pred.iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            if g.validate().is_err() {
                None
            } else {
                iou(p, g).ok()
            }
        })
        .collect()
}

/// Per-frame center errors with the same exclusion rule.
pub fn center_error_trace(pred: &[BoundingBox], gt: &[BoundingBox]) -> Vec<Option<f64>> {
    pred.iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            if g.validate().is_err() {
                None
            } else {
                center_error(p, g).ok()
            }
        })
        .collect()
}

/// `success(tau) = fraction of frames with IoU > tau` on the 21-point grid.
pub fn success_curve(ious: &[f64]) -> [f64; SUCCESS_POINTS] {
    let mut curve = [0.0; SUCCESS_POINTS];
    if ious.is_empty() {
        return curve;
    }
    for (i, slot) in curve.iter_mut().enumerate() {
        let tau = i as f64 * 0.05;
        *slot = ious.iter().filter(|&&v| v > tau).count() as f64 / ious.len() as f64;
    }
    curve
}

/// Mean of the success curve.
pub fn auc(curve: &[f64; SUCCESS_POINTS]) -> f64 {
    curve.iter().sum::<f64>() / SUCCESS_POINTS as f64
}

/// `precision(tau) = fraction of frames with center error <= tau`, 0..=50 px.
pub fn precision_curve(errors: &[f64]) -> [f64; PRECISION_POINTS] {
    let mut curve = [0.0; PRECISION_POINTS];
    if errors.is_empty() {
        return curve;
    }
    for (i, slot) in curve.iter_mut().enumerate() {
        let tau = i as f64;
        *slot = errors.iter().filter(|&&v| v <= tau).count() as f64 / errors.len() as f64;
    }
    curve
}

pub fn precision_at_20(curve: &[f64; PRECISION_POINTS]) -> f64 {
    curve[20]
}

#[derive(Debug, Clone)]
pub struct SequenceEval {
    pub seq_id: String,
    pub n_frames: usize,
    pub auc: f64,
    pub precision_20: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_sequence: Vec<SequenceEval>,
    /// Mean of per-sequence AUCs over non-failed sequences.
    pub mean_auc: f64,
    pub mean_precision_20: f64,
    /// Mean per-sequence success curve (non-failed sequences).
    pub success: [f64; SUCCESS_POINTS],
    pub precision: [f64; PRECISION_POINTS],
    /// Frames dropped for degenerate ground truth.
    pub excluded_frames: usize,
}

/// Aggregate traces against their dataset: per-sequence curves averaged
/// into dataset curves, AUC as the mean of per-sequence AUCs.
pub fn evaluate(dataset: &[(String, SequenceRecord)], traces: &[SequenceTrace]) -> EvalResult {
    let mut per_sequence = Vec::with_capacity(traces.len());
    let mut success_acc = [0.0; SUCCESS_POINTS];
    let mut precision_acc = [0.0; PRECISION_POINTS];
    let mut excluded = 0usize;
    let mut ok_count = 0usize;
    for trace in traces {
        let record = dataset
            .iter()
            .find(|(id, _)| *id == trace.seq_id)
            .map(|(_, r)| r);
        let Some(record) = record else {
            per_sequence.push(SequenceEval {
                seq_id: trace.seq_id.clone(),
                n_frames: 0,
                auc: 0.0,
                precision_20: 0.0,
                failed: true,
            });
            continue;
        };
        if trace.failed {
            per_sequence.push(SequenceEval {
                seq_id: trace.seq_id.clone(),
                n_frames: record.frame_count(),
                auc: 0.0,
                precision_20: 0.0,
                failed: true,
            });
            continue;
        }
        let ious_opt = iou_trace(&trace.boxes, &record.target_boxes);
        let errors_opt = center_error_trace(&trace.boxes, &record.target_boxes);
        excluded += ious_opt.iter().filter(|v| v.is_none()).count();
        let ious: Vec<f64> = ious_opt.into_iter().flatten().collect();
        let errors: Vec<f64> = errors_opt.into_iter().flatten().collect();
        let s_curve = success_curve(&ious);
        let p_curve = precision_curve(&errors);
        for (acc, v) in success_acc.iter_mut().zip(s_curve.iter()) {
            *acc += v;
        }
        for (acc, v) in precision_acc.iter_mut().zip(p_curve.iter()) {
            *acc += v;
        }
        ok_count += 1;
        per_sequence.push(SequenceEval {
            seq_id: trace.seq_id.clone(),
            n_frames: record.frame_count(),
            auc: auc(&s_curve),
            precision_20: precision_at_20(&p_curve),
            failed: false,
        });
    }
    let denom = ok_count.max(1) as f64;
    for v in success_acc.iter_mut() {
        *v /= denom;
    }
    for v in precision_acc.iter_mut() {
        *v /= denom;
    }
    let oks: Vec<&SequenceEval> = per_sequence.iter().filter(|s| !s.failed).collect();
    let mean_auc = oks.iter().map(|s| s.auc).sum::<f64>() / oks.len().max(1) as f64;
    let mean_precision_20 =
        oks.iter().map(|s| s.precision_20).sum::<f64>() / oks.len().max(1) as f64;
    EvalResult {
        per_sequence,
        mean_auc,
        mean_precision_20,
        success: success_acc,
        precision: precision_acc,
        excluded_frames: excluded,
    }
}

/// Fraction of sequences whose final-frame prediction overlaps the
/// distractor more than the target (identity-switch indicator). Sequences
/// without distractor ground truth are skipped.
pub fn wrong_lock_rate(dataset: &[(String, SequenceRecord)], traces: &[SequenceTrace]) -> f64 {
    let mut tested = 0usize;
    let mut locked = 0usize;
    for trace in traces {
        if trace.failed || trace.boxes.is_empty() {
            continue;
        }
        let Some((_, record)) = dataset.iter().find(|(id, _)| *id == trace.seq_id) else {
            continue;
        };
        if record.distractor_boxes.is_empty() {
            continue;
        }
        let last = trace.boxes.len() - 1;
        let pred = &trace.boxes[last];
        let iou_target = iou(pred, &record.target_boxes[last]).unwrap_or(0.0);
        let iou_distractor = iou(pred, &record.distractor_boxes[last]).unwrap_or(0.0);
        tested += 1;
        if iou_distractor > iou_target {
            locked += 1;
        }
    }
    if tested == 0 {
        0.0
    } else {
        locked as f64 / tested as f64
    }
}
