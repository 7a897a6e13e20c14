//! Constant-speed object trajectories from cubic Hermite splines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::BoundingBox;

/// Per-frame object-center positions, `[x, y]` in frame pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Unit motion direction at frame `i` (central difference, clamped at
    /// the ends). Falls back to +x for zero-length steps.
    pub fn direction(&self, i: usize) -> [f64; 2] {
        let n = self.positions.len();
        if n < 2 {
            return [1.0, 0.0];
        }
        let a = &self.positions[i.saturating_sub(1)];
        let b = &self.positions[(i + 1).min(n - 1)];
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let norm = (dx * dx + dy * dy).sqrt();
        if norm < 1e-12 {
            [1.0, 0.0]
        } else {
            [dx / norm, dy / norm]
        }
    }
}

/// Dense arc-length view over a Hermite spline; used to resample at
/// constant speed and to place trailing objects at an arc offset.
#[derive(Debug, Clone)]
pub struct ArcSampler {
    samples: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

const DENSE_PER_SEGMENT: usize = 400;

impl ArcSampler {
    /// Build from 4 control points with Catmull-Rom tangents; the curve
    /// passes through all four points over three segments.
    pub fn from_control_points(points: [[f64; 2]; 4]) -> ArcSampler {
        let tangents = [
            sub(points[1], points[0]),
            scale(sub(points[2], points[0]), 0.5),
            scale(sub(points[3], points[1]), 0.5),
            sub(points[3], points[2]),
        ];
        let mut samples = Vec::with_capacity(3 * DENSE_PER_SEGMENT + 1);
        for seg in 0..3 {
            let last = seg == 2;
            let steps = if last {
                DENSE_PER_SEGMENT + 1
            } else {
                DENSE_PER_SEGMENT
            };
            for k in 0..steps {
                let t = k as f64 / DENSE_PER_SEGMENT as f64;
                samples.push(hermite_point(
                    points[seg],
                    points[seg + 1],
                    tangents[seg],
                    tangents[seg + 1],
                    t,
                ));
            }
        }
        let mut cumulative = Vec::with_capacity(samples.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 1..samples.len() {
            acc += dist(samples[i - 1], samples[i]);
            cumulative.push(acc);
        }
        ArcSampler {
            samples,
            cumulative,
        }
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position at arc length `s`, clamped to the curve extent.
    pub fn position_at_arc(&self, s: f64) -> [f64; 2] {
        let total = self.total_length();
        let s = s.clamp(0.0, total);
        // Binary search the cumulative table, then interpolate linearly.
        let idx = match self
            .cumulative
            .binary_search_by(|v| v.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if idx + 1 >= self.samples.len() {
            return *self.samples.last().unwrap();
        }
        let seg_len = self.cumulative[idx + 1] - self.cumulative[idx];
        let f = if seg_len > 1e-12 {
            (s - self.cumulative[idx]) / seg_len
        } else {
            0.0
        };
        let a = self.samples[idx];
        let b = self.samples[idx + 1];
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Resample at `frame_count` uniformly spaced arc lengths.
    pub fn constant_speed(&self, frame_count: usize) -> Trajectory {
        let total = self.total_length();
        let positions = (0..frame_count)
            .map(|k| {
                let s = if frame_count > 1 {
                    total * k as f64 / (frame_count - 1) as f64
                } else {
                    0.0
                };
                self.position_at_arc(s)
            })
            .collect();
        Trajectory { positions }
    }

    fn within(&self, bounds: &BoundingBox) -> bool {
        self.samples.iter().all(|p| {
            p[0] >= bounds.x
                && p[0] <= bounds.right()
                && p[1] >= bounds.y
                && p[1] <= bounds.bottom()
        })
    }
}

/// Constant-speed trajectory through 4 given control points.
pub fn trajectory_through(points: [[f64; 2]; 4], frame_count: usize) -> Result<Trajectory> {
    if frame_count < 2 {
        return Err(Error::domain("frame_count must be >= 2".to_string()));
    }
    Ok(ArcSampler::from_control_points(points).constant_speed(frame_count))
}

/// Sample 4 control points uniformly inside `bounds` and return the
/// constant-speed trajectory. Redraws when the interpolated curve
/// overshoots the bounds, so every returned position is inside.
pub fn hermite_trajectory(
    rng: &mut impl Rng,
    frame_count: usize,
    bounds: &BoundingBox,
) -> Result<Trajectory> {
    hermite_trajectory_sampler(rng, frame_count, bounds).map(|(t, _)| t)
}

/// As [`hermite_trajectory`] but also returns the arc-length sampler,
/// for callers that place trailing objects along the same curve.
pub fn hermite_trajectory_sampler(
    rng: &mut impl Rng,
    frame_count: usize,
    bounds: &BoundingBox,
) -> Result<(Trajectory, ArcSampler)> {
    if frame_count < 2 {
        return Err(Error::domain("frame_count must be >= 2".to_string()));
    }
    bounds.validate()?;
    if bounds.w < 2.0 || bounds.h < 2.0 {
        return Err(Error::domain(format!(
            "bounds {bounds:?} too small for 4 distinct control points"
        )));
    }
    // Control points live in the inner 70% so Catmull-Rom overshoot rarely
    // leaves the bounds; redraw when the curve overshoots or has a hairpin
    // tight enough that chord spacing deviates from arc spacing.
    let margin_x = bounds.w * 0.15;
    let margin_y = bounds.h * 0.15;
    let draw_point = |rng: &mut dyn rand::RngCore| {
        [
            bounds.x + margin_x + rand::Rng::random::<f64>(rng) * (bounds.w - 2.0 * margin_x),
            bounds.y + margin_y + rand::Rng::random::<f64>(rng) * (bounds.h - 2.0 * margin_y),
        ]
    };
    for attempt in 0..500 {
        // Short sequences take large per-frame steps, so curved splines
        // cannot keep chord spacing within 1%; after enough failed draws
        // fall back to collinear control points (a straight Hermite spline
        // with exactly constant speed).
        let points: [[f64; 2]; 4] = if attempt < 200 {
            std::array::from_fn(|_| draw_point(rng))
        } else {
            let a = draw_point(rng);
            let b = draw_point(rng);
            if dist(a, b) < 1.0 {
                continue;
            }
            std::array::from_fn(|i| {
                let f = i as f64 / 3.0;
                [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
            })
        };
        let sampler = ArcSampler::from_control_points(points);
        if sampler.total_length() < 1e-6 || !sampler.within(bounds) {
            continue;
        }
        let traj = sampler.constant_speed(frame_count);
        if chord_ratio(&traj) <= 1.005 {
            return Ok((traj, sampler));
        }
    }
    Err(Error::domain(format!(
        "could not fit a spline inside bounds {bounds:?} after 500 draws"
    )))
}

/// Max/min ratio of consecutive Euclidean step lengths.
fn chord_ratio(t: &Trajectory) -> f64 {
    let mut max = f64::MIN;
    let mut min = f64::MAX;
    for w in t.positions.windows(2) {
        let d = dist(w[0], w[1]);
        max = max.max(d);
        min = min.min(d);
    }
    if min <= 1e-12 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn hermite_point(p0: [f64; 2], p1: [f64; 2], m0: [f64; 2], m1: [f64; 2], t: f64) -> [f64; 2] {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    [
        h00 * p0[0] + h10 * m0[0] + h01 * p1[0] + h11 * m1[0],
        h00 * p0[1] + h10 * m0[1] + h01 * p1[1] + h11 * m1[1],
    ]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] * s, a[1] * s]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
