//! Bound reports: one per inequality, counting violations against a
//! tolerance of `rel_tol · |bound| + 3 · SE`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointStatus {
    Ok,
    Violation,
    Inconclusive,
}

/// One evaluation point of a bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub x: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    /// Signed amount by which the inequality is exceeded; negative is slack.
    pub margin: f64,
    pub status: PointStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_id: String,
    pub description: String,
    pub points_checked: usize,
    pub violations: usize,
    pub inconclusive: usize,
    /// Largest margin over all checked points.
    pub max_margin: f64,
    /// Margin of the worst point relative to its allowed tolerance, i.e.
    /// `max (margin − tolerance)`; positive only with violations.
    pub max_excess: f64,
    pub rel_tolerance: f64,
    pub se_multiplier: f64,
    /// Fraction of the planned work that was completed.
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implied_constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<BoundPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub passed: bool,
}

/// Accumulates bound checks; `finish` produces the report.
#[derive(Debug, Clone)]
pub struct BoundTally {
    report: BoundReport,
    keep_points: bool,
    scale: f64,
}

pub const DEFAULT_REL_TOL: f64 = 1e-9;
pub const SE_MULTIPLIER: f64 = 3.0;

impl BoundTally {
    pub fn new(bound_id: &str, description: &str) -> Self {
        Self {
            report: BoundReport {
                bound_id: bound_id.to_string(),
                description: description.to_string(),
                points_checked: 0,
                violations: 0,
                inconclusive: 0,
                max_margin: f64::NEG_INFINITY,
                max_excess: f64::NEG_INFINITY,
                rel_tolerance: DEFAULT_REL_TOL,
                se_multiplier: SE_MULTIPLIER,
                coverage: 1.0,
                implied_constant: None,
                points: Vec::new(),
                notes: Vec::new(),
                passed: true,
            },
            keep_points: false,
            scale: 0.0,
        }
    }

    /// Floor for the relative tolerance, so one-sided bounds with a zero
    /// right-hand side are judged against the size of the other side.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale.abs();
        self
    }

    pub fn with_rel_tolerance(mut self, rel: f64) -> Self {
        self.report.rel_tolerance = rel;
        self
    }

    /// Keep every evaluated point in the report.
    pub fn keep_points(mut self) -> Self {
        self.keep_points = true;
        self
    }

    fn record(&mut self, x: f64, lhs: f64, rhs: f64, se: f64, margin: f64) -> PointStatus {
        let r = &mut self.report;
        let tol = r.rel_tolerance * rhs.abs().max(self.scale) + r.se_multiplier * se;
        let excess = margin - tol;
        r.points_checked += 1;
        let status = if margin.is_nan() || excess > 0.0 {
            r.violations += 1;
            PointStatus::Violation
        } else {
            PointStatus::Ok
        };
        if !margin.is_nan() {
            r.max_margin = r.max_margin.max(margin);
            r.max_excess = r.max_excess.max(excess);
        } else {
            r.max_margin = f64::NAN;
        }
        if self.keep_points {
            r.points.push(BoundPoint { x, lhs, rhs, se, margin, status });
        }
        status
    }

    /// lhs ≤ rhs
    pub fn upper(&mut self, x: f64, lhs: f64, rhs: f64, se: f64) -> PointStatus {
        self.record(x, lhs, rhs, se, lhs - rhs)
    }

    /// lhs ≥ rhs
    pub fn lower(&mut self, x: f64, lhs: f64, rhs: f64, se: f64) -> PointStatus {
        self.record(x, lhs, rhs, se, rhs - lhs)
    }

    /// A point that could not be resolved; never a violation.
    pub fn inconclusive(&mut self, x: f64, lhs: f64, rhs: f64) {
        self.report.inconclusive += 1;
        if self.keep_points {
            self.report.points.push(BoundPoint {
                x,
                lhs,
                rhs,
                se: f64::NAN,
                margin: f64::NAN,
                status: PointStatus::Inconclusive,
            });
        }
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.report.notes.push(note.into());
    }

    pub fn set_coverage(&mut self, coverage: f64) {
        self.report.coverage = coverage;
    }

    pub fn set_implied_constant(&mut self, c: f64) {
        self.report.implied_constant = Some(c);
    }

    /// Merges another tally for the same bound (used to combine batches).
    pub fn merge(&mut self, other: BoundTally) {
        let (r, o) = (&mut self.report, other.report);
        r.points_checked += o.points_checked;
        r.violations += o.violations;
        r.inconclusive += o.inconclusive;
        r.max_margin = if r.max_margin.is_nan() || o.max_margin.is_nan() {
            f64::NAN
        } else {
            r.max_margin.max(o.max_margin)
        };
        r.max_excess = r.max_excess.max(o.max_excess);
        r.points.extend(o.points);
        r.notes.extend(o.notes);
    }

    pub fn finish(mut self) -> BoundReport {
        let r = &mut self.report;
        r.passed = r.violations == 0;
        r.sanitize();
        self.report
    }
}

impl BoundReport {
    fn sanitize(&mut self) {
        // JSON has no infinities; an empty report has no margin
        if !self.max_margin.is_finite() && self.points_checked == 0 {
            self.max_margin = 0.0;
        }
        if !self.max_excess.is_finite() && self.points_checked == 0 {
            self.max_excess = 0.0;
        }
    }

    /// One line: `bound_id  PASS|FAIL  checked/violations`.
    pub fn summary_line(&self) -> String {
        format!(
            "{:<28} {:<4} checked={} violations={} inconclusive={} max_margin={:.3e} coverage={:.3}",
            self.bound_id,
            if self.passed { "PASS" } else { "FAIL" },
            self.points_checked,
            self.violations,
            self.inconclusive,
            self.max_margin,
            self.coverage
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_rule() {
        let mut t = BoundTally::new("b", "x <= 1").keep_points();
        assert_eq!(t.upper(0.0, 1.0 + 5e-10, 1.0, 0.0), PointStatus::Ok);
        assert_eq!(t.upper(0.0, 1.1, 1.0, 0.04), PointStatus::Ok);
        assert_eq!(t.upper(0.0, 1.2, 1.0, 0.04), PointStatus::Violation);
        assert_eq!(t.lower(0.0, 0.5, 1.0, 0.0), PointStatus::Violation);
        assert_eq!(t.upper(0.0, f64::NAN, 1.0, 0.0), PointStatus::Violation);
        t.inconclusive(0.0, 0.0, 1.0);
        let r = t.finish();
        assert_eq!((r.points_checked, r.violations, r.inconclusive), (5, 3, 1));
        assert!(!r.passed);
        assert_eq!(r.points.len(), 6);
    }

    #[test]
    fn empty_report_serializes() {
        let r = BoundTally::new("empty", "").finish();
        assert!(r.passed);
        let s = serde_json::to_string(&r).unwrap();
        let back: BoundReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
