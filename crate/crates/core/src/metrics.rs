//! Region similarity J and boundary F-measure.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::synthdata::boundary_gt;

/// Threshold turning soft masks into binary ones.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims("region_similarity", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `ceil(0.008 * diagonal)`.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * (height as f64).hypot(width as f64)).ceil() as usize
}

/// Contour F-measure with a Chebyshev matching tolerance.
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance: usize) -> Result<f64> {
    check_dims("boundary_f", pred, gt)?;
    let (bp, bg) = (boundary_gt(pred), boundary_gt(gt));
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let matched = |a: &Mask, b: &Mask| a.and(&b.dilate_square(tolerance)).map(|m| m.count());
    let precision = matched(&bp, &bg)? as f64 / np as f64;
    let recall = matched(&bg, &bp)? as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub clip: String,
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipScore {
    pub clip: String,
    pub frames: usize,
    pub mean_j: f64,
    pub mean_f: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub clips: Vec<ClipScore>,
    /// Mean of the per-clip means.
    pub mean_j: f64,
    pub mean_f: f64,
    pub tolerance: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Scores `(clip, predictions, ground truth)` triples frame by frame.
    pub fn evaluate<'a>(
        clips: impl IntoIterator<Item = (&'a str, &'a [Mask], &'a [Mask])>,
        tolerance: usize,
    ) -> Result<Self> {
        let mut report = EvalReport {
            tolerance,
            ..Self::default()
        };
        for (name, preds, gts) in clips {
            if preds.len() != gts.len() {
                return Err(Error::invalid(
                    "evaluate",
                    format!("clip {name}: {} predictions for {} frames", preds.len(), gts.len()),
                ));
            }
            let start = report.frames.len();
            for (t, (p, g)) in preds.iter().zip(gts).enumerate() {
                report.frames.push(FrameScore {
                    clip: name.to_string(),
                    frame: t,
                    j: region_similarity(p, g)?,
                    f: boundary_f(p, g, tolerance)?,
                });
            }
            let scores = &report.frames[start..];
            report.clips.push(ClipScore {
                clip: name.to_string(),
                frames: scores.len(),
                mean_j: mean(scores.iter().map(|s| s.j)),
                mean_f: mean(scores.iter().map(|s| s.f)),
            });
        }
        report.mean_j = mean(report.clips.iter().map(|c| c.mean_j));
        report.mean_f = mean(report.clips.iter().map(|c| c.mean_f));
        Ok(report)
    }

    /// One `clip frame J F` line per frame, then a `#`-prefixed summary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.frames {
            let _ = writeln!(out, "{} {} {:.6} {:.6}", s.clip, s.frame, s.j, s.f);
        }
        let _ = writeln!(out, "# tolerance_px {}", self.tolerance);
        for c in &self.clips {
            let _ = writeln!(out, "# clip {} frames {} mean_J {:.6} mean_F {:.6}", c.clip, c.frames, c.mean_j, c.mean_f);
        }
        let _ = writeln!(out, "# mean_J {:.6}", self.mean_j);
        let _ = writeln!(out, "# mean_F {:.6}", self.mean_f);
        out
    }

    /// Number of summary lines appended by [`render`](Self::render).
    pub fn summary_lines(&self) -> usize {
        3 + self.clips.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x))
    }

    #[test]
    fn j_examples() {
        let a = rect(20, 20, 2, 2, 8, 8);
        assert_eq!(region_similarity(&a, &a).unwrap(), 1.0);
        let b = rect(20, 20, 12, 12, 4, 4);
        assert_eq!(region_similarity(&a, &b).unwrap(), 0.0);
        // Shifted by half the width: |∩| = A/2, |∪| = 3A/2.
        let c = rect(20, 20, 2, 6, 8, 8);
        assert_eq!(region_similarity(&a, &c).unwrap(), 1.0 / 3.0);
        let e = Mask::empty(20, 20);
        assert_eq!(region_similarity(&e, &e).unwrap(), 1.0);
        assert!(region_similarity(&a, &Mask::empty(3, 3)).is_err());
    }

    /// Brute-force Chebyshev matching over all boundary pixel pairs.
    fn brute_f(pred: &Mask, gt: &Mask, tol: usize) -> f64 {
        let pts = |m: &Mask| {
            let b = boundary_gt(m);
            let (h, w) = b.dims();
            (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| b.get(y, x)).collect::<Vec<_>>()
        };
        let (p, g) = (pts(pred), pts(gt));
        if p.is_empty() && g.is_empty() {
            return 1.0;
        }
        let near = |a: (usize, usize), set: &[(usize, usize)]| {
            set.iter().any(|b| a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= tol)
        };
        let prec = p.iter().filter(|&&a| near(a, &g)).count() as f64 / p.len().max(1) as f64;
        let rec = g.iter().filter(|&&a| near(a, &p)).count() as f64 / g.len().max(1) as f64;
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    #[test]
    fn f_examples() {
        let a = rect(24, 24, 5, 5, 10, 10);
        assert_eq!(boundary_f(&a, &a, 0).unwrap(), 1.0);
        let far = rect(24, 24, 18, 18, 4, 4);
        assert_eq!(boundary_f(&a, &far, 2).unwrap(), 0.0);
        let shifted = rect(24, 24, 5, 6, 10, 10);
        assert_eq!(brute_f(&a, &shifted, 2), 1.0);
        assert_eq!(boundary_f(&a, &shifted, 2).unwrap(), 1.0);
        // At zero tolerance the shift leaves only the horizontal overlaps.
        assert_eq!(boundary_f(&a, &shifted, 0).unwrap(), brute_f(&a, &shifted, 0));
        assert!(boundary_f(&a, &shifted, 0).unwrap() < 1.0);
    }

    #[test]
    fn default_tolerance_64() {
        // diagonal 90.5 px -> 0.72 -> 1
        assert_eq!(default_tolerance(64, 64), 1);
        assert_eq!(default_tolerance(473, 473), 6);
    }

    #[test]
    fn report_counts_and_means() {
        let a = rect(16, 16, 2, 2, 6, 6);
        let gts = [a.clone(), a.clone()];
        let preds = [a.clone(), Mask::empty(16, 16)];
        let r = EvalReport::evaluate([("c0", &preds[..], &gts[..])], 1).unwrap();
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.mean_j, 0.5);
        assert_eq!(r.render().lines().count(), r.frames.len() + r.summary_lines());
        assert!(EvalReport::evaluate([("c0", &preds[..1], &gts[..])], 1).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
        (proptest::collection::vec(any::<bool>(), 144), proptest::collection::vec(any::<bool>(), 144))
            .prop_map(|(a, b)| (Mask::from_vec(12, 12, a).unwrap(), Mask::from_vec(12, 12, b).unwrap()))
    }

    proptest! {
        #[test]
        fn j_is_symmetric((a, b) in mask_strategy()) {
            prop_assert_eq!(region_similarity(&a, &b).unwrap(), region_similarity(&b, &a).unwrap());
        }

        #[test]
        fn j_is_one_iff_identical((a, b) in mask_strategy()) {
            prop_assert_eq!(region_similarity(&a, &b).unwrap() == 1.0, a == b);
        }

        #[test]
        fn f_matches_brute_force_and_is_monotone((a, b) in mask_strategy()) {
            let mut last = 0.0;
            for tol in 0..4 {
                let f = boundary_f(&a, &b, tol).unwrap();
                prop_assert!((f - brute_f(&a, &b, tol)).abs() < 1e-12);
                prop_assert!(f >= last);
                prop_assert!((0.0..=1.0).contains(&f));
                last = f;
            }
            prop_assert_eq!(boundary_f(&a, &b, 0).unwrap() == 1.0, boundary_gt(&a) == boundary_gt(&b));
        }

        #[test]
        fn metrics_are_translation_invariant(y in 3usize..8, x in 3usize..8, h in 2usize..6, w in 2usize..6,
                                             dy in -2isize..3, dx in -2isize..3, sy in -2isize..3, sx in -2isize..3) {
            let a = rect(24, 24, y + 4, x + 4, h, w);
            let b = rect(24, 24, (y as isize + 4 + sy) as usize, (x as isize + 4 + sx) as usize, h, w);
            let (ta, tb) = (a.translate(dy, dx), b.translate(dy, dx));
            prop_assert_eq!(region_similarity(&a, &b).unwrap(), region_similarity(&ta, &tb).unwrap());
            prop_assert_eq!(boundary_f(&a, &b, 1).unwrap(), boundary_f(&ta, &tb, 1).unwrap());
        }
    }
}
