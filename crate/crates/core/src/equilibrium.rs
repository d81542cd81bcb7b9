//! Spike-perturbation tests of the equilibrium inequality
//! `liminf_{h↓0} (J(t, x, û) − J(t, x, u_{t+h})) / h ≥ 0`.
//!
//! The liminf is approximated by a weighted affine fit of the quotient
//! against `h`, extrapolated to `h = 0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::FeedbackControl;
use crate::model::ProblemSpec;
use crate::sde::{paired_value_difference, spike_control, Estimate, SimConfig};

/// Intercepts below `−tol_stat − FAIL_MARGIN·stderr` count as failures.
pub const FAIL_MARGIN: f64 = 1.0;

/// Multiple of the intercept standard error used as tolerance.
pub const TOL_SIGMAS: f64 = 3.0;

/// Relative floor on the tolerance. Paired estimators can make the quotient
/// deterministic, leaving a standard error of pure roundoff.
pub const ROUNDOFF_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct EquilibriumTestPlan {
    pub test_points: Vec<(f64, Vec<f64>)>,
    pub deviations: Vec<FeedbackControl>,
    pub h_sequence: Vec<f64>,
    pub radii: Vec<f64>,
    pub cfg: SimConfig,
}

impl EquilibriumTestPlan {
    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        if self.test_points.is_empty() || self.deviations.is_empty() || self.radii.is_empty() {
            return Err(Error::domain(
                "plan needs at least one point, deviation and radius",
            ));
        }
        if self.h_sequence.is_empty()
            || self.h_sequence.iter().any(|h| !(h.is_finite() && *h > 0.0))
        {
            return Err(Error::domain("h values must be positive"));
        }
        if self.h_sequence.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::domain("h sequence must be strictly decreasing"));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::domain("radii must be positive"));
        }
        let h_max = self.h_sequence[0];
        let tol = 1e-12 * spec.horizon.max(1.0);
        for (t, x) in &self.test_points {
            if x.len() != spec.dim_state() {
                return Err(Error::domain("test point has the wrong dimension"));
            }
            if *t < 0.0 || t + h_max > spec.horizon + tol {
                return Err(Error::domain(format!(
                    "test point t = {t} with h = {h_max} runs past the horizon {}",
                    spec.horizon
                )));
            }
        }
        for d in &self.deviations {
            if d.dim() != spec.dim_control() {
                return Err(Error::domain("deviation dimension differs from dim U"));
            }
            if let Some(u) = d.as_constant() {
                if !spec.controls.contains(u) {
                    return Err(Error::domain(format!("deviation {u:?} lies outside U")));
                }
            }
        }
        self.cfg.validate(spec.horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    /// Pass only if every part passes; any failure fails the whole.
    pub fn combine(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
        let mut out = Verdict::Pass;
        for v in verdicts {
            match v {
                Verdict::Fail => return Verdict::Fail,
                Verdict::Inconclusive => out = Verdict::Inconclusive,
                Verdict::Pass => {}
            }
        }
        out
    }
}

/// Quotient `(J(base) − J(spike)) / h` at one `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotientRow {
    pub h: f64,
    pub quotient: f64,
    pub stderr: f64,
    pub exit_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_stderr: f64,
    pub chi2: f64,
    pub tol_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub deviation: String,
    pub radius: f64,
    pub rows: Vec<QuotientRow>,
    pub fit: Option<AffineFit>,
    pub verdict: Verdict,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub base: String,
    pub deviations: Vec<String>,
    pub h_sequence: Vec<f64>,
    pub radii: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub tol_sigmas: f64,
    pub fail_margin_sigmas: f64,
    pub entries: Vec<EntryReport>,
    pub verdict: Verdict,
}

impl EquilibriumReport {
    /// One row per `(point, deviation, radius, h)`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.entries.first().map_or(0, |e| e.x.len());
        let mut header = vec!["t".to_owned()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend(
            [
                "deviation",
                "radius",
                "h",
                "quotient",
                "stderr",
                "exit_fraction",
                "intercept",
                "intercept_stderr",
                "tol_stat",
                "verdict",
            ]
            .map(str::to_owned),
        );
        out.write_record(&header)?;
        for e in &self.entries {
            for r in &e.rows {
                let mut row = vec![e.t.to_string()];
                row.extend(e.x.iter().map(f64::to_string));
                row.push(e.deviation.clone());
                row.push(e.radius.to_string());
                row.push(r.h.to_string());
                row.push(r.quotient.to_string());
                row.push(r.stderr.to_string());
                row.push(r.exit_fraction.to_string());
                match &e.fit {
                    Some(f) => {
                        row.push(f.intercept.to_string());
                        row.push(f.intercept_stderr.to_string());
                        row.push(f.tol_stat.to_string());
                    }
                    None => row.extend(["", "", ""].map(str::to_owned)),
                }
                row.push(format!("{:?}", e.verdict).to_lowercase());
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Quotient estimate plus the fraction of paths leaving the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Quotient {
    pub estimate: Estimate,
    pub exit_fraction: f64,
}

/// `(Ĵ(base) − Ĵ(u_{t+h})) / h` with common random numbers.
pub fn deviation_quotient(
    spec: &ProblemSpec,
    base: &FeedbackControl,
    dev: &FeedbackControl,
    point: (f64, &[f64]),
    h: f64,
    radius: f64,
    cfg: &SimConfig,
) -> Result<Quotient> {
    let (t, x) = point;
    if t + h > spec.horizon + 1e-12 * spec.horizon.max(1.0) {
        return Err(Error::domain(format!(
            "t + h = {} exceeds the horizon",
            t + h
        )));
    }
    let spike = spike_control(base, dev, t, h, radius, x)?;
    let diff = paired_value_difference(spec, base, &spike, (t, x), cfg)?;
    let est = diff.estimate;
    Ok(Quotient {
        estimate: Estimate {
            mean: est.mean.iter().map(|v| v / h).collect(),
            stderr: est.stderr.iter().map(|v| v / h).collect(),
            n_paths: est.n_paths,
        },
        exit_fraction: diff.exit_fraction,
    })
}

/// Seed for the `index`-th h value (splitmix64 of the mixed pair).
pub fn seed_for_h(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Weighted least squares `q = a + b·h` with weights `1/se²`; ordinary least
/// squares when some standard error vanishes. The intercept error is
/// inflated by `sqrt(χ²/(m − 2))` when that exceeds one. The tolerance is
/// `TOL_SIGMAS·stderr + ROUNDOFF_FLOOR·max(1, max |q|)`.
pub fn affine_fit(rows: &[QuotientRow]) -> Option<AffineFit> {
    let m = rows.len();
    if m < 3 {
        return None;
    }
    let weighted = rows.iter().all(|r| r.stderr > 0.0);
    let w = |r: &QuotientRow| {
        if weighted {
            1.0 / (r.stderr * r.stderr)
        } else {
            1.0
        }
    };
    let (mut s0, mut s1, mut s2, mut y0, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let wi = w(r);
        s0 += wi;
        s1 += wi * r.h;
        s2 += wi * r.h * r.h;
        y0 += wi * r.quotient;
        y1 += wi * r.h * r.quotient;
    }
    let det = s0 * s2 - s1 * s1;
    if det.abs() <= f64::EPSILON * s0 * s2 {
        return None;
    }
    let intercept = (s2 * y0 - s1 * y1) / det;
    let slope = (s0 * y1 - s1 * y0) / det;
    let chi2: f64 = rows
        .iter()
        .map(|r| w(r) * (r.quotient - intercept - slope * r.h).powi(2))
        .sum();
    let dof = (m - 2) as f64;
    let var0 = s2 / det;
    let intercept_stderr = if weighted {
        var0.sqrt() * (chi2 / dof).sqrt().max(1.0)
    } else {
        (var0 * chi2 / dof).sqrt()
    };
    let scale = rows.iter().map(|r| r.quotient.abs()).fold(1.0, f64::max);
    Some(AffineFit {
        intercept,
        slope,
        intercept_stderr,
        chi2,
        tol_stat: TOL_SIGMAS * intercept_stderr + ROUNDOFF_FLOOR * scale,
    })
}

/// Verdict for a fitted intercept.
pub fn verdict_for(fit: &AffineFit) -> Verdict {
    if fit.intercept >= -fit.tol_stat {
        Verdict::Pass
    } else if fit.intercept < -fit.tol_stat - FAIL_MARGIN * fit.intercept_stderr {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    }
}

/// Runs the quotient over every `(point, deviation, radius, h)` of the plan
/// and fits each `h` series. Each `h` index uses its own seed so the series
/// points are independent.
pub fn equilibrium_test(
    spec: &ProblemSpec,
    base: &FeedbackControl,
    plan: &EquilibriumTestPlan,
) -> Result<EquilibriumReport> {
    plan.validate(spec)?;
    let mut entries = Vec::new();
    for (t, x) in &plan.test_points {
        for dev in &plan.deviations {
            for &radius in &plan.radii {
                let mut rows = Vec::with_capacity(plan.h_sequence.len());
                for (i, &h) in plan.h_sequence.iter().enumerate() {
                    let cfg = SimConfig {
                        seed: seed_for_h(plan.cfg.seed, i),
                        ..plan.cfg
                    };
                    let q = deviation_quotient(spec, base, dev, (*t, x), h, radius, &cfg)?;
                    rows.push(QuotientRow {
                        h,
                        quotient: q.estimate.value(),
                        stderr: q.estimate.se(),
                        exit_fraction: q.exit_fraction,
                        seed: cfg.seed,
                    });
                }
                let fit = affine_fit(&rows);
                let (verdict, note) = match &fit {
                    Some(f) => (verdict_for(f), None),
                    None => (
                        Verdict::Inconclusive,
                        Some("affine fit needs at least 3 distinct h values".to_owned()),
                    ),
                };
                entries.push(EntryReport {
                    t: *t,
                    x: x.clone(),
                    deviation: dev.describe(),
                    radius,
                    rows,
                    fit,
                    verdict,
                    note,
                });
            }
        }
    }
    let verdict = Verdict::combine(entries.iter().map(|e| e.verdict));
    Ok(EquilibriumReport {
        base: base.describe(),
        deviations: plan
            .deviations
            .iter()
            .map(FeedbackControl::describe)
            .collect(),
        h_sequence: plan.h_sequence.clone(),
        radii: plan.radii.clone(),
        n_paths: plan.cfg.n_paths,
        dt: plan.cfg.dt,
        seed: plan.cfg.seed,
        tol_sigmas: TOL_SIGMAS,
        fail_margin_sigmas: FAIL_MARGIN,
        entries,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(h: f64, q: f64, se: f64) -> QuotientRow {
        QuotientRow {
            h,
            quotient: q,
            stderr: se,
            exit_fraction: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn fit_recovers_exact_line() {
        let rows: Vec<_> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&h| row(h, 0.5 - 2.0 * h, 0.01))
            .collect();
        let f = affine_fit(&rows).unwrap();
        assert!((f.intercept - 0.5).abs() < 1e-12);
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!(f.chi2 < 1e-20);
        assert_eq!(verdict_for(&f), Verdict::Pass);
    }

    #[test]
    fn fit_intercept_stderr_matches_closed_form() {
        // equal weights: var(a) = se² Σh² / (m Σh² − (Σh)²)
        let hs = [0.2, 0.1, 0.05, 0.025];
        let rows: Vec<_> = hs.iter().map(|&h| row(h, -h, 0.1)).collect();
        let f = affine_fit(&rows).unwrap();
        let s1: f64 = hs.iter().sum();
        let s2: f64 = hs.iter().map(|h| h * h).sum();
        let expect = (0.01 * s2 / (4.0 * s2 - s1 * s1)).sqrt();
        assert!((f.intercept_stderr - expect).abs() < 1e-12);
        assert!((f.tol_stat - (3.0 * expect + ROUNDOFF_FLOOR)).abs() < 1e-15);
    }

    #[test]
    fn fewer_than_three_h_values_refuse_fit() {
        assert!(affine_fit(&[row(0.2, 0.0, 0.1), row(0.1, 0.0, 0.1)]).is_none());
    }

    #[test]
    fn verdict_bands() {
        let fit = |a: f64| AffineFit {
            intercept: a,
            slope: 0.0,
            intercept_stderr: 1.0,
            chi2: 0.0,
            tol_stat: 3.0,
        };
        assert_eq!(verdict_for(&fit(-2.9)), Verdict::Pass);
        assert_eq!(verdict_for(&fit(-3.5)), Verdict::Inconclusive);
        assert_eq!(verdict_for(&fit(-4.1)), Verdict::Fail);
    }

    #[test]
    fn combine_verdicts() {
        use Verdict::*;
        assert_eq!(Verdict::combine([Pass, Pass]), Pass);
        assert_eq!(Verdict::combine([Pass, Inconclusive]), Inconclusive);
        assert_eq!(Verdict::combine([Inconclusive, Fail, Pass]), Fail);
    }

    #[test]
    fn zero_stderr_series_falls_back_to_ols() {
        let rows: Vec<_> = [0.2, 0.1, 0.05].iter().map(|&h| row(h, 0.0, 0.0)).collect();
        let f = affine_fit(&rows).unwrap();
        assert_eq!(f.intercept, 0.0);
        assert_eq!(f.intercept_stderr, 0.0);
        assert_eq!(verdict_for(&f), Verdict::Pass);
    }

    #[test]
    fn seeds_differ_per_h() {
        let s: Vec<u64> = (0..4).map(|i| seed_for_h(42, i)).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(seed_for_h(42, 2), s[2]);
    }
}
