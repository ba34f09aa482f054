//! Agreement statistics and evaluation reporting: RMS landmark position
//! error, Bland-Altman bias/precision/limits-of-agreement, one-sample and
//! Welch t-tests with Bonferroni thresholding, and assembly of the full
//! evaluation report (strain error tables, IoU histogram, Bland-Altman
//! panels) as deterministic JSON plus CSV plot data.
//!
//! The t distribution CDF is computed from scratch via the regularized
//! incomplete beta function (Lanczos log-gamma plus a Lentz-style
//! continued fraction) so the crate carries no statistics dependency.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, LandmarkGrid, LandmarkSequence, LANDMARK_COUNT};
use crate::strain::{strain_curve, SliceStrain};

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

/// Natural log of the gamma function, Lanczos approximation (g = 7, 9
/// coefficients), accurate to ~1e-13 relative over the positive reals.
pub fn lgamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x).
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().abs().ln()
            - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued-fraction kernel for the incomplete beta function (modified
/// Lentz iteration).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FLOOR: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FLOOR {
        d = FLOOR;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + num * d;
        if d.abs() < FLOOR {
            d = FLOOR;
        }
        c = 1.0 + num / c;
        if c.abs() < FLOOR {
            c = FLOOR;
        }
        d = 1.0 / d;
        h *= d * c;
        let num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + num * d;
        if d.abs() < FLOOR {
            d = FLOOR;
        }
        c = 1.0 + num / c;
        if c.abs() < FLOOR {
            c = FLOOR;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b), the CDF of the Beta
/// distribution. Switches to the symmetric form when the continued
/// fraction would converge slowly.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!("beta parameters must be positive, got {a}, {b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("beta argument {x} outside [0, 1]")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (lgamma(a) + lgamma(b) - lgamma(a + b));
    let front = ln_front.exp();
    Ok(if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    })
}

/// Two-sided tail probability of the t distribution:
/// P(|T| >= |t|) for T ~ t(df).
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::Domain(format!("degrees of freedom must be positive, got {df}")));
    }
    if !t.is_finite() {
        return Ok(if t.is_nan() { f64::NAN } else { 0.0 });
    }
    regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// CDF of the t distribution with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> Result<f64> {
    let p = t_two_sided_p(t, df)?;
    Ok(if t >= 0.0 { 1.0 - 0.5 * p } else { 0.5 * p })
}

/// Quantile (inverse CDF) of the t distribution, by bisection on `t_cdf`.
/// `prob` must lie strictly inside (0, 1).
pub fn t_quantile(prob: f64, df: f64) -> Result<f64> {
    if !(0.0 < prob && prob < 1.0) {
        return Err(Error::Domain(format!("quantile probability {prob} outside (0, 1)")));
    }
    if prob == 0.5 {
        return Ok(0.0);
    }
    // Solve for the upper-tail magnitude and mirror for prob < 0.5.
    let target = if prob > 0.5 { prob } else { 1.0 - prob };
    let mut hi = 1.0;
    while t_cdf(hi, df)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Domain(format!("t quantile for p={prob}, df={df} out of range")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    let magnitude = 0.5 * (lo + hi);
    Ok(if prob > 0.5 { magnitude } else { -magnitude })
}

/// Bonferroni-corrected per-test significance threshold.
pub fn bonferroni_threshold(alpha: f64, n_tests: usize) -> f64 {
    alpha / n_tests.max(1) as f64
}

// ---------------------------------------------------------------------------
// Basic descriptive helpers
// ---------------------------------------------------------------------------

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than 2 values.
fn sample_sd(values: &[f64], center: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - center) * (v - center)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Position error
// ---------------------------------------------------------------------------

/// Root-mean-square landmark position error in millimetres:
/// sqrt(mean over the 168 landmarks of squared distance) * pixel spacing.
pub fn rms_position_error(
    pred: &LandmarkGrid,
    truth: &LandmarkGrid,
    pixel_spacing_mm: f64,
) -> f64 {
    let ss: f64 = pred
        .points()
        .iter()
        .zip(truth.points())
        .map(|(p, q)| p.distance_sq(q))
        .sum();
    (ss / LANDMARK_COUNT as f64).sqrt() * pixel_spacing_mm
}

// ---------------------------------------------------------------------------
// Bland-Altman agreement
// ---------------------------------------------------------------------------

/// Agreement between two measurements of the same quantity: mean
/// difference (bias), standard deviation of the differences (precision,
/// n-1 denominator), and 95% limits of agreement bias +- 1.96 precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub bias: f64,
    pub precision: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
}

/// Agreement summary plus the (mean, difference) scatter points backing a
/// Bland-Altman plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub agreement: AgreementResult,
    /// One [mean of the pair, a - b] row per input pair, in input order.
    pub points: Vec<[f64; 2]>,
}

/// Bland-Altman analysis of paired measurements (a, b): differences are
/// a - b, plotted against the pair means.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::Domain(format!(
            "agreement analysis needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let points: Vec<[f64; 2]> = pairs.iter().map(|&(a, b)| [0.5 * (a + b), a - b]).collect();
    let diffs: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let bias = mean(&diffs);
    let precision = sample_sd(&diffs, bias);
    Ok(BlandAltman {
        agreement: AgreementResult {
            bias,
            precision,
            loa_low: bias - 1.96 * precision,
            loa_high: bias + 1.96 * precision,
            n: pairs.len(),
        },
        points,
    })
}

/// CSV rendering of one Bland-Altman panel: comment header carrying the
/// summary statistics, then one mean,difference row per pair.
pub fn bland_altman_csv(panel: &BlandAltman) -> String {
    let a = &panel.agreement;
    let mut out = String::new();
    out.push_str(&format!(
        "# bias={} precision={} loa_low={} loa_high={} n={}\n",
        a.bias, a.precision, a.loa_low, a.loa_high, a.n
    ));
    out.push_str("mean,difference\n");
    for p in &panel.points {
        out.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    out
}

// ---------------------------------------------------------------------------
// t-tests
// ---------------------------------------------------------------------------

/// Result of a t-test. `df` is real-valued (Welch-Satterthwaite), `p` is
/// two-sided, and `significant` compares p against the threshold the test
/// was run with. `degenerate` marks zero-variance inputs whose statistic
/// is not informative; `ci95` is the 95% confidence interval of the mean
/// difference (two-sample test only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
    pub degenerate: bool,
    pub ci95: Option<[f64; 2]>,
}

/// One-sample two-sided t-test of `diffs` against mean `mu0`.
/// Zero variance is reported rather than rejected: t=0, p=1 when the mean
/// equals mu0; p=0 with the degenerate flag when it does not.
pub fn t_test_one_sample(diffs: &[f64], mu0: f64, significance: f64) -> Result<TTestResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Domain(format!("t-test needs at least 2 values, got {n}")));
    }
    let m = mean(diffs);
    let sd = sample_sd(diffs, m);
    let df = (n - 1) as f64;
    if sd == 0.0 {
        return Ok(if m == mu0 {
            TTestResult { t: 0.0, df, p: 1.0, significant: false, degenerate: false, ci95: None }
        } else {
            TTestResult {
                t: if m > mu0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
                significant: true,
                degenerate: true,
                ci95: None,
            }
        });
    }
    let t = (m - mu0) / (sd / (n as f64).sqrt());
    let p = t_two_sided_p(t, df)?;
    Ok(TTestResult { t, df, p, significant: p < significance, degenerate: false, ci95: None })
}

/// Welch's unequal-variances two-sample t-test with Welch-Satterthwaite
/// degrees of freedom and a 95% confidence interval for mean(a) - mean(b).
pub fn welch_t_test(sample_a: &[f64], sample_b: &[f64], significance: f64) -> Result<TTestResult> {
    let (na, nb) = (sample_a.len(), sample_b.len());
    if na < 2 || nb < 2 {
        return Err(Error::Domain(format!(
            "Welch test needs at least 2 values per sample, got {na} and {nb}"
        )));
    }
    let (ma, mb) = (mean(sample_a), mean(sample_b));
    let va = sample_sd(sample_a, ma).powi(2);
    let vb = sample_sd(sample_b, mb).powi(2);
    let diff = ma - mb;
    if va == 0.0 && vb == 0.0 {
        let df = (na + nb - 2) as f64;
        return Ok(if diff == 0.0 {
            TTestResult {
                t: 0.0,
                df,
                p: 1.0,
                significant: false,
                degenerate: true,
                ci95: Some([0.0, 0.0]),
            }
        } else {
            TTestResult {
                t: if diff > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
                significant: true,
                degenerate: true,
                ci95: Some([diff, diff]),
            }
        });
    }
    let (wa, wb) = (va / na as f64, vb / nb as f64);
    let se = (wa + wb).sqrt();
    let df = (wa + wb).powi(2)
        / (wa * wa / (na as f64 - 1.0) + wb * wb / (nb as f64 - 1.0));
    let t = diff / se;
    let p = t_two_sided_p(t, df)?;
    let t_crit = t_quantile(0.975, df)?;
    Ok(TTestResult {
        t,
        df,
        p,
        significant: p < significance,
        degenerate: false,
        ci95: Some([diff - t_crit * se, diff + t_crit * se]),
    })
}

// ---------------------------------------------------------------------------
// Run evaluation
// ---------------------------------------------------------------------------

/// One case's landmark sequence on one side of a comparison.
#[derive(Debug, Clone)]
pub struct EvalCaseInput {
    pub case_id: String,
    /// Optional cohort/region tag used to group the strain tables.
    pub region: Option<String>,
    pub sequence: LandmarkSequence,
    pub pixel_spacing_mm: f64,
}

/// Predicted and reference bounding boxes for one case (localizer IoU).
#[derive(Debug, Clone)]
pub struct BoxPairInput {
    pub case_id: String,
    pub pred: BoundingBox,
    pub truth: BoundingBox,
}

/// The five strain measures tabulated per group, keyed in fixed order.
pub const STRAIN_MEASURES: [&str; 5] =
    ["eps_c_whole", "eps_c_subendo", "eps_c_midwall", "eps_c_subepi", "eps_r"];

fn measure_value(s: &SliceStrain, measure: &str) -> f64 {
    match measure {
        "eps_c_whole" => s.eps_c,
        "eps_c_subendo" => s.eps_c_subendo,
        "eps_c_midwall" => s.eps_c_midwall,
        "eps_c_subepi" => s.eps_c_subepi,
        "eps_r" => s.eps_r,
        other => unreachable!("unknown strain measure {other}"),
    }
}

/// Error-table row: signed differences (a - b) and absolute differences
/// for one strain measure over one case group, with a one-sample t-test of
/// the differences against zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub n: usize,
    pub bias: f64,
    pub sd: f64,
    pub abs_mean: f64,
    pub abs_sd: f64,
    pub t: Option<f64>,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

/// Mean and standard deviation of a scalar over cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Localizer overlap summary with a fixed-width histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSection {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub bin_width: f64,
    /// Counts for [0,0.05), [0.05,0.10), ..., [0.95,1.0]; an exact 1.0
    /// falls in the last bin.
    pub counts: Vec<usize>,
}

/// Full evaluation report. Serialization is deterministic: keyed
/// collections are ordered maps and cases are processed in case-id order,
/// so the same inputs produce byte-identical JSON regardless of input
/// permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub label_a: String,
    pub label_b: String,
    pub n_cases: usize,
    pub significance_threshold: f64,
    /// Strain error tables: the "all" group plus one group per region tag.
    pub strain: BTreeMap<String, BTreeMap<String, MeasureRow>>,
    pub position_rms_mm: BTreeMap<String, ScalarSummary>,
    pub iou: Option<IouSection>,
    pub bland_altman: BTreeMap<String, BlandAltman>,
    pub throughput_frames_per_sec: Option<f64>,
}

pub const EVAL_SCHEMA: &str = "tagstrain-eval-v1";

/// Labels for the two sides of a comparison; defaults describe the usual
/// prediction-versus-reference evaluation, while a two-run comparison can
/// name both sides (observer semantics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLabels {
    pub a: String,
    pub b: String,
}

impl Default for EvalLabels {
    fn default() -> Self {
        EvalLabels { a: "prediction".into(), b: "reference".into() }
    }
}

fn index_cases<'a>(
    side: &str,
    cases: &'a [EvalCaseInput],
) -> Result<BTreeMap<&'a str, &'a EvalCaseInput>> {
    let mut map = BTreeMap::new();
    for c in cases {
        if map.insert(c.case_id.as_str(), c).is_some() {
            return Err(Error::Config(format!("duplicate case id in {side} set: {}", c.case_id)));
        }
    }
    Ok(map)
}

/// Compares two landmark sets case by case and assembles the evaluation
/// report: per-measure end-systolic strain error tables (grouped by region
/// tag when present), RMS position error at end-diastole and end-systole,
/// the IoU summary when box pairs are given, and Bland-Altman panels per
/// strain measure. The end-systolic frame is taken from side B (the
/// reference side). Both sides must contain exactly the same case ids.
pub fn evaluate_run(
    side_a: &[EvalCaseInput],
    side_b: &[EvalCaseInput],
    boxes: &[BoxPairInput],
    labels: &EvalLabels,
    throughput_fps: Option<f64>,
) -> Result<EvalReport> {
    let a_map = index_cases("A", side_a)?;
    let b_map = index_cases("B", side_b)?;
    let a_ids: BTreeSet<&str> = a_map.keys().copied().collect();
    let b_ids: BTreeSet<&str> = b_map.keys().copied().collect();
    if a_ids != b_ids {
        let missing_a: Vec<&str> = b_ids.difference(&a_ids).copied().collect();
        let missing_b: Vec<&str> = a_ids.difference(&b_ids).copied().collect();
        let mut msg = String::from("case sets differ:");
        if !missing_a.is_empty() {
            msg.push_str(&format!(" missing from A: {};", missing_a.join(", ")));
        }
        if !missing_b.is_empty() {
            msg.push_str(&format!(" missing from B: {};", missing_b.join(", ")));
        }
        return Err(Error::Config(msg));
    }
    if a_ids.is_empty() {
        return Err(Error::Config("evaluation needs at least one case".into()));
    }

    // Per-case end-systolic strain values and position errors, in case-id
    // order (BTreeSet iteration) for deterministic aggregation.
    struct CaseEs {
        region: Option<String>,
        es_a: SliceStrain,
        es_b: SliceStrain,
        rms_ed: f64,
        rms_es: f64,
    }
    let mut per_case: Vec<CaseEs> = Vec::with_capacity(a_ids.len());
    for id in &a_ids {
        let ca = a_map[id];
        let cb = b_map[id];
        let curve_a = strain_curve(&ca.sequence).map_err(Error::stage("strain(A)"))?;
        let curve_b = strain_curve(&cb.sequence).map_err(Error::stage("strain(B)"))?;
        let es = curve_b.es_frame;
        if es >= curve_a.per_frame.len() {
            return Err(Error::Config(format!(
                "case {id}: reference end-systolic frame {es} outside A's {} frames",
                curve_a.per_frame.len()
            )));
        }
        per_case.push(CaseEs {
            region: cb.region.clone(),
            es_a: curve_a.per_frame[es],
            es_b: curve_b.per_frame[es],
            rms_ed: rms_position_error(
                ca.sequence.frame(0),
                cb.sequence.frame(0),
                cb.pixel_spacing_mm,
            ),
            rms_es: rms_position_error(
                ca.sequence.frame(es),
                cb.sequence.frame(es),
                cb.pixel_spacing_mm,
            ),
        });
    }

    // Group membership: "all" plus one group per distinct region tag.
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    groups.insert("all".into(), (0..per_case.len()).collect());
    for (idx, c) in per_case.iter().enumerate() {
        if let Some(region) = &c.region {
            groups.entry(region.clone()).or_default().push(idx);
        }
    }

    let n_tests = groups.len() * STRAIN_MEASURES.len();
    let threshold = bonferroni_threshold(0.05, n_tests);

    let mut strain_tables: BTreeMap<String, BTreeMap<String, MeasureRow>> = BTreeMap::new();
    for (group, members) in &groups {
        let mut table = BTreeMap::new();
        for measure in STRAIN_MEASURES {
            let diffs: Vec<f64> = members
                .iter()
                .map(|&i| {
                    measure_value(&per_case[i].es_a, measure)
                        - measure_value(&per_case[i].es_b, measure)
                })
                .collect();
            let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
            let bias = mean(&diffs);
            let abs_mean = mean(&abs);
            let row = if diffs.len() >= 2 {
                let test = t_test_one_sample(&diffs, 0.0, threshold)?;
                MeasureRow {
                    n: diffs.len(),
                    bias,
                    sd: sample_sd(&diffs, bias),
                    abs_mean,
                    abs_sd: sample_sd(&abs, abs_mean),
                    t: test.t.is_finite().then_some(test.t),
                    df: test.df,
                    p: test.p,
                    significant: test.significant,
                }
            } else {
                MeasureRow {
                    n: diffs.len(),
                    bias,
                    sd: 0.0,
                    abs_mean,
                    abs_sd: 0.0,
                    t: None,
                    df: 0.0,
                    p: 1.0,
                    significant: false,
                }
            };
            table.insert(measure.to_string(), row);
        }
        strain_tables.insert(group.clone(), table);
    }

    let mut position = BTreeMap::new();
    let eds: Vec<f64> = per_case.iter().map(|c| c.rms_ed).collect();
    let ess: Vec<f64> = per_case.iter().map(|c| c.rms_es).collect();
    let (ed_mean, es_mean) = (mean(&eds), mean(&ess));
    position.insert(
        "ed".to_string(),
        ScalarSummary { mean: ed_mean, sd: sample_sd(&eds, ed_mean), n: eds.len() },
    );
    position.insert(
        "es".to_string(),
        ScalarSummary { mean: es_mean, sd: sample_sd(&ess, es_mean), n: ess.len() },
    );

    let iou = if boxes.is_empty() {
        None
    } else {
        let mut seen = BTreeSet::new();
        let mut by_id: BTreeMap<&str, f64> = BTreeMap::new();
        for bp in boxes {
            if !a_ids.contains(bp.case_id.as_str()) {
                return Err(Error::Config(format!(
                    "box pair for unknown case id: {}",
                    bp.case_id
                )));
            }
            if !seen.insert(bp.case_id.as_str()) {
                return Err(Error::Config(format!("duplicate box pair for case {}", bp.case_id)));
            }
            by_id.insert(bp.case_id.as_str(), bp.pred.iou(&bp.truth));
        }
        let values: Vec<f64> = by_id.values().copied().collect();
        let m = mean(&values);
        let mut counts = vec![0usize; 20];
        for &v in &values {
            let bin = ((v / 0.05).floor() as usize).min(19);
            counts[bin] += 1;
        }
        Some(IouSection {
            mean: m,
            sd: sample_sd(&values, m),
            n: values.len(),
            bin_width: 0.05,
            counts,
        })
    };

    let mut panels = BTreeMap::new();
    if per_case.len() >= 2 {
        for measure in STRAIN_MEASURES {
            let pairs: Vec<(f64, f64)> = per_case
                .iter()
                .map(|c| (measure_value(&c.es_a, measure), measure_value(&c.es_b, measure)))
                .collect();
            panels.insert(measure.to_string(), bland_altman(&pairs)?);
        }
    }

    Ok(EvalReport {
        schema: EVAL_SCHEMA.to_string(),
        label_a: labels.a.clone(),
        label_b: labels.b.clone(),
        n_cases: per_case.len(),
        significance_threshold: threshold,
        strain: strain_tables,
        position_rms_mm: position,
        iou,
        bland_altman: panels,
        throughput_frames_per_sec: throughput_fps,
    })
}
