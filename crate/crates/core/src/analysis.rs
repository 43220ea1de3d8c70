//! Statistics over trained runs: label-centroid distances, bridge distances
//! and correlation tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::backbone::HiddenTrace;
use crate::bridges::BridgeSpec;
use crate::data::read_jsonl;
use crate::error::{Error, Result};
use crate::latent_map::{project_discrete, MapNet};

/// Mean over unordered label pairs of the distance between class centroids.
pub fn centroid_distance(states_by_label: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<f64> {
    if states_by_label.len() < 2 {
        return Err(Error::SingleLabel);
    }
    let mut centroids = Vec::with_capacity(states_by_label.len());
    for (label, points) in states_by_label {
        let first = points
            .first()
            .ok_or_else(|| Error::Data(format!("label {label} has no states")))?;
        let mut c = vec![0.0; first.len()];
        for p in points {
            if p.len() != c.len() {
                return Err(Error::shape("centroid_distance", format!("state of dim {} among dim {}", p.len(), c.len())));
            }
            c.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|a| *a /= points.len() as f64);
        centroids.push(c);
    }
    if centroids.iter().any(|c| c.len() != centroids[0].len()) {
        return Err(Error::shape("centroid_distance", "labels have states of different dims"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            total += centroids[i]
                .iter()
                .zip(&centroids[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficient: f64,
    pub p_value: f64,
}

/// Product-moment correlation with a two-sided t-test on `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", format!("lengths {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewObservations { need: 3, got: n });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };
    Ok(Correlation {
        coefficient: r,
        p_value,
    })
}

/// Pair counts behind tau-b.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub n: usize,
    /// Concordant minus discordant pairs.
    pub score: i64,
    pub tied_x: u64,
    pub tied_y: u64,
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of inversions (strictly out-of-order pairs).
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Knight's O(n log n) pair counting.
pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let tied_x = tie_pairs(&xs);
    // pairs tied in both coordinates
    let mut tied_xy = 0u64;
    let mut run = 1u64;
    for k in 1..=n {
        if k < n && xs[k] == xs[k - 1] && ys[k] == ys[k - 1] {
            run += 1;
        } else {
            tied_xy += run * (run - 1) / 2;
            run = 1;
        }
    }
    let swaps = merge_count(&mut ys);
    let tied_y = tie_pairs(&ys);
    let total = (n * n.saturating_sub(1) / 2) as i64;
    let score = total - tied_x as i64 - tied_y as i64 + tied_xy as i64 - 2 * swaps as i64;
    PairCounts { n, score, tied_x, tied_y }
}

fn tie_sums(v: &[f64]) -> (f64, f64, f64) {
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut start = 0;
    for k in 1..=sorted.len() {
        if k == sorted.len() || sorted[k] != sorted[start] {
            let t = (k - start) as f64;
            a += t * (t - 1.0);
            b += t * (t - 1.0) * (t - 2.0);
            c += t * (t - 1.0) * (2.0 * t + 5.0);
            start = k;
        }
    }
    (a, b, c)
}

/// Tau-b from pair counts: `score / sqrt((n0 - n1)(n0 - n2))`.
pub fn tau_b_from_counts(c: &PairCounts) -> Result<f64> {
    let n0 = (c.n * c.n.saturating_sub(1) / 2) as f64;
    let (dx, dy) = (n0 - c.tied_x as f64, n0 - c.tied_y as f64);
    if dx == 0.0 {
        return Err(Error::AllTied("x"));
    }
    if dy == 0.0 {
        return Err(Error::AllTied("y"));
    }
    Ok(c.score as f64 / (dx * dy).sqrt())
}

/// Two-sided normal-approximation p-value for the pair score with tie
/// corrections in both variables.
pub fn tau_p_value(x: &[f64], y: &[f64], score: i64) -> f64 {
    let n = x.len() as f64;
    let (xt1, xt2, xt5) = tie_sums(x);
    let (yt1, yt2, yt5) = tie_sums(y);
    let mut var = (n * (n - 1.0) * (2.0 * n + 5.0) - xt5 - yt5) / 18.0 + xt1 * yt1 / (2.0 * n * (n - 1.0));
    if n > 2.0 {
        var += xt2 * yt2 / (9.0 * n * (n - 1.0) * (n - 2.0));
    }
    if var <= 0.0 {
        return 1.0;
    }
    let z = score as f64 / var.sqrt();
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape("kendall_tau_b", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFewObservations { need: 2, got: x.len() });
    }
    let counts = pair_counts(x, y);
    let coefficient = tau_b_from_counts(&counts)?;
    Ok(Correlation {
        coefficient,
        p_value: tau_p_value(x, y, counts.score),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeDistance {
    pub sum: f64,
    pub per_layer_mean: f64,
}

/// `sum_i |u_i - m(t_i) beta|^2 / (2 v(t_i))` over a latent path.
pub fn bridge_distance_of_path(path: &[(f64, Vec<f64>)], spec: &BridgeSpec) -> Result<BridgeDistance> {
    let mut sum = 0.0;
    for (t, u) in path {
        if u.len() != spec.dim() {
            return Err(Error::shape("bridge_distance", format!("point of dim {} vs endpoint dim {}", u.len(), spec.dim())));
        }
        let (m, v) = spec.marginal(*t)?;
        sum += u.iter().zip(&spec.beta).map(|(a, b)| (a - m * b).powi(2)).sum::<f64>() / (2.0 * v);
    }
    Ok(BridgeDistance {
        sum,
        per_layer_mean: if path.is_empty() { 0.0 } else { sum / path.len() as f64 },
    })
}

pub fn bridge_distance(trace: &HiddenTrace, map: &MapNet, spec: &BridgeSpec) -> Result<BridgeDistance> {
    bridge_distance_of_path(&project_discrete(map, trace)?, spec)
}

/// One probe example recorded after training, PET attached in inference mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub label_word: usize,
    pub trace: HiddenTrace,
}

/// The parts of a run directory the analyses read.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub run_id: String,
    pub config: serde_json::Value,
    pub alpha: f64,
    pub final_dev_metric: f64,
    pub probes: Vec<ProbeRecord>,
}

pub const PROBE_FILE: &str = "probe_traces.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let alpha = config["train"]["alpha"]
            .as_f64()
            .ok_or_else(|| Error::Data(format!("{}: config.json lacks train.alpha", dir.display())))?;
        let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
        let final_dev_metric = summary["best_dev"]
            .as_f64()
            .ok_or_else(|| Error::Data(format!("{}: summary lacks best_dev", dir.display())))?;
        let probes = read_jsonl(&dir.join(PROBE_FILE))?;
        Ok(RunRecord {
            dir: dir.to_path_buf(),
            run_id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            config,
            alpha,
            final_dev_metric,
            probes,
        })
    }

    /// Output-position states at `layer`, grouped by label word.
    pub fn states_by_label(&self, layer: usize) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
        let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for p in &self.probes {
            let state = p
                .trace
                .h_out
                .get(layer)
                .ok_or_else(|| Error::Data(format!("{}: no layer {layer} in probe trace", self.run_id)))?;
            groups.entry(p.label_word).or_default().push(state.clone());
        }
        Ok(groups)
    }
}

/// A minimal standalone SVG line chart.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        W / 2.0,
        esc(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 10.0,
        esc(x_label),
        H / 2.0,
        H / 2.0,
        esc(y_label),
    );
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), H - PAD + 14.0),
        (x1, "end", sx(x1), H - PAD + 14.0),
    ] {
        out.push_str(&format!("<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{v:.3}</text>\n"));
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        out.push_str(&format!("<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{v:.3}</text>\n", PAD - 4.0));
    }
    for (k, (name, points)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        for &(x, y) in points {
            out.push_str(&format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n", sx(x), sy(y)));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - PAD + 4.0,
            PAD + 14.0 * k as f64,
            esc(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(pairs: &[(usize, &[f64])]) -> BTreeMap<usize, Vec<Vec<f64>>> {
        let mut m: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (l, p) in pairs {
            m.entry(*l).or_default().push(p.to_vec());
        }
        m
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid_distance(&groups(&[(0, &[0.0, 0.0]), (1, &[3.0, 4.0])])).unwrap(), 5.0);
        let h = 3f64.sqrt() / 2.0;
        let tri = groups(&[(0, &[0.0, 0.0]), (1, &[1.0, 0.0]), (2, &[0.5, h])]);
        assert!((centroid_distance(&tri).unwrap() - 1.0).abs() < 1e-12);
        let base = groups(&[(0, &[1.0, 2.0]), (0, &[3.0, -1.0]), (1, &[0.5, 0.5])]);
        let doubled: BTreeMap<_, _> = base.iter().map(|(k, v)| (*k, [v.clone(), v.clone()].concat())).collect();
        assert!((centroid_distance(&base).unwrap() - centroid_distance(&doubled).unwrap()).abs() < 1e-12);
        assert!(matches!(centroid_distance(&groups(&[(0, &[1.0])])), Err(Error::SingleLabel)));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = pearson(&x, &x.map(|v| 2.0 * v + 1.0)).unwrap();
        assert!((c.coefficient - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &x.map(|v| -v)).unwrap().coefficient + 1.0).abs() < 1e-15);
        let c = pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((c.coefficient - 0.8).abs() < 1e-12);
        // t = 0.8 * sqrt(2) / 0.6; with df = 2 the two-sided p is 1 - t / sqrt(2 + t^2)
        let t = 0.8 * 2f64.sqrt() / 0.6;
        assert!((t - 1.885618).abs() < 1e-6);
        assert!((c.p_value - (1.0 - t / (2.0 + t * t).sqrt())).abs() < 1e-9);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::ZeroVariance("y"))));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().coefficient, 1.0);
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().coefficient, -1.0);
        let c = pair_counts(&[1.0, 1.0, 2.0, 2.0], &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!((c.tied_x, c.tied_y), (2, 2));
        // one concordant pair (1,4), one discordant pair (2,3), four tied
        assert_eq!(c.score, 0);
        assert_eq!(tau_b_from_counts(&PairCounts { score: 1, ..c }).unwrap(), 0.25);
        assert!(matches!(kendall_tau_b(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::AllTied("x"))));
    }

    #[test]
    fn kendall_p_value_without_ties() {
        // no ties: var = n(n-1)(2n+5)/18 on the score scale
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let c = kendall_tau_b(&x, &y).unwrap();
        let score = 15.0 - 2.0 * 3.0;
        let z = score / (6.0f64 * 5.0 * 17.0 / 18.0).sqrt();
        assert!((c.coefficient - score / 15.0).abs() < 1e-15);
        assert!((c.p_value - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn bridge_distance_examples() {
        let spec = BridgeSpec::brownian(vec![2.0], 1.0).unwrap();
        let d = bridge_distance_of_path(&[(0.5, vec![0.0])], &spec).unwrap();
        assert!((d.sum - 2.0).abs() < 1e-12);
        let on_curve: Vec<(f64, Vec<f64>)> = [0.2, 0.4, 0.6].iter().map(|&t| (t, vec![2.0 * t])).collect();
        assert_eq!(bridge_distance_of_path(&on_curve, &spec).unwrap().sum, 0.0);
        let path = vec![(0.2, vec![0.1]), (0.5, vec![-1.0]), (0.7, vec![3.0])];
        let mut rev = path.clone();
        rev.reverse();
        let (a, b) = (bridge_distance_of_path(&path, &spec).unwrap(), bridge_distance_of_path(&rev, &spec).unwrap());
        assert!((a.sum - b.sum).abs() < 1e-12);
        assert!((a.per_layer_mean - a.sum / 3.0).abs() < 1e-15);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = svg_line_chart("a < b", "x", "y", &[("s".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("<polyline"));
    }
}
