//! Evaluation metrics: Dice, Dice30, 95th-percentile Hausdorff distance and
//! the spread of the log Jacobian determinant.

use std::io::Write;

use serde::Serialize;

use crate::deformation::{jacobian_det, DeformationField};
use crate::error::{Error, Result};
use crate::volume::LabelMap;

const LOG_DET_FLOOR: f64 = 1e-9;
const HD_PERCENTILE: f64 = 0.95;

fn check_shapes(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "labels {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)` for label `k`; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, k: u8) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == k, y == k);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean of the lowest `ceil(0.3 n)` scores; `None` for no scores.
pub fn dice30(scores: &[f64]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (3 * sorted.len()).div_ceil(10);
    Some(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Mask voxels of label `k` with at least one 6-neighbour outside the mask.
/// The region beyond the volume counts as outside.
pub fn surface(l: &LabelMap, k: u8) -> Vec<[usize; 3]> {
    let [d, h, w] = l.shape();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && l.at(z as usize, y as usize, x as usize) == k
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if l.at(z, y, x) != k {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let nbrs = [
                    (zi - 1, yi, xi),
                    (zi + 1, yi, xi),
                    (zi, yi - 1, xi),
                    (zi, yi + 1, xi),
                    (zi, yi, xi - 1),
                    (zi, yi, xi + 1),
                ];
                if nbrs.iter().any(|&(a, b, c)| !inside(a, b, c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Euclidean distance in millimetres between two voxels.
pub fn voxel_distance(p: [usize; 3], q: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (p[a] as f64 - q[a] as f64) * spacing[a];
        s += d * d;
    }
    s.sqrt()
}

/// Nearest feature voxel for every grid voxel, by separable lower-envelope
/// passes with anisotropic weights. `None` when there are no features.
fn nearest_features(
    shape: [usize; 3],
    features: &[[usize; 3]],
    spacing: [f64; 3],
) -> Option<Vec<[usize; 3]>> {
    if features.is_empty() {
        return None;
    }
    let [d, h, w] = shape;
    let vox = d * h * w;
    let idx = |p: [usize; 3]| (p[0] * h + p[1]) * w + p[2];
    let mut cost = vec![f64::INFINITY; vox];
    let mut feat = vec![[usize::MAX; 3]; vox];
    for &f in features {
        cost[idx(f)] = 0.0;
        feat[idx(f)] = f;
    }
    let strides = [h * w, w, 1];
    let ext = [d, h, w];
    let mut line_cost = Vec::new();
    let mut line_feat = Vec::new();
    for a in 0..3 {
        let n = ext[a];
        let wt = spacing[a] * spacing[a];
        let others: Vec<usize> = (0..3).filter(|&b| b != a).collect();
        for i in 0..ext[others[0]] {
            for j in 0..ext[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line_cost.clear();
                line_feat.clear();
                for q in 0..n {
                    line_cost.push(cost[base + q * strides[a]]);
                    line_feat.push(feat[base + q * strides[a]]);
                }
                let Some(env) = lower_envelope(&line_cost, wt) else {
                    continue;
                };
                for (q, &p) in env.iter().enumerate() {
                    let dq = q as f64 - p as f64;
                    let o = base + q * strides[a];
                    cost[o] = line_cost[p] + wt * dq * dq;
                    let mut f = line_feat[p];
                    f[a] = p;
                    feat[o] = f;
                }
            }
        }
    }
    Some(feat)
}

/// For every position `q`, the `p` minimizing `f[p] + wt (q - p)^2`.
fn lower_envelope(f: &[f64], wt: f64) -> Option<Vec<usize>> {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |p: usize| f[p] + wt * (p * p) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(q) - key(p)) / (2.0 * wt * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    if v.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        out.push(v[k]);
    }
    Some(out)
}

/// Linearly interpolated percentile `p ∈ [0, 1]` of sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Surface-to-surface distances from each voxel of `from` to the nearest of
/// `to`, in millimetres.
fn directed_distances(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let Some(feat) = nearest_features(shape, to, spacing) else {
        return Vec::new();
    };
    from.iter()
        .map(|&p| voxel_distance(p, feat[(p[0] * shape[1] + p[1]) * shape[2] + p[2]], spacing))
        .collect()
}

/// 95th percentile of the pooled symmetric surface distances for label `k`,
/// in millimetres. `None` when either mask is empty.
pub fn hd95(a: &LabelMap, b: &LabelMap, k: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    let sa = surface(a, k);
    let sb = surface(b, k);
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let shape = a.shape();
    let mut d = directed_distances(&sa, &sb, shape, spacing);
    d.extend(directed_distances(&sb, &sa, shape, spacing));
    d.sort_by(f64::total_cmp);
    Ok(Some(percentile_sorted(&d, HD_PERCENTILE)))
}

/// Population standard deviation of `log(max(det J, 1e-9))` over interior
/// voxels.
pub fn std_log_jacobian(phi: &DeformationField) -> Result<f64> {
    let det = jacobian_det(phi.phi())?;
    let [d, h, w] = phi.spatial();
    let interior = |n: usize| if n > 2 { 1..n - 1 } else { 0..n };
    let mut logs = Vec::new();
    for z in interior(d) {
        for y in interior(h) {
            for x in interior(w) {
                logs.push(det.at(&[z, y, x]).max(LOG_DET_FLOOR).ln());
            }
        }
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    Ok((logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelScore {
    pub label: u8,
    pub dice: f64,
    pub hd95: Option<f64>,
    pub baseline_dice: f64,
    pub baseline_hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub id: String,
    pub labels: Vec<LabelScore>,
    pub std_j: f64,
}

/// Warps `moving_seg` with nearest sampling and scores it against
/// `fixed_seg`, alongside the unregistered baseline.
pub fn evaluate_case(
    id: &str,
    moving_seg: &LabelMap,
    fixed_seg: &LabelMap,
    phi: &DeformationField,
) -> Result<CaseReport> {
    check_shapes(moving_seg, fixed_seg)?;
    let warped = phi.warp_labels(moving_seg)?;
    let spacing = fixed_seg.spacing;
    let classes = moving_seg.num_classes().max(fixed_seg.num_classes());
    let mut labels = Vec::new();
    for k in 1..classes {
        if !(moving_seg.available().get(k).copied().unwrap_or(false)
            && fixed_seg.available().get(k).copied().unwrap_or(false))
        {
            continue;
        }
        let k = k as u8;
        labels.push(LabelScore {
            label: k,
            dice: dice(&warped, fixed_seg, k)?,
            hd95: hd95(&warped, fixed_seg, k, spacing)?,
            baseline_dice: dice(moving_seg, fixed_seg, k)?,
            baseline_hd95: hd95(moving_seg, fixed_seg, k, spacing)?,
        });
    }
    Ok(CaseReport {
        id: id.to_string(),
        labels,
        std_j: std_log_jacobian(phi)?,
    })
}

/// One row of the summary table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub dice: f64,
    pub dice30: f64,
    pub hd95: Option<f64>,
    pub std_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub registered: Summary,
    pub baseline: Summary,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn new(cases: Vec<CaseReport>) -> Self {
        let scores = |f: fn(&LabelScore) -> f64| -> Vec<f64> {
            cases.iter().flat_map(|c| c.labels.iter().map(f)).collect()
        };
        let hds = |f: fn(&LabelScore) -> Option<f64>| {
            mean(cases.iter().flat_map(|c| c.labels.iter().filter_map(f)))
        };
        let reg = scores(|s| s.dice);
        let base = scores(|s| s.baseline_dice);
        let registered = Summary {
            dice: mean(reg.iter().copied()).unwrap_or(f64::NAN),
            dice30: dice30(&reg).unwrap_or(f64::NAN),
            hd95: hds(|s| s.hd95),
            std_j: mean(cases.iter().map(|c| c.std_j)).unwrap_or(f64::NAN),
        };
        let baseline = Summary {
            dice: mean(base.iter().copied()).unwrap_or(f64::NAN),
            dice30: dice30(&base).unwrap_or(f64::NAN),
            hd95: hds(|s| s.baseline_hd95),
            std_j: 0.0,
        };
        Self {
            cases,
            registered,
            baseline,
        }
    }

    /// Tab-separated per-case table followed by the summary block.
    pub fn write_table(&self, out: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::io("<report>", e);
        {
            let mut w = csv::WriterBuilder::new()
                .delimiter(b'\t')
                .from_writer(&mut *out);
            let fmt_hd = |h: Option<f64>| h.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
            w.write_record([
                "case",
                "label",
                "dice",
                "hd95",
                "baseline_dice",
                "baseline_hd95",
            ])
            .map_err(|e| Error::Invalid(e.to_string()))?;
            for c in &self.cases {
                for s in &c.labels {
                    w.write_record([
                        c.id.clone(),
                        s.label.to_string(),
                        format!("{:.6}", s.dice),
                        fmt_hd(s.hd95),
                        format!("{:.6}", s.baseline_dice),
                        fmt_hd(s.baseline_hd95),
                    ])
                    .map_err(|e| Error::Invalid(e.to_string()))?;
                }
            }
            w.flush().map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        writeln!(
            out,
            "{:<12}{:>10}{:>10}{:>10}{:>10}",
            "", "Dice", "Dice30", "Hd95", "StdJ"
        )
        .map_err(io)?;
        for (name, s) in [
            ("registered", &self.registered),
            ("baseline", &self.baseline),
        ] {
            let hd = s
                .hd95
                .map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
            writeln!(
                out,
                "{name:<12}{:>10.4}{:>10.4}{hd:>10}{:>10.4}",
                s.dice, s.dice30, s.std_j
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn labels(shape: [usize; 3], on: &[[usize; 3]]) -> LabelMap {
        let mut v = vec![0u8; shape.iter().product()];
        for p in on {
            v[(p[0] * shape[1] + p[1]) * shape[2] + p[2]] = 1;
        }
        LabelMap::new(v, shape, 2).unwrap()
    }

    #[test]
    fn dice_counts() {
        let on_a: Vec<_> = (0..6).map(|x| [0, 0, x]).collect();
        let on_b: Vec<_> = (3..13).map(|x| [0, 0, x]).collect();
        let a = labels([1, 1, 16], &on_a);
        let b = labels([1, 1, 16], &on_b);
        assert!((dice(&a, &b, 1).unwrap() - 0.375).abs() < 1e-15);
        assert_eq!(dice(&a, &a, 0).unwrap(), 1.0);
        let empty = labels([1, 1, 16], &[]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice30_takes_ceiling_of_thirty_percent() {
        let s: Vec<f64> = (1..=10).rev().map(|i| i as f64 / 10.0).collect();
        assert!((dice30(&s).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(dice30(&[0.7]), Some(0.7));
        assert_eq!(dice30(&[]), None);
        // n = 4 keeps two scores
        assert_eq!(dice30(&[0.4, 0.1, 0.3, 0.9]), Some(0.2));
    }

    #[test]
    fn hd95_of_single_voxels_on_axis() {
        let a = labels([1, 1, 9], &[[0, 0, 1]]);
        let b = labels([1, 1, 9], &[[0, 0, 6]]);
        assert_eq!(hd95(&a, &b, 1, [1.0; 3]).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &b, 1, [1.0, 1.0, 0.5]).unwrap(), Some(2.5));
        assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), Some(0.0));
        let empty = labels([1, 1, 9], &[]);
        assert_eq!(hd95(&a, &empty, 1, [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn solid_cube_surface_excludes_core() {
        let on: Vec<_> = (0..27)
            .map(|i| [1 + i / 9, 1 + (i / 3) % 3, 1 + i % 3])
            .collect();
        let l = labels([5, 5, 5], &on);
        let s = surface(&l, 1);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
    }

    #[test]
    fn interpolated_percentile() {
        assert_eq!(percentile_sorted(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile_sorted(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn identity_and_affine_fields_have_no_spread() {
        let id = DeformationField::identity([5, 6, 7]);
        assert_eq!(std_log_jacobian(&id).unwrap(), 0.0);
        let affine = Tensor::from_fn(&[3, 5, 6, 7], |i| {
            let p = [i[1] as f32, i[2] as f32, i[3] as f32];
            [
                0.5 * p[0] + 0.1 * p[1],
                1.5 * p[1] + 2.0,
                0.8 * p[2] + 0.2 * p[0],
            ][i[0]]
        });
        let s = std_log_jacobian(&DeformationField::new(affine).unwrap()).unwrap();
        assert!(s < 1e-6, "{s}");
    }

    #[test]
    fn identity_case_matches_baseline() {
        let a = labels([4, 4, 4], &[[1, 1, 1], [1, 2, 1]]);
        let b = labels([4, 4, 4], &[[1, 2, 1], [2, 2, 2]]);
        let r = evaluate_case("c", &a, &b, &DeformationField::identity([4, 4, 4])).unwrap();
        assert_eq!(r.labels[0].dice, r.labels[0].baseline_dice);
        assert_eq!(r.std_j, 0.0);
        let report = EvalReport::new(vec![r]);
        let mut buf = Vec::new();
        report.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("case\tlabel\tdice"));
        assert!(text.contains("baseline"));
    }
}
