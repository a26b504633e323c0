//! Non-maximum suppression, PASCAL-style average precision, and exports of
//! detections, metrics, and attention maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use crate::bbox::iou;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::global_attention::AttentionTrace;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Index of the image in the evaluated set.
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Indices sorted by descending score; equal scores keep index order.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy suppression within one image: a detection is dropped when a kept
/// detection of the same class overlaps it with IoU above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        let d = dets[i];
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Area under the precision envelope, or the VOC2007 11-point average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApMethod {
    #[default]
    AllPoint,
    ElevenPoint,
}

impl std::str::FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-point" => Ok(ApMethod::AllPoint),
            "11-point" => Ok(ApMethod::ElevenPoint),
            _ => Err(Error::Config(format!("unknown AP method {:?} (all-point, 11-point)", s))),
        }
    }
}

/// Precision and recall after each detection of `class`, highest score
/// first. A detection is a true positive when its best-overlapping ground
/// truth of the class reaches `iou_thresh` and has not been claimed yet.
/// `None` when the class has no ground truth.
pub fn pr_curve(
    dets: &[Detection],
    gts: &[Vec<(BBox, usize)>],
    class: usize,
    iou_thresh: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let total: usize = gts.iter().map(|g| g.iter().filter(|(_, c)| *c == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let own: Vec<Detection> = dets.iter().copied().filter(|d| d.class == class).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(own.len());
    let mut recall = Vec::with_capacity(own.len());
    for i in by_score(&own) {
        let d = own[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(image_gts) = gts.get(d.image) {
            for (j, (b, c)) in image_gts.iter().enumerate() {
                if *c != class {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if best.map_or(true, |(_, m)| o > m) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, o)) if o >= iou_thresh && !claimed[d.image][j] => {
                claimed[d.image][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total as f64);
    }
    Some((precision, recall))
}

/// AP from a precision/recall sequence.
pub fn ap_from_curve(precision: &[f64], recall: &[f64], method: ApMethod) -> f64 {
    match method {
        ApMethod::AllPoint => {
            let mut envelope = precision.to_vec();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP for one class over all images; `None` when the class has no ground
/// truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[Vec<(BBox, usize)>],
    class: usize,
    iou_thresh: f64,
    method: ApMethod,
) -> Option<f64> {
    match pr_curve(dets, gts, class, iou_thresh) {
        Some((p, r)) => Some(ap_from_curve(&p, &r, method)),
        None => {
            log::info!("class {} has no ground truth; AP undefined", class);
            None
        }
    }
}

/// Mean over classes with a defined AP.
pub fn mean_ap(per_class: &BTreeMap<usize, Option<f64>>) -> Result<f64> {
    let defined: Vec<f64> = per_class.values().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(Error::Evaluation("no class has a defined AP".to_string()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class AP for classes `1..=classes` and their mean.
pub fn evaluate(
    dets: &[Detection],
    gts: &[Vec<(BBox, usize)>],
    classes: usize,
    method: ApMethod,
) -> Result<(BTreeMap<usize, Option<f64>>, f64)> {
    let per_class: BTreeMap<usize, Option<f64>> = (1..=classes)
        .map(|c| (c, average_precision(dets, gts, c, 0.5, method)))
        .collect();
    let map = mean_ap(&per_class)?;
    Ok((per_class, map))
}

/// Text table of per-class AP and the mean, in percent.
pub fn format_report(per_class: &BTreeMap<usize, Option<f64>>, map: f64) -> String {
    let mut out = String::from("class        AP\n");
    for (c, ap) in per_class {
        match ap {
            Some(ap) => writeln!(out, "{:<8} {:>6.2}", c, 100.0 * ap).unwrap(),
            None => writeln!(out, "{:<8} {:>6}", c, "n/a").unwrap(),
        }
    }
    writeln!(out, "{:<8} {:>6.2}", "mAP", 100.0 * map).unwrap();
    out
}

/// Lines of `image_id class score x1 y1 x2 y2`.
pub fn write_detections(path: &Path, dets: &[Detection], image_ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for d in dets {
        let id = image_ids
            .get(d.image)
            .ok_or_else(|| Error::Evaluation(format!("detection refers to image {}", d.image)))?;
        writeln!(out, "{} {} {:.6} {}", id, d.class, d.score, d.bbox).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Image rectangle covered by a half-scale part window translated by
/// `(t_x, t_y)` in the proposal's normalised coordinates.
pub fn part_window(proposal: &BBox, tx: f64, ty: f64) -> BBox {
    let (cx, cy) = proposal.center();
    let (w, h) = (proposal.width(), proposal.height());
    BBox::from_center(cx + tx * w / 2.0, cy + ty * h / 2.0, w / 2.0, h / 2.0)
}

/// Final-step attention weights as 8-bit levels `round(255·α/max α)`.
pub fn quantize_attention(alpha: &[f64]) -> Vec<u8> {
    let peak = alpha.iter().copied().fold(0.0, f64::max);
    alpha
        .iter()
        .map(|&a| if peak > 0.0 { (255.0 * a / peak).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

/// Writes the last attention map, upsampled by nearest neighbour from `K×K`
/// to `width×height`, as a binary graymap. Part windows go to a sidecar
/// with the `.parts` extension, one `x1 y1 x2 y2` line each.
pub fn export_attention_map(
    trace: &AttentionTrace,
    width: usize,
    height: usize,
    parts: &[BBox],
    path: &Path,
) -> Result<()> {
    let alpha = trace
        .alphas
        .last()
        .ok_or_else(|| Error::Contract("attention trace has no steps".to_string()))?;
    let k = (alpha.len() as f64).sqrt().round() as usize;
    if k * k != alpha.len() || k == 0 {
        return Err(Error::dim(format!("attention map of {} cells is not square", alpha.len())));
    }
    let levels = quantize_attention(alpha);
    let mut bytes = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    for v in 0..height {
        for u in 0..width {
            bytes.push(levels[(v * k / height) * k + u * k / width]);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("parts");
    let mut text = String::new();
    for p in parts {
        writeln!(text, "{}", p).unwrap();
    }
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

/// Reads a binary graymap written by [`export_attention_map`].
pub fn read_graymap(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut cursor = 0;
    while fields.len() < 4 {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::format(path, cursor as u64, "truncated graymap header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..cursor]).into_owned()));
    }
    cursor += 1;
    if fields[0].1 != "P5" {
        return Err(Error::format(path, 0, "not a binary graymap"));
    }
    let mut dims = [0usize; 3];
    for (slot, (offset, text)) in dims.iter_mut().zip(&fields[1..]) {
        *slot = text
            .parse()
            .map_err(|_| Error::format(path, *offset as u64, format!("bad header field {:?}", text)))?;
    }
    let [w, h, _] = dims;
    if bytes.len() < cursor + w * h {
        return Err(Error::format(path, bytes.len() as u64, "truncated graymap pixels"));
    }
    Ok((w, h, bytes[cursor..cursor + w * h].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: usize, x: f64, class: usize, score: f64) -> Detection {
        Detection {
            image,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class,
            score,
        }
    }

    #[test]
    fn nms_keeps_the_higher_score() {
        let d = [det(0, 0.0, 1, 0.8), det(0, 0.0, 1, 0.9)];
        assert_eq!(nms(&d, 0.5), vec![d[1]]);
        assert_eq!(nms(&d[..1], 0.5), vec![d[0]]);
        let other = [det(0, 0.0, 1, 0.8), det(0, 0.0, 2, 0.9)];
        assert_eq!(nms(&other, 0.5).len(), 2);
    }

    #[test]
    fn hand_pr_curve() {
        let gts = vec![vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 1), (BBox::new(50.0, 0.0, 60.0, 10.0), 1)]];
        let dets = [det(0, 0.0, 1, 0.9), det(0, 25.0, 1, 0.8), det(0, 50.0, 1, 0.7)];
        let (p, r) = pr_curve(&dets, &gts, 1, 0.5).unwrap();
        assert_eq!(p, vec![1.0, 0.5, 2.0 / 3.0]);
        assert_eq!(r, vec![0.5, 0.5, 1.0]);
        let ap = average_precision(&dets, &gts, 1, 0.5, ApMethod::AllPoint).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap11 = average_precision(&dets, &gts, 1, 0.5, ApMethod::ElevenPoint).unwrap();
        assert!((ap11 - 28.0 / 33.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = vec![vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 1)]];
        let dets = [det(0, 0.0, 1, 0.9), det(0, 0.0, 1, 0.8)];
        let (p, _) = pr_curve(&dets, &gts, 1, 0.5).unwrap();
        assert_eq!(p, vec![1.0, 0.5]);
    }

    #[test]
    fn undefined_classes_are_skipped() {
        let gts = vec![vec![(BBox::new(0.0, 0.0, 10.0, 10.0), 1)]];
        assert_eq!(average_precision(&[], &gts, 2, 0.5, ApMethod::AllPoint), None);
        assert_eq!(average_precision(&[], &gts, 1, 0.5, ApMethod::AllPoint), Some(0.0));
        let m: BTreeMap<usize, Option<f64>> = [(1, Some(1.0)), (2, Some(0.0)), (3, None)].into();
        assert_eq!(mean_ap(&m).unwrap(), 0.5);
        assert!(mean_ap(&[(1, None)].into()).is_err());
    }

    #[test]
    fn part_window_geometry() {
        let p = BBox::new(0.0, 0.0, 20.0, 10.0);
        assert_eq!(part_window(&p, 0.0, 0.0), BBox::new(5.0, 2.5, 15.0, 7.5));
        assert_eq!(part_window(&p, 0.5, -0.5), BBox::new(10.0, 0.0, 20.0, 5.0));
    }

    #[test]
    fn quantization_levels() {
        assert_eq!(quantize_attention(&[0.25; 4]), vec![255; 4]);
        assert_eq!(quantize_attention(&[0.0, 1.0, 0.5, 0.0]), vec![0, 255, 128, 0]);
    }

    #[test]
    fn ap_method_names() {
        assert_eq!("11-point".parse::<ApMethod>().unwrap(), ApMethod::ElevenPoint);
        assert!("voc".parse::<ApMethod>().is_err());
    }
}
