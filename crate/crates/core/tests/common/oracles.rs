//! Brute-force references for the geometric and scoring kernels.

use std::collections::BTreeMap;

use metarcnn::detector::{box_decode, box_encode, nms, BBox};
use metarcnn::eval::{average_precision, Detection, GroundTruth};
use metarcnn::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// RoIAlign as a sum over every feature cell weighted by the bilinear tent
/// kernel. Pixel `u` sits at grid coordinate `u / stride − 0.5`; each of the
/// `p × p` bins samples once at its center, clamped onto the map.
pub fn roi_align_oracle(fm: &Tensor<f64>, bbox: [f64; 4], stride: f64, p: usize) -> Vec<f64> {
    let (c, h, w) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
    let mut out = vec![0.0; c * p * p];
    let bin_w = (bbox[2] - bbox[0]) / p as f64;
    let bin_h = (bbox[3] - bbox[1]) / p as f64;
    for i in 0..p {
        for j in 0..p {
            let py = bbox[1] + (i as f64 + 0.5) * bin_h;
            let px = bbox[0] + (j as f64 + 0.5) * bin_w;
            let gy = (py / stride - 0.5).clamp(0.0, (h - 1) as f64);
            let gx = (px / stride - 0.5).clamp(0.0, (w - 1) as f64);
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += tent(gy - y as f64) * tent(gx - x as f64) * fm.data()[(ch * h + y) * w + x];
                    }
                }
                out[(ch * p + i) * p + j] = acc;
            }
        }
    }
    out
}

/// Max absolute deviation of `Graph::roi_align` from the oracle over
/// `cases` random maps and boxes.
pub fn roi_align_max_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let stride = [1.0, 4.0, 8.0][rng.gen_range(0..3)];
        let p = rng.gen_range(1..5);
        let fm = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect());
        // boxes may poke outside the map to exercise clamping
        let (iw, ih) = (w as f64 * stride, h as f64 * stride);
        let x1 = rng.gen_range(-0.2 * iw..iw);
        let y1 = rng.gen_range(-0.2 * ih..ih);
        let bbox = [x1, y1, x1 + rng.gen_range(0.5..iw), y1 + rng.gen_range(0.5..ih)];
        let mut g = Graph::<f64>::inference();
        let x = g.constant(fm.clone());
        let y = g.roi_align(x, &[bbox], stride, p).unwrap();
        let want = roi_align_oracle(&fm, bbox, stride, p);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn iou_oracle(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box `i` survives iff no surviving box of higher priority (higher score,
/// then lower index) overlaps it by more than `thr`. Resolved by memoized
/// recursion over all pairs.
pub fn nms_oracle(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    fn kept(i: usize, b: &[[f64; 4]], s: &[f64], thr: f64, memo: &mut Vec<Option<bool>>) -> bool {
        if let Some(k) = memo[i] {
            return k;
        }
        let mut keep = true;
        for j in 0..b.len() {
            let higher = s[j] > s[i] || (s[j] == s[i] && j < i);
            if higher && iou_oracle(&b[i], &b[j]) > thr && kept(j, b, s, thr, memo) {
                keep = false;
                break;
            }
        }
        memo[i] = Some(keep);
        keep
    }
    let mut memo = vec![None; boxes.len()];
    let mut out: Vec<usize> = (0..boxes.len()).filter(|&i| kept(i, boxes, scores, thr, &mut memo)).collect();
    out.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    out
}

/// Cases where `nms` and the oracle keep different sets.
pub fn nms_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(0..25);
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..50.0);
                let y = rng.gen_range(0.0..50.0);
                [x, y, x + rng.gen_range(1.0..30.0), y + rng.gen_range(1.0..30.0)]
            })
            .collect();
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let bb: Vec<BBox> = boxes.iter().map(|b| BBox::from_array(*b)).collect();
        let mut got = nms(&bb, &scores, thr);
        let mut want = nms_oracle(&boxes, &scores, thr);
        got.sort_unstable();
        want.sort_unstable();
        bad += (got != want) as usize;
    }
    bad
}

/// AP by enumerating every distinct score threshold. At threshold `t` the
/// detections scoring ≥ `t` are kept and greedily matched (descending score,
/// ties in input order) to unmatched GT of IoU ≥ 0.5; precision at recall
/// level `r` is the best precision over all thresholds reaching recall ≥ `r`.
pub fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], class: usize) -> f64 {
    let cls_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    let cls_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    let n_gt = cls_gts.len();
    if n_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = cls_dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    // (true positives, kept detections) per threshold, descending
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<(usize, &Detection)> = cls_dets.iter().copied().enumerate().filter(|(_, d)| d.score >= t).collect();
        kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut used = vec![false; n_gt];
        let mut tp = 0usize;
        for (_, d) in &kept {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in cls_gts.iter().enumerate() {
                if g.image_id != d.image_id || used[k] {
                    continue;
                }
                let o = iou_oracle(&d.bbox.to_array(), &g.bbox.to_array());
                if best.is_none_or(|b| o > b.1) {
                    best = Some((k, o));
                }
            }
            if let Some((k, o)) = best {
                if o >= 0.5 {
                    used[k] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp, kept.len()));
    }
    let mut ap = 0.0;
    let mut prev = 0;
    for &(tp, _) in &points {
        if tp > prev {
            let best = points
                .iter()
                .filter(|(t, _)| *t >= tp)
                .map(|&(t, n)| t as f64 / n as f64)
                .fold(0.0, f64::max);
            ap += (tp - prev) as f64 / n_gt as f64 * best;
            prev = tp;
        }
    }
    ap
}

pub fn random_ap_fixture(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.gen_range(1..5);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for im in 0..images {
        let id = format!("im{im}");
        for _ in 0..rng.gen_range(0..5) {
            let x = rng.gen_range(0.0..60.0);
            let y = rng.gen_range(0.0..60.0);
            let b = [x, y, x + rng.gen_range(5.0..30.0), y + rng.gen_range(5.0..30.0)];
            let c = rng.gen_range(0..classes);
            gts.push(GroundTruth {
                image_id: id.clone(),
                class_id: c,
                bbox: BBox::from_array(b),
                mask: None,
            });
            // jittered hits, some duplicates
            for _ in 0..rng.gen_range(0..3) {
                let j = |v: f64, r: &mut ChaCha8Rng| v + r.gen_range(-4.0..4.0);
                let jb = [j(b[0], rng), j(b[1], rng), 0.0, 0.0];
                let jb = [jb[0], jb[1], jb[0] + (b[2] - b[0]) + rng.gen_range(-3.0..3.0), jb[1] + (b[3] - b[1]) + rng.gen_range(-3.0..3.0)];
                dets.push(Detection {
                    image_id: id.clone(),
                    class_id: if rng.gen_bool(0.85) { c } else { rng.gen_range(0..classes) },
                    score: rng.gen_range(0..10) as f64 / 10.0,
                    bbox: BBox::from_array(jb),
                    mask: None,
                });
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let x = rng.gen_range(0.0..70.0);
            let y = rng.gen_range(0.0..70.0);
            dets.push(Detection {
                image_id: id.clone(),
                class_id: rng.gen_range(0..classes),
                score: rng.gen_range(0..10) as f64 / 10.0,
                bbox: BBox::new(x, y, x + 10.0, y + 10.0),
                mask: None,
            });
        }
    }
    (dets, gts)
}

/// Per-class AP disagreements between `average_precision` and the oracle.
pub fn ap_mismatches(fixtures: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for f in 0..fixtures {
        let classes = 3;
        let (dets, gts) = random_ap_fixture(&mut rng, classes);
        let all: Vec<usize> = (0..classes).collect();
        let report = average_precision(&dets, &gts, &all, 0.5, false).unwrap();
        for c in all {
            let want = ap_oracle(&dets, &gts, c);
            let got = report.per_class[&c].ap;
            if got != want {
                bad.push(format!("fixture {f} class {c}: {got} vs {want}"));
            }
        }
    }
    bad
}

/// Worst `decode(encode(gt, ref), ref)` coordinate error over random pairs.
pub fn encode_decode_max_error(pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        // sides within 1..60 keep every size ratio below the decode clamp
        let mut rb = || {
            let x = rng.gen_range(-50.0..200.0);
            let y = rng.gen_range(-50.0..200.0);
            BBox::new(x, y, x + rng.gen_range(1.0..60.0), y + rng.gen_range(1.0..60.0))
        };
        let (gt, reference) = (rb(), rb());
        let back = box_decode(box_encode(&gt, &reference).unwrap(), &reference, None).unwrap();
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Brute-force intra- and inter-class mean cosines of grouped vectors.
pub fn cosine_oracle(groups: &BTreeMap<usize, Vec<Vec<f64>>>) -> (f64, f64) {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut intra = Vec::new();
    for vs in groups.values() {
        let mut s = Vec::new();
        for i in 0..vs.len() {
            for j in 0..vs.len() {
                if i < j {
                    s.push(cos(&vs[i], &vs[j]));
                }
            }
        }
        intra.push(s.iter().sum::<f64>() / s.len() as f64);
    }
    let all: Vec<(usize, &Vec<f64>)> = groups.iter().flat_map(|(&c, vs)| vs.iter().map(move |v| (c, v))).collect();
    let mut inter = Vec::new();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if a.0 != b.0 {
                inter.push(cos(a.1, b.1));
            }
        }
    }
    (
        intra.iter().sum::<f64>() / intra.len() as f64,
        inter.iter().sum::<f64>() / inter.len() as f64,
    )
}
