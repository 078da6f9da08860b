//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use afsm_core::boxloss::BBox;
use afsm_core::infereval::{Detection, GroundTruth};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sampling scores computed the slow way: for each image, for each class
/// present, count that class over the whole dataset by rescanning.
pub fn casm_reference(labels: &[Vec<u32>]) -> Vec<f64> {
    let mut scores = Vec::with_capacity(labels.len());
    for g in labels {
        let mut seen: Vec<u32> = Vec::new();
        let mut s = 0.0;
        for &c in g {
            if seen.contains(&c) {
                continue;
            }
            seen.push(c);
            let mut n = 0usize;
            for other in labels {
                for &d in other {
                    if d == c {
                        n += 1;
                    }
                }
            }
            s += 1.0 / n as f64;
        }
        scores.push(s);
    }
    let total: f64 = scores.iter().sum();
    scores.iter().map(|s| s / total).collect()
}

pub fn iou_reference(a: &BBox, b: &BBox) -> f64 {
    let ix1 = if a.x1 > b.x1 { a.x1 } else { b.x1 };
    let iy1 = if a.y1 > b.y1 { a.y1 } else { b.y1 };
    let ix2 = if a.x2 < b.x2 { a.x2 } else { b.x2 };
    let iy2 = if a.y2 < b.y2 { a.y2 } else { b.y2 };
    let inter = if ix2 > ix1 && iy2 > iy1 { (ix2 - ix1) * (iy2 - iy1) } else { 0.0 };
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// The unique subset satisfying the greedy-NMS constraints, found by trying
/// every subset: kept boxes pairwise compatible, and every dropped box
/// overlaps a kept box of its class that ranks before it.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    assert!(n <= 12);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (r, &i) in rank.iter().enumerate() {
            p[i] = r;
        }
        p
    };
    let clash = |i: usize, j: usize| dets[i].cls == dets[j].cls && iou_reference(&dets[i].bbox, &dets[j].bbox) > thr;
    let mut found: Vec<Vec<usize>> = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let antichain = (0..n).all(|i| (0..n).all(|j| i == j || !kept(i) || !kept(j) || !clash(i, j)));
        let covered = (0..n).all(|i| kept(i) || (0..n).any(|j| kept(j) && pos[j] < pos[i] && clash(i, j)));
        if antichain && covered {
            let mut v: Vec<usize> = (0..n).filter(|&i| kept(i)).collect();
            v.sort_by_key(|&i| pos[i]);
            found.push(v);
        }
    }
    assert_eq!(found.len(), 1, "constraints admit exactly one subset");
    found[0].iter().map(|&i| dets[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: [f64; 4],
}

/// Straightforward COCO-style evaluation: per class and threshold, greedy
/// matching per image, then precision at each recall point found by
/// scanning every rank. Scores are assumed distinct.
pub fn eval_reference(preds: &[Vec<Detection>], gts: &[GroundTruth], k: u32) -> RefMetrics {
    let caps = [1usize, 10, 100, 500];
    let mut ap_sum = 0.0;
    let mut ap50_sum = 0.0;
    let mut ap75_sum = 0.0;
    let mut ar_sum = [0.0; 4];
    let mut classes = 0usize;
    for c in 1..=k {
        let num_gt: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        classes += 1;
        let mut aps = Vec::new();
        let mut ars = [0.0; 4];
        for ti in 0..10 {
            let t = 0.5 + 0.05 * ti as f64;
            let t = (t * 100.0).round() / 100.0;
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut tp_at_cap = [0usize; 4];
            for (p, g) in preds.iter().zip(gts) {
                let mut d: Vec<&Detection> = p.iter().filter(|d| d.cls == c).collect();
                d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                d.truncate(500);
                let gb: Vec<&BBox> = g.boxes.iter().zip(&g.labels).filter(|(_, &l)| l == c).map(|(b, _)| b).collect();
                let mut taken = vec![false; gb.len()];
                for (rank, det) in d.iter().enumerate() {
                    let mut best = -1.0;
                    let mut best_j = None;
                    for (j, b) in gb.iter().enumerate() {
                        let o = iou_reference(&det.bbox, b);
                        if !taken[j] && o >= t && o > best {
                            best = o;
                            best_j = Some(j);
                        }
                    }
                    if let Some(j) = best_j {
                        taken[j] = true;
                        for (ci, &cap) in caps.iter().enumerate() {
                            if rank < cap {
                                tp_at_cap[ci] += 1;
                            }
                        }
                    }
                    scored.push((det.score, best_j.is_some()));
                }
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let n = scored.len();
            let mut prec = vec![0.0; n];
            let mut rec = vec![0.0; n];
            for r in 0..n {
                let tp = scored[..=r].iter().filter(|x| x.1).count();
                prec[r] = tp as f64 / (r + 1) as f64;
                rec[r] = tp as f64 / num_gt as f64;
            }
            let mut ap = 0.0;
            for i in 0..=100 {
                let target = i as f64 / 100.0;
                let mut best = 0.0f64;
                for r in 0..n {
                    if rec[r] >= target && prec[r] > best {
                        best = prec[r];
                    }
                }
                ap += best;
            }
            aps.push(ap / 101.0);
            for ci in 0..4 {
                ars[ci] += tp_at_cap[ci] as f64 / num_gt as f64;
            }
        }
        ap_sum += aps.iter().sum::<f64>() / 10.0;
        ap50_sum += aps[0];
        ap75_sum += aps[5];
        for ci in 0..4 {
            ar_sum[ci] += ars[ci] / 10.0;
        }
    }
    if classes == 0 {
        return RefMetrics { ap: 0.0, ap50: 0.0, ap75: 0.0, ar: [0.0; 4] };
    }
    let n = classes as f64;
    RefMetrics {
        ap: ap_sum / n,
        ap50: ap50_sum / n,
        ap75: ap75_sum / n,
        ar: ar_sum.map(|a| a / n),
    }
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(2.0..extent * 0.4);
    let h = rng.random_range(2.0..extent * 0.4);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn jitter<R: Rng>(rng: &mut R, b: &BBox, amount: f64) -> BBox {
    let mut d = || rng.random_range(-amount..amount);
    let x1 = b.x1 + d();
    let y1 = b.y1 + d();
    let x2 = (b.x2 + d()).max(x1 + 0.5);
    let y2 = (b.y2 + d()).max(y1 + 0.5);
    BBox { x1, y1, x2, y2 }
}

/// A few images with ground truth and predictions that partly overlap it,
/// with distinct scores.
pub fn random_eval_instance<R: Rng>(rng: &mut R, k: u32) -> (Vec<Vec<Detection>>, Vec<GroundTruth>) {
    let images = rng.random_range(1..=4);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut next_score = 0usize;
    let mut scores: Vec<f64> = (0..64).map(|i| (i as f64 + rng.random::<f64>() * 0.5) / 64.0).collect();
    for i in (1..scores.len()).rev() {
        let j = rng.random_range(0..=i);
        scores.swap(i, j);
    }
    for _ in 0..images {
        let ng = rng.random_range(0..=4);
        let mut g = GroundTruth::default();
        for _ in 0..ng {
            g.boxes.push(random_box(rng, 64.0));
            g.labels.push(rng.random_range(1..=k));
        }
        let mut p = Vec::new();
        for (b, &l) in g.boxes.iter().zip(&g.labels) {
            for _ in 0..rng.random_range(0..=2) {
                let cls = if rng.random::<f64>() < 0.85 { l } else { rng.random_range(1..=k) };
                p.push(Detection { bbox: jitter(rng, b, 1.5), score: scores[next_score], cls });
                next_score += 1;
            }
        }
        for _ in 0..rng.random_range(0..=2) {
            p.push(Detection { bbox: random_box(rng, 64.0), score: scores[next_score], cls: rng.random_range(1..=k) });
            next_score += 1;
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

/// Up to `max` detections drawn in a small area so that overlaps are common.
pub fn random_nms_set<R: Rng>(rng: &mut R, max: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| Detection {
            bbox: random_box(rng, 24.0),
            score: rng.random_range(0..20) as f64 / 20.0,
            cls: rng.random_range(1..=2),
        })
        .collect()
}
