//! Reference metric implementations written from the definitions.

use std::collections::{BTreeMap, HashMap};

/// IoU by counting covered pixels of an `[x, y, w, h]` pair on a raster.
pub fn raster_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let covers = |r: [u32; 4], x: u32, y: u32| x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3];
    let w = (a[0] + a[2]).max(b[0] + b[2]);
    let h = (a[1] + a[3]).max(b[1] + b[3]);
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every alignment where each candidate token maps to an unused identical
/// reference token or to nothing; returns the one whose reference-index
/// sequence (unmatched = infinity) is lexicographically smallest.
fn best_alignment(cand: &[String], refs: &[String]) -> Vec<Option<usize>> {
    fn key(a: &[Option<usize>]) -> Vec<usize> {
        a.iter().map(|x| x.unwrap_or(usize::MAX)).collect()
    }
    fn go(i: usize, cand: &[String], refs: &[String], used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, best: &mut Option<Vec<Option<usize>>>) {
        if i == cand.len() {
            if best.as_ref().is_none_or(|b| key(cur) < key(b)) {
                *best = Some(cur.clone());
            }
            return;
        }
        for j in 0..refs.len() {
            if !used[j] && refs[j] == cand[i] {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, cand, refs, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(None);
        go(i + 1, cand, refs, used, cur, best);
        cur.pop();
    }
    let mut best = None;
    go(0, cand, refs, &mut vec![false; refs.len()], &mut Vec::new(), &mut best);
    best.unwrap_or_default()
}

/// `(matches, chunks)` of the brute-force alignment.
pub fn meteor_counts(cand: &[String], refs: &[String]) -> (usize, usize) {
    let a = best_alignment(cand, refs);
    let pairs: Vec<(usize, usize)> = a.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let chunks = pairs
        .iter()
        .enumerate()
        .filter(|&(k, &(i, j))| k == 0 || pairs[k - 1] != (i - 1, j.wrapping_sub(1)))
        .count();
    (pairs.len(), chunks)
}

/// Exact-match METEOR with alpha 0.9, beta 3, gamma 0.5, best over
/// references.
pub fn meteor(cand: &[String], references: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in references {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let (m, ch) = meteor_counts(cand, r);
        if m == 0 {
            continue;
        }
        let p = m as f64 / cand.len() as f64;
        let rc = m as f64 / r.len() as f64;
        let f = p * rc / (0.9 * p + (1.0 - 0.9) * rc);
        let penalty = 0.5 * (ch as f64 / m as f64).powi(3);
        best = best.max(f * (1.0 - penalty));
    }
    best
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// CIDEr-D computed with explicit dense vectors over each n-gram order.
/// Document frequency counts the images whose references contain an
/// n-gram; each image's candidate is compared with each of its references.
pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let docs = refs.len() as f64;
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut df: HashMap<String, f64> = HashMap::new();
        for image in refs {
            let mut seen: Vec<String> = image.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_default() += 1.0;
            }
        }
        let weight = |g: &str, tf: f64| tf * (docs.ln() - df.get(g).copied().unwrap_or(1.0).max(1.0).ln());
        for (k, (c, image)) in cands.iter().zip(refs).enumerate() {
            let hc = ngrams(c, n);
            let mut acc = 0.0;
            for r in image {
                let hr = ngrams(r, n);
                let mut keys: Vec<&String> = hc.keys().chain(hr.keys()).collect();
                keys.sort();
                keys.dedup();
                let vc: Vec<f64> = keys.iter().map(|g| hc.get(*g).map_or(0.0, |&t| weight(g, t))).collect();
                let vr: Vec<f64> = keys.iter().map(|g| hr.get(*g).map_or(0.0, |&t| weight(g, t))).collect();
                let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                let nc = vc.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nr = vr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let sim = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
                let d = c.len() as f64 - r.len() as f64;
                acc += sim * (-d * d / 72.0).exp();
            }
            scores[k] += acc / image.len().max(1) as f64 / 4.0 * 10.0;
        }
    }
    scores
}

/// A prediction or ground-truth region for [`map_bruteforce`].
#[derive(Debug, Clone)]
pub struct Region {
    pub image: u64,
    pub bbox: [u32; 4],
    pub caption: Vec<String>,
    pub confidence: f64,
}

/// AP as the sum over recall steps of the best precision at that recall
/// or beyond.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, _) in &points {
        if r > prev_recall {
            let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// mAP over the IoU x METEOR grid: predictions by confidence, each taking
/// the highest-IoU unmatched ground truth of its image that clears both
/// thresholds.
pub fn map_bruteforce(preds: &[Region], gts: &[Region]) -> (Vec<Vec<f64>>, f64) {
    let ious = [0.3, 0.4, 0.5, 0.6, 0.7];
    let mets = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap());
    let mut grid = vec![vec![0.0; mets.len()]; ious.len()];
    for (ti, &ti_v) in ious.iter().enumerate() {
        for (mi, &mi_v) in mets.iter().enumerate() {
            let mut taken = vec![false; gts.len()];
            let mut hits = Vec::new();
            for &p in &order {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts.iter().enumerate() {
                    if taken[g] || gt.image != preds[p].image {
                        continue;
                    }
                    let o = raster_iou(preds[p].bbox, gt.bbox);
                    let m = meteor(&preds[p].caption, std::slice::from_ref(&gt.caption));
                    if o + 1e-12 >= ti_v && m + 1e-12 >= mi_v && best.is_none_or(|b| o > b.1) {
                        best = Some((g, o));
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                }
                hits.push(best.is_some());
            }
            grid[ti][mi] = average_precision(&hits, gts.len());
        }
    }
    let map = grid.iter().flatten().sum::<f64>() / 30.0;
    (grid, map)
}
