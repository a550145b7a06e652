//! Brute-force references shared by the integration tests.

/// Soft label from the distance to the nearest anomalous point.
pub fn oracle_soft(labels: &[u8], buffer: usize) -> Vec<f64> {
    (0..labels.len())
        .map(|i| {
            let d = (0..labels.len()).filter(|&j| labels[j] == 1).map(|j| i.abs_diff(j)).min();
            match d {
                Some(0) => 1.0,
                Some(d) if d <= buffer => (1.0 - d as f64 / (buffer + 1) as f64).sqrt(),
                _ => 0.0,
            }
        })
        .collect()
}

pub fn oracle_range_auc(scores: &[f64], labels: &[u8], buffer: usize) -> Option<(f64, f64)> {
    let soft = oracle_soft(labels, buffer);
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let margin = (p + soft.iter().sum::<f64>()) / 2.0;
    let negatives = soft.iter().filter(|&&y| y == 0.0).count() as f64;
    if p == 0.0 || negatives == 0.0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0, 1.0)];
    for th in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for i in 0..scores.len() {
            if scores[i] >= th {
                tp += soft[i];
                fp += (soft[i] == 0.0) as u8 as f64;
            }
        }
        curve.push(((fp / negatives), (tp / margin).min(1.0), tp / (tp + fp)));
    }
    curve.push((1.0, 1.0, 0.0));
    let mut roc = 0.0;
    let mut pr = 0.0;
    for w in curve.windows(2) {
        let ((f0, t0, _), (f1, t1, prec)) = (w[0], w[1]);
        roc += (f1 - f0) * (t0 + t1) / 2.0;
        pr += (t1 - t0) * prec;
    }
    Some((roc, pr))
}

/// VUS from per-buffer oracle values, trapezoid over 0..=max_buffer.
pub fn oracle_vus(scores: &[f64], labels: &[u8], max_buffer: usize) -> Option<(f64, f64)> {
    let per: Vec<(f64, f64)> = (0..=max_buffer).map(|l| oracle_range_auc(scores, labels, l)).collect::<Option<_>>()?;
    if max_buffer == 0 {
        return Some(per[0]);
    }
    let sum = |f: fn(&(f64, f64)) -> f64| per.windows(2).map(|w| (f(&w[0]) + f(&w[1])) / 2.0).sum::<f64>() / max_buffer as f64;
    Some((sum(|v| v.0), sum(|v| v.1)))
}
