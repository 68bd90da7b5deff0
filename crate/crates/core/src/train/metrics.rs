/// Fraction of matching predictions.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// `n_classes × n_classes` counts, rows indexed by truth.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

/// Unweighted mean of per-class F1; a class with no true or predicted
/// members contributes 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let cm = confusion_matrix(preds, labels, n_classes);
    let sum: f64 = (0..n_classes)
        .map(|c| {
            let tp = cm[c][c];
            let fn_ = cm[c].iter().sum::<usize>() - tp;
            let fp = (0..n_classes).map(|r| cm[r][c]).sum::<usize>() - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    sum / n_classes as f64
}

/// Index of the largest value in each row of a row-major `rows × cols`
/// matrix; ties go to the lowest index.
pub fn argmax_rows(values: &[f32], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}
