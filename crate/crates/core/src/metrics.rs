//! Dice evaluation, fold aggregation and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;
use crate::phantom::DomainSample;
use crate::segnet::{softmax, Network};
use crate::tensor::{LabelMap, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    pub fold: usize,
    pub n_images: usize,
    /// Dice of foreground classes 1..C, in class order.
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    /// (image, class) pairs where both prediction and truth were empty.
    pub degenerate: usize,
}

/// Hard Dice `2|P & T| / (|P| + |T|)` for one class, plus whether the
/// class was absent from both maps (scored as 1).
pub fn dice_coefficient_flagged(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<(f64, bool)> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::dim(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut both = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok((1.0, true));
    }
    Ok((2.0 * both as f64 / (p + t) as f64, false))
}

pub fn dice_coefficient(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<f64> {
    Ok(dice_coefficient_flagged(pred, truth, class_id)?.0)
}

/// Per-image Dice for every foreground class, averaged over images.
pub fn evaluate_predictions(preds: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<MetricsRecord> {
    if preds.len() != truths.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let fg = num_classes - 1;
    let mut sums = vec![0.0; fg];
    let mut degenerate = 0;
    for (p, t) in preds.iter().zip(truths) {
        for (k, s) in sums.iter_mut().enumerate() {
            let (d, empty) = dice_coefficient_flagged(p, t, (k + 1) as u8)?;
            *s += d;
            degenerate += empty as usize;
        }
    }
    let n = preds.len() as f64;
    let per_class_dice: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let mean_dice = per_class_dice.iter().sum::<f64>() / fg as f64;
    Ok(MetricsRecord {
        method: String::new(),
        seed: 0,
        fold: 0,
        n_images: preds.len(),
        per_class_dice,
        mean_dice,
        degenerate,
    })
}

/// Argmax predictions of `net` for a list of images, in eval mode.
pub fn predict_labels<T: Real>(net: &Network<T>, images: &[&crate::tensor::Image]) -> Result<Vec<LabelMap>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let x = Tensor::<T>::from_images(chunk)?;
        let probs = softmax(&net.forward(&x)?)?;
        out.extend((0..probs.n).map(|i| probs.prob_map(i).argmax()));
    }
    Ok(out)
}

pub fn evaluate_model<T: Real>(net: &Network<T>, samples: &[DomainSample]) -> Result<MetricsRecord> {
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        match &s.label {
            Some(l) => truths.push(l.clone()),
            None => return Err(Error::Input(format!("sample `{}` has no label to evaluate against", s.id))),
        }
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_labels(net, &images)?;
    evaluate_predictions(&preds, &truths, net.config().num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub n_records: usize,
    pub mean_dice: f64,
    pub mean_dice_std: f64,
    pub per_class_mean: Vec<f64>,
    pub per_class_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (1..num_classes).map(|c| format!("C{c}")).collect()
}

/// Mean and (population) standard deviation per method across folds and
/// seeds. Rows keep the order in which methods first appear.
pub fn aggregate_folds(records: &[MetricsRecord], class_names: &[String]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Report("no metrics records to aggregate".into()));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.method == m).collect();
        let k = group[0].per_class_dice.len();
        if k != class_names.len() || group.iter().any(|r| r.per_class_dice.len() != k) {
            return Err(Error::Report(format!(
                "method `{m}`: records have inconsistent class counts (expected {})",
                class_names.len()
            )));
        }
        let (mean_dice, mean_dice_std) = mean_std(&group.iter().map(|r| r.mean_dice).collect::<Vec<_>>());
        let (per_class_mean, per_class_std) = (0..k)
            .map(|c| mean_std(&group.iter().map(|r| r.per_class_dice[c]).collect::<Vec<_>>()))
            .unzip();
        rows.push(ReportRow {
            method: m.to_string(),
            n_records: group.len(),
            mean_dice,
            mean_dice_std,
            per_class_mean,
            per_class_std,
        });
    }
    Ok(Report {
        class_names: class_names.to_vec(),
        rows,
    })
}

impl Report {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Fixed-width table: method, Avg, then one column per class.
    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}  {:>3}  {:>15}", "Method", "n", "Avg");
        for c in &self.class_names {
            let _ = write!(s, "  {c:>15}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<width$}  {:>3}  {:>15}",
                r.method,
                r.n_records,
                format!("{:.4}±{:.4}", r.mean_dice, r.mean_dice_std)
            );
            for (m, sd) in r.per_class_mean.iter().zip(&r.per_class_std) {
                let _ = write!(s, "  {:>15}", format!("{m:.4}±{sd:.4}"));
            }
            s.push('\n');
        }
        s
    }

    /// `method,n,avg,avg_std,<class>,<class>_std,...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,n,avg,avg_std");
        for c in &self.class_names {
            let _ = write!(s, ",{c},{c}_std");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.method, r.n_records, r.mean_dice, r.mean_dice_std);
            for (m, sd) in r.per_class_mean.iter().zip(&r.per_class_std) {
                let _ = write!(s, ",{m},{sd}");
            }
            s.push('\n');
        }
        s
    }
}

/// Long-format CSV: `method,seed,fold,class,dice`.
pub fn records_to_csv(records: &[MetricsRecord], class_names: &[String]) -> String {
    let mut s = String::from("method,seed,fold,class,dice\n");
    for r in records {
        for (name, d) in class_names.iter().zip(&r.per_class_dice) {
            let _ = writeln!(s, "{},{},{},{},{}", r.method, r.seed, r.fold, name, d);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(v.len() / w, w, v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = lm(4, &[0, 1, 1, 0, 2, 2, 0, 0]);
        assert_eq!(dice_coefficient(&a, &a, 1).unwrap(), 1.0);
        let b = lm(4, &[1, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(dice_coefficient(&a, &b, 1).unwrap(), 0.0);
        let p = lm(4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let t = lm(4, &[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice_coefficient(&p, &t, 1).unwrap(), 0.5);
        assert_eq!(dice_coefficient_flagged(&p, &t, 3).unwrap(), (1.0, true));
        assert!(dice_coefficient(&p, &lm(2, &[0, 0]), 1).is_err());
    }

    #[test]
    fn truth_against_itself_and_constant_background() {
        let truths = vec![lm(3, &[0, 1, 2, 2, 1, 0]), lm(3, &[2, 2, 1, 0, 0, 1])];
        let r = evaluate_predictions(&truths, &truths, 3).unwrap();
        assert_eq!(r.per_class_dice, vec![1.0, 1.0]);
        assert_eq!(r.mean_dice, 1.0);
        let bg = vec![lm(3, &[0; 6]), lm(3, &[0; 6])];
        let r = evaluate_predictions(&bg, &truths, 3).unwrap();
        assert_eq!(r.per_class_dice, vec![0.0, 0.0]);
    }

    fn rec(method: &str, fold: usize, dice: &[f64]) -> MetricsRecord {
        MetricsRecord {
            method: method.into(),
            seed: 0,
            fold,
            n_images: 1,
            per_class_dice: dice.to_vec(),
            mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
            degenerate: 0,
        }
    }

    #[test]
    fn aggregation_examples() {
        let names = default_class_names(3);
        let single = aggregate_folds(&[rec("a", 0, &[0.6, 0.8])], &names).unwrap();
        assert_eq!(single.rows[0].mean_dice, 0.7);
        assert_eq!(single.rows[0].mean_dice_std, 0.0);
        assert_eq!(single.rows[0].per_class_mean, vec![0.6, 0.8]);

        let two = aggregate_folds(&[rec("a", 0, &[0.7, 0.7]), rec("a", 1, &[0.9, 0.9])], &names).unwrap();
        assert!((two.rows[0].mean_dice - 0.8).abs() < 1e-12);
        assert!((two.rows[0].mean_dice_std - 0.1).abs() < 1e-12);

        assert!(matches!(aggregate_folds(&[], &names), Err(Error::Report(_))));
    }

    #[test]
    fn rows_keep_first_appearance_order_and_columns_follow_names() {
        let names = vec!["LV".to_string(), "RV".to_string()];
        let r = aggregate_folds(&[rec("z", 0, &[0.1, 0.2]), rec("a", 0, &[0.3, 0.4]), rec("z", 1, &[0.1, 0.2])], &names).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["z", "a"]);
        assert!(r.to_csv().starts_with("method,n,avg,avg_std,LV,LV_std,RV,RV_std\n"));
        let text = r.render_text();
        let header = text.lines().next().unwrap();
        assert!(header.find("LV").unwrap() < header.find("RV").unwrap());
    }
}
