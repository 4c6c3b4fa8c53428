use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::UncertaintyError;

/// An image with the mean confidence of its detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub avg_conf: f64,
}

fn check(score: f64) -> Result<f64, UncertaintyError> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(UncertaintyError::ScoreOutOfRange(score))
    }
}

/// Arithmetic mean of detection confidences; an image without detections
/// scores exactly 0.
pub fn average_confidence(scores: &[f64]) -> Result<f64, UncertaintyError> {
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &s in scores {
        total += check(s)?;
    }
    Ok(total / scores.len() as f64)
}

/// Heatmap weight of an image: `(1 - avg_conf)^2`.
pub fn uncertainty_weight(avg_conf: f64) -> Result<f64, UncertaintyError> {
    let c = check(avg_conf)?;
    Ok((1.0 - c) * (1.0 - c))
}

/// Every non-excluded image, ascending by average confidence with the id as
/// tie-break.
pub fn rank_candidates(
    detections: &BTreeMap<String, Vec<f64>>,
    exclude: &BTreeSet<String>,
) -> Result<Vec<ImageScore>, UncertaintyError> {
    let mut scored = Vec::with_capacity(detections.len());
    for (id, scores) in detections {
        if exclude.contains(id) {
            continue;
        }
        scored.push(ImageScore {
            image_id: id.clone(),
            avg_conf: average_confidence(scores)?,
        });
    }
    scored.sort_by(|a, b| {
        a.avg_conf
            .total_cmp(&b.avg_conf)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(scored)
}

/// Lowest-average-confidence selection: the first `budget` entries of
/// [`rank_candidates`].
pub fn select_al_samples(
    detections: &BTreeMap<String, Vec<f64>>,
    exclude: &BTreeSet<String>,
    budget: usize,
) -> Result<Vec<ImageScore>, UncertaintyError> {
    if budget == 0 {
        return Ok(Vec::new());
    }
    let mut ranked = rank_candidates(detections, exclude)?;
    ranked.truncate(budget);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
        entries.iter().map(|(k, v)| ((*k).to_owned(), v.to_vec())).collect()
    }

    fn ids(sel: &[ImageScore]) -> Vec<&str> {
        sel.iter().map(|s| s.image_id.as_str()).collect()
    }

    #[test]
    fn averages() {
        assert_eq!(average_confidence(&[]).unwrap(), 0.0);
        assert_eq!(average_confidence(&[0.5]).unwrap(), 0.5);
        assert!((average_confidence(&[0.9, 0.3, 0.6]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(
            average_confidence(&[0.2, 1.5]),
            Err(UncertaintyError::ScoreOutOfRange(1.5))
        );
        assert!(average_confidence(&[f64::NAN]).is_err());
    }

    #[test]
    fn weights() {
        assert_eq!(uncertainty_weight(1.0).unwrap(), 0.0);
        assert_eq!(uncertainty_weight(0.0).unwrap(), 1.0);
        assert_eq!(uncertainty_weight(0.5).unwrap(), 0.25);
        assert!(uncertainty_weight(-0.1).is_err());
    }

    #[test]
    fn hand_traced_selection() {
        let m = map(&[("a", &[]), ("b", &[0.2]), ("c", &[0.9, 0.5])]);
        let sel = select_al_samples(&m, &BTreeSet::new(), 2).unwrap();
        assert_eq!(ids(&sel), ["a", "b"]);
        assert_eq!(sel[0].avg_conf, 0.0);
        assert_eq!(sel[1].avg_conf, 0.2);

        let exclude: BTreeSet<String> = ["a".to_owned()].into();
        let sel = select_al_samples(&m, &exclude, 2).unwrap();
        assert_eq!(ids(&sel), ["b", "c"]);
        assert!((sel[1].avg_conf - 0.7).abs() < 1e-15);
    }

    #[test]
    fn oversized_budget_returns_everything() {
        let m = map(&[("x", &[0.4]), ("y", &[0.1]), ("z", &[])]);
        let sel = select_al_samples(&m, &BTreeSet::new(), 10).unwrap();
        assert_eq!(ids(&sel), ["z", "y", "x"]);
        assert!(select_al_samples(&m, &BTreeSet::new(), 0).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let m = map(&[("b", &[0.5]), ("a", &[0.5]), ("c", &[0.25, 0.75])]);
        let sel = select_al_samples(&m, &BTreeSet::new(), 3).unwrap();
        assert_eq!(ids(&sel), ["a", "b", "c"]);
    }
}
