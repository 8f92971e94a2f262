//! Demographic parity and equalized odds for binary predictions.

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    /// `|P(Yhat=1 | A=1) - P(Yhat=1 | A=0)|`.
    pub demographic_parity: f64,
    /// `max_y |P(Yhat=1 | Y=y, A=1) - P(Yhat=1 | Y=y, A=0)|`.
    pub equalized_odds: f64,
    /// `P(Yhat=1 | A=a)`, indexed by `a`.
    pub positive_rate_by_attribute: [f64; 2],
    /// `P(Yhat=1 | Y=y, A=a)`, indexed `[y][a]`.
    pub positive_rate_by_cell: [[f64; 2]; 2],
}

fn check_binary(name: &str, xs: &[u8]) -> Result<()> {
    match xs.iter().find(|&&x| x > 1) {
        Some(x) => Err(EvalError::InvalidInput(format!("{name} must be binary, found {x}"))),
        None => Ok(()),
    }
}

pub fn fairness_metrics(predictions: &[u8], labels: &[u8], attributes: &[u8]) -> Result<FairnessMetrics> {
    if predictions.len() != labels.len() || attributes.len() != labels.len() {
        return Err(EvalError::InvalidInput("predictions, labels and attributes differ in length".into()));
    }
    check_binary("predictions", predictions)?;
    check_binary("labels", labels)?;
    check_binary("attributes", attributes)?;
    let mut pos = [[0usize; 2]; 2];
    let mut n = [[0usize; 2]; 2];
    for ((&p, &y), &a) in predictions.iter().zip(labels).zip(attributes) {
        n[y as usize][a as usize] += 1;
        pos[y as usize][a as usize] += p as usize;
    }
    let mut by_attr = [0.0; 2];
    for a in 0..2 {
        let total = n[0][a] + n[1][a];
        if total == 0 {
            return Err(EvalError::Data(format!("demographic parity undefined: no examples with attribute a={a}")));
        }
        by_attr[a] = (pos[0][a] + pos[1][a]) as f64 / total as f64;
    }
    let mut by_cell = [[0.0; 2]; 2];
    for y in 0..2 {
        for a in 0..2 {
            if n[y][a] == 0 {
                return Err(EvalError::EmptyCell { label: y as u8, attribute: a as u8 });
            }
            by_cell[y][a] = pos[y][a] as f64 / n[y][a] as f64;
        }
    }
    let eo = (0..2).map(|y| (by_cell[y][1] - by_cell[y][0]).abs()).fold(0.0, f64::max);
    Ok(FairnessMetrics {
        demographic_parity: (by_attr[1] - by_attr[0]).abs(),
        equalized_odds: eo,
        positive_rate_by_attribute: by_attr,
        positive_rate_by_cell: by_cell,
    })
}
