use serde::{Deserialize, Serialize};

use crate::environments::{Batch, Environment, Labels};
use crate::error::{Error, Result};
use crate::models::{Bind, PlayerSet};
use crate::autodiff::Tape;
use crate::tensor::{log_softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
}

impl Metrics {
    /// Accuracy for classification, MAE for regression.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.mae).unwrap_or(f64::NAN)
    }
}

/// Metrics of `f∘φ` on one environment. Argmax ties go to the lower class.
pub fn evaluate(players: &PlayerSet, env: &Environment) -> Result<Metrics> {
    if env.is_empty() {
        return Err(Error::EmptyEnvironment(env.id));
    }
    let batch = env.to_batch();
    let out = players.main_logits(&batch.x)?;
    Ok(metrics_from_outputs(&out, &batch.labels))
}

pub fn metrics_from_outputs(out: &Tensor, labels: &Labels) -> Metrics {
    match labels {
        Labels::Class(y) => {
            let n = y.len() as f64;
            let correct = y.iter().enumerate().filter(|(i, &c)| out.argmax_row(*i) == c).count();
            let ls = log_softmax_rows(out);
            let ce = -y.iter().enumerate().map(|(i, &c)| ls.get(i, c)).sum::<f64>() / n;
            Metrics { accuracy: Some(correct as f64 / n), cross_entropy: Some(ce), mae: None }
        }
        Labels::Real(y) => {
            let mae = y.iter().enumerate().map(|(i, v)| (out.get(i, 0) - v).abs()).sum::<f64>() / y.len() as f64;
            Metrics { accuracy: None, cross_entropy: None, mae: Some(mae) }
        }
    }
}

/// Fraction of examples whose own descriptor wins the in-batch similarity softmax.
pub fn descriptor_batch_accuracy(players: &PlayerSet, batch: &Batch) -> Result<f64> {
    let desc = batch.descriptors.as_ref().ok_or(Error::MissingDescriptors { method: "descriptor accuracy" })?;
    let mut uniq = desc.clone();
    uniq.sort();
    uniq.dedup();
    let mut tape = Tape::new();
    let z = players.features(&batch.x)?;
    let zn = tape.constant(z);
    let codes = tape.constant(Tensor::from_vec(uniq.len(), crate::environments::CODE_BITS, uniq.iter().flat_map(|d| d.signs()).collect()));
    let keys = players.g.encode(&mut tape, &players.store, codes, Bind::Frozen)?;
    let q = players.g.score(&mut tape, &players.store, zn, Bind::Frozen)?;
    let scores = tape.value(q).matmul_t(tape.value(keys));
    let hits = desc.iter().enumerate().filter(|(i, d)| uniq[scores.argmax_row(*i)] == **d).count();
    Ok(hits as f64 / desc.len() as f64)
}

/// `‖W₁[a,:]‖ / ‖W₁[b,:]‖` for the first layer of φ: how strongly inputs `a` and `b` feed the representation.
pub fn input_weight_ratio(players: &PlayerSet, a: usize, b: usize) -> f64 {
    let w = players.store.value(players.phi.net.layers[0].w);
    let norm = |r: usize| w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(a) / norm(b)
}

/// Mean `|∂(logit₁ − logit₀)/∂x_a|` over mean `|∂(logit₁ − logit₀)/∂x_b|` on the rows of `x`,
/// by central differences through `f∘φ`.
pub fn input_sensitivity_ratio(players: &PlayerSet, x: &Tensor, a: usize, b: usize) -> Result<f64> {
    let h = 1e-5;
    let margin = |x: &Tensor| -> Result<Vec<f64>> {
        let out = players.main_logits(x)?;
        Ok((0..out.rows()).map(|i| out.get(i, 1) - out.get(i, 0)).collect())
    };
    let mean_abs_slope = |col: usize| -> Result<f64> {
        let mut up = x.clone();
        let mut dn = x.clone();
        for i in 0..x.rows() {
            up.set(i, col, x.get(i, col) + h);
            dn.set(i, col, x.get(i, col) - h);
        }
        let (mu, md) = (margin(&up)?, margin(&dn)?);
        Ok(mu.iter().zip(&md).map(|(u, d)| ((u - d) / (2.0 * h)).abs()).sum::<f64>() / x.rows() as f64)
    };
    Ok(mean_abs_slope(a)? / mean_abs_slope(b)?)
}
