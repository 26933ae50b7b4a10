//! Training objectives.
//!
//! * supervised: `‖y_pred − y_gt‖₂`, averaged over the batch
//! * unsupervised: `‖y_pred − μ‖₂ / |Σ| + ln Σ` per unlabeled sample
//! * combined: `L_s + λ_un·L_un`
//! * ranking baseline: `max(0, count(sub) − count(full) + margin)`

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::tensor::{Array, Graph, NodeId};

pub const DEFAULT_LAMBDA_UN: f64 = 0.6;

/// Scalar loss node plus a breakdown for logging. The three components sum
/// to `value`.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub node: NodeId,
    pub value: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub variance_term: f64,
}

impl LossValue {
    pub fn zero(graph: &mut Graph) -> Self {
        let node = graph.constant(Array::scalar(0.0));
        Self {
            node,
            value: 0.0,
            supervised: 0.0,
            unsupervised: 0.0,
            variance_term: 0.0,
        }
    }

    pub fn components_sum(&self) -> f64 {
        self.supervised + self.unsupervised + self.variance_term
    }
}

/// Euclidean norm of `pred − target` as a graph node.
pub fn l2_distance(graph: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if graph.value(pred).shape() != graph.value(target).shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            graph.value(pred).shape(),
            graph.value(target).shape()
        )));
    }
    let diff = graph.sub(pred, target)?;
    let sq = graph.mul(diff, diff)?;
    let ss = graph.sum(sq);
    graph.sqrt(ss)
}

fn density_node(graph: &mut Graph, map: &DensityMap) -> Result<NodeId> {
    let arr = Array::new(vec![map.height(), map.width()], map.values().to_vec())?;
    Ok(graph.constant(arr))
}

/// Mean over the batch of per-sample L2 errors.
pub fn supervised_loss(graph: &mut Graph, preds: &[NodeId], gts: &[&DensityMap]) -> Result<LossValue> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, gt) in preds.iter().zip(gts) {
        let t = density_node(graph, gt)?;
        terms.push(l2_distance(graph, p, t)?);
    }
    let total = sum_nodes(graph, &terms)?;
    let node = graph.scalar_mul(total, 1.0 / preds.len() as f64);
    let value = graph.value(node).item();
    Ok(LossValue {
        node,
        value,
        supervised: value,
        unsupervised: 0.0,
        variance_term: 0.0,
    })
}

fn sum_nodes(graph: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = graph.add(acc, n)?;
    }
    Ok(acc)
}

/// Unlabeled-sample loss with a detached pseudo ground truth.
pub fn unsupervised_loss(
    graph: &mut Graph,
    pred: NodeId,
    pseudo: &GpPosterior,
    variance: NodeId,
) -> Result<LossValue> {
    let shape = graph.value(pred).shape().to_vec();
    let mean = Array::new(shape, pseudo.mean.clone())
        .map_err(|_| Error::Shape("pseudo ground truth does not match the prediction".into()))?;
    let mean = graph.constant(mean);
    unsupervised_loss_with_mean(graph, pred, mean, variance)
}

/// Unlabeled-sample loss against an arbitrary pseudo-mean node.
pub fn unsupervised_loss_with_mean(
    graph: &mut Graph,
    pred: NodeId,
    mean: NodeId,
    variance: NodeId,
) -> Result<LossValue> {
    let sigma = graph.value(variance);
    if !sigma.is_scalar() || !(sigma.item() > 0.0) {
        return Err(Error::Contract(format!(
            "unsupervised loss needs a positive scalar variance, got {:?}",
            sigma.data()
        )));
    }
    let mean = if graph.value(mean).shape() != graph.value(pred).shape() {
        let shape = graph.value(pred).shape().to_vec();
        graph.reshape(mean, &shape)?
    } else {
        mean
    };
    // Σ ≥ σ² > 0, so |Σ| = Σ
    let dist = l2_distance(graph, pred, mean)?;
    let fit = graph.div(dist, variance)?;
    let log_var = graph.log(variance)?;
    let node = graph.add(fit, log_var)?;
    let (f, l) = (graph.value(fit).item(), graph.value(log_var).item());
    Ok(LossValue {
        node,
        value: graph.value(node).item(),
        supervised: 0.0,
        unsupervised: f,
        variance_term: l,
    })
}

/// Arithmetic mean of several losses, components included.
pub fn mean_loss(graph: &mut Graph, losses: &[LossValue]) -> Result<LossValue> {
    if losses.is_empty() {
        return Ok(LossValue::zero(graph));
    }
    let nodes: Vec<NodeId> = losses.iter().map(|l| l.node).collect();
    let total = sum_nodes(graph, &nodes)?;
    let inv = 1.0 / losses.len() as f64;
    let node = graph.scalar_mul(total, inv);
    let avg = |f: fn(&LossValue) -> f64| losses.iter().map(f).sum::<f64>() * inv;
    Ok(LossValue {
        node,
        value: graph.value(node).item(),
        supervised: avg(|l| l.supervised),
        unsupervised: avg(|l| l.unsupervised),
        variance_term: avg(|l| l.variance_term),
    })
}

/// `L_s + λ_un·L_un`.
pub fn combined_loss(
    graph: &mut Graph,
    sup: &LossValue,
    unsup: &LossValue,
    lambda_un: f64,
) -> Result<LossValue> {
    if !(lambda_un >= 0.0) {
        return Err(Error::Config(format!("lambda_un must be ≥ 0, got {lambda_un}")));
    }
    let weighted = graph.scalar_mul(unsup.node, lambda_un);
    let node = graph.add(sup.node, weighted)?;
    Ok(LossValue {
        node,
        value: graph.value(node).item(),
        supervised: sup.supervised + lambda_un * unsup.supervised,
        unsupervised: sup.unsupervised + lambda_un * unsup.unsupervised,
        variance_term: sup.variance_term + lambda_un * unsup.variance_term,
    })
}

/// Pairwise ranking hinge: a sub-image should not hold more people than the
/// image containing it.
pub fn ranking_hinge_loss(
    graph: &mut Graph,
    full_count: NodeId,
    sub_count: NodeId,
    margin: f64,
) -> Result<LossValue> {
    let gap = graph.sub(sub_count, full_count)?;
    let m = graph.constant(Array::scalar(margin));
    let shifted = graph.add(gap, m)?;
    let node = graph.relu(shifted);
    let value = graph.value(node).item();
    Ok(LossValue {
        node,
        value,
        supervised: 0.0,
        unsupervised: value,
        variance_term: 0.0,
    })
}
