use rand::seq::index;

use super::{network::Network, Batch, ModelError, ModelSpec, ParamVector};
use crate::rng::{self, Purpose};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Models up to this many parameters are checked on every coordinate.
const FULL_SWEEP_MAX: usize = 2000;
/// Coordinates sampled (spread evenly over layers) for larger models.
const SAMPLED_COORDS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±epsilon probes changed a ReLU sign or a max-pool winner.
    pub skipped_kinks: usize,
}

/// Compare backpropagation against central finite differences.
pub fn grad_check(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    epsilon: f64,
) -> Result<GradCheckReport, ModelError> {
    let analytic = super::grad(spec, params, batch)?;
    grad_check_against(spec, params, batch, epsilon, &analytic)
}

/// Like [`grad_check`] but against a caller-supplied gradient.
pub fn grad_check_against(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    epsilon: f64,
    analytic: &ParamVector,
) -> Result<GradCheckReport, ModelError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(ModelError::InvalidArgument(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let net = Network::build(spec)?;
    net.check(params, batch)?;
    if analytic.len() != params.len() {
        return Err(ModelError::Shape("analytic gradient has the wrong dimension".into()));
    }

    let traces: Vec<_> = (0..batch.len())
        .map(|s| net.sample_trace(params.values(), batch.sample(s)))
        .collect();
    let mut probe = params.values().to_vec();
    let n = batch.len() as f64;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: None, checked: 0, skipped_kinks: 0 };
    'coords: for i in coordinates(&net, params.len()) {
        let op = net.op_of_param(i);
        let original = probe[i];
        let mut numeric = 0.0;
        for (s, (acts, pattern)) in traces.iter().enumerate() {
            let y = batch.labels()[s];
            probe[i] = original + epsilon;
            let (plus, p_plus) = net.loss_from(&probe, op, &acts[op], y);
            probe[i] = original - epsilon;
            let (minus, p_minus) = net.loss_from(&probe, op, &acts[op], y);
            probe[i] = original;
            if p_plus[op..] != pattern[op..] || p_minus[op..] != pattern[op..] {
                report.skipped_kinks += 1;
                continue 'coords;
            }
            numeric += (plus - minus) / (2.0 * epsilon);
        }
        numeric /= n;
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst_coordinate = Some(i);
            }
        }
    }
    Ok(report)
}

fn coordinates(net: &Network, dim: usize) -> Vec<usize> {
    if dim <= FULL_SWEEP_MAX {
        return (0..dim).collect();
    }
    let slices = net.layout().slices();
    let per_layer = SAMPLED_COORDS.div_ceil(slices.len());
    let mut rng = rng::stream(0, Purpose::GradCheck, &[dim as u64]);
    let mut coords = Vec::new();
    for s in slices {
        let take = per_layer.min(s.len);
        let mut picked: Vec<usize> = index::sample(&mut rng, s.len, take).into_iter().map(|o| s.start + o).collect();
        picked.sort_unstable();
        coords.extend(picked);
    }
    coords
}
