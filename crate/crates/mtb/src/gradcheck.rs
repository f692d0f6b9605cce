//! Central finite-difference verification of analytic gradients. Test
//! support: the differencing here never touches the backward pass it
//! checks, only repeated forward evaluations.

use crate::encoder::{EncoderModel, EncoderParams};
use crate::objectives::ClassifierHead;

/// Worst observed disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorReport {
    pub tensor: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub elements: usize,
}

/// Relative error with an absolute floor, so gradients near zero are
/// compared on an absolute scale.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(floor)
}

/// Richardson-extrapolated central difference anchored at `step`: combines
/// the two-point stencils at `step` and `step / 2` to cancel the quadratic
/// truncation term, which at these hidden sizes would otherwise dominate
/// the comparison tolerance.
fn central_diff(mut eval: impl FnMut(f64) -> f64, step: f64) -> f64 {
    let coarse = (eval(step) - eval(-step)) / (2.0 * step);
    let fine = (eval(step / 2.0) - eval(-step / 2.0)) / step;
    (4.0 * fine - coarse) / 3.0
}

/// Compare `grads` against central differences of `loss_fn` for every
/// element of every encoder tensor.
pub fn check_encoder_gradients<F>(
    model: &EncoderModel,
    grads: &EncoderParams,
    loss_fn: F,
    step: f64,
    floor: f64,
) -> Vec<TensorReport>
where
    F: Fn(&EncoderModel) -> f64,
{
    let mut probe = model.clone();
    let names: Vec<String> = model
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();

    let mut reports = Vec::with_capacity(names.len());
    for (t_idx, name) in names.iter().enumerate() {
        let elements = model.params.named_tensors()[t_idx].1.len();
        let mut report = TensorReport {
            tensor: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            fd: 0.0,
            elements,
        };
        for e_idx in 0..elements {
            let original = probe.params.named_tensors()[t_idx].1.as_slice().unwrap()[e_idx];
            let fd = central_diff(
                |delta| {
                    {
                        let mut tensors = probe.params.named_tensors_mut();
                        tensors[t_idx].1.as_slice_mut().unwrap()[e_idx] = original + delta;
                    }
                    loss_fn(&probe)
                },
                step,
            );
            {
                let mut tensors = probe.params.named_tensors_mut();
                tensors[t_idx].1.as_slice_mut().unwrap()[e_idx] = original;
            }
            let analytic = grads.named_tensors()[t_idx].1.as_slice().unwrap()[e_idx];
            let err = rel_err(analytic, fd, floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = e_idx;
                report.analytic = analytic;
                report.fd = fd;
            }
        }
        reports.push(report);
    }
    reports
}

/// Same check for classifier-head tensors.
pub fn check_head_gradients<F>(
    head: &ClassifierHead,
    head_grads: &ClassifierHead,
    loss_fn: F,
    step: f64,
    floor: f64,
) -> Vec<TensorReport>
where
    F: Fn(&ClassifierHead) -> f64,
{
    let mut probe = head.clone();
    let mut reports = Vec::new();
    for which in ["head.w", "head.b"] {
        let is_w = which == "head.w";
        let grad = if is_w { &head_grads.w } else { &head_grads.b };
        let elements = grad.len();
        let mut report = TensorReport {
            tensor: which.to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            fd: 0.0,
            elements,
        };
        let set = |probe: &mut ClassifierHead, e_idx: usize, value: f64| {
            let m = if is_w { &mut probe.w } else { &mut probe.b };
            m.as_slice_mut().unwrap()[e_idx] = value;
        };
        let get = |probe: &ClassifierHead, e_idx: usize| -> f64 {
            let m = if is_w { &probe.w } else { &probe.b };
            m.as_slice().unwrap()[e_idx]
        };
        for e_idx in 0..elements {
            let original = get(&probe, e_idx);
            let fd = central_diff(
                |delta| {
                    set(&mut probe, e_idx, original + delta);
                    loss_fn(&probe)
                },
                step,
            );
            set(&mut probe, e_idx, original);
            let analytic = grad.as_slice().unwrap()[e_idx];
            let err = rel_err(analytic, fd, floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = e_idx;
                report.analytic = analytic;
                report.fd = fd;
            }
        }
        reports.push(report);
    }
    reports
}
