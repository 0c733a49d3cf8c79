//! Central finite-difference oracle for gradients.

use ndarray::ArrayD;

use super::graph::{Graph, Tensor};
use crate::error::{Result, SorcenError};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`, returning the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &ArrayD<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Tensor) -> Result<Tensor>,
{
    let eval = |values: &ArrayD<f64>, with_grad: bool| -> Result<(f64, Option<ArrayD<f64>>)> {
        let mut graph = Graph::<f64>::new();
        let x = graph.leaf(values.clone(), with_grad);
        let out = f(&mut graph, x)?;
        if graph.values(out).len() != 1 {
            return Err(SorcenError::invalid(format!(
                "grad_check needs a scalar function, got shape {:?}",
                graph.shape(out)
            )));
        }
        let y = graph.values(out)[[0]];
        if !with_grad {
            return Ok((y, None));
        }
        graph.backward(out)?;
        let g = graph
            .grad(x)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(values.raw_dim()));
        Ok((y, Some(g)))
    };

    let (loss, analytic) = eval(point, true)?;
    if !loss.is_finite() {
        return Err(SorcenError::NonFinite { context: "grad_check loss".into(), coordinate: None });
    }
    let analytic = analytic.unwrap();

    let flat_point: Vec<f64> = point.iter().cloned().collect();
    let mut max_rel = 0.0f64;
    for i in 0..flat_point.len() {
        let mut plus = point.clone();
        let mut minus = point.clone();
        {
            let p = plus.as_slice_mut().unwrap();
            p[i] += h;
        }
        {
            let m = minus.as_slice_mut().unwrap();
            m[i] -= h;
        }
        let (fp, _) = eval(&plus, false)?;
        let (fm, _) = eval(&minus, false)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SorcenError::NonFinite {
                context: "grad_check finite difference".into(),
                coordinate: Some(i),
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[i];
        if !a.is_finite() {
            return Err(SorcenError::NonFinite {
                context: "grad_check analytic gradient".into(),
                coordinate: Some(i),
            });
        }
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
