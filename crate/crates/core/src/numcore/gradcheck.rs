use super::{Graph, Result, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

const STEP: f64 = 1e-5;

/// Checks every parameter element of `loss_fn` against a central finite
/// difference with step 1e-5.
///
/// The relative error per element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(params: &[Tensor], tolerance: f64, loss_fn: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(ps);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss)[0])
    };

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        tolerance,
    };
    for p in 0..params.len() {
        let ana = analytic.param(p);
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = ana.map_or(0.0, |g| g[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((p, i));
                }
            }
        }
    }
    Ok(report)
}
