use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Below this magnitude, differences are compared absolutely rather than relatively.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward gradients to central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `(label, analytic, numeric, relative error)` per checked element.
    pub entries: Vec<(String, f64, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.3).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &(String, f64, f64, f64)> {
        self.entries.iter().filter(move |e| !(e.3 <= self.tol))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
    (analytic - numeric).abs() / scale
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    g.value(v).item()
}

/// Checks `d f / d x` for a scalar-valued `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport {
        entries: Vec::with_capacity(x.len()),
        tol,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        report
            .entries
            .push((format!("x[{i}]"), analytic[i], numeric, err));
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every element of every
/// parameter in `store` (or the first `limit` elements of each, when given).
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    step: f64,
    tol: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    let grads = g.backward(out)?;
    g.accumulate_grads(&grads, &mut work);
    let analytic: Vec<Vec<f64>> = (0..work.len())
        .map(|s| work.get(s).grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport { entries: Vec::new(), tol };
    for slot in 0..work.len() {
        let n = work.get(slot).len();
        let n = limit.map_or(n, |l| l.min(n));
        for i in 0..n {
            let orig = work.get(slot).data()[i];
            work.get_mut(slot).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(slot).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(slot).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[slot][i];
            report.entries.push((
                format!("{}[{i}]", work.name(slot)),
                a,
                numeric,
                relative_error(a, numeric),
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let w = Tensor::vector(vec![3.0, -2.0, 0.25]);
        let report = grad_check(
            |g, x| {
                let w = g.constant(w.clone());
                let p = g.mul(x, w)?;
                Ok(g.sum(p))
            },
            &x,
            1e-3,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.entries);
        assert!(report.max_rel_error() < 1e-10);
    }

    #[test]
    fn wrong_adjoint_is_flagged() {
        // Sum of squares with the backward deliberately scaled by 3: the value
        // is x^2 but the recorded history says 3x^2 + const.
        let x = Tensor::vector(vec![0.7, -0.3]);
        let report = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.sum(sq);
                let wrong = g.scale(s, 3.0);
                // Shift the value back so only the adjoint is off.
                let v = g.value(s).item()?;
                let fixed = g.affine(wrong, 1.0, -2.0 * v);
                Ok(fixed)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 2);
    }
}
