//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Largest accepted relative error per group.
    pub tolerance: f64,
    /// Denominator floor so that vanishing gradients compare absolutely.
    pub floor: f64,
    /// Test hook: scale the analytic gradient of this group by 2.
    pub corrupt_group: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-3, floor: 1e-6, corrupt_group: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

fn eval<F>(params: &ParamStore<f64>, loss: &F) -> Result<f64, NumericsError>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>, &Bound) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = loss(params, &mut g, &bound)?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(NumericsError::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients of `loss` against central differences for
/// every element of every parameter group.
pub fn grad_check<F>(params: &ParamStore<f64>, loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>, &Bound) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = loss(params, &mut g, &bound)?;
    let base = g.value(out).data()[0];
    if !base.is_finite() {
        return Err(NumericsError::NonFinite(format!("loss evaluated to {base}")));
    }
    let grads = g.backward(out);
    let analytic = params.collect_grads(&bound, &grads);

    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (id, name, tensor) in params.iter() {
        let factor = if cfg.corrupt_group.as_deref() == Some(name) { 2.0 } else { 1.0 };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + cfg.h;
            let plus = eval(&probe, &loss)?;
            probe.get_mut(id).data_mut()[i] = orig - cfg.h;
            let minus = eval(&probe, &loss)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[id.0][i] * factor;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(a.abs());
        }
        groups.push(GroupReport {
            name: name.to_string(),
            elements: tensor.len(),
            max_rel_err: max_rel,
            max_abs_grad: max_abs,
            passed: max_rel <= cfg.tolerance,
        });
    }
    Ok(GradCheckReport { loss: base, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn half_square(p: f64) -> (ParamStore<f64>, impl Fn(&ParamStore<f64>, &mut Graph<f64>, &Bound) -> Result<Var, NumericsError>) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::new(vec![1, 1], vec![p]).unwrap());
        let f = move |_: &ParamStore<f64>, g: &mut Graph<f64>, b: &Bound| {
            let x = b.var(id);
            let sq = g.matmul(x, x)?;
            Ok(g.scale(sq, 0.5))
        };
        (s, f)
    }

    #[test]
    fn quadratic_gradient() {
        let (s, f) = half_square(3.0);
        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        let out = f(&s, &mut g, &b).unwrap();
        let grads = g.backward(out);
        assert_eq!(grads.get(b.var(s.id("p").unwrap())).unwrap(), &[3.0]);
        let report = grad_check(&s, f, &GradCheckConfig::default()).unwrap();
        assert!(report.passed());
        assert!(report.worst() < 1e-8);
    }

    #[test]
    fn corrupted_group_is_flagged() {
        let (s, f) = half_square(3.0);
        let cfg = GradCheckConfig { corrupt_group: Some("p".into()), ..Default::default() };
        let report = grad_check(&s, f, &cfg).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing().next().unwrap().name, "p");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::new(vec![1, 1], vec![f64::INFINITY]).unwrap());
        let f = move |_: &ParamStore<f64>, g: &mut Graph<f64>, b: &Bound| g.matmul(b.var(id), b.var(id));
        assert!(matches!(grad_check(&s, f, &GradCheckConfig::default()), Err(NumericsError::NonFinite(_))));
    }
}
