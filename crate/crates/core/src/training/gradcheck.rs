//! Central-difference gradient checking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::losses::{Objective, MODEL_TAG, TEACHER_TAG};
use crate::data::{Corpus, DialogSample};
use crate::error::Result;
use crate::graph::Graph;
use crate::nn::ParamSet;
use crate::tensor::Matrix;

/// Magnitudes below this are compared absolutely: central differences of an
/// O(1) loss carry about 1e-11 of round-off at the default step.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Layer-level group of a parameter name: everything before the last dot.
fn group_of(prefix: &str, name: &str) -> String {
    let base = name.rsplit_once('.').map_or(name, |(head, _)| head);
    format!("{prefix}{base}")
}

/// Compare `analytic[s][i]` against central differences of `loss` for every
/// scalar of every parameter in `sets`. `prefixes[s]` labels set `s` in the
/// report.
pub fn check_gradients(
    sets: &mut [ParamSet],
    prefixes: &[&str],
    analytic: &[Vec<Matrix>],
    step: f64,
    loss: &mut dyn FnMut(&[ParamSet]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in 0..sets.len() {
        for i in 0..sets[s].len() {
            let group = group_of(prefixes.get(s).copied().unwrap_or(""), sets[s].name(i));
            for j in 0..sets[s].get(i).len() {
                let original = sets[s].get(i).as_slice()[j];
                sets[s].get_mut(i).as_mut_slice()[j] = original + step;
                let plus = loss(sets)?;
                sets[s].get_mut(i).as_mut_slice()[j] = original - step;
                let minus = loss(sets)?;
                sets[s].get_mut(i).as_mut_slice()[j] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let err = relative_error(analytic[s][i].as_slice()[j], numeric);
                let e = groups.entry(group.clone()).or_insert((0.0, 0));
                e.0 = e.0.max(err);
                e.1 += 1;
            }
        }
    }
    let groups: Vec<GroupError> = groups
        .into_iter()
        .map(|(group, (max_rel_error, checked))| GroupError {
            group,
            max_rel_error,
            checked,
        })
        .collect();
    Ok(GradCheckReport {
        max_rel_error: groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max),
        checked: groups.iter().map(|g| g.checked).sum(),
        groups,
    })
}

/// Gradient check of a full training objective on `samples`. The analytic
/// gradient is multiplied by `gradient_scale` before comparison (1 for a
/// real check; anything else plants a fault).
pub fn gradient_check(
    obj: &Objective,
    corpus: &Corpus,
    samples: &[&DialogSample],
    step: f64,
    gradient_scale: f64,
) -> Result<GradCheckReport> {
    let with_teacher = obj.teacher.is_some() && !obj.freeze_teacher;
    let mut sets = vec![obj.model.params.clone()];
    if let Some(t) = obj.teacher {
        sets.push(t.params.clone());
    }
    let (analytic, soft_targets) = {
        let mut g = Graph::new();
        let built = obj.build(&mut g, &sets[0], sets.get(1), corpus, samples)?;
        let grads = g.backward(built.root);
        let mut a = vec![grads.for_tag(MODEL_TAG, &sets[0].shapes())];
        if with_teacher {
            a.push(grads.for_tag(TEACHER_TAG, &sets[1].shapes()));
        }
        let a = a
            .into_iter()
            .map(|set| set.into_iter().map(|m| m.scale(gradient_scale)).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        (a, built.soft_targets)
    };
    let fixed = Objective {
        soft_targets: Some(&soft_targets),
        dropout_seed: None,
        ..*obj
    };
    let teacher_fixed = (!with_teacher).then(|| sets.get(1).cloned()).flatten();
    let mut trainable: Vec<ParamSet> = sets.into_iter().take(if with_teacher { 2 } else { 1 }).collect();
    let prefixes = ["", "teacher:"];
    let mut loss = |ps: &[ParamSet]| -> Result<f64> {
        let mut g = Graph::new();
        let teacher = ps.get(1).or(teacher_fixed.as_ref());
        let built = fixed.build(&mut g, &ps[0], teacher, corpus, samples)?;
        Ok(g.value(built.root).get(0, 0))
    };
    check_gradients(&mut trainable, &prefixes, &analytic, step, &mut loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;

    /// `L(w) = ½‖Xw − y‖²`, gradient `Xᵀ(Xw − y)`.
    fn quadratic() -> (Matrix, Matrix, ParamSet) {
        let x = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let y = Matrix::from_fn(5, 1, |r, _| r as f64 * 0.2 - 0.4);
        let mut b = ParamBuilder::new(4);
        b.weight("w", 3, 1);
        (x, y, b.finish())
    }

    fn run(scale: f64) -> GradCheckReport {
        let (x, y, p) = quadratic();
        let residual = x.matmul(p.get(0)).sub(&y);
        let grad = x.t_matmul(&residual).scale(scale);
        let mut sets = vec![p];
        let mut loss = |ps: &[ParamSet]| -> Result<f64> { Ok(0.5 * x.matmul(ps[0].get(0)).sub(&y).sum_squares()) };
        check_gradients(&mut sets, &[""], &[vec![grad]], 1e-5, &mut loss).unwrap()
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let r = run(1.0);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn doubled_gradient_reports_one_half() {
        let r = run(2.0);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{}", r.max_rel_error);
        assert_eq!(r.worst().unwrap().group, "w");
    }
}
