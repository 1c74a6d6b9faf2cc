//! Trace-norm-constrained multiclass softmax classifier trained by
//! Frank-Wolfe with the power-iteration LMO.

use std::io::{self, BufRead, Write};

use crate::domains::TraceNormPoint;
use crate::error::{Error, Result};
use crate::fw::{self, FwTrace, StepSchedule, TraceNormFwProblem};
use crate::linalg::Matrix;

/// Samples with integer class labels in 0..classes.
#[derive(Debug, Clone)]
pub struct MulticlassDataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl MulticlassDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", features.rows()),
                got: format!("{}", labels.len()),
            });
        }
        if classes == 0 || labels.iter().any(|&y| y >= classes) {
            return Err(Error::invalid("labels must lie in 0..classes"));
        }
        Ok(MulticlassDataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Class probabilities softmax(w x) with max-subtraction stabilization.
pub fn softmax_probs(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", w.cols()),
            got: format!("{}", x.len()),
        });
    }
    let logits = w.matvec(x);
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(probs)
}

/// Mean cross-entropy F(w) = -1/n sum_i log p_{y_i}; the log argument is
/// clamped at 1e-300 so saturated mispredictions stay finite.
pub fn softmax_objective(w: &Matrix, data: &MulticlassDataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let probs = softmax_probs(w, data.sample(i))?;
        total -= probs[data.label(i)].max(1e-300).ln();
    }
    Ok(total / data.len() as f64)
}

/// Mean gradient 1/n sum_i (p^(i) - y^(i)) x^(i)T, a classes x dim matrix.
pub fn softmax_grad(w: &Matrix, data: &MulticlassDataset) -> Result<Matrix> {
    let mut grad = Matrix::zeros(data.classes(), data.dim());
    for i in 0..data.len() {
        let mut residual = softmax_probs(w, data.sample(i))?;
        residual[data.label(i)] -= 1.0;
        grad.add_scaled(1.0, &Matrix::outer(1.0, &residual, data.sample(i)));
    }
    grad.scale_in_place(1.0 / data.len() as f64);
    Ok(grad)
}

/// Softmax weights inside the nuclear-norm ball.
#[derive(Debug, Clone)]
pub struct SoftmaxModel {
    pub weights: TraceNormPoint,
}

impl SoftmaxModel {
    pub fn classes(&self) -> usize {
        self.weights.dense().rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.dense().cols()
    }
}

/// Trains from w0 = 0 (always feasible) by Frank-Wolfe with a constant
/// power-iteration count per LMO call. The trace records the cross-entropy
/// objective.
pub fn train_softmax_fw(
    data: &MulticlassDataset,
    tau: f64,
    power_iters: usize,
    schedule: &StepSchedule,
    iters: usize,
    seed: u64,
) -> Result<(SoftmaxModel, FwTrace)> {
    train_softmax_fw_scheduled(
        data,
        tau,
        fw::PowerBudget::Constant(power_iters),
        schedule,
        iters,
        seed,
    )
}

/// Like `train_softmax_fw`, with an explicit power-iteration budget; the
/// logarithmic k_t = O(log t) schedule is the alternative to a constant k.
pub fn train_softmax_fw_scheduled(
    data: &MulticlassDataset,
    tau: f64,
    power_budget: fw::PowerBudget,
    schedule: &StepSchedule,
    iters: usize,
    seed: u64,
) -> Result<(SoftmaxModel, FwTrace)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    // non-finite logits surface as a NaN objective, which the engine turns
    // into a numeric-failure error at the offending iteration
    let problem = TraceNormFwProblem {
        objective: |w: &Matrix| softmax_objective(w, data).unwrap_or(f64::NAN),
        gradient: |w: &Matrix| {
            softmax_grad(w, data).unwrap_or_else(|_| Matrix::zeros(data.classes(), data.dim()))
        },
        rows: data.classes(),
        cols: data.dim(),
        tau,
        power_budget,
        seed,
    };
    let run = fw::run_fw(&problem, schedule, iters, None)?;
    Ok((
        SoftmaxModel {
            weights: run.final_point,
        },
        run.trace,
    ))
}

/// Predicted class: argmax probability, lowest index on ties.
pub fn classify(model: &SoftmaxModel, x: &[f64]) -> Result<usize> {
    let probs = softmax_probs(model.weights.dense(), x)?;
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of samples classified correctly.
pub fn accuracy(model: &SoftmaxModel, data: &MulticlassDataset) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..data.len() {
        if classify(model, data.sample(i))? == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

impl SoftmaxModel {
    pub fn save<W: Write>(&self, w: &mut W, config_hash: Option<&str>) -> io::Result<()> {
        writeln!(w, "CGM1 softmax")?;
        if let Some(h) = config_hash {
            writeln!(w, "config {h}")?;
        }
        writeln!(w, "tau {}", self.weights.radius())?;
        writeln!(w, "shape {} {}", self.classes(), self.dim())?;
        writeln!(w, "atoms {}", self.weights.atoms().len())?;
        for atom in self.weights.atoms() {
            let mut row = vec![atom.coefficient.to_string()];
            row.extend(atom.u.iter().map(|v| v.to_string()));
            row.extend(atom.v.iter().map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        writeln!(w, "dense")?;
        for r in 0..self.classes() {
            let row: Vec<String> = self
                .weights
                .dense()
                .row(r)
                .iter()
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<SoftmaxModel> {
        use crate::domains::Rank1Atom;
        let lines: Vec<String> = r
            .lines()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
        let mut at = 0usize;
        let mut take = |what: &str| -> Result<(usize, &str)> {
            if at >= lines.len() {
                return Err(Error::Parse {
                    line: lines.len(),
                    msg: format!("missing {what}"),
                });
            }
            at += 1;
            Ok((at, lines[at - 1].as_str()))
        };
        let (ln, header) = take("header")?;
        if header.trim() != "CGM1 softmax" {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 'CGM1 softmax', got '{header}'"),
            });
        }
        let mut tau = None;
        let mut shape = None;
        let atom_count: usize;
        loop {
            let (ln, line) = take("model fields")?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("config") => {}
                Some("tau") => {
                    tau = parts.next().and_then(|v| v.parse::<f64>().ok());
                }
                Some("shape") => {
                    let h = parts.next().and_then(|v| v.parse::<usize>().ok());
                    let m = parts.next().and_then(|v| v.parse::<usize>().ok());
                    shape = h.zip(m);
                }
                Some("atoms") => {
                    atom_count = parts
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Error::Parse {
                            line: ln,
                            msg: "bad atom count".into(),
                        })?;
                    break;
                }
                other => {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("unexpected field {other:?}"),
                    })
                }
            }
        }
        let (tau, (h, m)) = match (tau, shape) {
            (Some(t), Some(s)) => (t, s),
            _ => {
                return Err(Error::Parse {
                    line: at,
                    msg: "incomplete softmax model header".into(),
                })
            }
        };
        let mut atoms = Vec::with_capacity(atom_count);
        for _ in 0..atom_count {
            let (ln, line) = take("atom row")?;
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: ln,
                msg: e.to_string(),
            })?;
            if vals.len() != 1 + h + m {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected {} values, got {}", 1 + h + m, vals.len()),
                });
            }
            atoms.push(Rank1Atom {
                coefficient: vals[0],
                u: vals[1..1 + h].to_vec(),
                v: vals[1 + h..].to_vec(),
            });
        }
        let (ln, marker) = take("dense marker")?;
        if marker.trim() != "dense" {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 'dense', got '{marker}'"),
            });
        }
        let mut rows = Vec::with_capacity(h);
        for _ in 0..h {
            let (ln, line) = take("dense row")?;
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            rows.push(vals.map_err(|e| Error::Parse {
                line: ln,
                msg: e.to_string(),
            })?);
        }
        let dense = Matrix::from_rows(&rows)?;
        let point = TraceNormPoint::from_parts(dense, atoms, tau)?;
        Ok(SoftmaxModel { weights: point })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn small_dataset() -> MulticlassDataset {
        MulticlassDataset::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.5],
                vec![0.3, -0.8],
            ])
            .unwrap(),
            vec![0, 1, 1, 0],
            2,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let w = Matrix::zeros(4, 3);
        let p = softmax_probs(&w, &[1.0, -2.0, 0.5]).unwrap();
        for pi in &p {
            assert_close(*pi, 0.25, 1e-15);
        }
        let data = MulticlassDataset::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            vec![2],
            4,
        )
        .unwrap();
        assert_close(
            softmax_objective(&Matrix::zeros(4, 3), &data).unwrap(),
            (4.0f64).ln(),
            1e-12,
        );
    }

    #[test]
    fn saturated_logits() {
        let w = Matrix::from_rows(&[vec![10.0], vec![-10.0]]).unwrap();
        let p = softmax_probs(&w, &[1.0]).unwrap();
        assert_close(p[0], 1.0, 1e-8);
        assert_close(p[1], 0.0, 1e-8);
    }

    #[test]
    fn probs_match_naive_formula_for_small_logits() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..50 {
            let w_data: Vec<f64> = (0..6).map(|_| rng.next_range(-1.0, 1.0)).collect();
            let w = Matrix::new(3, 2, w_data).unwrap();
            let x = [rng.next_range(-1.0, 1.0), rng.next_range(-1.0, 1.0)];
            let got = softmax_probs(&w, &x).unwrap();
            let logits = w.matvec(&x);
            let raw: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let total: f64 = raw.iter().sum();
            for (g, r) in got.iter().zip(&raw) {
                assert_close(*g, r / total, 1e-12);
            }
        }
    }

    #[test]
    fn objective_matches_per_sample_loop() {
        let data = small_dataset();
        let mut rng = SplitMix64::new(6);
        let w_data: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let w = Matrix::new(2, 2, w_data).unwrap();
        let mut naive = 0.0;
        for i in 0..data.len() {
            let p = softmax_probs(&w, data.sample(i)).unwrap();
            for k in 0..2 {
                let y = if k == data.label(i) { 1.0 } else { 0.0 };
                naive -= y * p[k].ln();
            }
        }
        naive /= data.len() as f64;
        assert_close(softmax_objective(&w, &data).unwrap(), naive, 1e-12);
    }

    #[test]
    fn near_perfect_predictions_have_near_zero_loss() {
        // large weights aligned with the labels saturate the softmax
        let data = MulticlassDataset::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        let w = Matrix::from_rows(&[vec![50.0, -50.0], vec![-50.0, 50.0]]).unwrap();
        assert!(softmax_objective(&w, &data).unwrap() < 1e-8);
    }

    #[test]
    fn gradient_zero_at_perfect_fit_and_matches_hand_case() {
        // single sample, K = m = 2, moderate weights: compare by hand
        let data = MulticlassDataset::new(
            Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap(),
            vec![0],
            2,
        )
        .unwrap();
        let w = Matrix::from_rows(&[vec![0.3, 0.1], vec![-0.2, 0.4]]).unwrap();
        let p = softmax_probs(&w, &[2.0, -1.0]).unwrap();
        let grad = softmax_grad(&w, &data).unwrap();
        assert_close(grad.get(0, 0), (p[0] - 1.0) * 2.0, 1e-14);
        assert_close(grad.get(0, 1), -(p[0] - 1.0), 1e-14);
        assert_close(grad.get(1, 0), p[1] * 2.0, 1e-14);
        assert_close(grad.get(1, 1), -p[1], 1e-14);

        // saturated correct predictions: gradient vanishes
        let data2 = MulticlassDataset::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        let w2 = Matrix::from_rows(&[vec![80.0, -80.0], vec![-80.0, 80.0]]).unwrap();
        let g2 = softmax_grad(&w2, &data2).unwrap();
        assert!(g2.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = small_dataset();
        let mut rng = SplitMix64::new(11);
        let w_data: Vec<f64> = (0..4).map(|_| rng.next_gaussian() * 0.5).collect();
        let w = Matrix::new(2, 2, w_data).unwrap();
        let grad = softmax_grad(&w, &data).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..2 {
                let mut wp = w.clone();
                wp.set(r, c, w.get(r, c) + h);
                let mut wm = w.clone();
                wm.set(r, c, w.get(r, c) - h);
                let fd = (softmax_objective(&wp, &data).unwrap()
                    - softmax_objective(&wm, &data).unwrap())
                    / (2.0 * h);
                let g = grad.get(r, c);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-6, "rel error {rel} at ({r},{c})");
            }
        }
    }

    #[test]
    fn single_full_step_is_one_atom() {
        let data = small_dataset();
        let (model, trace) =
            train_softmax_fw(&data, 3.0, 20, &StepSchedule::Default, 1, 7).unwrap();
        // gamma_0 = 1: w1 = -tau u1 v1^T exactly
        assert_eq!(trace.len(), 1);
        assert_eq!(model.weights.atoms().len(), 1);
        let atom = &model.weights.atoms()[0];
        assert_eq!(atom.coefficient.abs(), 3.0);
        let mut diff = atom.to_dense();
        diff.add_scaled(-1.0, model.weights.dense());
        assert!(diff.frob_norm() < 1e-12);
    }

    #[test]
    fn atom_budget_and_mass_bounds_hold() {
        let data = small_dataset();
        let iters = 60;
        let (model, _) =
            train_softmax_fw(&data, 2.5, 5, &StepSchedule::Default, iters, 3).unwrap();
        assert!(model.weights.atoms().len() <= iters);
        assert!(model.weights.coefficient_mass() <= 2.5 + 1e-6);
        let mut diff = model.weights.reconstruct_from_atoms();
        diff.add_scaled(-1.0, model.weights.dense());
        assert!(diff.frob_norm() <= 1e-6);
    }

    #[test]
    fn classify_tie_breaks_to_lowest_index() {
        let model = SoftmaxModel {
            weights: TraceNormPoint::zeros(3, 2, 1.0).unwrap(),
        };
        assert_eq!(classify(&model, &[0.4, 0.6]).unwrap(), 0);
    }

    #[test]
    fn classify_saturated_logits_picks_dominant_class() {
        use crate::domains::Rank1Atom;
        let s = 1.0 / 2.0f64.sqrt();
        let atom = Rank1Atom {
            coefficient: 50.0,
            u: vec![-s, s, 0.0],
            v: vec![1.0, 0.0],
        };
        let weights =
            TraceNormPoint::from_parts(atom.to_dense(), vec![atom.clone()], 100.0).unwrap();
        let model = SoftmaxModel { weights };
        // logits for x = (1, 0) are (-35.36, +35.36, 0): fully saturated
        assert_eq!(classify(&model, &[1.0, 0.0]).unwrap(), 1);
        let probs = softmax_probs(model.weights.dense(), &[1.0, 0.0]).unwrap();
        assert!(probs[1] > 1.0 - 1e-12);
    }

    #[test]
    fn logarithmic_power_budget_trains_comparably() {
        let data = small_dataset();
        let (fixed, _) =
            train_softmax_fw(&data, 2.0, 5, &StepSchedule::Default, 120, 3).unwrap();
        let (scheduled, _) = train_softmax_fw_scheduled(
            &data,
            2.0,
            fw::PowerBudget::LogT,
            &StepSchedule::Default,
            120,
            3,
        )
        .unwrap();
        let f_fixed = softmax_objective(fixed.weights.dense(), &data).unwrap();
        let f_sched = softmax_objective(scheduled.weights.dense(), &data).unwrap();
        assert!((f_fixed - f_sched).abs() < 0.05, "{f_fixed} vs {f_sched}");
        assert!(scheduled.weights.coefficient_mass() <= 2.0 + 1e-6);
    }

    #[test]
    fn model_round_trips_through_text_format() {
        let data = small_dataset();
        let (model, _) = train_softmax_fw(&data, 2.0, 5, &StepSchedule::Default, 7, 5).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf, None).unwrap();
        let loaded = SoftmaxModel::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.weights.dense().as_slice(), model.weights.dense().as_slice());
        assert_eq!(loaded.weights.atoms().len(), model.weights.atoms().len());
        assert_eq!(loaded.weights.radius(), model.weights.radius());
        for (a, b) in loaded.weights.atoms().iter().zip(model.weights.atoms()) {
            assert_eq!(a.coefficient, b.coefficient);
            assert_eq!(a.u, b.u);
            assert_eq!(a.v, b.v);
        }
    }
}
