use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{GradStore, Leases, ParamStore, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Per-tensor element cap; tensors above it are randomly sampled.
    pub max_elements_per_tensor: usize,
    /// Seed for element sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            max_elements_per_tensor: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Coordinate {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_error: f64,
}

/// Outcome of comparing reverse-mode gradients against central finite
/// differences for every (sampled) parameter coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub failures: Vec<Coordinate>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad check: {} coordinates checked, max relative error {:.3e} (tolerance {:.1e})",
            self.checked, self.max_rel_error, self.tolerance
        )?;
        if let Some(w) = &self.worst {
            writeln!(
                f,
                "  worst: {}[{}, {}] autodiff={:.6e} fd={:.6e} rel={:.3e}",
                w.name, w.row, w.col, w.autodiff, w.finite_diff, w.rel_error
            )?;
        }
        if self.failures.is_empty() {
            writeln!(f, "  PASS")?;
        } else {
            writeln!(f, "  FAIL: {} coordinates over tolerance", self.failures.len())?;
            for c in self.failures.iter().take(20) {
                writeln!(
                    f,
                    "    {}[{}, {}] autodiff={:.6e} fd={:.6e} rel={:.3e}",
                    c.name, c.row, c.col, c.autodiff, c.finite_diff, c.rel_error
                )?;
            }
        }
        Ok(())
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences. `build` must deterministically construct the loss graph
/// (a [1, 1] tensor) from the given parameter store — dropout off, inputs
/// fixed — leasing every parameter it differentiates through `Leases`.
pub fn grad_check<F>(params: &ParamStore, cfg: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &mut Leases) -> Result<TensorId>,
{
    // Reverse-mode gradients once.
    let mut tape = Tape::new();
    let mut leases = Leases::new();
    let loss = build(&mut tape, params, &mut leases)?;
    let grads = tape.backward(loss)?;
    let mut store = GradStore::new();
    store.harvest(&leases, &grads);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut leases = Leases::new();
        let loss = build(&mut tape, p, &mut leases)?;
        Ok(tape.value(loss)[(0, 0)])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        tolerance: cfg.tolerance,
    };

    for name in params.names() {
        // Only parameters the graph actually used have gradients to check.
        if leases.id(&name).is_none() {
            continue;
        }
        let shape = params.get(&name)?.dim();
        let n = shape.0 * shape.1;
        let mut coords: Vec<(usize, usize)> = (0..n).map(|k| (k / shape.1, k % shape.1)).collect();
        if n > cfg.max_elements_per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(cfg.max_elements_per_tensor);
        }
        for (i, j) in coords {
            let base = params.get(&name)?[(i, j)];
            let mut p_plus = params.clone();
            p_plus.get_mut(&name)?[(i, j)] = base + cfg.step;
            let f_plus = eval(&p_plus)?;
            let mut p_minus = params.clone();
            p_minus.get_mut(&name)?[(i, j)] = base - cfg.step;
            let f_minus = eval(&p_minus)?;
            let fd = (f_plus - f_minus) / (2.0 * cfg.step);
            let ad = store.get(&name).map(|g| g[(i, j)]).unwrap_or(0.0);
            let rel = rel_error(ad, fd);
            report.checked += 1;
            let coord = Coordinate {
                name: name.clone(),
                row: i,
                col: j,
                autodiff: ad,
                finite_diff: fd,
                rel_error: rel,
            };
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(coord.clone());
            }
            if rel > cfg.tolerance {
                report.failures.push(coord);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn sigmoid_linear_graph_passes() {
        // f = sum(sigmoid(W x)) with random W.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        params.insert(
            "w",
            Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0)),
        );
        let x = Array2::from_shape_fn((3, 1), |_| rng.gen_range(-1.0..1.0));
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, p, leases| {
            let w = p.lease(tape, "w", leases)?;
            let xc = tape.constant(x.clone());
            let wx = tape.matmul(w, xc)?;
            let s = tape.sigmoid_op(wx);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = ParamStore::new();
        params.insert("w", Array2::from_elem((2, 2), 0.7));
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, p, leases| {
            let w = p.lease(tape, "w", leases)?;
            let d = tape.detach(w);
            Ok(tape.sum(d))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        // Autodiff gradient through a detached path is identically absent/zero.
        assert!(report.max_rel_error < 1e-10, "{report}");
    }

    #[test]
    fn sampling_caps_checked_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamStore::new();
        params.insert(
            "big",
            Array2::from_shape_fn((20, 20), |_| rng.gen_range(-0.5..0.5)),
        );
        let cfg = GradCheckConfig {
            max_elements_per_tensor: 100,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&params, &cfg, |tape, p, leases| {
            let w = p.lease(tape, "big", leases)?;
            let s = tape.sigmoid_op(w);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert_eq!(report.checked, 100);
        assert!(report.passed(), "{report}");
    }
}
