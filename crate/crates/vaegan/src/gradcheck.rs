//! Finite-difference gradient checking.
//!
//! The checker rebuilds the forward pass from scratch for every probed
//! coordinate and compares a central difference against the gradient the tape
//! produced, so it exercises `backward()` against an oracle that never touches
//! the backward code path.

use crate::tensor::{Graph, NodeId, Result as TensorResult, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Below this magnitude both gradients are treated as zero and compared
/// absolutely instead of relatively.
pub const ZERO_FLOOR: f64 = 1e-8;

#[derive(Debug)]
pub struct GradCheckFailure {
    pub input_index: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl std::fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient mismatch at input {} coord {}: analytic {:e}, numeric {:e}, rel {:e}",
            self.input_index, self.coord, self.analytic, self.numeric, self.rel_error
        )
    }
}

pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Cap on probed coordinates per input tensor; `None` probes all.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: DEFAULT_EPS,
            tol: 1e-4,
            max_coords_per_input: None,
        }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck {
            tol,
            ..Default::default()
        }
    }

    pub fn sampled(tol: f64, max_coords: usize) -> Self {
        GradCheck {
            tol,
            max_coords_per_input: Some(max_coords),
            ..Default::default()
        }
    }

    /// Check d(root)/d(input) for every input tensor against central finite
    /// differences. Returns the maximum relative error observed.
    pub fn run<F>(&self, build: F, inputs: &[Tensor]) -> std::result::Result<f64, GradCheckFailure>
    where
        F: Fn(&mut Graph, &[NodeId]) -> TensorResult<NodeId>,
    {
        let forward = |tensors: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
            let root = build(&mut g, &ids).expect("graph build failed during finite differencing");
            g.value(root).item()
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let root = build(&mut g, &ids).expect("graph build failed");
        g.backward(root).expect("backward failed");

        let mut max_rel: f64 = 0.0;
        for (input_index, (&id, input)) in ids.iter().zip(inputs).enumerate() {
            let analytic = g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            let numel = input.numel();
            let stride = match self.max_coords_per_input {
                Some(k) if numel > k => numel.div_ceil(k),
                _ => 1,
            };
            for coord in (0..numel).step_by(stride) {
                let mut plus = inputs.to_vec();
                plus[input_index].data_mut()[coord] += self.eps;
                let mut minus = inputs.to_vec();
                minus[input_index].data_mut()[coord] -= self.eps;
                let numeric = (forward(&plus) - forward(&minus)) / (2.0 * self.eps);
                let a = analytic.data()[coord];
                let denom = a.abs().max(numeric.abs());
                let rel = if denom < ZERO_FLOOR {
                    // Both effectively zero; any residual is fd noise.
                    if (a - numeric).abs() < ZERO_FLOOR {
                        0.0
                    } else {
                        (a - numeric).abs()
                    }
                } else {
                    (a - numeric).abs() / denom
                };
                max_rel = max_rel.max(rel);
                if rel > self.tol {
                    return Err(GradCheckFailure {
                        input_index,
                        coord,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
        Ok(max_rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_exp_gradient() {
        let check = GradCheck::default();
        let x = Tensor::from_vec(&[3], vec![0.2, -0.7, 1.1]).unwrap();
        let max = check
            .run(
                |g, ids| {
                    let e = g.exp(ids[0]);
                    Ok(g.sum_all(e))
                },
                &[x],
            )
            .unwrap();
        assert!(max < 1e-6, "max rel error {max}");
    }

    #[test]
    fn reports_disagreement() {
        // With a huge step the central difference of x^3 is visibly off the
        // analytic derivative, so the checker must report a failure.
        let check = GradCheck {
            eps: 0.5,
            tol: 1e-4,
            max_coords_per_input: None,
        };
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let res = check.run(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let cube = g.mul(sq, ids[0])?;
                Ok(g.sum_all(cube))
            },
            &[x],
        );
        let failure = res.unwrap_err();
        assert!(failure.rel_error > 1e-2, "{failure}");
    }
}
