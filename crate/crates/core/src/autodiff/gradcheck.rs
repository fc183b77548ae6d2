//! Central finite-difference gradient checking over sampled coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares the analytic gradient of `f` with central differences.
///
/// Relative error per coordinate is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let tracked: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();
    let mut g = Graph::new(&tracked);
    let loss = f(&mut g)?;
    let analytic = g.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::frozen(ps);
        let l = f(&mut g)?;
        Ok(g.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for t in 0..params.len() {
        let n = params[t].numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = params[t].data()[c];
            work[t].data_mut()[c] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[t].data_mut()[c] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[t][c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, c);
            }
        }
    }
    Ok(report)
}
