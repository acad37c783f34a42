use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, NumericsError, OpKind, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 compare on an absolute scale.
    pub abs_floor: f64,
    /// Checks at most this many coordinates per tensor, chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Negative control: disables the backward rule of one op.
    pub zeroed_op: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
            zeroed_op: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failing: Vec<CoordFailure>,
    pub finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.finite && self.failing.is_empty()
    }
}

fn loss_of<F>(params: &[Tensor], build: &F, zeroed: Option<OpKind>) -> Result<(Graph, Vec<NodeId>, NodeId), NumericsError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    if let Some(op) = zeroed {
        g.zero_backward_of(op);
    }
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok((g, ids, loss))
}

/// Compares reverse-mode gradients of `build`'s scalar output with central
/// differences, coordinate by coordinate.
pub fn grad_check<F>(params: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let (mut g, ids, loss) = loss_of(params, &build, cfg.zeroed_op)?;
    if !g.value(loss).item().is_finite() {
        return Ok(GradCheckReport { max_rel_error: f64::INFINITY, checked: 0, failing: Vec::new(), finite: false });
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, failing: Vec::new(), finite: true };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < p.numel() => {
                let mut c = sample(&mut rng, p.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.numel()).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + cfg.eps;
            let (gp, _, lp) = loss_of(&work, &build, None)?;
            work[pi].data_mut()[i] = orig - cfg.eps;
            let (gm, _, lm) = loss_of(&work, &build, None)?;
            work[pi].data_mut()[i] = orig;
            let (fp, fm) = (gp.value(lp).item(), gm.value(lm).item());
            if !fp.is_finite() || !fm.is_finite() {
                report.finite = false;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > cfg.tolerance {
                report.failing.push(CoordFailure { param: pi, index: i, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    Ok(report)
}
