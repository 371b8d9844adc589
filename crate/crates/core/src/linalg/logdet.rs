use crate::error::Result;
use crate::linalg::cholesky::sparse_cholesky;
use crate::parallel::{try_map_indexed, Execution};
use crate::precision::BlockPrecision;

/// `log|Q|`.
///
/// A prior precision carries its generator blocks, and the change of
/// variables `x -> (x_0, A_t x_t - x_{t-1})` has unit Jacobian, so
/// `log|Q| = log|P_0^{-1}| + sum_t log|A_t^T W_t A_t|`: one small Cholesky per
/// time step. Anything else (a posterior, hand-built blocks) falls back to
/// [`log_det_full`].
pub fn log_det_block(q: &BlockPrecision) -> Result<f64> {
    log_det_block_with(q, Execution::default())
}

pub fn log_det_block_with(q: &BlockPrecision, exec: Execution) -> Result<f64> {
    let Some(gen) = q.generators() else {
        return log_det_full(q);
    };
    let n = gen.step_precisions.len();
    let parts = try_map_indexed(exec, n + 1, |i| {
        let block = if i == 0 { &gen.initial_precision } else { &gen.step_precisions[i - 1] };
        sparse_cholesky(block).map(|f| f.log_det())
    })?;
    Ok(parts.iter().sum())
}

/// `log|Q|` from one Cholesky of the assembled matrix.
pub fn log_det_full(q: &BlockPrecision) -> Result<f64> {
    Ok(sparse_cholesky(&q.to_full())?.log_det())
}
