use crate::numkernel::Matrix;

/// One datapoint: gains tried, the task, the history that preceded the
/// rollout, and the metrics it produced.
///
/// `theta` is kept for bookkeeping and analysis only. No model input is ever
/// built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub gains: Vec<f64>,
    pub task: Vec<f64>,
    /// `history_len x z_dim`, oldest row first. `0 x 0` without context.
    pub z_hist: Matrix,
    /// `history_len x u_dim`, oldest row first. `0 x 0` without context.
    pub u_hist: Matrix,
    pub metrics: Vec<f64>,
    pub theta: Vec<f64>,
}

impl EpisodeRecord {
    /// Record for a system without measured history (benchmark functions).
    pub fn without_history(gains: Vec<f64>, metrics: Vec<f64>, theta: Vec<f64>) -> Self {
        Self {
            gains,
            task: Vec::new(),
            z_hist: Matrix::zeros(0, 0),
            u_hist: Matrix::zeros(0, 0),
            metrics,
            theta,
        }
    }
}
