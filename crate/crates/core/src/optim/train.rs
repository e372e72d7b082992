//! Adam over shuffled mini-batches of the residual points, then L-BFGS on
//! the full-batch loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsReport};
use crate::loss::{self, LossData, LossWeights};
use crate::network::Network;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub adam_epochs: usize,
    /// Residual points per Adam step; 0 means the full set.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// `max_iter = 0` skips the L-BFGS phase.
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            adam_epochs: 0,
            batch_size: 0,
            seed: 0,
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adam,
    Lbfgs,
}

/// Loss after an Adam epoch (mean over its mini-batches) or an L-BFGS
/// iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<HistoryRow>,
    pub lbfgs: Option<LbfgsReport>,
    /// Full-batch loss of the returned network.
    pub final_loss: f64,
}

#[derive(Debug, Error)]
#[error("training aborted during {phase:?} step {step}: {source}")]
pub struct TrainFailure {
    pub phase: Phase,
    pub step: usize,
    #[source]
    pub source: Error,
    pub history: Vec<HistoryRow>,
    /// Parameters before the failing step.
    pub network: Network,
}

pub fn train(
    network: Network,
    data: &LossData,
    weights: &LossWeights,
    plan: &TrainPlan,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut history = Vec::new();
    let mut params = network.params().to_vec();
    let fail = |phase, step, source, history: Vec<HistoryRow>, params: &[f64]| TrainFailure {
        phase,
        step,
        source,
        history,
        network: network.with_params(params.to_vec()).expect("same architecture"),
    };

    let m_r = data.m_r();
    let batch = if plan.batch_size == 0 || plan.batch_size >= m_r {
        m_r.max(1)
    } else {
        plan.batch_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..m_r).collect();
    let mut adam = AdamState::new(params.len(), plan.adam);
    for epoch in 0..plan.adam_epochs {
        if batch < m_r {
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut steps = 0;
        let empty: [usize; 0] = [];
        let chunks: Vec<&[usize]> = if m_r == 0 {
            vec![&empty]
        } else {
            order.chunks(batch).collect()
        };
        for chunk in chunks {
            let net = network.with_params(params.clone()).expect("same architecture");
            let result = loss::evaluate(&net, data, weights, Some(chunk), true).and_then(|e| {
                adam_step(&mut adam, &mut params, e.grad.as_deref().expect("gradient requested"))?;
                Ok(e.value)
            });
            match result {
                Ok(v) => sum += v,
                Err(e) => return Err(fail(Phase::Adam, epoch, e, history, &params)),
            }
            steps += 1;
        }
        history.push(HistoryRow {
            phase: Phase::Adam,
            step: epoch,
            loss: sum / steps as f64,
        });
    }

    let mut report = None;
    if plan.lbfgs.max_iter > 0 {
        let oracle = |p: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
            let net = network.with_params(p.to_vec())?;
            let e = loss::evaluate(&net, data, weights, None, true)?;
            Ok((e.value, e.grad.expect("gradient requested")))
        };
        match lbfgs_minimize(oracle, params.clone(), &plan.lbfgs) {
            Ok((p, r)) => {
                params = p;
                history.extend(r.values.iter().enumerate().map(|(k, &loss)| HistoryRow {
                    phase: Phase::Lbfgs,
                    step: k,
                    loss,
                }));
                report = Some(r);
            }
            Err(e) => return Err(fail(Phase::Lbfgs, 0, e, history, &params)),
        }
    }

    let trained = network.with_params(params).expect("same architecture");
    let final_loss = match &report {
        Some(r) => r.value,
        None => match loss::evaluate(&trained, data, weights, None, false) {
            Ok(e) => e.value,
            Err(e) => {
                let p = trained.params().to_vec();
                return Err(fail(Phase::Adam, plan.adam_epochs, e, history, &p));
            }
        },
    };
    Ok(TrainOutcome {
        network: trained,
        history,
        lbfgs: report,
        final_loss,
    })
}
