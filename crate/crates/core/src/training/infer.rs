//! Inference: one `u` per session, a fixed selection, global decoders only.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{stream, Domain};
use crate::selection::{draw_common_randomness, project, SelectionStreams, SelectionVector};
use crate::tensor::Tensor;
use crate::training::{SelectionMode, TrainState};

/// Redraws of `u` allowed when a receiver ends up without links.
pub const INFER_ATTEMPTS: usize = 16;

#[derive(Clone, Debug)]
pub struct Inference {
    pub u: Vec<f64>,
    pub selection: SelectionVector,
    /// Number of `u` draws used.
    pub attempts: usize,
    /// Decoder outputs per task: class logits or regression means.
    pub outputs: Vec<Tensor>,
}

/// Draws the session's selection: a fresh `u` until no receiver is starved.
pub fn session_selection(state: &TrainState, session: u64) -> Result<(Vec<f64>, SelectionVector, usize)> {
    let topo = &state.topo;
    match &state.mode {
        SelectionMode::Fixed(a) => Ok((Vec::new(), a.clone(), 1)),
        SelectionMode::Full => Ok((Vec::new(), SelectionVector::ones(topo.clone()), 1)),
        SelectionMode::Learned => {
            let mut last = Vec::new();
            for attempt in 0..INFER_ATTEMPTS as u64 {
                let u = draw_common_randomness(state.seed, u64::MAX - session, attempt, state.policy.cr_dim());
                let streams = SelectionStreams {
                    seed: state.seed ^ 0x5eed,
                    step: session,
                    sample: attempt,
                };
                let raw = state.policy.sample(&u, streams)?.to_vector(topo);
                let p = project(&raw, &mut stream(state.seed, Domain::Inference, &[session, attempt]));
                if p.starved.is_empty() {
                    return Ok((u, p.selection, attempt as usize + 1));
                }
                last = p.starved;
            }
            Err(Error::Starved {
                starved: last,
                attempts: INFER_ATTEMPTS,
            })
        }
    }
}

/// Runs every task's observations through the session's selection.
/// `features[t][k][m]` holds task `t`'s rows for slot `(k, m)`.
pub fn infer(state: &TrainState, features: &[Vec<Vec<Tensor>>], session: u64) -> Result<Inference> {
    let (u, selection, attempts) = session_selection(state, session)?;
    let outputs = infer_with_selection(state, &selection, features, session)?;
    Ok(Inference {
        u,
        selection,
        attempts,
        outputs,
    })
}

/// Decodes with a caller-chosen selection.
pub fn infer_with_selection(
    state: &TrainState,
    selection: &SelectionVector,
    features: &[Vec<Vec<Tensor>>],
    session: u64,
) -> Result<Vec<Tensor>> {
    let topo = &state.topo;
    if features.len() != topo.receivers() {
        return Err(Error::Invalid(format!("{} task inputs for {} receivers", features.len(), topo.receivers())));
    }
    let dz = state.codec.latent_dim();
    let mut outputs = Vec::with_capacity(features.len());
    for (t, per_k) in features.iter().enumerate() {
        let mut g = Graph::no_grad();
        let mut zs = Vec::with_capacity(topo.slots_per_receiver());
        let mut rows = None;
        for (k, m) in topo.modality_slots() {
            let x = &per_k[k][m];
            let n = x.rows();
            if *rows.get_or_insert(n) != n {
                return Err(Error::Invalid(format!("task {t} slots disagree on the number of rows")));
            }
            if !selection.get(t, k, m) {
                zs.push(g.constant(Tensor::zeros(&[n, dz])));
                continue;
            }
            let eps = state.stochastic.then(|| {
                let mut rng = stream(state.seed, Domain::Inference, &[session, 1 + t as u64, k as u64, m as u64]);
                let data = (0..n * dz).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::matrix(n, dz, data).expect("sized")
            });
            let e = state.codec.encode(&mut g, k, m, x, &vec![t; n], eps.as_ref())?;
            zs.push(e.z);
        }
        let n = rows.unwrap_or(0);
        let mask = vec![selection.receiver_bits(t).to_vec(); n];
        let fused = state.codec.fuse(&mut g, &zs, &mask)?;
        let out = state.codec.global_decode(&mut g, t, fused)?;
        outputs.push(g.value(out).clone());
    }
    Ok(outputs)
}
