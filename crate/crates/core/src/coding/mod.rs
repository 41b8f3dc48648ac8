//! Gaussian unimodal encoders, fused global decoders and shared local
//! decoders.

mod bound;
mod estimators;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{FfnShape, FfnStack, ParamStore};
use crate::rng::{stream, Domain};
use crate::selection::Topology;
use crate::tensor::Tensor;

pub use bound::variational_bound_check;
pub use estimators::{
    argmax, estimate_mi, gaussian_log_pdf, mi_terms, mi_terms_from_log_densities, relevance_loss, softmax, Targets, TaskKind, LOGVAR_MAX,
    LOGVAR_MIN,
};

pub const CODEC_STORE_TAG: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecShape {
    /// Feature width of modality `m` at transmitter `k`.
    pub input_dims: Vec<Vec<usize>>,
    pub tasks: Vec<TaskKind>,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

/// Reparameterized draw from one encoder.
#[derive(Clone, Copy, Debug)]
pub struct Encoding {
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
}

fn one_hot_rows(rows: usize, width: usize, hot: &[usize]) -> Vec<f64> {
    let mut data = vec![0.0; rows * width];
    for (r, &h) in hot.iter().enumerate() {
        data[r * width + h] = 1.0;
    }
    data
}

/// All coding parameters: encoders `[k][m]`, one global and one local
/// decoder per task.
#[derive(Clone, Debug)]
pub struct Codec {
    topo: Arc<Topology>,
    shape: CodecShape,
    encoders: Vec<Vec<FfnStack>>,
    global: Vec<FfnStack>,
    local: Vec<FfnStack>,
    pub store: ParamStore,
}

impl Codec {
    pub fn new(topo: Arc<Topology>, shape: CodecShape, seed: u64) -> Result<Self> {
        if shape.input_dims.len() != topo.transmitters()
            || shape.input_dims.iter().enumerate().any(|(k, d)| d.len() != topo.modalities(k))
        {
            return Err(Error::config("codec.input_dims", "must list one width per modality of every transmitter"));
        }
        if shape.tasks.len() != topo.receivers() {
            return Err(Error::config(
                "codec.tasks",
                format!("{} tasks for {} receivers", shape.tasks.len(), topo.receivers()),
            ));
        }
        if shape.latent_dim == 0 {
            return Err(Error::config("codec.latent_dim", "must be positive"));
        }
        let t_count = topo.receivers();
        let dz = shape.latent_dim;
        let mut store = ParamStore::new(CODEC_STORE_TAG);
        let mut encoders = Vec::with_capacity(topo.transmitters());
        for (k, dims) in shape.input_dims.iter().enumerate() {
            let mut row = Vec::with_capacity(dims.len());
            for (m, &d) in dims.iter().enumerate() {
                let mut rng = stream(seed, Domain::Init, &[3, k as u64, m as u64]);
                let s = FfnShape::new(d + t_count, &shape.encoder_hidden, 2 * dz);
                row.push(FfnStack::new(&mut store, &format!("enc{k}_{m}"), s, &mut rng));
            }
            encoders.push(row);
        }
        let fused = topo.slots_per_receiver() * dz;
        let local_in = dz + topo.transmitters() + topo.max_modalities();
        let mut global = Vec::with_capacity(t_count);
        let mut local = Vec::with_capacity(t_count);
        for (t, kind) in shape.tasks.iter().enumerate() {
            let mut rng = stream(seed, Domain::Init, &[4, t as u64]);
            let s = FfnShape::new(fused, &shape.decoder_hidden, kind.output_dim());
            global.push(FfnStack::new(&mut store, &format!("global{t}"), s, &mut rng));
            let mut rng = stream(seed, Domain::Init, &[5, t as u64]);
            let s = FfnShape::new(local_in, &shape.decoder_hidden, kind.output_dim());
            local.push(FfnStack::new(&mut store, &format!("local{t}"), s, &mut rng));
        }
        Ok(Codec {
            topo,
            shape,
            encoders,
            global,
            local,
            store,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn shape(&self) -> &CodecShape {
        &self.shape
    }

    pub fn latent_dim(&self) -> usize {
        self.shape.latent_dim
    }

    pub fn task(&self, t: usize) -> TaskKind {
        self.shape.tasks[t]
    }

    /// Encodes rows of `x` for the tasks listed in `tasks` (one per row).
    /// With `eps = None` the draw is deterministic: `z = mu`.
    pub fn encode(
        &self,
        g: &mut Graph,
        k: usize,
        m: usize,
        x: &Tensor,
        tasks: &[usize],
        eps: Option<&Tensor>,
    ) -> Result<Encoding> {
        let t_count = self.topo.receivers();
        let rows = x.rows();
        if tasks.len() != rows {
            return Err(Error::shape("encode", x.shape(), &[tasks.len()]));
        }
        if let Some(t) = tasks.iter().find(|t| **t >= t_count) {
            return Err(Error::Index(format!("task {t} of {t_count}")));
        }
        let d = x.cols();
        let mut input = Vec::with_capacity(rows * (d + t_count));
        let hot = one_hot_rows(rows, t_count, tasks);
        for r in 0..rows {
            input.extend_from_slice(x.row_slice(r));
            input.extend_from_slice(&hot[r * t_count..(r + 1) * t_count]);
        }
        let input = g.constant(Tensor::matrix(rows, d + t_count, input)?);
        let out = self.encoders[k][m].forward(g, &self.store, input)?;
        if !g.value(out).all_finite() {
            return Err(Error::Numerical(format!("encoder ({k}, {m}) produced a non-finite output")));
        }
        let dz = self.shape.latent_dim;
        let mu = g.slice_cols(out, 0, dz)?;
        let raw_lv = g.slice_cols(out, dz, dz)?;
        let logvar = g.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX);
        let z = match eps {
            None => mu,
            Some(e) => {
                if e.shape() != [rows, dz] {
                    return Err(Error::shape("encode noise", e.shape(), &[rows, dz]));
                }
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let e = g.constant(e.clone());
                let spread = g.mul(std, e)?;
                g.add(mu, spread)?
            }
        };
        Ok(Encoding { z, mu, logvar })
    }

    /// Fused decoder input: slot latents in characteristic-vector order,
    /// zeroed wherever `mask[row][slot]` is off.
    pub fn fuse(&self, g: &mut Graph, slots: &[Var], mask: &[Vec<bool>]) -> Result<Var> {
        let per = self.topo.slots_per_receiver();
        if slots.len() != per {
            return Err(Error::shape("fuse", &[slots.len()], &[per]));
        }
        let dz = self.shape.latent_dim;
        let rows = mask.len();
        let mut parts = Vec::with_capacity(per);
        for (s, &z) in slots.iter().enumerate() {
            if g.value(z).shape() != [rows, dz] {
                return Err(Error::shape("fuse", g.value(z).shape(), &[rows, dz]));
            }
            let mut m = Vec::with_capacity(rows * dz);
            for row in mask {
                if row.len() != per {
                    return Err(Error::shape("fuse mask", &[row.len()], &[per]));
                }
                m.extend(std::iter::repeat_n(if row[s] { 1.0 } else { 0.0 }, dz));
            }
            let m = g.constant(Tensor::matrix(rows, dz, m)?);
            parts.push(g.mul(z, m)?);
        }
        g.concat_cols(&parts)
    }

    pub fn global_decode(&self, g: &mut Graph, t: usize, fused: Var) -> Result<Var> {
        self.global[t].forward(g, &self.store, fused)
    }

    /// Local decoder of task `t` applied to one modality's latents.
    pub fn local_decode(&self, g: &mut Graph, t: usize, z: Var, k: usize, m: usize) -> Result<Var> {
        let rows = g.value(z).rows();
        let kk = self.topo.transmitters();
        let mm = self.topo.max_modalities();
        let mut cond = vec![0.0; rows * (kk + mm)];
        for r in 0..rows {
            cond[r * (kk + mm) + k] = 1.0;
            cond[r * (kk + mm) + kk + m] = 1.0;
        }
        let cond = g.constant(Tensor::matrix(rows, kk + mm, cond)?);
        let input = g.concat_cols(&[z, cond])?;
        self.local[t].forward(g, &self.store, input)
    }
}
