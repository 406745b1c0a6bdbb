//! Cross-branch attention exchange: kernels that collapse a sender's
//! attention maps over heads (and timesteps, for the spiking side) into
//! per-window matrices the partner block adds to its own scores.
//!
//! The dense branch receives the spiking branch's raw pre-neuron scores
//! normalized by the window size; the spiking branch receives the dense
//! branch's post-softmax weights. Injection itself happens inside the
//! receiving block, pre-softmax (dense) or on the neuron drive (spiking),
//! so the dense rows stay normalized and the spiking path stays additive.

use crate::ann::AttnMaps;
use crate::error::{Error, Result};
use crate::snn::ScoreMaps;
use crate::tape::{Tape, ValueId};
use crate::tensor::Real;

/// How a sender's per-head maps are collapsed before injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Arithmetic mean over heads (the default).
    HeadMean,
    /// Reserved: learned convolutional kernel. Accepted by config parsing
    /// but not implemented; selecting it is a configuration error.
    Conv,
    /// Reserved: learned MLP kernel. Same status as `Conv`.
    Mlp,
}

impl KernelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "head-mean" => Ok(KernelKind::HeadMean),
            "conv" => Ok(KernelKind::Conv),
            "mlp" => Ok(KernelKind::Mlp),
            other => Err(Error::config(format!(
                "unknown attention kernel '{other}' (expected head-mean, conv, or mlp)"
            ))),
        }
    }

    pub fn require_implemented(self) -> Result<()> {
        match self {
            KernelKind::HeadMean => Ok(()),
            KernelKind::Conv | KernelKind::Mlp => Err(Error::config(
                "learned attention kernels (conv, mlp) are reserved config variants; \
                 only head-mean is implemented",
            )),
        }
    }
}

/// Scaling constants for the two injection directions.
#[derive(Debug, Clone, Copy)]
pub struct InteractConfig {
    /// Weight on the dense→spiking map added to the spiking scores.
    pub lambda3: f64,
    /// Weight on the spiking→dense map added to the dense logits.
    pub lambda4: f64,
    /// Number of block pairs exchanging maps, counted from `start_stage`.
    pub pairs: usize,
    /// First interacting stage, 1-based.
    pub start_stage: usize,
    pub kernel: KernelKind,
}

impl Default for InteractConfig {
    fn default() -> Self {
        InteractConfig {
            lambda3: 0.3,
            lambda4: 0.2,
            pairs: 4,
            start_stage: 3,
            kernel: KernelKind::HeadMean,
        }
    }
}

/// Mean over the head axis of same-shaped maps.
pub fn head_mean<R: Real>(tape: &mut Tape<R>, maps: &[ValueId]) -> Result<ValueId> {
    if maps.is_empty() {
        return Err(Error::shape("head mean of zero maps"));
    }
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, R::of(1.0 / maps.len() as f64)))
}

/// Mean over the timestep axis.
pub fn time_mean<R: Real>(tape: &mut Tape<R>, steps: &[ValueId]) -> Result<ValueId> {
    if steps.is_empty() {
        return Err(Error::shape("time mean of zero steps"));
    }
    head_mean(tape, steps)
}

/// Collapse raw spiking scores `[t][w][h]` into one map per window for the
/// dense branch: normalize by the token count per window, mean over heads,
/// then mean over timesteps.
pub fn spike_to_dense<R: Real>(
    tape: &mut Tape<R>,
    scores: &ScoreMaps,
    kernel: KernelKind,
) -> Result<Vec<ValueId>> {
    kernel.require_implemented()?;
    if scores.is_empty() {
        return Err(Error::shape("no spiking score maps to exchange"));
    }
    let nw = scores[0].len();
    let mm = tape.shape(scores[0][0][0])[0];
    let inv = R::of(1.0 / mm as f64);
    let mut out = Vec::with_capacity(nw);
    for w in 0..nw {
        let mut per_t = Vec::with_capacity(scores.len());
        for t_maps in scores {
            let scaled: Vec<ValueId> = t_maps[w].iter().map(|&r| tape.scale(r, inv)).collect();
            per_t.push(head_mean(tape, &scaled)?);
        }
        out.push(time_mean(tape, &per_t)?);
    }
    Ok(out)
}

/// Collapse dense post-softmax maps `[w][h]` into one map per window for
/// the spiking branch; the receiver adds the same map at every timestep,
/// which is the broadcast over T.
pub fn dense_to_spike<R: Real>(
    tape: &mut Tape<R>,
    maps: &AttnMaps,
    kernel: KernelKind,
) -> Result<Vec<ValueId>> {
    kernel.require_implemented()?;
    maps.iter().map(|heads| head_mean(tape, heads)).collect()
}

/// Deterministic pairing of the first `pairs` blocks from `start_stage`
/// (1-based) onward: dense block i pairs with spiking block i. Returns
/// zero-based `(stage, block)` indices.
pub fn schedule(depths: &[usize], start_stage: usize, pairs: usize) -> Result<Vec<(usize, usize)>> {
    if start_stage == 0 || start_stage > depths.len() {
        return Err(Error::config(format!(
            "interaction start stage {start_stage} out of range for {} stages",
            depths.len()
        )));
    }
    let avail: usize = depths[start_stage - 1..].iter().sum();
    if pairs > avail {
        return Err(Error::config(format!(
            "{pairs} interacting block pairs requested but only {avail} blocks \
             exist from stage {start_stage} onward"
        )));
    }
    let mut out = Vec::with_capacity(pairs);
    let mut stage = start_stage - 1;
    let mut block = 0;
    for _ in 0..pairs {
        while block >= depths[stage] {
            stage += 1;
            block = 0;
        }
        out.push((stage, block));
        block += 1;
    }
    Ok(out)
}
