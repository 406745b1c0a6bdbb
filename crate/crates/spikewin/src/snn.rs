//! Spiking branch: binary Q/K/V projections, pair-score attention (no
//! softmax anywhere on this path), token-gate attention, spiking residual
//! blocks, and convolutional downsampling stages. All state lives in LIF
//! membranes carried across the T timesteps of one forward pass.
//!
//! Layers accept integer-valued spike counts (residual sums of binary maps
//! may reach 2 or more between re-binarizations); fractional or negative
//! drive into a spike projection is a domain error.

use crate::ann::{Injection, PositionBias, SemanticBias};
use crate::error::{Error, Result};
use crate::lif::{lif_sequence, FiringMeter, LIFParams};
use crate::nn::{BatchNorm, Conv2d, Linear};
use crate::optim::{Ctx, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::{narrow, Real};
use crate::window::WindowLayout;
use rand::Rng;

/// Default scale on the pairwise Q·Kᵀ score product.
pub const SCORE_SCALE: f64 = 0.125;

/// Raw pre-spike score maps exported for the cross-branch exchange,
/// indexed `[timestep][window][head]`, each `(M², M²)`.
pub type ScoreMaps = Vec<Vec<Vec<ValueId>>>;

/// `(H·W, C)` tokens → `(C, gh, gw)` feature image.
pub fn tokens_to_chw<R: Real>(
    tape: &mut Tape<R>,
    x: ValueId,
    gh: usize,
    gw: usize,
) -> Result<ValueId> {
    let c = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    tape.reshape(t, &[c, gh, gw])
}

/// `(C, H, W)` feature image → `(H·W, C)` tokens.
pub fn chw_to_tokens<R: Real>(tape: &mut Tape<R>, x: ValueId) -> Result<ValueId> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

fn check_spike_domain<R: Real>(tape: &Tape<R>, xs: &[ValueId], site: &str) -> Result<()> {
    for &x in xs {
        for &v in tape.value(x) {
            let f = v.to64();
            if !(f >= 0.0 && f.fract() == 0.0 && f.is_finite()) {
                return Err(Error::Domain(format!(
                    "{site} expects integer spike counts, found {f}"
                )));
            }
        }
    }
    Ok(())
}

/// Concatenate the T timestep matrices, run `f` once on the stack, then
/// split back into per-timestep matrices. Valid for row-pointwise maps and
/// for batch norm (which deliberately normalizes over all T·N rows).
fn over_time<R: Real>(
    tape: &mut Tape<R>,
    xs: &[ValueId],
    f: impl FnOnce(&mut Tape<R>, ValueId) -> Result<ValueId>,
) -> Result<Vec<ValueId>> {
    let rows = tape.shape(xs[0])[0];
    let cat = tape.concat_rows(xs)?;
    let y = f(tape, cat)?;
    (0..xs.len())
        .map(|t| tape.slice_rows(y, t * rows, (t + 1) * rows))
        .collect()
}

fn spike_seq<R: Real>(
    tape: &mut Tape<R>,
    drives: &[ValueId],
    p: &LIFParams<R>,
    meter: &mut FiringMeter,
    site: &str,
) -> Result<Vec<ValueId>> {
    let (spikes, _) = lif_sequence(tape, drives, p)?;
    for &s in &spikes {
        meter.record(site, tape.value(s));
    }
    Ok(spikes)
}

/// Fused spike projections: one Linear to `nproj·C`, shared batch norm,
/// then an independent LIF chain per projection. Output spikes are binary.
#[derive(Debug, Clone)]
pub struct SpikeQkv {
    pub lin: Linear,
    pub bn: BatchNorm,
    pub nproj: usize,
    pub c: usize,
    name: String,
}

impl SpikeQkv {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        c: usize,
        nproj: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SpikeQkv {
            lin: Linear::init(store, &format!("{name}.lin"), cin, nproj * c, rng)?,
            bn: BatchNorm::init(store, &format!("{name}.bn"), nproj * c)?,
            nproj,
            c,
            name: name.to_string(),
        })
    }

    /// `xs`: T matrices `(N, Cin)` of spike counts. Returns `[proj][t]`
    /// binary `(N, C)` maps.
    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<Vec<Vec<ValueId>>> {
        check_spike_domain(tape, xs, &self.name)?;
        let normed = over_time(tape, xs, |tape, cat| {
            let y = self.lin.apply(tape, ctx, cat)?;
            self.bn.apply(tape, ctx, y)
        })?;
        let p = LIFParams::standard();
        let mut out = Vec::with_capacity(self.nproj);
        for pj in 0..self.nproj {
            let drives: Vec<ValueId> = normed
                .iter()
                .map(|&y| tape.slice_cols(y, pj * self.c, (pj + 1) * self.c))
                .collect::<Result<_>>()?;
            let site = format!("{}.p{}", self.name, pj);
            out.push(spike_seq(tape, &drives, &p, meter, &site)?);
        }
        Ok(out)
    }
}

/// Which attention form a spiking block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    /// Token-wise gate: a binary importance vector from Q's channel sums
    /// multiplies K elementwise. No pairwise score matrix, no mask.
    TokenGate,
    /// Pairwise scores `QKᵀ·s + λ1·P + λ2·S` drive `score·V` through a
    /// spiking neuron — softmax-free window attention.
    PairScore,
}

/// Intermediate state between computing a block's raw scores and finishing
/// its attention: lets a paired dense block read the scores before the
/// injected response flows back in.
pub struct ScorePhase {
    pub scores: ScoreMaps,
    v_ts: Vec<ValueId>,
    gate_core: Vec<ValueId>,
}

/// One spiking block's attention stage.
#[derive(Debug, Clone)]
pub struct SpikeAttention {
    pub kind: AttnKind,
    pub qkv: SpikeQkv,
    pub pos: Option<PositionBias>,
    pub sem: Option<SemanticBias>,
    pub proj: Linear,
    pub proj_bn: BatchNorm,
    pub heads: usize,
    pub head_dim: usize,
    pub layout: WindowLayout,
    pub score_scale: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    name: String,
}

impl SpikeAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        c: usize,
        heads: usize,
        kind: AttnKind,
        layout: WindowLayout,
        lambdas: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "spike channel width {c} not divisible into {heads} heads"
            )));
        }
        let nproj = match kind {
            AttnKind::TokenGate => 2,
            AttnKind::PairScore => 3,
        };
        let (pos, sem) = match kind {
            AttnKind::TokenGate => (None, None),
            AttnKind::PairScore => (
                Some(PositionBias::init(
                    store,
                    &format!("{name}.pos"),
                    layout.m,
                    heads,
                    rng,
                )?),
                Some(SemanticBias::init(store, &format!("{name}.sem"), cin, rng)?),
            ),
        };
        Ok(SpikeAttention {
            kind,
            qkv: SpikeQkv::init(store, &format!("{name}.qkv"), cin, c, nproj, rng)?,
            pos,
            sem,
            proj: Linear::init(store, &format!("{name}.proj"), c, c, rng)?,
            proj_bn: BatchNorm::init(store, &format!("{name}.proj_bn"), c)?,
            heads,
            head_dim: c / heads,
            layout,
            score_scale: SCORE_SCALE,
            lambda1: lambdas.0,
            lambda2: lambdas.1,
            name: name.to_string(),
        })
    }

    /// First phase: spike projections and (for pair-score blocks) the raw
    /// score maps, which a paired dense block may consume.
    pub fn begin<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<ScorePhase> {
        let projs = self.qkv.apply(tape, ctx, xs, meter)?;
        match self.kind {
            AttnKind::TokenGate => {
                let c = self.qkv.c;
                let ones = tape.constant(vec![R::one(); c], &[c, 1]);
                let drives: Vec<ValueId> = projs[0]
                    .iter()
                    .map(|&q| tape.matmul(q, ones))
                    .collect::<Result<_>>()?;
                let gate = spike_seq(
                    tape,
                    &drives,
                    &LIFParams::standard(),
                    meter,
                    &format!("{}.gate", self.name),
                )?;
                let core: Vec<ValueId> = projs[1]
                    .iter()
                    .zip(&gate)
                    .map(|(&k, &a)| tape.mul_bcast_col(k, a))
                    .collect::<Result<_>>()?;
                Ok(ScorePhase {
                    scores: vec![],
                    v_ts: vec![],
                    gate_core: core,
                })
            }
            AttnKind::PairScore => {
                let perm = self.layout.partition_perm();
                let mm = self.layout.window_tokens();
                let nw = self.layout.nw;
                let d = self.head_dim;
                let pos = self.pos.as_ref().unwrap();
                let sem = self.sem.as_ref().unwrap();
                let gathered = pos.gathered(tape, ctx)?;
                let l1 = R::of(self.lambda1);
                let l2 = R::of(self.lambda2);
                let s = R::of(self.score_scale);
                let mut pos_heads = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let p = pos.head_map(tape, gathered, h)?;
                    pos_heads.push(tape.scale(p, l1));
                }

                let mut scores: ScoreMaps = Vec::with_capacity(xs.len());
                let mut v_ts = Vec::with_capacity(xs.len());
                for (t, &x) in xs.iter().enumerate() {
                    let qp = tape.permute_rows(projs[0][t], &perm)?;
                    let kp = tape.permute_rows(projs[1][t], &perm)?;
                    let vp = tape.permute_rows(projs[2][t], &perm)?;
                    let xp = tape.permute_rows(x, &perm)?;
                    let mut t_maps = Vec::with_capacity(nw);
                    for w in 0..nw {
                        let qw = tape.slice_rows(qp, w * mm, (w + 1) * mm)?;
                        let kw = tape.slice_rows(kp, w * mm, (w + 1) * mm)?;
                        let xw = tape.slice_rows(xp, w * mm, (w + 1) * mm)?;
                        let se = sem.apply(tape, ctx, xw)?;
                        let se_scaled = tape.scale(se, l2);
                        let mut w_maps = Vec::with_capacity(self.heads);
                        for h in 0..self.heads {
                            let qh = tape.slice_cols(qw, h * d, (h + 1) * d)?;
                            let kh = tape.slice_cols(kw, h * d, (h + 1) * d)?;
                            let qk = tape.matmul_tb(qh, kh)?;
                            let mut r = tape.scale(qk, s);
                            r = tape.add(r, pos_heads[h])?;
                            r = tape.add(r, se_scaled)?;
                            w_maps.push(r);
                        }
                        t_maps.push(w_maps);
                    }
                    scores.push(t_maps);
                    v_ts.push(vp);
                }
                Ok(ScorePhase {
                    scores,
                    v_ts,
                    gate_core: vec![],
                })
            }
        }
    }

    /// Second phase: add any injected cross-branch map to the scores, apply
    /// the shift mask, drive the spiking neurons, and project.
    pub fn finish<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        phase: ScorePhase,
        inject: Option<&Injection<R>>,
        meter: &mut FiringMeter,
    ) -> Result<Vec<ValueId>> {
        let core: Vec<ValueId> = match self.kind {
            AttnKind::TokenGate => {
                if inject.is_some() {
                    return Err(Error::config(
                        "token-gate attention has no pairwise map to receive an injection",
                    ));
                }
                phase.gate_core
            }
            AttnKind::PairScore => {
                let mm = self.layout.window_tokens();
                let nw = self.layout.nw;
                let d = self.head_dim;
                if let Some(inj) = inject {
                    if inj.maps.len() != nw {
                        return Err(Error::config(format!(
                            "injected map count {} does not match window count {}",
                            inj.maps.len(),
                            nw
                        )));
                    }
                }
                let scaled_inj: Option<Vec<ValueId>> = inject
                    .map(|inj| inj.maps.iter().map(|&m| tape.scale(m, inj.lambda)).collect());
                let allow = self.layout.mask_allow();
                let rev = self.layout.reverse_perm();

                let mut drives = Vec::with_capacity(phase.scores.len());
                for (t, t_maps) in phase.scores.iter().enumerate() {
                    let mut w_outs = Vec::with_capacity(nw);
                    for (w, w_maps) in t_maps.iter().enumerate() {
                        let vw = tape.slice_rows(phase.v_ts[t], w * mm, (w + 1) * mm)?;
                        let band: Option<Vec<R>> = allow
                            .as_ref()
                            .map(|a| narrow(&a[w * mm * mm..(w + 1) * mm * mm]));
                        let mut h_outs = Vec::with_capacity(self.heads);
                        for (h, &r0) in w_maps.iter().enumerate() {
                            let mut r = r0;
                            if let Some(si) = &scaled_inj {
                                r = tape.add(r, si[w])?;
                            }
                            if let Some(b) = &band {
                                r = tape.mul_detached(r, b)?;
                            }
                            let vh = tape.slice_cols(vw, h * d, (h + 1) * d)?;
                            h_outs.push(tape.matmul(r, vh)?);
                        }
                        w_outs.push(tape.concat_cols(&h_outs)?);
                    }
                    drives.push(tape.concat_rows(&w_outs)?);
                }
                let spikes = spike_seq(
                    tape,
                    &drives,
                    &LIFParams::post_attention(),
                    meter,
                    &format!("{}.attn", self.name),
                )?;
                spikes
                    .iter()
                    .map(|&s| tape.permute_rows(s, &rev))
                    .collect::<Result<_>>()?
            }
        };
        let normed = over_time(tape, &core, |tape, cat| {
            let y = self.proj.apply(tape, ctx, cat)?;
            self.proj_bn.apply(tape, ctx, y)
        })?;
        spike_seq(
            tape,
            &normed,
            &LIFParams::standard(),
            meter,
            &format!("{}.proj", self.name),
        )
    }
}

/// Two spiking linear stages with expansion ratio 4.
#[derive(Debug, Clone)]
pub struct SpikeMlp {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    name: String,
}

impl SpikeMlp {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SpikeMlp {
            fc1: Linear::init(store, &format!("{name}.fc1"), c, c * ratio, rng)?,
            bn1: BatchNorm::init(store, &format!("{name}.bn1"), c * ratio)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), c * ratio, c, rng)?,
            bn2: BatchNorm::init(store, &format!("{name}.bn2"), c)?,
            name: name.to_string(),
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<Vec<ValueId>> {
        check_spike_domain(tape, xs, &self.name)?;
        let p = LIFParams::standard();
        let h = over_time(tape, xs, |tape, cat| {
            let y = self.fc1.apply(tape, ctx, cat)?;
            self.bn1.apply(tape, ctx, y)
        })?;
        let h = spike_seq(tape, &h, &p, meter, &format!("{}.sn1", self.name))?;
        let out = over_time(tape, &h, |tape, cat| {
            let y = self.fc2.apply(tape, ctx, cat)?;
            self.bn2.apply(tape, ctx, y)
        })?;
        spike_seq(tape, &out, &p, meter, &format!("{}.sn2", self.name))
    }
}

/// Residual spiking block: `ẑ = attn(x) + x`, `z = mlp(ẑ) + ẑ`. Values may
/// exceed 1 after the adds; the next spiking layer re-binarizes.
#[derive(Debug, Clone)]
pub struct SpikeBlock {
    pub attn: SpikeAttention,
    pub mlp: SpikeMlp,
}

impl SpikeBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c: usize,
        heads: usize,
        kind: AttnKind,
        layout: WindowLayout,
        lambdas: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SpikeBlock {
            attn: SpikeAttention::init(
                store,
                &format!("{name}.attn"),
                c,
                c,
                heads,
                kind,
                layout,
                lambdas,
                rng,
            )?,
            mlp: SpikeMlp::init(store, &format!("{name}.mlp"), c, 4, rng)?,
        })
    }

    pub fn begin<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<ScorePhase> {
        self.attn.begin(tape, ctx, xs, meter)
    }

    pub fn complete<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        phase: ScorePhase,
        inject: Option<&Injection<R>>,
        meter: &mut FiringMeter,
    ) -> Result<Vec<ValueId>> {
        let at = self.attn.finish(tape, ctx, phase, inject, meter)?;
        let zhat: Vec<ValueId> = at
            .iter()
            .zip(xs)
            .map(|(&a, &x)| tape.add(a, x))
            .collect::<Result<_>>()?;
        let m = self.mlp.apply(tape, ctx, &zhat, meter)?;
        m.iter()
            .zip(&zhat)
            .map(|(&mv, &z)| tape.add(mv, z))
            .collect()
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        inject: Option<&Injection<R>>,
        meter: &mut FiringMeter,
    ) -> Result<(Vec<ValueId>, ScoreMaps)> {
        let phase = self.begin(tape, ctx, xs, meter)?;
        let maps = phase.scores.clone();
        let out = self.complete(tape, ctx, xs, phase, inject, meter)?;
        Ok((out, maps))
    }
}

fn bn_chw_over_time<R: Real>(
    tape: &mut Tape<R>,
    ctx: &mut Ctx<R>,
    bn: &BatchNorm,
    xs: &[ValueId],
) -> Result<Vec<ValueId>> {
    let shape = tape.shape(xs[0]).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let rows: Vec<ValueId> = xs
        .iter()
        .map(|&x| chw_to_tokens(tape, x))
        .collect::<Result<_>>()?;
    let normed = over_time(tape, &rows, |tape, cat| bn.apply(tape, ctx, cat))?;
    normed
        .iter()
        .map(|&y| tokens_to_chw(tape, y, h, w))
        .collect()
}

/// Real-valued input to spikes: 3×3 convolution, batch norm, LIF. The only
/// place non-spike data enters the branch.
#[derive(Debug, Clone)]
pub struct SpikeConverter {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    name: String,
}

impl SpikeConverter {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SpikeConverter {
            conv: Conv2d::init(store, &format!("{name}.conv"), cin, c, 3, 1, 1, rng)?,
            bn: BatchNorm::init(store, &format!("{name}.bn"), c)?,
            name: name.to_string(),
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<Vec<ValueId>> {
        let conved: Vec<ValueId> = xs
            .iter()
            .map(|&x| self.conv.apply(tape, ctx, x))
            .collect::<Result<_>>()?;
        let normed = bn_chw_over_time(tape, ctx, &self.bn, &conved)?;
        spike_seq(
            tape,
            &normed,
            &LIFParams::standard(),
            meter,
            &format!("{}.sn", self.name),
        )
    }
}

/// Downsampling stage: 3×3 conv (stride `s`), batch norm, 2×2 max pool,
/// LIF; a strided 1×1 conv shortcut joins the drive before the neurons.
/// Total spatial reduction is `2s`.
#[derive(Debug, Clone)]
pub struct SpikeDown {
    pub conv: Conv2d,
    pub shortcut: Conv2d,
    pub bn: BatchNorm,
    name: String,
}

impl SpikeDown {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        c: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SpikeDown {
            conv: Conv2d::init(store, &format!("{name}.conv"), cin, c, 3, stride, 1, rng)?,
            shortcut: Conv2d::init(
                store,
                &format!("{name}.shortcut"),
                cin,
                c,
                1,
                2 * stride,
                0,
                rng,
            )?,
            bn: BatchNorm::init(store, &format!("{name}.bn"), c)?,
            name: name.to_string(),
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<Vec<ValueId>> {
        let conved: Vec<ValueId> = xs
            .iter()
            .map(|&x| self.conv.apply(tape, ctx, x))
            .collect::<Result<_>>()?;
        let normed = bn_chw_over_time(tape, ctx, &self.bn, &conved)?;
        let drives: Vec<ValueId> = normed
            .iter()
            .zip(xs)
            .map(|(&y, &x)| {
                let pooled = tape.max_pool2d(y, 2)?;
                let sc = self.shortcut.apply(tape, ctx, x)?;
                tape.add(pooled, sc)
            })
            .collect::<Result<_>>()?;
        spike_seq(
            tape,
            &drives,
            &LIFParams::standard(),
            meter,
            &format!("{}.sn", self.name),
        )
    }
}

/// Voxel input to stage-1 spike features: conversion layer then a
/// downsampling stage; spatial size shrinks by the patch size.
#[derive(Debug, Clone)]
pub struct SpikeEmbed {
    pub convert: SpikeConverter,
    pub down: SpikeDown,
}

impl SpikeEmbed {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        c: usize,
        patch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch % 2 != 0 {
            return Err(Error::config(format!(
                "spike patch embedding needs an even patch size, got {patch}"
            )));
        }
        let mid = (c / 2).max(1);
        Ok(SpikeEmbed {
            convert: SpikeConverter::init(store, &format!("{name}.convert"), cin, mid, rng)?,
            down: SpikeDown::init(store, &format!("{name}.down"), mid, c, patch / 2, rng)?,
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        xs: &[ValueId],
        meter: &mut FiringMeter,
    ) -> Result<Vec<ValueId>> {
        let s = self.convert.apply(tape, ctx, xs, meter)?;
        self.down.apply(tape, ctx, &s, meter)
    }
}
