//! Whole-model assembly: a dense windowed-attention branch over frames and
//! a spiking branch over event voxels, run stage by stage with optional
//! score exchange at paired blocks, fused by time-averaging the spiking
//! features and concatenating channels, ending in a one-box-per-cell
//! detection head.

use std::collections::BTreeMap;

use crate::ann::{AttnMaps, DenseBlock, Injection, PatchEmbed, PatchMerge};
use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::interact::{self, InteractConfig};
use crate::lif::FiringMeter;
use crate::nn::Linear;
use crate::optim::{Ctx, ParamStore};
use crate::snn::{chw_to_tokens, tokens_to_chw, AttnKind, SpikeBlock, SpikeDown, SpikeEmbed};
use crate::tape::{Scope, Tape, ValueId};
use crate::tensor::{Real, Tensor};
use crate::window::WindowLayout;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Channels per head-count per branch for one stage, plus its depth and
/// which spiking attention form the stage uses.
#[derive(Debug, Clone, Copy)]
pub struct StageSpec {
    pub dense_c: usize,
    pub dense_heads: usize,
    pub spike_c: usize,
    pub spike_heads: usize,
    pub depth: usize,
    pub kind: AttnKind,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub patch: usize,
    pub window: usize,
    pub t_steps: usize,
    pub stages: Vec<StageSpec>,
    /// Weight on the relative-position score term.
    pub lambda1: f64,
    /// Weight on the pairwise semantic score term.
    pub lambda2: f64,
    pub interact: InteractConfig,
    /// Build only the dense branch; voxels are ignored and fusion takes
    /// dense features alone. Forces the exchange schedule empty.
    pub frames_only: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale preset: 480×640 input, patch 4, window 8, five timesteps.
    pub fn paper() -> Self {
        let k = [AttnKind::TokenGate, AttnKind::TokenGate, AttnKind::PairScore, AttnKind::PairScore];
        let dense_c = [96, 192, 384, 768];
        let dense_h = [3, 6, 12, 24];
        let spike_c = [64, 128, 256, 512];
        let spike_h = [4, 8, 16, 32];
        let depth = [2, 2, 6, 2];
        ModelConfig {
            input_h: 480,
            input_w: 640,
            patch: 4,
            window: 8,
            t_steps: 5,
            stages: (0..4)
                .map(|i| StageSpec {
                    dense_c: dense_c[i],
                    dense_heads: dense_h[i],
                    spike_c: spike_c[i],
                    spike_heads: spike_h[i],
                    depth: depth[i],
                    kind: k[i],
                })
                .collect(),
            lambda1: 1.0,
            lambda2: 1.0,
            interact: InteractConfig::default(),
            frames_only: false,
            seed: 0,
        }
    }

    /// Desk-scale preset: 32×32 input, patch 2, window 4, two timesteps,
    /// same stage layout at a sixteenth of the width.
    pub fn toy() -> Self {
        let k = [AttnKind::TokenGate, AttnKind::TokenGate, AttnKind::PairScore, AttnKind::PairScore];
        let dense_c = [16, 32, 64, 128];
        let dense_h = [2, 4, 8, 16];
        let spike_c = [8, 16, 32, 64];
        let spike_h = [2, 4, 8, 16];
        let depth = [2, 2, 6, 2];
        ModelConfig {
            input_h: 32,
            input_w: 32,
            patch: 2,
            window: 4,
            t_steps: 2,
            stages: (0..4)
                .map(|i| StageSpec {
                    dense_c: dense_c[i],
                    dense_heads: dense_h[i],
                    spike_c: spike_c[i],
                    spike_heads: spike_h[i],
                    depth: depth[i],
                    kind: k[i],
                })
                .collect(),
            lambda1: 1.0,
            lambda2: 1.0,
            interact: InteractConfig::default(),
            frames_only: false,
            seed: 0,
        }
    }

    /// Token-grid size after the patch embedding and each later stage.
    pub fn stage_grids(&self) -> Result<Vec<(usize, usize)>> {
        if self.stages.is_empty() {
            return Err(Error::config("model needs at least one stage"));
        }
        if self.patch == 0 || self.input_h % self.patch != 0 || self.input_w % self.patch != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by patch size {}",
                self.input_h, self.input_w, self.patch
            )));
        }
        let mut grids = vec![(self.input_h / self.patch, self.input_w / self.patch)];
        for s in 1..self.stages.len() {
            let (gh, gw) = grids[s - 1];
            if gh % 2 != 0 || gw % 2 != 0 {
                return Err(Error::config(format!(
                    "stage {} grid {gh}x{gw} cannot be halved",
                    s + 1
                )));
            }
            grids.push((gh / 2, gw / 2));
        }
        Ok(grids)
    }

    /// Window layout for a block: the configured window clamped to the
    /// largest size that tiles the grid exactly (no padding); odd-indexed
    /// blocks get the half-window cyclic shift when the grid is larger
    /// than one window.
    pub fn layout_for(&self, grid: (usize, usize), block_idx: usize) -> Result<WindowLayout> {
        let (gh, gw) = grid;
        let cap = self.window.min(gh).min(gw);
        let m = (1..=cap)
            .rev()
            .find(|&c| gh % c == 0 && gw % c == 0)
            .ok_or_else(|| Error::config("window clamp found no divisor"))?;
        let shift = if block_idx % 2 == 1 && (gh > m || gw > m) {
            m / 2
        } else {
            0
        };
        WindowLayout::new(gh, gw, m, shift)
    }

    pub fn validate(&self) -> Result<()> {
        let grids = self.stage_grids()?;
        for (i, st) in self.stages.iter().enumerate() {
            if st.depth == 0 {
                return Err(Error::config(format!("stage {} has zero depth", i + 1)));
            }
            if st.dense_heads == 0 || st.dense_c % st.dense_heads != 0 {
                return Err(Error::config(format!(
                    "stage {} dense width {} not divisible into {} heads",
                    i + 1,
                    st.dense_c,
                    st.dense_heads
                )));
            }
            if st.spike_heads == 0 || st.spike_c % st.spike_heads != 0 {
                return Err(Error::config(format!(
                    "stage {} spike width {} not divisible into {} heads",
                    i + 1,
                    st.spike_c,
                    st.spike_heads
                )));
            }
            if i > 0 {
                if st.dense_c != 2 * self.stages[i - 1].dense_c {
                    return Err(Error::config(format!(
                        "stage {} dense width must double the previous stage",
                        i + 1
                    )));
                }
                if st.spike_c != 2 * self.stages[i - 1].spike_c {
                    return Err(Error::config(format!(
                        "stage {} spike width must double the previous stage",
                        i + 1
                    )));
                }
            }
        }
        if self.patch % 2 != 0 {
            return Err(Error::config(format!(
                "patch size {} must be even for the spiking embedding",
                self.patch
            )));
        }
        if self.t_steps == 0 {
            return Err(Error::config("at least one timestep required"));
        }
        let depths: Vec<usize> = self.stages.iter().map(|s| s.depth).collect();
        if !self.frames_only {
            let sched = interact::schedule(&depths, self.interact.start_stage, self.interact.pairs)?;
            for &(s, b) in &sched {
                if self.stages[s].kind != AttnKind::PairScore {
                    return Err(Error::config(format!(
                        "interacting block (stage {}, block {}) must use pairwise scores",
                        s + 1,
                        b + 1
                    )));
                }
            }
        }
        let _ = grids;
        Ok(())
    }
}

struct DenseBranch {
    embed: PatchEmbed,
    stages: Vec<Vec<DenseBlock>>,
    merges: Vec<PatchMerge>,
}

struct SpikeBranch {
    embed: SpikeEmbed,
    stages: Vec<Vec<SpikeBlock>>,
    downs: Vec<SpikeDown>,
}

/// One ground-truth or decoded box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Decoded per-cell prediction.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

/// One training or inference example. `voxels` may be `None` only for a
/// frames-only model.
#[derive(Debug, Clone)]
pub struct Sample<R: Real> {
    pub frame: Tensor<R>,
    pub voxels: Option<VoxelGrid>,
    pub boxes: Vec<TargetBox>,
}

/// Firing rates plus small per-block attention snapshots (first window,
/// first head; first timestep on the spiking side).
#[derive(Debug, Default)]
pub struct Diagnostics {
    pub firing: FiringMeter,
    pub attn_samples: BTreeMap<String, Vec<f64>>,
}

pub struct Model {
    pub config: ModelConfig,
    grids: Vec<(usize, usize)>,
    schedule: Vec<(usize, usize)>,
    dense: DenseBranch,
    spike: Option<SpikeBranch>,
    fuse: Linear,
    head: Linear,
}

/// Outputs per detection-head cell: 4 box coordinates plus confidence.
pub const HEAD_CHANNELS: usize = 5;

impl Model {
    pub fn build<R: Real>(config: ModelConfig) -> Result<(Model, ParamStore<R>)> {
        config.validate()?;
        let grids = config.stage_grids()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let embed = PatchEmbed::init(&mut store, "dense.embed", 3, config.stages[0].dense_c, config.patch, &mut rng)?;
        let mut dense_stages = Vec::new();
        let mut merges = Vec::new();
        for (s, st) in config.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.depth);
            for b in 0..st.depth {
                let layout = config.layout_for(grids[s], b)?;
                blocks.push(DenseBlock::init(
                    &mut store,
                    &format!("dense.s{s}.b{b}"),
                    st.dense_c,
                    st.dense_heads,
                    layout,
                    config.lambda1,
                    config.lambda2,
                    &mut rng,
                )?);
            }
            dense_stages.push(blocks);
            if s + 1 < config.stages.len() {
                merges.push(PatchMerge::init(&mut store, &format!("dense.merge{s}"), st.dense_c, &mut rng)?);
            }
        }
        let dense = DenseBranch {
            embed,
            stages: dense_stages,
            merges,
        };

        let spike = if config.frames_only {
            None
        } else {
            let embed = SpikeEmbed::init(&mut store, "spike.embed", 2, config.stages[0].spike_c, config.patch, &mut rng)?;
            let mut stages = Vec::new();
            let mut downs = Vec::new();
            for (s, st) in config.stages.iter().enumerate() {
                let mut blocks = Vec::with_capacity(st.depth);
                for b in 0..st.depth {
                    let layout = match st.kind {
                        // the token gate is pointwise, windows are moot
                        AttnKind::TokenGate => config.layout_for(grids[s], 0)?,
                        AttnKind::PairScore => config.layout_for(grids[s], b)?,
                    };
                    blocks.push(SpikeBlock::init(
                        &mut store,
                        &format!("spike.s{s}.b{b}"),
                        st.spike_c,
                        st.spike_heads,
                        st.kind,
                        layout,
                        (config.lambda1, config.lambda2),
                        &mut rng,
                    )?);
                }
                stages.push(blocks);
                if s + 1 < config.stages.len() {
                    downs.push(SpikeDown::init(&mut store, &format!("spike.down{s}"), st.spike_c, 2 * st.spike_c, 1, &mut rng)?);
                }
            }
            Some(SpikeBranch {
                embed,
                stages,
                downs,
            })
        };

        let last = config.stages.last().unwrap();
        let cat_c = if spike.is_some() {
            last.dense_c + last.spike_c
        } else {
            last.dense_c
        };
        let fuse = Linear::init(&mut store, "fuse", cat_c, last.dense_c, &mut rng)?;
        let head = Linear::init(&mut store, "head", last.dense_c, HEAD_CHANNELS, &mut rng)?;

        let schedule = if config.frames_only {
            vec![]
        } else {
            let depths: Vec<usize> = config.stages.iter().map(|s| s.depth).collect();
            interact::schedule(&depths, config.interact.start_stage, config.interact.pairs)?
        };

        Ok((
            Model {
                config,
                grids,
                schedule,
                dense,
                spike,
                fuse,
                head,
            },
            store,
        ))
    }

    /// Token-grid sizes per stage, `(rows, cols)`.
    pub fn stage_grids(&self) -> &[(usize, usize)] {
        &self.grids
    }

    /// Interacting `(stage, block)` pairs, zero-based.
    pub fn exchange_schedule(&self) -> &[(usize, usize)] {
        &self.schedule
    }

    /// Final detection grid.
    pub fn head_grid(&self) -> (usize, usize) {
        *self.grids.last().unwrap()
    }

    /// Run one sample through both branches; returns the raw head output,
    /// `(gh·gw, 5)` over the final grid.
    pub fn forward_sample<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        sample: &Sample<R>,
        diag: &mut Diagnostics,
    ) -> Result<ValueId> {
        let cfg = &self.config;
        if sample.frame.shape() != [3, cfg.input_h, cfg.input_w] {
            return Err(Error::shape(format!(
                "frame shape {:?}, model expects [3, {}, {}]",
                sample.frame.shape(),
                cfg.input_h,
                cfg.input_w
            )));
        }

        tape.set_scope(Scope::Ann);
        let frame = tape.constant(sample.frame.data().to_vec(), sample.frame.shape());
        let (mut x, mut gh, mut gw) = self.dense.embed.apply(tape, ctx, frame)?;
        if (gh, gw) != self.grids[0] {
            return Err(Error::shape(format!(
                "stage 1 grid {gh}x{gw} does not match planned {:?}",
                self.grids[0]
            )));
        }

        let mut sxs: Vec<ValueId> = Vec::new();
        if let Some(spike) = &self.spike {
            let vx = sample.voxels.as_ref().ok_or_else(|| {
                Error::State("model has a spiking branch but the sample has no voxel grid".into())
            })?;
            if vx.t_bins() != cfg.t_steps || vx.height() != cfg.input_h || vx.width() != cfg.input_w
            {
                return Err(Error::shape(format!(
                    "voxel grid {}x{}x{} vs model T={} input {}x{}",
                    vx.t_bins(),
                    vx.height(),
                    vx.width(),
                    cfg.t_steps,
                    cfg.input_h,
                    cfg.input_w
                )));
            }
            tape.set_scope(Scope::Snn);
            let bins: Vec<ValueId> = (0..cfg.t_steps)
                .map(|t| {
                    let b: Tensor<R> = vx.bin_tensor(t);
                    tape.constant(b.data().to_vec(), b.shape())
                })
                .collect();
            let feats = spike.embed.apply(tape, ctx, &bins, &mut diag.firing)?;
            let got = tape.shape(feats[0]).to_vec();
            if (got[1], got[2]) != self.grids[0] {
                return Err(Error::shape(format!(
                    "spike stage 1 grid {}x{} does not match planned {:?}",
                    got[1], got[2], self.grids[0]
                )));
            }
            sxs = feats
                .iter()
                .map(|&f| chw_to_tokens(tape, f))
                .collect::<Result<_>>()?;
        }

        for (s, st) in cfg.stages.iter().enumerate() {
            for b in 0..st.depth {
                let dense_blk = &self.dense.stages[s][b];
                let pairing = self.spike.is_some() && self.schedule.contains(&(s, b));
                if pairing {
                    let spike_blk = &self.spike.as_ref().unwrap().stages[s][b];
                    tape.set_scope(Scope::Snn);
                    let phase = spike_blk.begin(tape, ctx, &sxs, &mut diag.firing)?;
                    tape.set_scope(Scope::Interact);
                    let to_dense = interact::spike_to_dense(tape, &phase.scores, cfg.interact.kernel)?;
                    self.snapshot_scores(tape, diag, s, b, &phase.scores);

                    tape.set_scope(Scope::Ann);
                    let inj = Injection {
                        lambda: R::of(cfg.interact.lambda4),
                        maps: &to_dense,
                    };
                    let (nx, maps) = dense_blk.apply(tape, ctx, x, Some(&inj))?;
                    x = nx;
                    self.snapshot_maps(tape, diag, s, b, &maps);

                    tape.set_scope(Scope::Interact);
                    let to_spike = interact::dense_to_spike(tape, &maps, cfg.interact.kernel)?;
                    tape.set_scope(Scope::Snn);
                    let inj = Injection {
                        lambda: R::of(cfg.interact.lambda3),
                        maps: &to_spike,
                    };
                    sxs = spike_blk.complete(tape, ctx, &sxs, phase, Some(&inj), &mut diag.firing)?;
                } else {
                    tape.set_scope(Scope::Ann);
                    let (nx, maps) = dense_blk.apply(tape, ctx, x, None)?;
                    x = nx;
                    self.snapshot_maps(tape, diag, s, b, &maps);
                    if let Some(spike) = &self.spike {
                        tape.set_scope(Scope::Snn);
                        let (nsxs, scores) =
                            spike.stages[s][b].apply(tape, ctx, &sxs, None, &mut diag.firing)?;
                        sxs = nsxs;
                        self.snapshot_scores(tape, diag, s, b, &scores);
                    }
                }
            }
            if s + 1 < cfg.stages.len() {
                tape.set_scope(Scope::Ann);
                x = self.dense.merges[s].apply(tape, ctx, x, gh, gw)?;
                if let Some(spike) = &self.spike {
                    tape.set_scope(Scope::Snn);
                    let mut next = Vec::with_capacity(sxs.len());
                    let chw: Vec<ValueId> = sxs
                        .iter()
                        .map(|&t| tokens_to_chw(tape, t, gh, gw))
                        .collect::<Result<_>>()?;
                    let down = spike.downs[s].apply(tape, ctx, &chw, &mut diag.firing)?;
                    for &d in &down {
                        next.push(chw_to_tokens(tape, d)?);
                    }
                    sxs = next;
                }
                gh /= 2;
                gw /= 2;
                if (gh, gw) != self.grids[s + 1] {
                    return Err(Error::shape(format!(
                        "stage {} grid {gh}x{gw} does not match planned {:?}",
                        s + 2,
                        self.grids[s + 1]
                    )));
                }
            }
        }

        tape.set_scope(Scope::Shared);
        let feats = if self.spike.is_some() {
            let smean = interact::time_mean(tape, &sxs)?;
            tape.concat_cols(&[x, smean])?
        } else {
            x
        };
        let fused = self.fuse.apply(tape, ctx, feats)?;
        let fused = tape.gelu(fused);
        self.head.apply(tape, ctx, fused)
    }

    fn snapshot_maps<R: Real>(
        &self,
        tape: &Tape<R>,
        diag: &mut Diagnostics,
        s: usize,
        b: usize,
        maps: &AttnMaps,
    ) {
        if let Some(first) = maps.first().and_then(|w| w.first()) {
            diag.attn_samples.insert(
                format!("dense.s{s}.b{b}"),
                tape.value(*first).iter().map(|v| v.to64()).collect(),
            );
        }
    }

    fn snapshot_scores<R: Real>(
        &self,
        tape: &Tape<R>,
        diag: &mut Diagnostics,
        s: usize,
        b: usize,
        scores: &crate::snn::ScoreMaps,
    ) {
        if let Some(first) = scores
            .first()
            .and_then(|t| t.first())
            .and_then(|w| w.first())
        {
            diag.attn_samples.insert(
                format!("spike.s{s}.b{b}"),
                tape.value(*first).iter().map(|v| v.to64()).collect(),
            );
        }
    }
}

/// Index of the cell whose area contains the box center.
fn cell_of(b: &TargetBox, gh: usize, gw: usize) -> usize {
    let cy = ((b.cy * gh as f64).floor() as isize).clamp(0, gh as isize - 1) as usize;
    let cx = ((b.cx * gw as f64).floor() as isize).clamp(0, gw as isize - 1) as usize;
    cy * gw + cx
}

/// L1 on box coordinates at positive cells plus confidence BCE over every
/// cell, averaged over the batch. A cell is positive when a target center
/// falls inside it; the first box wins if two share a cell.
pub fn detection_loss<R: Real>(
    tape: &mut Tape<R>,
    outs: &[ValueId],
    targets: &[Vec<TargetBox>],
    gh: usize,
    gw: usize,
) -> Result<ValueId> {
    if outs.is_empty() || outs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} outputs vs {} target sets",
            outs.len(),
            targets.len()
        )));
    }
    let cells = gh * gw;
    let mut per_sample = Vec::with_capacity(outs.len());
    for (&out, boxes) in outs.iter().zip(targets) {
        if tape.shape(out) != [cells, HEAD_CHANNELS] {
            return Err(Error::shape(format!(
                "head output shape {:?}, expected [{cells}, {HEAD_CHANNELS}]",
                tape.shape(out)
            )));
        }
        let mut conf_target = vec![R::zero(); cells];
        let mut pos: Vec<(usize, &TargetBox)> = Vec::new();
        for b in boxes {
            let cell = cell_of(b, gh, gw);
            if conf_target[cell] == R::zero() {
                pos.push((cell, b));
            }
            conf_target[cell] = R::one();
        }
        let conf_logits = tape.slice_cols(out, 4, 5)?;
        let bce = tape.bce_with_logits(conf_logits, &conf_target)?;
        let mut loss = tape.mean_all(bce);
        if !pos.is_empty() {
            let idx: Vec<usize> = pos.iter().map(|(c, _)| *c).collect();
            let rows = tape.gather_rows(out, &idx)?;
            let pred = tape.slice_cols(rows, 0, 4)?;
            let want: Vec<R> = pos
                .iter()
                .flat_map(|(_, b)| [b.cx, b.cy, b.w, b.h])
                .map(R::of)
                .collect();
            let tgt = tape.constant(want, &[pos.len(), 4]);
            let diff = tape.sub(pred, tgt)?;
            let l1 = tape.abs(diff);
            let box_term = tape.mean_all(l1);
            loss = tape.add(loss, box_term)?;
        }
        per_sample.push(loss);
    }
    let mut total = per_sample[0];
    for &l in &per_sample[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, R::of(1.0 / per_sample.len() as f64)))
}

/// Turn raw head values (`gh·gw × 5`, row-major) into per-cell detections.
/// Box sizes clamp at zero; confidence is a sigmoid of the logit.
pub fn decode_detections(values: &[f64], gh: usize, gw: usize) -> Result<Vec<Detection>> {
    let cells = gh * gw;
    if values.len() != cells * HEAD_CHANNELS {
        return Err(Error::shape(format!(
            "{} head values for a {gh}x{gw} grid",
            values.len()
        )));
    }
    Ok((0..cells)
        .map(|i| {
            let v = &values[i * HEAD_CHANNELS..(i + 1) * HEAD_CHANNELS];
            Detection {
                cx: v[0],
                cy: v[1],
                w: v[2].max(0.0),
                h: v[3].max(0.0),
                conf: 1.0 / (1.0 + (-v[4]).exp()),
            }
        })
        .collect())
}

/// Intersection-over-union of two center-format boxes.
pub fn iou(a: &TargetBox, b: &TargetBox) -> f64 {
    let ax0 = a.cx - a.w / 2.0;
    let ax1 = a.cx + a.w / 2.0;
    let ay0 = a.cy - a.h / 2.0;
    let ay1 = a.cy + a.h / 2.0;
    let bx0 = b.cx - b.w / 2.0;
    let bx1 = b.cx + b.w / 2.0;
    let by0 = b.cy - b.h / 2.0;
    let by1 = b.cy + b.h / 2.0;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Optimization settings for [`train_step`]. Milestones are step counts at
/// which the learning rate is multiplied by 0.1.
#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub lr: f64,
    pub weight_decay: f64,
    pub milestones: Vec<u64>,
    /// Keep batch-norm statistics fixed (evaluation-mode normalizers) while
    /// still updating weights. Used for a short tail phase so the optimized
    /// forward is exactly the one inference will run.
    pub frozen_stats: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 1e-3,
            weight_decay: 0.01,
            milestones: vec![],
            frozen_stats: false,
        }
    }
}

const BETAS: (f64, f64) = (0.9, 0.999);
const EPS: f64 = 1e-8;

/// Forward the batch, backward through both branches, one AdamW step,
/// then fold the queued batch-norm statistics. Returns the batch loss.
pub fn train_step<R: Real>(
    model: &Model,
    store: &mut ParamStore<R>,
    batch: &[Sample<R>],
    tc: &TrainCfg,
) -> Result<(f64, Diagnostics)> {
    if batch.is_empty() {
        return Err(Error::State("empty training batch".into()));
    }
    let (gh, gw) = model.head_grid();
    let mut tape = Tape::new();
    let mut diag = Diagnostics::default();
    let (loss_id, loss_val, ids, stats) = {
        let mut ctx = Ctx::new(store, !tc.frozen_stats);
        let mut outs = Vec::with_capacity(batch.len());
        for sample in batch {
            outs.push(model.forward_sample(&mut tape, &mut ctx, sample, &mut diag)?);
        }
        let targets: Vec<Vec<TargetBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
        let loss = detection_loss(&mut tape, &outs, &targets, gh, gw)?;
        let v = tape.value(loss)[0].to64();
        let (ids, stats) = ctx.into_parts();
        (loss, v, ids, stats)
    };
    if !loss_val.is_finite() {
        let rate = diag.firing.aggregate_rate().unwrap_or(0.0);
        let layers: Vec<String> = diag
            .firing
            .layers()
            .map(|(k, r)| format!("{k}={r:.3}"))
            .collect();
        return Err(Error::Numeric(format!(
            "non-finite loss {loss_val} at step {}; aggregate firing rate {rate:.4}; \
             per-layer rates: {}",
            store.step_count(),
            layers.join(", ")
        )));
    }
    let grads = tape.backward(loss_id)?;
    store.absorb_grads(&ids, &grads)?;
    let drops = tc
        .milestones
        .iter()
        .filter(|&&m| store.step_count() >= m)
        .count() as i32;
    let lr = tc.lr * 0.1f64.powi(drops);
    store.adamw_step(
        R::of(lr),
        R::of(tc.weight_decay),
        (R::of(BETAS.0), R::of(BETAS.1)),
        R::of(EPS),
    )?;
    store.fold_running(&stats)?;
    Ok((loss_val, diag))
}

/// Re-estimate batch-norm running statistics at the current parameters:
/// one training-mode forward over `batch`, then the stored running values
/// are replaced with the freshly observed averages. Worth calling once
/// after a short aggressive run, where the momentum average lags the final
/// parameters and evaluation-mode forwards would see stale normalizers.
pub fn calibrate_stats<R: Real>(
    model: &Model,
    store: &mut ParamStore<R>,
    batch: &[Sample<R>],
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::State("empty calibration batch".into()));
    }
    let mut tape = Tape::new();
    let mut diag = Diagnostics::default();
    let stats = {
        let mut ctx = Ctx::new(store, true);
        for sample in batch {
            model.forward_sample(&mut tape, &mut ctx, sample, &mut diag)?;
        }
        ctx.into_parts().1
    };
    store.assign_running(&stats)
}

/// Forward in evaluation mode (running batch-norm statistics, no updates)
/// and decode per-cell detections.
pub fn infer<R: Real>(
    model: &Model,
    store: &ParamStore<R>,
    sample: &Sample<R>,
) -> Result<(Vec<Detection>, Diagnostics)> {
    let (gh, gw) = model.head_grid();
    let mut tape = Tape::new();
    let mut diag = Diagnostics::default();
    let mut ctx = Ctx::new(store, false);
    let out = model.forward_sample(&mut tape, &mut ctx, sample, &mut diag)?;
    let values: Vec<f64> = tape.value(out).iter().map(|v| v.to64()).collect();
    Ok((decode_detections(&values, gh, gw)?, diag))
}
