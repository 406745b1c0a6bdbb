//! Analytic operation counting and energy estimation. Dense-branch
//! products count as multiply-accumulates (MAC); products with a binary
//! spike operand count as accumulates (AC) and are discounted by the
//! block's measured firing rate. Per block the energy is
//! `T·(f·E_A·OP_A + E_M·OP_M)` picojoules.
//!
//! Counting rules, applied uniformly:
//! - matmul/conv with real operands: `m·n·k` MAC; with a binary operand: AC
//! - bias adds, residual adds, score-bias adds: AC
//! - softmax: 4 MAC-equivalents per element (documented constant)
//! - layer norm, GELU, neuron updates, pooling, plain reductions, scalar
//!   rescales, and mask gating are excluded
//! - batch norm is folded into the adjacent linear at inference, so it
//!   contributes no ops of its own
//! - the pairwise semantic bias on the spiking side runs its first layer
//!   on spike differences (AC) but its second on real values (MAC) — the
//!   only MAC a pair-score spiking block reports; token-gate blocks report
//!   zero MAC everywhere

use crate::error::{Error, Result};
use crate::lif::FiringMeter;
use crate::model::{ModelConfig, HEAD_CHANNELS};
use crate::snn::AttnKind;

#[derive(Debug, Clone, Copy)]
pub struct EnergyConstants {
    /// Energy per accumulate, pJ.
    pub e_a: f64,
    /// Energy per multiply-accumulate, pJ.
    pub e_m: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants { e_a: 0.9, e_m: 4.6 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if self.e_a <= 0.0 || self.e_m <= 0.0 {
            return Err(Error::config(format!(
                "energy constants must be positive, got E_A={} E_M={}",
                self.e_a, self.e_m
            )));
        }
        Ok(())
    }
}

/// Where a block's firing rate comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RateSource {
    /// Dense blocks always "fire": f = 1.
    Dense,
    /// Mean rate over all firing-meter sites under this key prefix.
    Spike(String),
}

#[derive(Debug, Clone)]
pub struct BlockOps {
    pub name: String,
    pub t_steps: usize,
    pub op_a: u64,
    pub op_m: u64,
    pub rate: RateSource,
}

#[derive(Debug, Clone, Default)]
pub struct OpCount {
    pub blocks: Vec<BlockOps>,
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub block: String,
    pub t_steps: usize,
    pub rate: f64,
    pub op_a: u64,
    pub op_m: u64,
    pub pj: f64,
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub consts: EnergyConstants,
    pub rows: Vec<ReportRow>,
    pub total_pj: f64,
    pub dense_pj: f64,
    pub spike_pj: f64,
    /// Σ T·OP_A over all blocks, in Giga-ops.
    pub total_ac_g: f64,
    /// Σ T·OP_M over all blocks, in Giga-ops.
    pub total_mac_g: f64,
}

fn linear(rows: usize, cin: usize, cout: usize) -> (u64, u64) {
    ((rows * cin * cout) as u64, (rows * cout) as u64)
}

fn conv(oh: usize, ow: usize, cin: usize, cout: usize, k: usize) -> (u64, u64) {
    (
        (oh * ow * cout * cin * k * k) as u64,
        (oh * ow * cout) as u64,
    )
}

/// Ops of the pairwise semantic bias over one window: first layer on the
/// token differences, scalar second layer, upper-triangle pair count.
fn semantic(m2: usize, c: usize) -> (u64, u64, u64) {
    let pairs = m2 * (m2 + 1) / 2;
    let hid = (c / 4).max(1);
    let diffs = (pairs * c) as u64;
    let (fc1, fc1b) = linear(pairs, c, hid);
    let (fc2, fc2b) = linear(pairs, hid, 1);
    (fc1, fc2, diffs + fc1b + fc2b)
}

/// Analytic per-block operation counts for one forward pass of a single
/// sample under `cfg`. Counts are per timestep on the spiking side; the
/// `T` factor is applied by [`estimate`].
pub fn count_ops(cfg: &ModelConfig) -> Result<OpCount> {
    cfg.validate()?;
    let grids = cfg.stage_grids()?;
    let mut blocks = Vec::new();

    // dense patch embedding
    let (g0h, g0w) = grids[0];
    let c0 = cfg.stages[0].dense_c;
    let (m, a) = conv(g0h, g0w, 3, c0, cfg.patch);
    blocks.push(BlockOps {
        name: "dense.embed".into(),
        t_steps: 1,
        op_a: a,
        op_m: m,
        rate: RateSource::Dense,
    });

    let sched: Vec<(usize, usize)> = if cfg.frames_only {
        vec![]
    } else {
        let depths: Vec<usize> = cfg.stages.iter().map(|s| s.depth).collect();
        crate::interact::schedule(&depths, cfg.interact.start_stage, cfg.interact.pairs)?
    };

    for (s, st) in cfg.stages.iter().enumerate() {
        let (gh, gw) = grids[s];
        let n = gh * gw;
        for b in 0..st.depth {
            let layout = cfg.layout_for(grids[s], b)?;
            let m2 = layout.window_tokens();
            let nw = layout.nw;
            let interacting = sched.contains(&(s, b));

            // dense block
            let c = st.dense_c;
            let heads = st.dense_heads;
            let d = c / heads;
            let mut op_m = 0u64;
            let mut op_a = 0u64;
            let (qm, qa) = linear(n, c, 3 * c);
            let (pm, pa) = linear(n, c, c);
            let (f1m, f1a) = linear(n, c, 4 * c);
            let (f2m, f2a) = linear(n, 4 * c, c);
            op_m += qm + pm + f1m + f2m;
            op_a += qa + pa + f1a + f2a;
            let (s1, s2, sa) = semantic(m2, c);
            op_m += (nw as u64) * (s1 + s2);
            op_a += (nw as u64) * sa;
            let per_head = (m2 * m2 * d // QKᵀ
                + m2 * m2 * d          // A·V
                + 4 * m2 * m2) as u64; // softmax
            op_m += (nw * heads) as u64 * per_head;
            let score_adds = 2 + u64::from(interacting); // +P, +S, +injected map
            op_a += (nw * heads) as u64 * score_adds * (m2 * m2) as u64;
            op_a += 2 * (n * c) as u64; // residuals
            blocks.push(BlockOps {
                name: format!("dense.s{s}.b{b}"),
                t_steps: 1,
                op_a,
                op_m,
                rate: RateSource::Dense,
            });
        }
        if s + 1 < cfg.stages.len() {
            let c = st.dense_c;
            let nn = (gh / 2) * (gw / 2);
            let (m, a) = linear(nn, 4 * c, 2 * c);
            blocks.push(BlockOps {
                name: format!("dense.merge{s}"),
                t_steps: 1,
                op_a: a,
                op_m: m,
                rate: RateSource::Dense,
            });
        }
    }

    if !cfg.frames_only {
        // spiking embedding: real-valued voxel conversion is the branch's
        // only real-by-real product
        let c0 = cfg.stages[0].spike_c;
        let mid = (c0 / 2).max(1);
        let (cm, ca) = conv(cfg.input_h, cfg.input_w, 2, mid, 3);
        let stride = cfg.patch / 2;
        let (ch, cw) = (cfg.input_h / stride, cfg.input_w / stride);
        let (dn, dna) = conv(ch, cw, mid, c0, 3);
        let (sc, sca) = conv(g0h, g0w, mid, c0, 1);
        let join = (g0h * g0w * c0) as u64;
        blocks.push(BlockOps {
            name: "spike.embed".into(),
            t_steps: cfg.t_steps,
            op_a: ca + dn + dna + sc + sca + join,
            op_m: cm,
            rate: RateSource::Spike("spike.embed".into()),
        });

        for (s, st) in cfg.stages.iter().enumerate() {
            let (gh, gw) = grids[s];
            let n = gh * gw;
            let c = st.spike_c;
            let heads = st.spike_heads;
            let d = c / heads;
            for b in 0..st.depth {
                let layout = match st.kind {
                    AttnKind::TokenGate => cfg.layout_for(grids[s], 0)?,
                    AttnKind::PairScore => cfg.layout_for(grids[s], b)?,
                };
                let m2 = layout.window_tokens();
                let nw = layout.nw;
                let interacting = sched.contains(&(s, b));
                let nproj = match st.kind {
                    AttnKind::TokenGate => 2,
                    AttnKind::PairScore => 3,
                };
                let mut op_a = 0u64;
                let mut op_m = 0u64;
                let (q, qb) = linear(n, c, nproj * c);
                let (p, pb) = linear(n, c, c);
                let (f1, f1b) = linear(n, c, 4 * c);
                let (f2, f2b) = linear(n, 4 * c, c);
                op_a += q + qb + p + pb + f1 + f1b + f2 + f2b;
                match st.kind {
                    AttnKind::TokenGate => {
                        // channel sums for the gate, then the gating product
                        op_a += 2 * (n * c) as u64;
                    }
                    AttnKind::PairScore => {
                        let (s1, s2, sa) = semantic(m2, c);
                        op_a += (nw as u64) * (s1 + sa);
                        op_m += (nw as u64) * s2;
                        let per_head =
                            (m2 * m2 * d + m2 * m2 * d) as u64; // QKᵀ, R·V
                        op_a += (nw * heads) as u64 * per_head;
                        let score_adds = 2 + u64::from(interacting);
                        op_a += (nw * heads) as u64 * score_adds * (m2 * m2) as u64;
                    }
                }
                op_a += 2 * (n * c) as u64; // residuals
                blocks.push(BlockOps {
                    name: format!("spike.s{s}.b{b}"),
                    t_steps: cfg.t_steps,
                    op_a,
                    op_m,
                    rate: RateSource::Spike(format!("spike.s{s}.b{b}")),
                });
            }
            if s + 1 < cfg.stages.len() {
                let (dn, dna) = conv(gh, gw, c, 2 * c, 3);
                let (sc, sca) = conv(gh / 2, gw / 2, c, 2 * c, 1);
                let join = ((gh / 2) * (gw / 2) * 2 * c) as u64;
                blocks.push(BlockOps {
                    name: format!("spike.down{s}"),
                    t_steps: cfg.t_steps,
                    op_a: dn + dna + sc + sca + join,
                    op_m: 0,
                    rate: RateSource::Spike(format!("spike.down{s}")),
                });
            }
        }
    }

    let last = cfg.stages.last().unwrap();
    let (fh, fw) = *grids.last().unwrap();
    let nf = fh * fw;
    let cat = if cfg.frames_only {
        last.dense_c
    } else {
        last.dense_c + last.spike_c
    };
    let (fm, fa) = linear(nf, cat, last.dense_c);
    blocks.push(BlockOps {
        name: "fuse".into(),
        t_steps: 1,
        op_a: fa,
        op_m: fm,
        rate: RateSource::Dense,
    });
    let (hm, ha) = linear(nf, last.dense_c, HEAD_CHANNELS);
    blocks.push(BlockOps {
        name: "head".into(),
        t_steps: 1,
        op_a: ha,
        op_m: hm,
        rate: RateSource::Dense,
    });

    Ok(OpCount { blocks })
}

/// Mean firing rate over every meter site at or under `prefix`.
fn block_rate(meter: &FiringMeter, prefix: &str) -> Result<f64> {
    let dotted = format!("{prefix}.");
    let rates: Vec<f64> = meter
        .layers()
        .filter(|(k, _)| *k == prefix || k.starts_with(&dotted))
        .map(|(_, r)| r)
        .collect();
    if rates.is_empty() {
        return Err(Error::Report(format!(
            "no firing rate recorded for block '{prefix}'"
        )));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Apply `T·(f·E_A·OP_A + E_M·OP_M)` per block.
pub fn estimate(
    counts: &OpCount,
    rates: &FiringMeter,
    consts: &EnergyConstants,
) -> Result<EnergyReport> {
    consts.validate()?;
    let mut rows = Vec::with_capacity(counts.blocks.len());
    let mut total = 0.0;
    let mut dense = 0.0;
    let mut spike = 0.0;
    let mut ac_g = 0.0;
    let mut mac_g = 0.0;
    for b in &counts.blocks {
        let f = match &b.rate {
            RateSource::Dense => 1.0,
            RateSource::Spike(prefix) => block_rate(rates, prefix)?,
        };
        let t = b.t_steps as f64;
        let pj = t * (f * consts.e_a * b.op_a as f64 + consts.e_m * b.op_m as f64);
        total += pj;
        match b.rate {
            RateSource::Dense => dense += pj,
            RateSource::Spike(_) => spike += pj,
        }
        ac_g += t * b.op_a as f64 / 1e9;
        mac_g += t * b.op_m as f64 / 1e9;
        rows.push(ReportRow {
            block: b.name.clone(),
            t_steps: b.t_steps,
            rate: f,
            op_a: b.op_a,
            op_m: b.op_m,
            pj,
        });
    }
    Ok(EnergyReport {
        consts: *consts,
        rows,
        total_pj: total,
        dense_pj: dense,
        spike_pj: spike,
        total_ac_g: ac_g,
        total_mac_g: mac_g,
    })
}

/// `a / b` reported to two decimals.
pub fn compare_ratio(a: f64, b: f64) -> Result<f64> {
    if b <= 0.0 || a < 0.0 {
        return Err(Error::config(format!(
            "energy ratio needs positive totals, got {a} / {b}"
        )));
    }
    Ok((a / b * 100.0).round() / 100.0)
}

impl EnergyReport {
    /// `block,T,f,OP_A,OP_M,pJ` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,T,f,OP_A,OP_M,pJ\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.block, r.t_steps, r.rate, r.op_a, r.op_m, r.pj
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "energy estimate (E_A={} pJ/op, E_M={} pJ/op)\n",
            self.consts.e_a, self.consts.e_m
        );
        s.push_str(&format!(
            "  total {:.3} pJ | dense branch {:.3} pJ | spiking branch {:.3} pJ\n",
            self.total_pj, self.dense_pj, self.spike_pj
        ));
        s.push_str(&format!(
            "  ops: {:.6} G AC, {:.6} G MAC\n",
            self.total_ac_g, self.total_mac_g
        ));
        if self.spike_pj > 0.0 {
            if let Ok(r) = compare_ratio(self.dense_pj, self.spike_pj) {
                s.push_str(&format!("  dense/spiking ratio {r:.2}x\n"));
            }
        }
        s
    }
}
