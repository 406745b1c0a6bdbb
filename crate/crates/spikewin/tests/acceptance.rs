//! Release acceptance checks. Each test covers one numbered criterion and
//! prints a single `ACCEPTANCE <n> PASS` line on success (visible with
//! `cargo test --test acceptance -- --nocapture`); the test name doubles as
//! the pass/fail line in the default harness output. Tolerances and budgets
//! are pinned inline next to the assertions they guard.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as FuzzConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use spikewin::ann::{DenseBlock, SemanticBias};
use spikewin::energy::{
    compare_ratio, count_ops, estimate, BlockOps, EnergyConstants, OpCount, RateSource,
};
use spikewin::events::{
    read_events, simulate_events, sliding_windows, voxelize, write_events, Event, EventStream,
};
use spikewin::gradcheck::check_params;
use spikewin::lif::{lif_sequence, FiringMeter, LIFParams};
use spikewin::model::{
    calibrate_stats, infer, iou, train_step, Diagnostics, Model, ModelConfig, Sample, TrainCfg,
};
use spikewin::optim::{Ctx, ParamStore};
use spikewin::scene::{frame_chw, training_samples, SceneSpec};
use spikewin::snn::{AttnKind, SpikeBlock};
use spikewin::tape::{Scope, Tape};
use spikewin::tensor::Tensor;
use spikewin::window::WindowLayout;

fn pass(n: usize, msg: &str) {
    println!("ACCEPTANCE {n} PASS — {msg}");
}

fn fuzz_runner(cases: u32) -> TestRunner {
    TestRunner::new(FuzzConfig { cases, failure_persistence: None, ..FuzzConfig::default() })
}

// ---- 1: finite-difference check on a dense attention pair ----------------

#[test]
fn criterion_1_dense_attention_pair_gradcheck() {
    let started = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e57);
    let plain = WindowLayout::new(4, 4, 2, 0).unwrap();
    let shifted = WindowLayout::new(4, 4, 2, 1).unwrap();
    // N = 16 tokens, C = 8 channels, two heads, plain + shifted partner.
    let b0 = DenseBlock::init(&mut store, "acc.b0", 8, 2, plain, 1.0, 1.0, &mut rng).unwrap();
    let b1 = DenseBlock::init(&mut store, "acc.b1", 8, 2, shifted, 1.0, 1.0, &mut rng).unwrap();
    let normal = Normal::new(0.0, 0.5).unwrap();
    let xdata: Vec<f64> = (0..16 * 8).map(|_| rng.sample(normal)).collect();

    let report = check_params(&mut store, 1e-4, |tape, ctx| {
        let x = tape.constant(xdata.clone(), &[16, 8]);
        let (y0, _) = b0.apply(tape, ctx, x, None)?;
        let (y1, _) = b1.apply(tape, ctx, y0, None)?;
        Ok(tape.mean_all(y1))
    })
    .unwrap();

    let elapsed = started.elapsed();
    assert!(
        report.max_rel_err <= 1e-4,
        "max relative error {:.3e} over {} coordinates (worst {}[{}])",
        report.max_rel_err,
        report.coords_checked,
        report.worst_param,
        report.worst_index
    );
    assert!(elapsed.as_secs() < 60, "gradient check took {elapsed:?}, budget 60 s");
    pass(
        1,
        &format!(
            "dense block pair (N=16, C=8) 64-bit gradcheck: max rel err {:.3e} ≤ 1e-4 over {} coords in {:.1?}",
            report.max_rel_err, report.coords_checked, elapsed
        ),
    );
}

// ---- 2: spiking backward against hand-rolled BPTT -------------------------

/// Plain-`Vec` reference implementations used by the block-level oracle.
mod oracle {
    pub struct BnCache {
        pub xhat: Vec<f64>,
        pub inv: Vec<f64>,
    }

    pub fn bn_fwd(x: &[f64], rows: usize, c: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, BnCache) {
        let mut y = vec![0.0; rows * c];
        let mut xhat = vec![0.0; rows * c];
        let mut inv = vec![0.0; c];
        for j in 0..c {
            let mu = (0..rows).map(|i| x[i * c + j]).sum::<f64>() / rows as f64;
            let var = (0..rows).map(|i| (x[i * c + j] - mu).powi(2)).sum::<f64>() / rows as f64;
            inv[j] = 1.0 / (var + 1e-5).sqrt();
            for i in 0..rows {
                xhat[i * c + j] = (x[i * c + j] - mu) * inv[j];
                y[i * c + j] = gamma[j] * xhat[i * c + j] + beta[j];
            }
        }
        (y, BnCache { xhat, inv })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bn_bwd(
        dy: &[f64],
        cache: &BnCache,
        rows: usize,
        c: usize,
        gamma: &[f64],
        dgamma: &mut [f64],
        dbeta: &mut [f64],
    ) -> Vec<f64> {
        let mut dx = vec![0.0; rows * c];
        for j in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dyx = 0.0;
            for i in 0..rows {
                sum_dy += dy[i * c + j];
                sum_dyx += dy[i * c + j] * cache.xhat[i * c + j];
                dgamma[j] += dy[i * c + j] * cache.xhat[i * c + j];
                dbeta[j] += dy[i * c + j];
            }
            let m = rows as f64;
            for i in 0..rows {
                dx[i * c + j] = gamma[j]
                    * cache.inv[j]
                    * (dy[i * c + j] - sum_dy / m - cache.xhat[i * c + j] * sum_dyx / m);
            }
        }
        dx
    }

    pub fn lin_fwd(x: &[f64], rows: usize, cin: usize, cout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; rows * cout];
        for i in 0..rows {
            for j in 0..cout {
                let mut s = b[j];
                for k in 0..cin {
                    s += x[i * cin + k] * w[k * cout + j];
                }
                y[i * cout + j] = s;
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn lin_bwd(
        dy: &[f64],
        x: &[f64],
        rows: usize,
        cin: usize,
        cout: usize,
        w: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        let mut dx = vec![0.0; rows * cin];
        for i in 0..rows {
            for j in 0..cout {
                let g = dy[i * cout + j];
                db[j] += g;
                for k in 0..cin {
                    dw[k * cout + j] += x[i * cin + k] * g;
                    dx[i * cin + k] += w[k * cout + j] * g;
                }
            }
        }
        dx
    }

    pub struct LifCache {
        pub h: Vec<Vec<f64>>,
        pub s: Vec<Vec<f64>>,
    }

    pub fn lif_fwd(drives: &[Vec<f64>], v_th: f64) -> (Vec<Vec<f64>>, LifCache) {
        let n = drives[0].len();
        let mut v = vec![0.0; n];
        let mut hs = Vec::new();
        let mut ss = Vec::new();
        for d in drives {
            let mut h = vec![0.0; n];
            let mut s = vec![0.0; n];
            for i in 0..n {
                h[i] = v[i] + (d[i] - v[i]) / 2.0;
                s[i] = if h[i] - v_th >= 0.0 { 1.0 } else { 0.0 };
                v[i] = h[i] * (1.0 - s[i]);
            }
            hs.push(h);
            ss.push(s.clone());
        }
        (ss.clone(), LifCache { h: hs, s: ss })
    }

    pub fn lif_bwd(dspikes: &[Vec<f64>], cache: &LifCache, v_th: f64) -> Vec<Vec<f64>> {
        let t_steps = dspikes.len();
        let n = dspikes[0].len();
        let mut dv = vec![0.0; n];
        let mut dx = vec![vec![0.0; n]; t_steps];
        for t in (0..t_steps).rev() {
            for i in 0..n {
                let u = std::f64::consts::PI * (cache.h[t][i] - v_th);
                let sur = 1.0 / (1.0 + u * u);
                let dh = dspikes[t][i] * sur + dv[i] * (1.0 - cache.s[t][i]);
                dx[t][i] = dh / 2.0;
                dv[i] = dh * 0.5; // ∂H/∂V = 1 − 1/τ = 0.5 at τ = 2
            }
        }
        dx
    }
}

#[test]
fn criterion_2_spiking_backward_matches_hand_rolled_bptt() {
    // (a) One neuron over three steps: tape surrogate backward against the
    // hand recurrence, pinned at 1e-10 relative error.
    let xs = [2.2, 0.4, 1.9];
    let cs = [1.0, 2.0, 3.0];
    let p = LIFParams::<f64>::standard();
    let mut tape = Tape::<f64>::new();
    let ids: Vec<_> = xs
        .iter()
        .map(|&x| tape.leaf(&Tensor::new(&[1], vec![x]).unwrap().with_grad()))
        .collect();
    let (spikes, _) = lif_sequence(&mut tape, &ids, &p).unwrap();
    let mut loss = tape.scale(spikes[0], cs[0]);
    for t in 1..3 {
        let term = tape.scale(spikes[t], cs[t]);
        loss = tape.add(loss, term).unwrap();
    }
    let grads = tape.backward(loss).unwrap();

    let (tau, v_th) = (2.0f64, 1.0f64);
    let mut v = 0.0;
    let mut h = [0.0; 3];
    let mut s = [0.0; 3];
    for t in 0..3 {
        h[t] = v + (xs[t] - v) / tau;
        s[t] = if h[t] - v_th >= 0.0 { 1.0 } else { 0.0 };
        v = h[t] * (1.0 - s[t]);
    }
    let mut dv = 0.0;
    let mut want = [0.0; 3];
    for t in (0..3).rev() {
        let sur = 1.0 / (1.0 + (std::f64::consts::PI * (h[t] - v_th)).powi(2));
        let dh = cs[t] * sur + dv * (1.0 - s[t]);
        want[t] = dh / tau;
        dv = dh * (1.0 - 1.0 / tau);
    }
    let mut single_err = 0.0f64;
    for t in 0..3 {
        let got = grads.dense(ids[t], 1)[0];
        single_err = single_err.max((got - want[t]).abs() / (want[t].abs() + 1e-12));
    }
    assert!(single_err <= 1e-10, "single-neuron max rel err {single_err:.3e} > 1e-10");

    // (b) A full spiking block (token gate, N=2, C=2, T=2): every parameter
    // gradient against an independent layer-by-layer BPTT, pinned at 1e-8.
    use oracle::*;
    let (t_steps, n, c) = (2usize, 2usize, 2usize);
    let hid = 4 * c;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layout = WindowLayout::new(1, 2, 1, 0).unwrap();
    let blk = SpikeBlock::init(
        &mut store,
        "b",
        c,
        1,
        AttnKind::TokenGate,
        layout,
        (1.0, 1.0),
        &mut rng,
    )
    .unwrap();
    let keys: Vec<_> = store.keys().collect();
    for k in &keys {
        if store.is_trainable(*k) {
            let t = store.tensor_mut(*k);
            let shape = t.shape().to_vec();
            *t = Tensor::trunc_normal(&shape, 0.6, &mut rng).with_grad();
        }
    }
    let x_data: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]];

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&store, true);
    let mut meter = FiringMeter::new();
    let xs_ids: Vec<_> = x_data.iter().map(|d| tape.constant(d.clone(), &[n, c])).collect();
    let (outs, _) = blk.apply(&mut tape, &mut ctx, &xs_ids, None, &mut meter).unwrap();
    let cat = tape.concat_rows(&outs).unwrap();
    let loss = tape.mean_all(cat);
    let grads = tape.backward(loss).unwrap();

    let g = |k: spikewin::optim::ParamKey| store.tensor(k).data().to_vec();
    let (wq, bq) = (g(blk.attn.qkv.lin.w), g(blk.attn.qkv.lin.b));
    let (gq, bq2) = (g(blk.attn.qkv.bn.gamma), g(blk.attn.qkv.bn.beta));
    let (wp, bp) = (g(blk.attn.proj.w), g(blk.attn.proj.b));
    let (gp, bp2) = (g(blk.attn.proj_bn.gamma), g(blk.attn.proj_bn.beta));
    let (w1, b1) = (g(blk.mlp.fc1.w), g(blk.mlp.fc1.b));
    let (g1, be1) = (g(blk.mlp.bn1.gamma), g(blk.mlp.bn1.beta));
    let (w2, b2) = (g(blk.mlp.fc2.w), g(blk.mlp.fc2.b));
    let (g2, be2) = (g(blk.mlp.bn2.gamma), g(blk.mlp.bn2.beta));
    let rows = t_steps * n;

    let xcat: Vec<f64> = x_data.concat();
    let qkv_lin = lin_fwd(&xcat, rows, c, 2 * c, &wq, &bq);
    let (qkv_bn, qkv_cache) = bn_fwd(&qkv_lin, rows, 2 * c, &gq, &bq2);
    let col_slice = |m: &[f64], width: usize, t: usize, c0: usize, c1: usize| -> Vec<f64> {
        (0..n)
            .flat_map(|i| (c0..c1).map(move |j| (i, j)))
            .map(|(i, j)| m[(t * n + i) * width + j])
            .collect()
    };
    let q_drives: Vec<Vec<f64>> = (0..t_steps).map(|t| col_slice(&qkv_bn, 2 * c, t, 0, c)).collect();
    let k_drives: Vec<Vec<f64>> =
        (0..t_steps).map(|t| col_slice(&qkv_bn, 2 * c, t, c, 2 * c)).collect();
    let (q_sp, q_cache) = lif_fwd(&q_drives, 1.0);
    let (k_sp, k_cache) = lif_fwd(&k_drives, 1.0);
    let gate_drives: Vec<Vec<f64>> = q_sp
        .iter()
        .map(|q| (0..n).map(|i| (0..c).map(|j| q[i * c + j]).sum()).collect())
        .collect();
    let (a_sp, a_cache) = lif_fwd(&gate_drives, 1.0);
    let core: Vec<Vec<f64>> = (0..t_steps)
        .map(|t| {
            (0..n)
                .flat_map(|i| (0..c).map(move |j| (i, j)))
                .map(|(i, j)| k_sp[t][i * c + j] * a_sp[t][i])
                .collect()
        })
        .collect();
    let core_cat: Vec<f64> = core.concat();
    let proj_lin = lin_fwd(&core_cat, rows, c, c, &wp, &bp);
    let (proj_bn, proj_cache) = bn_fwd(&proj_lin, rows, c, &gp, &bp2);
    let proj_drives: Vec<Vec<f64>> =
        (0..t_steps).map(|t| proj_bn[t * n * c..(t + 1) * n * c].to_vec()).collect();
    let (proj_sp, proj_sp_cache) = lif_fwd(&proj_drives, 1.0);
    let zhat: Vec<Vec<f64>> = (0..t_steps)
        .map(|t| proj_sp[t].iter().zip(&x_data[t]).map(|(a, b)| a + b).collect())
        .collect();
    let zhat_cat: Vec<f64> = zhat.concat();
    let m1_lin = lin_fwd(&zhat_cat, rows, c, hid, &w1, &b1);
    let (m1_bn, m1_cache) = bn_fwd(&m1_lin, rows, hid, &g1, &be1);
    let m1_drives: Vec<Vec<f64>> =
        (0..t_steps).map(|t| m1_bn[t * n * hid..(t + 1) * n * hid].to_vec()).collect();
    let (m1_sp, m1_sp_cache) = lif_fwd(&m1_drives, 1.0);
    let m1_cat: Vec<f64> = m1_sp.concat();
    let m2_lin = lin_fwd(&m1_cat, rows, hid, c, &w2, &b2);
    let (m2_bn, m2_cache) = bn_fwd(&m2_lin, rows, c, &g2, &be2);
    let m2_drives: Vec<Vec<f64>> =
        (0..t_steps).map(|t| m2_bn[t * n * c..(t + 1) * n * c].to_vec()).collect();
    let (m2_sp, m2_sp_cache) = lif_fwd(&m2_drives, 1.0);
    let z: Vec<Vec<f64>> = (0..t_steps)
        .map(|t| m2_sp[t].iter().zip(&zhat[t]).map(|(a, b)| a + b).collect())
        .collect();
    for t in 0..t_steps {
        assert_eq!(tape.value(outs[t]), &z[t][..], "oracle forward mismatch at t={t}");
    }

    let scale = 1.0 / (t_steps * n * c) as f64;
    let dz: Vec<Vec<f64>> = vec![vec![scale; n * c]; t_steps];
    let mut dzhat = dz.clone();
    let dm2_sp = dz.clone();
    let dm2_drives = lif_bwd(&dm2_sp, &m2_sp_cache, 1.0);
    let dm2_bn: Vec<f64> = dm2_drives.concat();
    let mut dg2 = vec![0.0; c];
    let mut dbe2 = vec![0.0; c];
    let dm2_lin = bn_bwd(&dm2_bn, &m2_cache, rows, c, &g2, &mut dg2, &mut dbe2);
    let mut dw2 = vec![0.0; hid * c];
    let mut db2 = vec![0.0; c];
    let dm1_cat = lin_bwd(&dm2_lin, &m1_cat, rows, hid, c, &w2, &mut dw2, &mut db2);
    let dm1_sp: Vec<Vec<f64>> =
        (0..t_steps).map(|t| dm1_cat[t * n * hid..(t + 1) * n * hid].to_vec()).collect();
    let dm1_drives = lif_bwd(&dm1_sp, &m1_sp_cache, 1.0);
    let dm1_bn: Vec<f64> = dm1_drives.concat();
    let mut dg1 = vec![0.0; hid];
    let mut dbe1 = vec![0.0; hid];
    let dm1_lin = bn_bwd(&dm1_bn, &m1_cache, rows, hid, &g1, &mut dg1, &mut dbe1);
    let mut dw1 = vec![0.0; c * hid];
    let mut db1 = vec![0.0; hid];
    let dzhat_from_mlp = lin_bwd(&dm1_lin, &zhat_cat, rows, c, hid, &w1, &mut dw1, &mut db1);
    for t in 0..t_steps {
        for i in 0..n * c {
            dzhat[t][i] += dzhat_from_mlp[t * n * c + i];
        }
    }
    let dproj_sp = dzhat.clone();
    let dproj_drives = lif_bwd(&dproj_sp, &proj_sp_cache, 1.0);
    let dproj_bn: Vec<f64> = dproj_drives.concat();
    let mut dgp = vec![0.0; c];
    let mut dbp2 = vec![0.0; c];
    let dproj_lin = bn_bwd(&dproj_bn, &proj_cache, rows, c, &gp, &mut dgp, &mut dbp2);
    let mut dwp = vec![0.0; c * c];
    let mut dbp = vec![0.0; c];
    let dcore_cat = lin_bwd(&dproj_lin, &core_cat, rows, c, c, &wp, &mut dwp, &mut dbp);
    let mut dk_sp = vec![vec![0.0; n * c]; t_steps];
    let mut da_sp = vec![vec![0.0; n]; t_steps];
    for t in 0..t_steps {
        for i in 0..n {
            for j in 0..c {
                let gph = dcore_cat[(t * n + i) * c + j];
                dk_sp[t][i * c + j] += gph * a_sp[t][i];
                da_sp[t][i] += gph * k_sp[t][i * c + j];
            }
        }
    }
    let dgate_drives = lif_bwd(&da_sp, &a_cache, 1.0);
    let mut dq_sp = vec![vec![0.0; n * c]; t_steps];
    for t in 0..t_steps {
        for i in 0..n {
            for j in 0..c {
                dq_sp[t][i * c + j] += dgate_drives[t][i];
            }
        }
    }
    let dq_drives = lif_bwd(&dq_sp, &q_cache, 1.0);
    let dk_drives = lif_bwd(&dk_sp, &k_cache, 1.0);
    let mut dqkv_bn = vec![0.0; rows * 2 * c];
    for t in 0..t_steps {
        for i in 0..n {
            for j in 0..c {
                dqkv_bn[(t * n + i) * 2 * c + j] = dq_drives[t][i * c + j];
                dqkv_bn[(t * n + i) * 2 * c + c + j] = dk_drives[t][i * c + j];
            }
        }
    }
    let mut dgq = vec![0.0; 2 * c];
    let mut dbq2 = vec![0.0; 2 * c];
    let dqkv_lin = bn_bwd(&dqkv_bn, &qkv_cache, rows, 2 * c, &gq, &mut dgq, &mut dbq2);
    let mut dwq = vec![0.0; c * 2 * c];
    let mut dbq = vec![0.0; 2 * c];
    let _ = lin_bwd(&dqkv_lin, &xcat, rows, c, 2 * c, &wq, &mut dwq, &mut dbq);

    let mut block_err = 0.0f64;
    let mut compare = |name: &str, key: spikewin::optim::ParamKey, want: &[f64]| {
        let got = grads
            .get(ctx.bound_id(key).unwrap())
            .unwrap_or_else(|| panic!("no grad for {name}"));
        for (i, (gv, wv)) in got.iter().zip(want.iter()).enumerate() {
            let rel = (gv - wv).abs() / (1.0 + wv.abs());
            assert!(rel <= 1e-8, "{name}[{i}]: tape {gv} vs oracle {wv} (rel {rel:.3e})");
            block_err = block_err.max(rel);
        }
    };
    compare("qkv.w", blk.attn.qkv.lin.w, &dwq);
    compare("qkv.b", blk.attn.qkv.lin.b, &dbq);
    compare("qkv.gamma", blk.attn.qkv.bn.gamma, &dgq);
    compare("qkv.beta", blk.attn.qkv.bn.beta, &dbq2);
    compare("proj.w", blk.attn.proj.w, &dwp);
    compare("proj.b", blk.attn.proj.b, &dbp);
    compare("proj.gamma", blk.attn.proj_bn.gamma, &dgp);
    compare("proj.beta", blk.attn.proj_bn.beta, &dbp2);
    compare("fc1.w", blk.mlp.fc1.w, &dw1);
    compare("fc1.b", blk.mlp.fc1.b, &db1);
    compare("bn1.gamma", blk.mlp.bn1.gamma, &dg1);
    compare("bn1.beta", blk.mlp.bn1.beta, &dbe1);
    compare("fc2.w", blk.mlp.fc2.w, &dw2);
    compare("fc2.b", blk.mlp.fc2.b, &db2);
    compare("bn2.gamma", blk.mlp.bn2.gamma, &dg2);
    compare("bn2.beta", blk.mlp.bn2.beta, &dbe2);

    pass(
        2,
        &format!(
            "LIF backward: single neuron max rel err {single_err:.3e} ≤ 1e-10, one-block BPTT max rel err {block_err:.3e} ≤ 1e-8"
        ),
    );
}

// ---- 3: binary spiking activations, no softmax on the spiking path -------

#[test]
fn criterion_3_spiking_path_is_binary_and_softmax_free() {
    // 1000 randomized block forwards: every spiking-neuron output must be
    // exactly 0 or 1, and the spiking scope of the tape must never record a
    // softmax node.
    let fired = AtomicUsize::new(0);
    let mut runner = fuzz_runner(1000);
    runner
        .run(
            &(any::<u64>(), 1usize..=2, 1usize..=3, any::<bool>()),
            |(seed, half_c, t_steps, gate)| {
                let c = 2 * half_c;
                let kind = if gate { AttnKind::TokenGate } else { AttnKind::PairScore };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::<f64>::new();
                let layout = WindowLayout::new(2, 2, 2, 0).unwrap();
                let blk = SpikeBlock::init(
                    &mut store, "fz", c, half_c, kind, layout, (0.7, 0.9), &mut rng,
                )
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
                let mut tape = Tape::<f64>::new();
                tape.set_scope(Scope::Snn);
                let mut ctx = Ctx::new(&store, true);
                let mut meter = FiringMeter::new();
                let xs: Vec<_> = (0..t_steps)
                    .map(|_| {
                        let d: Vec<f64> =
                            (0..4 * c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
                        tape.constant(d, &[4, c])
                    })
                    .collect();
                blk.apply(&mut tape, &mut ctx, &xs, None, &mut meter)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                for id in tape.nodes_of_kind("spike") {
                    for &v in tape.value(id) {
                        prop_assert!(v == 0.0 || v == 1.0, "non-binary spike value {v}");
                        if v == 1.0 {
                            fired.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                let counts = tape.kind_counts(Scope::Snn);
                prop_assert!(
                    counts.get("softmax").is_none(),
                    "softmax recorded on the spiking scope: {counts:?}"
                );
                Ok(())
            },
        )
        .unwrap_or_else(|e| panic!("binary-closure fuzz failed: {e}"));
    assert!(fired.load(Ordering::Relaxed) > 0, "no spikes fired across 1000 cases");

    // Whole-model structural scan: the spiking scope of a full forward has no
    // softmax while the dense scope does.
    let (model, store) = Model::build::<f32>(ModelConfig::toy()).unwrap();
    let sample = random_sample(&model.config, 5);
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(&store, false);
    let mut diag = Diagnostics::default();
    model.forward_sample(&mut tape, &mut ctx, &sample, &mut diag).unwrap();
    let snn = tape.kind_counts(Scope::Snn);
    let ann = tape.kind_counts(Scope::Ann);
    assert!(snn.get("softmax").is_none(), "softmax on spiking scope: {snn:?}");
    assert!(ann.get("softmax").copied().unwrap_or(0) > 0, "dense scope missing softmax");
    assert!(snn.get("spike").copied().unwrap_or(0) > 0, "spiking scope recorded no spikes");

    pass(
        3,
        &format!(
            "1000 randomized spiking forwards stayed in {{0,1}} ({} spikes seen); full forward records {} softmax nodes on the dense scope and none on the spiking scope",
            fired.load(Ordering::Relaxed),
            ann.get("softmax").copied().unwrap_or(0)
        ),
    );
}

// ---- 4: zero interaction weights ≡ interaction disabled -------------------

#[test]
fn criterion_4_zero_weights_match_disabled_interaction_bitwise() {
    let spec = SceneSpec::random(32, 32, 1, 0.3, 11).unwrap();
    let (frames, boxes) = spec.render().unwrap();
    let stream = simulate_events(&frames, spec.threshold).unwrap();
    let samples: Vec<Sample<f32>> =
        training_samples(&frames, &boxes, &stream, ModelConfig::toy().t_steps).unwrap();

    let mut zeroed = ModelConfig::toy();
    zeroed.interact.lambda3 = 0.0;
    zeroed.interact.lambda4 = 0.0;
    let mut disabled = ModelConfig::toy();
    disabled.interact.pairs = 0;

    let (model_a, mut store_a) = Model::build::<f32>(zeroed).unwrap();
    let (model_b, mut store_b) = Model::build::<f32>(disabled).unwrap();
    let tc = TrainCfg::default();

    let steps = 10;
    for step in 0..steps {
        let (la, _) = train_step(&model_a, &mut store_a, &samples, &tc).unwrap();
        let (lb, _) = train_step(&model_b, &mut store_b, &samples, &tc).unwrap();
        assert_eq!(
            la.to_bits(),
            lb.to_bits(),
            "losses diverged at step {step}: {la:?} vs {lb:?}"
        );
    }
    let keys_a: Vec<_> = store_a.keys().collect();
    let keys_b: Vec<_> = store_b.keys().collect();
    assert_eq!(keys_a.len(), keys_b.len());
    let mut coords = 0usize;
    for (&ka, &kb) in keys_a.iter().zip(&keys_b) {
        let (ta, tb) = (store_a.tensor(ka), store_b.tensor(kb));
        assert_eq!(ta.shape(), tb.shape());
        for (va, vb) in ta.data().iter().zip(tb.data()) {
            assert_eq!(va.to_bits(), vb.to_bits(), "parameters diverged after training");
            coords += 1;
        }
    }
    pass(
        4,
        &format!(
            "zero-weight coupling and disabled coupling stayed bitwise identical over {steps} training steps ({coords} parameter coordinates compared)"
        ),
    );
}

// ---- 5: energy model reference numbers ------------------------------------

#[test]
fn criterion_5_energy_model_reproduces_reference_numbers() {
    // Direct substitution: T=1, f=0.5, 100 accumulate ops, 10 multiply ops
    // → 1·(0.5·0.9·100 + 4.6·10) = 91 pJ, exactly.
    let counts = OpCount {
        blocks: vec![BlockOps {
            name: "b".into(),
            t_steps: 1,
            op_a: 100,
            op_m: 10,
            rate: RateSource::Spike("b".into()),
        }],
    };
    let mut meter = FiringMeter::new();
    meter.record("b.sn", &[1.0f64, 0.0]);
    let rep = estimate(&counts, &meter, &EnergyConstants::default()).unwrap();
    assert_eq!(rep.rows[0].pj, 91.0, "substitution case must be exact");
    assert_eq!(rep.total_pj, 91.0);

    // Published-style efficiency ratio, rounded to two decimals.
    let ratio = compare_ratio(295.4, 27.95).unwrap();
    assert!((ratio - 10.57).abs() < 0.005, "ratio {ratio} != 10.57");

    // Token-gate spiking attention blocks carry no multiply term at all.
    let toy = ModelConfig::toy();
    let ops = count_ops(&toy).unwrap();
    let mut gate_blocks = 0;
    for b in &ops.blocks {
        if b.name.starts_with("spike.s0.") || b.name.starts_with("spike.s1.") {
            assert_eq!(b.op_m, 0, "{} reports {} multiply ops", b.name, b.op_m);
            gate_blocks += 1;
        }
    }
    assert!(gate_blocks >= 4, "expected the first two stages to contribute gate blocks");

    pass(
        5,
        &format!(
            "direct substitution gives 91 pJ exactly, 295.4/27.95 rounds to {ratio}, and {gate_blocks} token-gate blocks report zero multiply ops"
        ),
    );
}

// ---- 6: stream inference at 80 Hz ------------------------------------------

#[test]
fn criterion_6_event_windows_yield_detections_at_80hz() {
    let started = Instant::now();
    let spec = SceneSpec::random(32, 32, 2, 1.0, 21).unwrap(); // 1 s at 20 Hz
    let (frames, _boxes) = spec.render().unwrap();
    assert_eq!(frames.len(), 20);
    let stream = simulate_events(&frames, spec.threshold).unwrap();

    let cfg = ModelConfig::toy();
    let t_bins = cfg.t_steps;
    let (model, store) = Model::build::<f32>(cfg).unwrap();

    let windows = sliding_windows(&stream, 50_000, 12_500).unwrap();
    assert!(windows.len() >= 40, "only {} windows over a 1 s stream", windows.len());
    for pair in windows.windows(2) {
        assert_eq!(
            pair[1].1 - pair[0].1,
            12_500,
            "window timestamps must advance by exactly 12500 us"
        );
    }

    let mut detections = 0usize;
    for &(start, end) in &windows {
        let fi = (0..frames.len())
            .rev()
            .find(|&i| frames.timestamp_us(i) <= end)
            .unwrap_or(0);
        let sample = Sample::<f32> {
            frame: frame_chw(&frames, fi).unwrap(),
            voxels: Some(voxelize(&stream, start, end, t_bins).unwrap()),
            boxes: vec![],
        };
        let (dets, _) = infer(&model, &store, &sample).unwrap();
        assert!(!dets.is_empty(), "window ending {end} us produced no detections");
        detections += 1;
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "stream pass took {elapsed:?}, budget 120 s");
    pass(
        6,
        &format!(
            "{detections} windows over 1 s of 20 Hz footage, every timestamp exactly 12500 us apart (80 Hz), in {elapsed:.1?}"
        ),
    );
}

// ---- 7: overfit a single scene ---------------------------------------------

#[test]
fn criterion_7_overfit_run_converges_on_one_scene() {
    let started = Instant::now();
    let spec = SceneSpec::random(32, 32, 1, 0.25, 3).unwrap();
    let (frames, boxes) = spec.render().unwrap();
    let stream = simulate_events(&frames, spec.threshold).unwrap();
    let cfg = ModelConfig::toy();
    let samples: Vec<Sample<f32>> =
        training_samples(&frames, &boxes, &stream, cfg.t_steps).unwrap();
    assert!(!samples.is_empty());

    let (model, mut store) = Model::build::<f32>(cfg).unwrap();
    // 500 steps total: 400 with adaptive normalizer statistics, then a
    // re-estimation and a 100-step tail against frozen statistics so the
    // trained forward is exactly the inference forward.
    let tc = TrainCfg { lr: 1e-3, weight_decay: 0.01, milestones: vec![400], frozen_stats: false };
    let frozen = TrainCfg { frozen_stats: true, ..tc.clone() };
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..500 {
        if step == 400 {
            calibrate_stats(&model, &mut store, &samples).unwrap();
        }
        let cfg_step = if step < 400 { &tc } else { &frozen };
        let (loss, _) = train_step(&model, &mut store, &samples, cfg_step).unwrap();
        if step == 0 {
            first = loss;
        }
        last = loss;
    }
    assert!(
        last < 0.25 * first,
        "loss only moved from {first:.4} to {last:.4} over 500 steps"
    );

    let mut ious = Vec::new();
    for s in &samples {
        let (dets, _) = infer(&model, &store, s).unwrap();
        let best = dets
            .iter()
            .max_by(|a, b| a.conf.total_cmp(&b.conf))
            .expect("at least one detection");
        let det = spikewin::model::TargetBox { cx: best.cx, cy: best.cy, w: best.w, h: best.h };
        let label = &s.boxes[0];
        ious.push(iou(&det, label));
    }
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let elapsed = started.elapsed();
    assert!(mean_iou >= 0.8, "mean training IoU {mean_iou:.3} < 0.8 ({ious:?})");
    assert!(elapsed.as_secs() < 600, "overfit run took {elapsed:?}, budget 600 s");
    pass(
        7,
        &format!(
            "500-step overfit: loss {first:.4} → {last:.4} ({:.3}x), mean training IoU {mean_iou:.3}, in {elapsed:.1?}",
            last / first
        ),
    );
}

// ---- 8: full-scale preset builds the expected pyramid ----------------------

#[test]
fn criterion_8_full_scale_preset_builds_expected_grids() {
    let cfg = ModelConfig::paper();
    assert_eq!(cfg.input_h, 480);
    assert_eq!(cfg.input_w, 640);
    let want = [(120, 160), (60, 80), (30, 40), (15, 20)];
    assert_eq!(cfg.stage_grids().unwrap(), want);

    let (model, store) = Model::build::<f32>(cfg).unwrap();
    assert_eq!(model.stage_grids(), &want);
    assert_eq!(model.head_grid(), (15, 20));

    // The nominal window is 8; every later stage clamps to the largest size
    // that divides its grid.
    let mut effective = Vec::new();
    for (stage, &grid) in want.iter().enumerate() {
        let plain = model.config.layout_for(grid, 0).unwrap();
        let shifted = model.config.layout_for(grid, 1).unwrap();
        assert_eq!(plain.shift, 0);
        assert_eq!(shifted.shift, plain.m / 2);
        assert_eq!(grid.0 % plain.m, 0, "stage {stage} window must tile its grid");
        assert_eq!(grid.1 % plain.m, 0);
        effective.push(plain.m);
    }
    assert_eq!(effective, vec![8, 5, 5, 5]);

    let params = store.keys().count();
    pass(
        8,
        &format!(
            "full-scale preset builds grids {want:?} with effective windows {effective:?} ({params} parameter tensors)"
        ),
    );
}

// ---- 9: structural fuzz suites ---------------------------------------------

#[test]
fn criterion_9_structural_fuzz_suites() {
    let cases = 1000;

    // (a) The learned pair-similarity map is exactly symmetric.
    let mut runner = fuzz_runner(cases);
    runner
        .run(&(any::<u64>(), 2usize..6, 1usize..6), |(seed, n, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let sb = SemanticBias::init(&mut store, "sym", c, &mut rng)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut tape = Tape::<f64>::new();
            let mut ctx = Ctx::new(&store, true);
            let xdata: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let x = tape.constant(xdata, &[n, c]);
            let s = sb.apply(&mut tape, &mut ctx, x)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let v = tape.value(s);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(
                        v[i * n + j].to_bits(),
                        v[j * n + i].to_bits(),
                        "similarity map not symmetric at ({}, {})",
                        i,
                        j
                    );
                }
            }
            Ok(())
        })
        .unwrap_or_else(|e| panic!("similarity-symmetry fuzz failed: {e}"));

    // (b) Softmax rows always sum to one.
    let mut runner = fuzz_runner(cases);
    runner
        .run(&(any::<u64>(), 1usize..7, 1usize..9), |(seed, rows, cols)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f64>::new();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-25.0..25.0)).collect();
            let x = tape.constant(data, &[rows, cols]);
            let y = tape.softmax_rows(x).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let v = tape.value(y);
            for r in 0..rows {
                let sum: f64 = v[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", r, sum);
                for &p in &v[r * cols..(r + 1) * cols] {
                    prop_assert!(p >= 0.0, "negative probability {}", p);
                }
            }
            Ok(())
        })
        .unwrap_or_else(|e| panic!("softmax-row fuzz failed: {e}"));

    // (c) Window partition followed by its reverse is the identity, shifted
    // or not.
    let mut runner = fuzz_runner(cases);
    runner
        .run(
            &(1usize..5, 1usize..5, 1usize..5, any::<bool>()),
            |(m, mh, mw, shifted)| {
                let (h, w) = (m * mh, m * mw);
                let shift = if shifted { m / 2 } else { 0 };
                let layout = WindowLayout::new(h, w, m, shift)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                let perm = layout.partition_perm();
                let rev = layout.reverse_perm();
                let data: Vec<usize> = (0..h * w).collect();
                let gathered: Vec<usize> = perm.iter().map(|&p| data[p]).collect();
                let restored: Vec<usize> = rev.iter().map(|&p| gathered[p]).collect();
                prop_assert_eq!(restored, data, "partition/reverse is not the identity");
                Ok(())
            },
        )
        .unwrap_or_else(|e| panic!("window-permutation fuzz failed: {e}"));

    // (d) Voxelization conserves the event count when the interval covers the
    // whole stream.
    let mut runner = fuzz_runner(cases);
    runner
        .run(
            &(any::<u64>(), 2u16..12, 2u16..12, 1usize..5, 0usize..200),
            |(seed, w, h, t_bins, n)| {
                let stream = random_stream(seed, w, h, n);
                let grid = voxelize(&stream, 0, 1_000_001, t_bins)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(grid.sum(), n as f64, "voxel mass must equal the event count");
                Ok(())
            },
        )
        .unwrap_or_else(|e| panic!("voxel-conservation fuzz failed: {e}"));

    // (e) Event files round-trip exactly.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.txt");
    let mut runner = fuzz_runner(cases);
    runner
        .run(
            &(any::<u64>(), 2u16..12, 2u16..12, 0usize..150),
            |(seed, w, h, n)| {
                let stream = random_stream(seed, w, h, n);
                write_events(&path, &stream).map_err(|e| TestCaseError::fail(e.to_string()))?;
                let back = read_events(&path).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(back.width(), stream.width());
                prop_assert_eq!(back.height(), stream.height());
                prop_assert_eq!(back.events(), stream.events());
                Ok(())
            },
        )
        .unwrap_or_else(|e| panic!("event-roundtrip fuzz failed: {e}"));

    pass(
        9,
        &format!(
            "five structural fuzz suites held over {cases} cases each: similarity symmetry, softmax row sums, window partition identity, voxel mass conservation, event file round-trip"
        ),
    );
}

// ---- shared helpers ---------------------------------------------------------

fn random_stream(seed: u64, w: u16, h: u16, n: usize) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = EventStream::new(w, h);
    let mut t = 0i64;
    for _ in 0..n {
        t += rng.gen_range(0..10_000);
        t = t.min(1_000_000);
        stream
            .push(Event {
                t,
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            })
            .unwrap();
    }
    stream
}

fn random_sample(cfg: &ModelConfig, seed: u64) -> Sample<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.input_h, cfg.input_w);
    let frame = Tensor::new(
        &[3, h, w],
        (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0) as f32).collect(),
    )
    .unwrap();
    let mut stream = EventStream::new(w as u16, h as u16);
    let mut t = 0i64;
    for _ in 0..200 {
        t += rng.gen_range(1..5_000);
        stream
            .push(Event {
                t,
                x: rng.gen_range(0..w as u16),
                y: rng.gen_range(0..h as u16),
                p: if rng.gen_bool(0.5) { 1 } else { -1 },
            })
            .unwrap();
    }
    let voxels = voxelize(&stream, 0, 1_000_000, cfg.t_steps).unwrap();
    Sample { frame, voxels: Some(voxels), boxes: vec![] }
}
