//! Command implementations. Every artifact a command writes starts with
//! the `#`-prefixed config echo so results stay attributable to the exact
//! settings that produced them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use spikewin::ann::DenseBlock;
use spikewin::ckpt;
use spikewin::energy::{self, EnergyConstants};
use spikewin::error::{Error, Result};
use spikewin::events::{
    read_events, read_frames, simulate_events, sliding_windows, voxelize, write_events,
    write_frames, EventStream, FrameSequence,
};
use spikewin::gradcheck::{check_params, finite_diff_check};
use spikewin::lif::{lif_sequence, LIFParams};
use spikewin::model::{
    calibrate_stats, infer, iou, train_step, Detection, Diagnostics, Model, Sample, TargetBox,
    TrainCfg,
};
use spikewin::optim::{Ctx, ParamStore};
use spikewin::scene::{frame_chw, training_samples};
use spikewin::tape::Tape;
use spikewin::tensor::{Real, Tensor};
use spikewin::window::WindowLayout;

use crate::config::RunConfig;

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let spec = cfg.scene_spec()?;
    let (frames, boxes) = spec.render()?;
    let events = simulate_events(&frames, spec.threshold)?;
    write_frames(&out.join("frames"), "index.txt", &frames)?;
    write_events(&out.join("events.txt"), &events)?;
    let mut csv = cfg.comment_echo();
    csv.push_str("# columns: frame,t_us,obj,cx,cy,w,h\n");
    let mut rows = 0usize;
    for (i, frame_boxes) in boxes.iter().enumerate() {
        for (j, b) in frame_boxes.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i,
                frames.timestamp_us(i),
                j,
                b.cx,
                b.cy,
                b.w,
                b.h
            ));
            rows += 1;
        }
    }
    fs::write(out.join("boxes.csv"), csv)?;
    fs::write(out.join("config.txt"), cfg.echo())?;
    println!(
        "wrote {} frames, {} events, {} box rows to {}",
        frames.len(),
        events.len(),
        rows,
        out.display()
    );
    Ok(())
}

fn read_boxes(path: &Path, n_frames: usize) -> Result<Vec<Vec<TargetBox>>> {
    let text = fs::read_to_string(path)?;
    let mut out = vec![Vec::new(); n_frames];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let p: Vec<&str> = s.split(',').collect();
        if p.len() != 7 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 7 box columns, got {}", p.len()),
            });
        }
        let bad = |col: &str| Error::Parse {
            line,
            msg: format!("bad number '{col}'"),
        };
        let frame: usize = p[0].parse().map_err(|_| bad(p[0]))?;
        if frame >= n_frames {
            return Err(Error::Parse {
                line,
                msg: format!("frame index {frame} beyond {n_frames} frames"),
            });
        }
        out[frame].push(TargetBox {
            cx: p[3].parse().map_err(|_| bad(p[3]))?,
            cy: p[4].parse().map_err(|_| bad(p[4]))?,
            w: p[5].parse().map_err(|_| bad(p[5]))?,
            h: p[6].parse().map_err(|_| bad(p[6]))?,
        });
    }
    Ok(out)
}

fn load_data(cfg: &RunConfig) -> Result<(FrameSequence, Vec<Vec<TargetBox>>, EventStream)> {
    let dir = Path::new(&cfg.data_dir);
    let frames = read_frames(&dir.join("frames").join("index.txt"))?;
    let events = read_events(&dir.join("events.txt"))?;
    let boxes = read_boxes(&dir.join("boxes.csv"), frames.len())?;
    Ok((frames, boxes, events))
}

fn build_samples<R: Real>(
    cfg: &RunConfig,
    frames: &FrameSequence,
    boxes: &[Vec<TargetBox>],
    events: &EventStream,
) -> Result<Vec<Sample<R>>> {
    let mut samples = training_samples::<R>(frames, boxes, events, cfg.resolved_t_steps())?;
    if cfg.frames_only {
        for s in &mut samples {
            s.voxels = None;
        }
    }
    Ok(samples)
}

fn load_checked<R: Real>(
    cfg: &RunConfig,
    path: &Path,
    store: &mut ParamStore<R>,
) -> Result<()> {
    let stored = ckpt::read_config(path)?;
    if stored != cfg.model_signature() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written for a different model\n-- checkpoint --\n{stored}\n-- this run --\n{}",
            cfg.model_signature()
        )));
    }
    ckpt::load_into(path, store)
}

pub fn train<R: Real>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out)?;
    let (model, mut store) = Model::build::<R>(cfg.to_model_config()?)?;
    if let Some(cp) = resume {
        load_checked(cfg, cp, &mut store)?;
        println!("resumed from {} at step {}", cp.display(), store.step_count());
    }
    let (frames, boxes, events) = load_data(cfg)?;
    let samples = build_samples::<R>(cfg, &frames, &boxes, &events)?;
    let tc = cfg.train_cfg();
    let n = samples.len();
    let k = cfg.batch.clamp(1, n);
    let freeze_start = cfg.steps.saturating_sub(cfg.freeze_tail);
    let mut calibrated = false;
    let mut log = cfg.comment_echo();
    log.push_str("step,loss,firing\n");
    while store.step_count() < cfg.steps {
        let i = store.step_count() as usize;
        let frozen = cfg.freeze_tail > 0 && store.step_count() >= freeze_start;
        if frozen && !calibrated {
            calibrate_stats(&model, &mut store, &samples)?;
            calibrated = true;
        }
        let step_tc = TrainCfg { frozen_stats: frozen, ..tc.clone() };
        let batch: Vec<Sample<R>> = (0..k).map(|j| samples[(i * k + j) % n].clone()).collect();
        let (loss, diag) = train_step(&model, &mut store, &batch, &step_tc)?;
        let rates: Vec<f64> = diag.firing.layers().map(|(_, r)| r).collect();
        let firing = if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        };
        log.push_str(&format!("{},{},{}\n", store.step_count(), loss, firing));
        if store.step_count() % 100 == 0 || store.step_count() == cfg.steps {
            println!("step {:>5}  loss {loss:.6}  firing {firing:.4}", store.step_count());
        }
    }
    fs::write(out.join("loss.csv"), log)?;
    // With a frozen tail the statistics were re-estimated when the tail
    // began and the weights have since been tuned against them; touching
    // them now would undo that. Otherwise refresh once at the end.
    if !calibrated {
        calibrate_stats(&model, &mut store, &samples)?;
    }
    ckpt::save(&out.join("model.ckpt"), &cfg.model_signature(), &store)?;
    fs::write(out.join("config.txt"), cfg.echo())?;
    println!(
        "saved checkpoint at step {} to {}",
        store.step_count(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn det_box(d: &Detection) -> TargetBox {
    TargetBox {
        cx: d.cx,
        cy: d.cy,
        w: d.w,
        h: d.h,
    }
}

/// Highest-confidence detections first.
fn by_conf(dets: &[Detection]) -> Vec<Detection> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.conf.partial_cmp(&a.conf).unwrap_or(std::cmp::Ordering::Equal));
    v
}

pub fn eval<R: Real>(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (model, mut store) = Model::build::<R>(cfg.to_model_config()?)?;
    load_checked(cfg, checkpoint, &mut store)?;
    let (frames, boxes, events) = load_data(cfg)?;
    let samples = build_samples::<R>(cfg, &frames, &boxes, &events)?;
    let mut csv = cfg.comment_echo();
    csv.push_str("frame,t_us,obj,cx,cy,w,h,conf,iou\n");
    let mut ious = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let (dets, _) = infer(&model, &store, s)?;
        let ranked = by_conf(&dets);
        // each label scores against the best of the top-L detections,
        // where L is the number of labels in the frame
        let top = &ranked[..s.boxes.len().clamp(1, ranked.len())];
        let frame_idx = si + 1; // sample i pairs events with frame i+1
        for (oi, tb) in s.boxes.iter().enumerate() {
            let (best, best_iou) = top
                .iter()
                .map(|d| (d, iou(&det_box(d), tb)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                .expect("top is non-empty");
            ious.push(best_iou);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                frame_idx,
                frames.timestamp_us(frame_idx),
                oi,
                best.cx,
                best.cy,
                best.w,
                best.h,
                best.conf,
                best_iou
            ));
        }
    }
    let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
    fs::write(out.join("eval.csv"), csv)?;
    let mut summary = cfg.comment_echo();
    summary.push_str(&format!("mean_iou = {mean}\nframes = {}\n", samples.len()));
    fs::write(out.join("eval_summary.txt"), summary)?;
    println!("mean IoU over {} labels: {mean:.4}", ious.len());
    Ok(())
}

pub fn async_infer<R: Real>(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (model, mut store) = Model::build::<R>(cfg.to_model_config()?)?;
    load_checked(cfg, checkpoint, &mut store)?;
    let (frames, _boxes, events) = load_data(cfg)?;
    let windows = sliding_windows(&events, cfg.window_us, cfg.stride_us)?;
    let t0 = frames.timestamp_us(0);
    let dt = frames.dt_us();
    let mut csv = cfg.comment_echo();
    csv.push_str("t_us,t_s,frame,cx,cy,w,h,conf\n");
    for &(start, end) in &windows {
        // most recent frame at or before the window end; events fill the
        // gap since that frame
        let fi = (((end - t0) / dt).max(0) as usize).min(frames.len() - 1);
        let voxels = if cfg.frames_only {
            None
        } else {
            Some(voxelize(&events, start, end, cfg.resolved_t_steps())?)
        };
        let sample = Sample {
            frame: frame_chw::<R>(&frames, fi)?,
            voxels,
            boxes: vec![],
        };
        let (dets, _) = infer(&model, &store, &sample)?;
        let best = by_conf(&dets)[0];
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            end,
            end as f64 / 1.0e6,
            fi,
            best.cx,
            best.cy,
            best.w,
            best.h,
            best.conf
        ));
    }
    fs::write(out.join("async.csv"), csv)?;
    println!(
        "{} detection windows over {} frames ({} us stride)",
        windows.len(),
        frames.len(),
        cfg.stride_us
    );
    Ok(())
}

pub fn energy_report<R: Real>(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out)?;
    let (model, mut store) = Model::build::<R>(cfg.to_model_config()?)?;
    if let Some(cp) = checkpoint {
        load_checked(cfg, cp, &mut store)?;
    }
    let (frames, boxes, events) = load_data(cfg)?;
    let samples = build_samples::<R>(cfg, &frames, &boxes, &events)?;
    let mut diag = Diagnostics::default();
    for s in &samples {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&store, false);
        model.forward_sample(&mut tape, &mut ctx, s, &mut diag)?;
    }
    let counts = energy::count_ops(&model.config)?;
    let consts = EnergyConstants {
        e_a: cfg.e_a,
        e_m: cfg.e_m,
    };
    let rep = energy::estimate(&counts, &diag.firing, &consts)?;
    fs::write(out.join("energy.csv"), cfg.comment_echo() + &rep.to_csv())?;
    fs::write(out.join("energy.txt"), cfg.comment_echo() + &rep.summary())?;
    print!("{}", rep.summary());
    Ok(())
}

struct SuiteRow {
    name: &'static str,
    max_err: f64,
    tol: f64,
}

/// Chained core ops — normalization, matmul, bias, GELU, softmax, logistic
/// loss — against central differences. The `corrupt` hook adds a term that
/// moves the forward value but never reaches the backward pass, which the
/// check must flag.
fn core_ops_suite(seed: u64, corrupt: bool) -> Result<SuiteRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.8).map_err(|e| Error::config(e.to_string()))?;
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(normal)).collect() };
    let x = Tensor::new(&[3, 4], draw(12))?;
    let w1 = draw(20);
    let b1 = draw(5);
    let w2 = draw(5);
    let gamma: Vec<f64> = draw(4).iter().map(|v| 1.0 + 0.3 * v).collect();
    let beta = draw(4);
    let targets = [1.0, 0.0, 1.0];
    let max_err = finite_diff_check(&x, 1e-5, |tape, xid| {
        let g = tape.constant(gamma.clone(), &[4]);
        let b = tape.constant(beta.clone(), &[4]);
        let h0 = tape.layer_norm(xid, g, b)?;
        let w = tape.constant(w1.clone(), &[4, 5]);
        let h1 = tape.matmul(h0, w)?;
        let bias = tape.constant(b1.clone(), &[5]);
        let h2 = tape.add_bias_row(h1, bias)?;
        let h3 = tape.gelu(h2);
        let h4 = tape.softmax_rows(h3)?;
        let wv = tape.constant(w2.clone(), &[5, 1]);
        let z = tape.matmul(h4, wv)?;
        let l = tape.bce_with_logits(z, &targets)?;
        let mut loss = tape.mean_all(l);
        if corrupt {
            let v = tape.value(xid)[0];
            let c = tape.constant(vec![0.05 * v], &[1]);
            loss = tape.add(loss, c)?;
        }
        Ok(loss)
    })?;
    Ok(SuiteRow {
        name: "core-ops",
        max_err,
        tol: 1e-6,
    })
}

/// A plain + shifted dense attention block pair on a 4×4 token grid,
/// every parameter coordinate against central differences.
fn attention_pair_suite(seed: u64) -> Result<SuiteRow> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e57);
    let plain = WindowLayout::new(4, 4, 2, 0)?;
    let shifted = WindowLayout::new(4, 4, 2, 1)?;
    let b0 = DenseBlock::init(&mut store, "gc.b0", 8, 2, plain, 1.0, 1.0, &mut rng)?;
    let b1 = DenseBlock::init(&mut store, "gc.b1", 8, 2, shifted, 1.0, 1.0, &mut rng)?;
    let normal = Normal::new(0.0, 0.5).map_err(|e| Error::config(e.to_string()))?;
    let xdata: Vec<f64> = (0..16 * 8).map(|_| rng.sample(normal)).collect();
    let report = check_params(&mut store, 1e-4, |tape, ctx| {
        let x = tape.constant(xdata.clone(), &[16, 8]);
        let (y0, _) = b0.apply(tape, ctx, x, None)?;
        let (y1, _) = b1.apply(tape, ctx, y0, None)?;
        Ok(tape.mean_all(y1))
    })?;
    Ok(SuiteRow {
        name: "attention-pair",
        max_err: report.max_rel_err,
        tol: 1e-4,
    })
}

/// Single neuron over three timesteps: the tape's surrogate backward
/// versus the hand-derived recurrence
/// `dH_t = c_t·sur'(H_t) + dV_t·(1−S_t)`, `dx_t = dH_t/τ`,
/// `dV_{t−1} = dH_t·(1−1/τ)`.
fn lif_bptt_suite() -> Result<SuiteRow> {
    let xs = [2.2, 0.4, 1.9];
    let cs = [1.0, 2.0, 3.0];
    let p = LIFParams::<f64>::standard();

    let mut tape = Tape::<f64>::new();
    let ids: Vec<_> = xs
        .iter()
        .map(|&x| Ok(tape.leaf(&Tensor::new(&[1], vec![x])?.with_grad())))
        .collect::<Result<_>>()?;
    let (spikes, _) = lif_sequence(&mut tape, &ids, &p)?;
    let mut loss = tape.scale(spikes[0], cs[0]);
    for t in 1..3 {
        let term = tape.scale(spikes[t], cs[t]);
        loss = tape.add(loss, term)?;
    }
    let grads = tape.backward(loss)?;

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
    let mut dx = [0.0; 3];
    for t in (0..3).rev() {
        let sur = 1.0 / (1.0 + (std::f64::consts::PI * (h[t] - v_th)).powi(2));
        let dh = cs[t] * sur + dv * (1.0 - s[t]);
        dx[t] = dh / tau;
        dv = dh * (1.0 - 1.0 / tau);
    }

    let mut max_err = 0.0f64;
    for t in 0..3 {
        let got = grads.dense(ids[t], 1)[0];
        let rel = (got - dx[t]).abs() / (dx[t].abs() + 1e-8);
        max_err = max_err.max(rel);
    }
    Ok(SuiteRow {
        name: "lif-bptt",
        max_err,
        tol: 1e-10,
    })
}

pub fn gradcheck_cmd(cfg: &RunConfig, out: Option<&Path>, corrupt: bool) -> Result<()> {
    let rows = vec![
        core_ops_suite(cfg.seed, corrupt)?,
        attention_pair_suite(cfg.seed)?,
        lif_bptt_suite()?,
    ];
    let mut table = String::from("suite,max_rel_err,tolerance,status\n");
    let mut failed = false;
    for r in &rows {
        let ok = r.max_err <= r.tol;
        failed |= !ok;
        table.push_str(&format!(
            "{},{:.3e},{:.0e},{}\n",
            r.name,
            r.max_err,
            r.tol,
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.csv"), cfg.comment_echo() + &table)?;
    }
    if failed {
        return Err(Error::Numeric(
            "a gradient-check suite exceeded its tolerance".into(),
        ));
    }
    Ok(())
}
