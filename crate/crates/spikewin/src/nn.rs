//! Small parameterized layers shared by both branches. Each holds
//! [`ParamKey`]s into a store and records its ops through a [`Ctx`], so one
//! set of weights can serve any number of forward passes, and gradient
//! routing stays uniform.

use rand::Rng;

use crate::error::Result;
use crate::optim::{Ctx, ParamKey, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Weight init: truncated normal, std 0.02, seeded by the caller's RNG.
pub const INIT_STD: f64 = 0.02;

/// Fully connected `(N, d_in) -> (N, d_out)` with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamKey,
    pub b: ParamKey,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert(
            &format!("{name}.w"),
            Tensor::trunc_normal(&[d_in, d_out], INIT_STD, rng),
        )?;
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        x: ValueId,
    ) -> Result<ValueId> {
        let w = ctx.id(tape, self.w);
        let b = ctx.id(tape, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias_row(y, b)
    }
}

/// Per-row layer normalization with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamKey,
    pub beta: ParamKey,
    pub c: usize,
}

impl LayerNorm {
    pub fn init<R: Real>(store: &mut ParamStore<R>, name: &str, c: usize) -> Result<Self> {
        let gamma = store.insert(&format!("{name}.gamma"), Tensor::full(&[c], R::one()))?;
        let beta = store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]))?;
        Ok(LayerNorm { gamma, beta, c })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        x: ValueId,
    ) -> Result<ValueId> {
        let gamma = ctx.id(tape, self.gamma);
        let beta = ctx.id(tape, self.beta);
        tape.layer_norm(x, gamma, beta)
    }
}

/// Per-column batch normalization with running statistics held as store
/// buffers. Training mode uses batch statistics and queues a momentum-0.9
/// running update on the [`Ctx`]; eval mode reads the buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamKey,
    pub beta: ParamKey,
    pub run_mean: ParamKey,
    pub run_var: ParamKey,
    pub c: usize,
}

impl BatchNorm {
    pub fn init<R: Real>(store: &mut ParamStore<R>, name: &str, c: usize) -> Result<Self> {
        let gamma = store.insert(&format!("{name}.gamma"), Tensor::full(&[c], R::one()))?;
        let beta = store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]))?;
        let run_mean = store.insert_buffer(&format!("{name}.run_mean"), Tensor::zeros(&[c]))?;
        let run_var =
            store.insert_buffer(&format!("{name}.run_var"), Tensor::full(&[c], R::one()))?;
        Ok(BatchNorm {
            gamma,
            beta,
            run_mean,
            run_var,
            c,
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        x: ValueId,
    ) -> Result<ValueId> {
        let gamma = ctx.id(tape, self.gamma);
        let beta = ctx.id(tape, self.beta);
        if ctx.train {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta)?;
            ctx.stat_updates.push((self.run_mean, mean));
            ctx.stat_updates.push((self.run_var, var));
            Ok(y)
        } else {
            let mean = ctx.buffer(self.run_mean).to_vec();
            let var = ctx.buffer(self.run_var).to_vec();
            tape.batch_norm_eval(x, gamma, beta, &mean, &var)
        }
    }
}

/// Transformer feed-forward: Linear → GELU → Linear, expansion `ratio`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::init(store, &format!("{name}.fc1"), c, c * ratio, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), c * ratio, c, rng)?,
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        x: ValueId,
    ) -> Result<ValueId> {
        let h = self.fc1.apply(tape, ctx, x)?;
        let h = tape.gelu(h);
        self.fc2.apply(tape, ctx, h)
    }
}

/// 2-d convolution weights (`cout, cin, k, k`) with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamKey,
    pub b: ParamKey,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert(
            &format!("{name}.w"),
            Tensor::trunc_normal(&[cout, cin, k, k], INIT_STD, rng),
        )?;
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        ctx: &mut Ctx<R>,
        x: ValueId,
    ) -> Result<ValueId> {
        let w = ctx.id(tape, self.w);
        let b = ctx.id(tape, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}
