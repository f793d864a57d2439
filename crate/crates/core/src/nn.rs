//! Parameterised layers shared by the model branches.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{init, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), group, init::fan_in_uniform(rng, &[outputs, inputs], inputs))?;
        let b = store.add(format!("{name}.b"), group, init::fan_in_uniform(rng, &[outputs], inputs))?;
        Ok(Self { w, b: Some(b), inputs, outputs })
    }

    /// A linear layer whose weights and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, group: ParamGroup, inputs: usize, outputs: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), group, Tensor::zeros(&[outputs, inputs]))?;
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[outputs]))?;
        Ok(Self { w, b: Some(b), inputs, outputs })
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), group, init::fan_in_uniform(rng, &[outputs, inputs], inputs))?;
        Ok(Self { w, b: None, inputs, outputs })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize, eps: f32) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[width], 1.0))?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[width]))?;
        Ok(Self { gain, bias, eps })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, T::from_f64_lossy(self.eps as f64))
    }
}

/// Stride-1 valid convolution or transposed convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub transposed: bool,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        transposed: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let shape = if transposed { [c_in, c_out, k, k] } else { [c_out, c_in, k, k] };
        let w = store.add(format!("{name}.w"), group, init::fan_in_uniform(rng, &shape, fan_in))?;
        let b = store.add(format!("{name}.b"), group, init::fan_in_uniform(rng, &[c_out], fan_in))?;
        Ok(Self { w, b, transposed })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        if self.transposed {
            g.conv_transpose2d(x, w, b)
        } else {
            g.conv2d(x, w, b)
        }
    }
}
