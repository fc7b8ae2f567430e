//! Parameter storage and the small set of layers shared by every module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::counter;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter tensors of one model instance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replace every tensor value, keeping names; shapes must match.
    pub fn load(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, (cur, new)) in self.tensors.iter().zip(&values).enumerate() {
            if cur.shape() != new.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}`: expected {:?}, got {:?}",
                    self.names[i],
                    cur.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] bound to one tape.
pub struct Bound<'t, T: Real> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Bind as differentiable leaves.
    pub fn params(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        Bound { tape, vars }
    }

    /// Bind as constants (inference).
    pub fn constants(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Bound { tape, vars }
    }

    /// Bind existing tape variables, in store order.
    pub fn from_vars(tape: &'t Tape<T>, vars: Vec<Var<'t, T>>) -> Self {
        Bound { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients in store order, zeros for parameters the loss ignores.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.take_or_zeros(v)).collect()
    }
}

/// Deterministic parameter initialiser with hierarchical names.
pub struct Builder<T: Real> {
    pub store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape.to_vec(), bound, &mut self.rng);
        self.store.push(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let t = Tensor::full(shape.to_vec(), T::c(value));
        self.store.push(self.full_name(name), t)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// `±1/√fan_in` uniform.
    Uniform,
    Zeros,
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        init: WeightInit,
    ) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::config(format!(
                "{name}: groups {groups} must divide {cin} and {cout}"
            )));
        }
        let fan_in = cin / groups * kernel * kernel;
        let shape = [cout, cin / groups, kernel, kernel];
        let weight = match init {
            WeightInit::Uniform => b.uniform(&format!("{name}.weight"), &shape, fan_in),
            WeightInit::Zeros => b.constant(&format!("{name}.weight"), &shape, 0.0),
        };
        let bias = bias.then(|| match init {
            WeightInit::Uniform => b.uniform(&format!("{name}.bias"), &[cout], fan_in),
            WeightInit::Zeros => b.constant(&format!("{name}.bias"), &[cout], 0.0),
        });
        Ok(Conv2d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    /// Stride-1 same-padded `k×k` convolution.
    pub fn same<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(
            b,
            name,
            cin,
            cout,
            kernel,
            1,
            kernel / 2,
            groups,
            bias,
            WeightInit::Uniform,
        )
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            p.get(self.weight),
            self.bias.map(|b| p.get(b)),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        (self.cout * (self.cin / self.groups) * self.kernel * self.kernel * ho * wo) as u64
    }

    pub fn num_params(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel
            + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Bias-free layer normalisation across channels at every pixel.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub weight: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, channels: usize) -> Self {
        ChannelNorm {
            weight: b.constant(&format!("{name}.weight"), &[channels, 1, 1], 1.0),
            channels,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mu = x.mean_axis(0)?;
        let centred = x.sub(mu)?;
        let var = centred.mul(centred)?.mean_axis(0)?;
        let inv = var.add_scalar(T::c(NORM_EPS)).powf(T::c(-0.5));
        x.mul(inv)?.mul(p.get(self.weight))
    }

    pub fn num_params(&self) -> usize {
        self.channels
    }
}

/// Named cost scope that is a no-op when counting is off.
pub(crate) fn scope(name: &str) -> counter::Scope {
    counter::scope(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_and_mac_formulas_match_tensors() {
        let mut b = Builder::<f64>::new(0);
        let c = Conv2d::new(&mut b, "c", 6, 4, 3, 2, 1, 2, true, WeightInit::Uniform).unwrap();
        assert_eq!(c.num_params(), b.store.num_scalars());
        let tape = Tape::new();
        let p = Bound::constants(&tape, &b.store);
        let x = tape.constant(Tensor::ones([6, 9, 7]));
        let (y, counts) = counter::record(|| c.forward(&p, x).unwrap());
        assert_eq!(y.shape(), vec![4, 5, 4]);
        assert_eq!(counts.total(), c.macs(9, 7));
    }

    #[test]
    fn channel_norm_unit_variance() {
        let mut b = Builder::<f64>::new(0);
        let n = ChannelNorm::new(&mut b, "n", 5);
        let tape = Tape::new();
        let p = Bound::constants(&tape, &b.store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([5, 2, 2], 3.0, &mut rng);
        let y = n.forward(&p, tape.constant(x.clone())).unwrap().value();
        for px in 0..4 {
            let col: Vec<f64> = (0..5).map(|c| x.data()[c * 4 + px]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for c in 0..5 {
                let expect = col[c] / (var + NORM_EPS).sqrt();
                assert!((y.data()[c * 4 + px] - expect).abs() < 1e-12);
            }
        }
    }
}
