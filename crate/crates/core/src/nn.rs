//! Named parameters and the small set of layers every block is built from.
//!
//! A [`ParamStore`] owns all weights of a model under hierarchical dotted
//! names. Layers only hold [`ParamId`]s; a forward pass first binds the
//! store to a [`Graph`], producing a [`Ctx`] that maps ids to graph vars.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    CheckpointEntry, Conv3dSpec, ConvTranspose3dSpec, Gradients, Graph, Real, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrites every parameter whose name matches `pred` with zeros.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for i in 0..self.values.len() {
            if pred(&self.names[i]) {
                let t = Rc::make_mut(&mut self.values[i]);
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Records every parameter on `graph`: as leaves when `trainable`, as
    /// constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Ctx<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf_shared(Rc::clone(v))
                } else {
                    graph.constant_shared(Rc::clone(v))
                }
            })
            .collect();
        Ctx { graph, vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                tensor: t.cast(),
            })
            .collect()
    }

    /// Loads checkpoint entries; names and shapes must match exactly.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: format!("{} entries, model has {}", entries.len(), self.len()),
            });
        }
        for e in entries {
            let id = self.id(&e.name).ok_or_else(|| Error::Format {
                kind: "checkpoint",
                detail: format!("unknown parameter {}", e.name),
            })?;
            if e.tensor.shape() != self.get(id).shape() {
                return Err(Error::shape("checkpoint", e.tensor.shape(), self.get(id).shape()));
            }
            self.values[id.0] = Rc::new(e.tensor.cast());
        }
        Ok(())
    }
}

/// Parameters of one forward pass, recorded on a graph.
pub struct Ctx<'g, T> {
    graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Ctx<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradient of every parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); v.value().numel()])
            })
            .collect()
    }
}

/// Creates parameters under a name prefix with the default initialization:
/// weights uniform in ±1/√fan_in, biases zero, norm gains one.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            prefix: self.full(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = self.rng.uniform_vec(n, -bound, bound);
        let t = Tensor::from_f64(shape, &data)?;
        let full = self.full(name);
        self.store.add(&full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(&full, Tensor::full(shape, T::lit(value)))
    }

    /// Adds an explicitly initialized parameter.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(&full, value)
    }

    /// Replaces the values of a parameter created earlier.
    pub fn overwrite(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = self.store.get_mut(id);
        if t.numel() != values.len() {
            return Err(Error::shape("overwrite", t.shape(), &[values.len()]));
        }
        for (dst, &v) in t.data_mut().iter_mut().zip(values) {
            *dst = T::lit(v);
        }
        Ok(())
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    /// Cubic-kernel convolution with bias.
    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv3dSpec,
    ) -> Result<Conv3d> {
        self.conv_shaped(name, in_ch, out_ch, [kernel; 3], spec)
    }

    pub fn conv_shaped(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
    ) -> Result<Conv3d> {
        if spec.groups == 0 || !in_ch.is_multiple_of(spec.groups) || !out_ch.is_multiple_of(spec.groups) {
            return Err(invalid!("conv {name}: channels {in_ch}->{out_ch} not divisible by {} groups", spec.groups));
        }
        let icg = in_ch / spec.groups;
        let fan_in = icg * kernel.iter().product::<usize>();
        let mut b = self.scope(name);
        let [kd, kh, kw] = kernel;
        let weight = b.uniform("weight", &[out_ch, icg, kd, kh, kw], fan_in)?;
        let bias = b.constant("bias", &[out_ch], 0.0)?;
        Ok(Conv3d {
            weight,
            bias: Some(bias),
            spec,
        })
    }

    pub fn conv_transpose(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvTranspose3dSpec,
    ) -> Result<ConvTranspose3d> {
        let fan_in = in_ch * kernel.pow(3);
        let mut b = self.scope(name);
        let weight = b.uniform("weight", &[in_ch, out_ch, kernel, kernel, kernel], fan_in)?;
        let bias = b.constant("bias", &[out_ch], 0.0)?;
        Ok(ConvTranspose3d { weight, bias, spec })
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let mut b = self.scope(name);
        let weight = b.uniform("weight", &[fan_in, fan_out], fan_in)?;
        let bias = if bias {
            Some(b.constant("bias", &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn norm(&mut self, name: &str, channels: usize, kind: NormKind) -> Result<Norm> {
        let mut b = self.scope(name);
        let weight = b.constant("weight", &[channels], 1.0)?;
        let bias = b.constant("bias", &[channels], 0.0)?;
        Ok(Norm { weight, bias, kind })
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv3d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvTranspose3dSpec,
}

impl ConvTranspose3d {
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv_transpose3d(ctx.p(self.weight), Some(ctx.p(self.bias)), self.spec)
    }
}

/// Dense layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Each channel over its spatial positions.
    Instance,
    /// Across channels at each position.
    Channel,
}

/// Normalization with a per-channel gain and shift on a `(C, ...)` map.
#[derive(Debug, Clone)]
pub struct Norm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: NormKind,
}

impl Norm {
    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let y = match self.kind {
            NormKind::Instance => x.instance_norm()?,
            NormKind::Channel => x.channel_norm()?,
        };
        let mut bshape = vec![1; shape.len()];
        bshape[0] = shape[0];
        let w = ctx.p(self.weight).reshape(&bshape)?;
        let b = ctx.p(self.bias).reshape(&bshape)?;
        y.mul(w)?.add(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchical_names_and_init() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut stage = b.scope("stage0");
        let conv = stage
            .scope("block0")
            .scope("gsc")
            .conv("conv1", 4, 6, 3, Conv3dSpec::new(1, 1))
            .unwrap();
        let w = store.get(conv.weight);
        assert_eq!(store.name(conv.weight), "stage0.block0.gsc.conv1.weight");
        let bound = 1.0 / (4.0f64 * 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(store.get(conv.bias.unwrap()).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.num_scalars(), 6 * 4 * 27 + 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn norm_affine_applies_per_channel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let norm = Builder::new(&mut store, &mut rng)
            .norm("n", 2, NormKind::Instance)
            .unwrap();
        store.get_mut(norm.weight).data_mut().copy_from_slice(&[2.0, 0.0]);
        store.get_mut(norm.bias).data_mut().copy_from_slice(&[0.0, 5.0]);
        let g = Graph::new();
        let ctx = store.bind(&g, false);
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, 7.0, 9.0]).unwrap());
        let y = norm.forward(&ctx, x).unwrap().value();
        assert!((y.at(&[0, 0]) + 2.0).abs() < 1e-4);
        assert_eq!(y.at(&[1, 1]), 5.0);
    }

    #[test]
    fn checkpoint_entries_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(2);
        Builder::new(&mut store, &mut rng).linear("fc", 3, 2, true).unwrap();
        let entries = store.to_entries();
        let mut other = store.clone();
        other.zero_where(|_| true);
        other.load_entries(&entries).unwrap();
        assert_eq!(other.to_entries(), entries);
    }
}
