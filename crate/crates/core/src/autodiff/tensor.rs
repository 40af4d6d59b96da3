use rand::Rng;
use serde_json::Value;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(vec![1], value)
    }

    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            *x = rng.random_range(-bound..=bound);
        }
        t
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Nested JSON arrays following `shape`.
    pub fn to_json(&self) -> Value {
        fn nest(shape: &[usize], data: &[f64]) -> Value {
            match shape {
                [] | [_] => Value::Array(data.iter().map(|&x| Value::from(x)).collect()),
                [n, rest @ ..] => {
                    let stride = data.len() / n.max(&1);
                    Value::Array(
                        (0..*n)
                            .map(|i| nest(rest, &data[i * stride..(i + 1) * stride]))
                            .collect(),
                    )
                }
            }
        }
        nest(&self.shape, &self.data)
    }

    /// Reads a nested array into a tensor of the expected shape.
    pub fn from_json(value: &Value, shape: &[usize]) -> Result<Self> {
        fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<()> {
            match v {
                Value::Array(items) => items.iter().try_for_each(|x| flatten(x, out)),
                Value::Number(n) => {
                    out.push(n.as_f64().ok_or_else(|| Error::Schema("bad number".into()))?);
                    Ok(())
                }
                other => Err(Error::Schema(format!("expected number, got {other}"))),
            }
        }
        let mut data = Vec::new();
        flatten(value, &mut data)?;
        Tensor::new(shape.to_vec(), data)
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `self ← tau·online + (1−tau)·self`, parameter by parameter.
    pub fn polyak_from(&mut self, online: &ParamSet, tau: f64) {
        debug_assert_eq!(self.names, online.names);
        for (dst, src) in self.tensors.iter_mut().zip(&online.tensors) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }

    /// Scales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        norm
    }

    pub fn to_json(&self) -> Value {
        let map = self
            .iter()
            .map(|(n, t)| (n.to_string(), t.to_json()))
            .collect::<serde_json::Map<_, _>>();
        Value::Object(map)
    }

    /// Overwrites every parameter from a JSON object keyed by name. Shapes
    /// come from `self`; missing or extra names are schema errors.
    pub fn load_json(&mut self, value: &Value) -> Result<()> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("params must be an object".into()))?;
        if obj.len() != self.len() {
            return Err(Error::Schema(format!(
                "expected {} parameters, found {}",
                self.len(),
                obj.len()
            )));
        }
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            let v = obj
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))?;
            let loaded = Tensor::from_json(v, &t.shape).map_err(|e| Error::Schema(format!("parameter {name}: {e}")))?;
            t.data = loaded.data;
        }
        Ok(())
    }
}
