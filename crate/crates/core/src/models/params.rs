//! Named parameters, freeze flags and tape binding.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Result};
use crate::peft::nf4::QuantizedTensor;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Gradients keyed by full parameter name. A `BTreeMap` keeps iteration
/// order, and therefore every reduction over it, deterministic.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone)]
pub enum ParamValue<T> {
    Dense(Tensor<T>),
    /// Frozen 4-bit weight. `compute` caches `bf16_round(dequantize(q))`.
    Quantized {
        q: QuantizedTensor,
        compute: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ParamValue<T>,
    pub trainable: bool,
    /// Whether AdamW applies decoupled weight decay (weight matrices only).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    /// The tensor used in forward passes.
    pub fn tensor(&self) -> &Tensor<T> {
        match &self.value {
            ParamValue::Dense(t) => t,
            ParamValue::Quantized { compute, .. } => compute,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor().numel()
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.value, ParamValue::Quantized { .. })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value: ParamValue::Dense(value),
            trainable: true,
            decay,
        });
        Ok(())
    }

    /// Append a fully specified parameter.
    pub fn push(&mut self, param: Param<T>) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(invalid(format!("duplicate parameter name {:?}", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        let i = self.position(name)?;
        Ok(&mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(name)?.tensor())
    }

    /// Mutable access to a dense parameter.
    pub fn dense_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match &mut self.get_mut(name)?.value {
            ParamValue::Dense(t) => Ok(t),
            ParamValue::Quantized { .. } => Err(invalid(format!("parameter {name:?} is quantized"))),
        }
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    /// Copy of every parameter's forward tensor, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor().clone()))
            .collect()
    }
}

/// Lazily registers store parameters as leaves on a tape. Trainable
/// parameters become gradient-carrying leaves, frozen ones constants.
pub struct Binder<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    frozen: bool,
}

impl<'t, 's, T: Scalar> Binder<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            frozen: false,
        }
    }

    /// Bind every parameter as a constant regardless of its flag.
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        let i = self.store.position(name)?;
        if let Some(v) = self.vars.borrow()[i] {
            return Ok(v);
        }
        let p = self.store.by_index(i);
        let v = self.tape.leaf(p.tensor().clone(), p.trainable && !self.frozen);
        self.vars.borrow_mut()[i] = Some(v);
        Ok(v)
    }

    /// Gradients for every trainable parameter, zeros for those the loss did
    /// not reach or that were never bound.
    pub fn collect(&self, grads: &Gradients<T>, out: &mut GradMap<T>) {
        let vars = self.vars.borrow();
        for (p, v) in self.store.iter().zip(vars.iter()) {
            if !p.trainable || self.frozen {
                continue;
            }
            let g = v
                .and_then(|v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(p.tensor().shape()));
            match out.get_mut(&p.name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(p.name.clone(), g);
                }
            }
        }
    }
}

/// Sum per-sample gradient maps in order.
pub fn sum_grads<T: Scalar>(parts: Vec<GradMap<T>>) -> GradMap<T> {
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else {
        return GradMap::new();
    };
    for part in it {
        for (k, g) in part {
            match acc.get_mut(&k) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_grad_entry() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::ones(&[2]), false).unwrap();
        s.insert("b", Tensor::ones(&[2]), false).unwrap();
        s.get_mut("b").unwrap().trainable = false;
        let tape = Tape::new();
        let bind = Binder::new(&tape, &s);
        let loss = bind.get("a").unwrap().mul(bind.get("b").unwrap()).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let mut out = GradMap::new();
        bind.collect(&g, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out["a"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("x", Tensor::ones(&[1]), false).unwrap();
        assert!(s.insert("x", Tensor::ones(&[1]), false).is_err());
    }
}
