//! Parameter management for universal models.
//!
//! Every model parameter is registered in a [`ParamSet`] under a unique
//! hierarchical name and carries a [`ParamTag`] that partitions the model into
//! domain-shared and per-domain subsets. Non-optimized state (batch-norm
//! running statistics) registers as buffers in the same set so checkpoints can
//! capture the full model.
//!
//! During a forward pass a [`Ctx`] binds parameters onto the tape lazily: each
//! parameter becomes a leaf [`Var`] the first time a layer touches it, and is
//! reused afterwards. Parameters never touched by a step's graph are never
//! bound, which is what makes domain isolation exact — an optimizer step can
//! only move parameters the loss actually reached.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod init;
pub mod layers;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::domain::DomainId;
use crate::error::{Result, UodError};
use crate::tensor::{Tape, Var};

/// Ownership partition of a parameter or buffer.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Shared,
    Domain(DomainId),
}

/// One named tensor of model state.
#[derive(Debug)]
pub struct Param {
    pub id: usize,
    pub name: String,
    pub tag: ParamTag,
    pub value: ArrayD<f64>,
}

pub type SharedParam = Rc<RefCell<Param>>;

/// Registry of all parameters and buffers of one model, in registration order.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<SharedParam>,
    buffers: Vec<SharedParam>,
    names: HashMap<String, ()>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, tag: ParamTag, value: ArrayD<f64>, buffer: bool) -> SharedParam {
        assert!(
            self.names.insert(name.clone(), ()).is_none(),
            "duplicate parameter name {name}"
        );
        // Ids are unique across params and buffers of one set.
        let id = self.params.len() + self.buffers.len();
        let p = Rc::new(RefCell::new(Param { id, name, tag, value }));
        let list = if buffer { &mut self.buffers } else { &mut self.params };
        list.push(p.clone());
        p
    }

    /// Register an optimizable parameter.
    pub fn param(&mut self, name: impl Into<String>, tag: ParamTag, value: ArrayD<f64>) -> SharedParam {
        self.insert(name.into(), tag, value, false)
    }

    /// Register a non-optimized buffer (e.g. running statistics).
    pub fn buffer(&mut self, name: impl Into<String>, tag: ParamTag, value: ArrayD<f64>) -> SharedParam {
        self.insert(name.into(), tag, value, true)
    }

    pub fn params(&self) -> &[SharedParam] {
        &self.params
    }

    pub fn buffers(&self) -> &[SharedParam] {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.borrow().value.len()).sum()
    }

    /// Find a parameter or buffer by exact name.
    pub fn by_name(&self, name: &str) -> Option<SharedParam> {
        self.params
            .iter()
            .chain(&self.buffers)
            .find(|p| p.borrow().name == name)
            .cloned()
    }

    /// Copy every value out, keyed by name (used by isolation tests).
    pub fn snapshot(&self) -> HashMap<String, ArrayD<f64>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|p| {
                let p = p.borrow();
                (p.name.clone(), p.value.clone())
            })
            .collect()
    }

    /// Overwrite a parameter's value, shape-checked.
    pub fn load_value(&self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let p = self
            .by_name(name)
            .ok_or_else(|| UodError::checkpoint(format!("unknown parameter {name}")))?;
        let mut p = p.borrow_mut();
        if p.value.shape() != value.shape() {
            return Err(UodError::checkpoint(format!(
                "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Per-forward-pass binding of parameters onto a tape.
pub struct Ctx<'t> {
    tape: &'t Tape,
    pub train: bool,
    bound: RefCell<HashMap<usize, Var<'t>>>,
    order: RefCell<Vec<(SharedParam, Var<'t>)>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, train: bool) -> Self {
        Ctx {
            tape,
            train,
            bound: RefCell::new(HashMap::new()),
            order: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The tape variable for `p`, binding it as a leaf on first use.
    pub fn var(&self, p: &SharedParam) -> Var<'t> {
        let id = p.borrow().id;
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let v = self.tape.leaf(p.borrow().value.clone());
        self.bound.borrow_mut().insert(id, v);
        self.order.borrow_mut().push((p.clone(), v));
        v
    }

    /// All `(parameter, variable)` pairs bound so far, in binding order.
    pub fn bound(&self) -> Vec<(SharedParam, Var<'t>)> {
        self.order.borrow().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn param_set_registers_in_order_with_unique_ids() {
        let mut set = ParamSet::new();
        let a = set.param("a", ParamTag::Shared, arr1(&[1.0]).into_dyn());
        let b = set.param("b", ParamTag::Domain(1), arr1(&[2.0, 3.0]).into_dyn());
        let r = set.buffer("r", ParamTag::Domain(0), arr1(&[0.0]).into_dyn());
        assert_eq!(a.borrow().id, 0);
        assert_eq!(b.borrow().id, 1);
        assert_eq!(r.borrow().id, 2);
        assert_eq!(set.params().len(), 2);
        assert_eq!(set.buffers().len(), 1);
        assert_eq!(set.num_scalars(), 3);
        assert_eq!(set.by_name("b").unwrap().borrow().tag, ParamTag::Domain(1));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut set = ParamSet::new();
        set.param("x", ParamTag::Shared, arr1(&[1.0]).into_dyn());
        set.param("x", ParamTag::Shared, arr1(&[1.0]).into_dyn());
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut set = ParamSet::new();
        let a = set.param("a", ParamTag::Shared, arr1(&[1.0, 2.0]).into_dyn());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let v1 = ctx.var(&a);
        let v2 = ctx.var(&a);
        assert_eq!(v1.id(), v2.id(), "same leaf for repeated binds");
        assert_eq!(ctx.bound().len(), 1);

        // A parameter never bound stays out of the graph entirely.
        let _unused = set.param("b", ParamTag::Domain(0), arr1(&[9.0]).into_dyn());
        assert_eq!(ctx.bound().len(), 1);
    }

    #[test]
    fn snapshot_and_load_roundtrip() {
        let mut set = ParamSet::new();
        set.param("w", ParamTag::Shared, arr1(&[1.0, 2.0]).into_dyn());
        let snap = set.snapshot();
        set.load_value("w", arr1(&[5.0, 6.0]).into_dyn()).unwrap();
        assert_eq!(set.by_name("w").unwrap().borrow().value, arr1(&[5.0, 6.0]).into_dyn());
        set.load_value("w", snap["w"].clone()).unwrap();
        assert_eq!(set.by_name("w").unwrap().borrow().value, arr1(&[1.0, 2.0]).into_dyn());
        assert!(set.load_value("nope", arr1(&[1.0]).into_dyn()).is_err());
        assert!(set.load_value("w", arr1(&[1.0]).into_dyn()).is_err());
    }
}
