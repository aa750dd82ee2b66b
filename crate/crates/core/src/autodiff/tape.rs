//! Recorded scalar graphs with re-evaluation and reverse-mode pullbacks.
//!
//! A [`Recorder`] captures the operations performed on [`Var`] handles. The
//! finished [`Tape`] is immutable and can be evaluated on fresh inputs any
//! number of times; all mutable state lives in a caller-owned [`Workspace`],
//! so one tape can be shared between threads.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Mul, Neg, Range, Sub};

use super::scalar::{sigmoid_f64, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Input(u32),
    Const(f64),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Scale(u32, f64),
    Offset(u32, f64),
    Tanh(u32),
    Sigmoid(u32),
    Relu(u32),
    Step(u32),
    Sin(u32),
    Cos(u32),
    Exp(u32),
    Recip(u32),
    /// Inner product over `dot_args[start..start + 2 * len]`, stored as pairs.
    Dot(u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    range: Range<usize>,
}

/// Builds a [`Tape`] by recording operations on [`Var`]s.
#[derive(Debug, Default)]
pub struct Recorder {
    ops: RefCell<Vec<Op>>,
    dot_args: RefCell<Vec<u32>>,
    slots: RefCell<Vec<Slot>>,
    n_inputs: Cell<usize>,
    zero: Cell<Option<u32>>,
    one: Cell<Option<u32>>,
}

/// Handle to a recorded node.
#[derive(Clone, Copy)]
pub struct Var<'r> {
    rec: &'r Recorder,
    idx: u32,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.idx)
    }
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a named input slot of `len` scalars.
    pub fn input(&self, name: &str, len: usize) -> Vec<Var<'_>> {
        assert!(
            self.slots.borrow().iter().all(|s| s.name != name),
            "duplicate input slot `{name}`"
        );
        let start = self.n_inputs.get();
        self.n_inputs.set(start + len);
        self.slots.borrow_mut().push(Slot {
            name: name.to_string(),
            range: start..start + len,
        });
        (start..start + len)
            .map(|k| self.push(Op::Input(k as u32)))
            .collect()
    }

    pub fn constant(&self, c: f64) -> Var<'_> {
        let cache = if c == 0.0 && c.is_sign_positive() {
            &self.zero
        } else if c == 1.0 {
            &self.one
        } else {
            return self.push(Op::Const(c));
        };
        match cache.get() {
            Some(idx) => Var { rec: self, idx },
            None => {
                let v = self.push(Op::Const(c));
                cache.set(Some(v.idx));
                v
            }
        }
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op) -> Var<'_> {
        let mut ops = self.ops.borrow_mut();
        let idx = ops.len() as u32;
        ops.push(op);
        Var { rec: self, idx }
    }

    fn const_of(&self, idx: u32) -> Option<f64> {
        match self.ops.borrow()[idx as usize] {
            Op::Const(c) => Some(c),
            _ => None,
        }
    }

    /// Freezes the recording. Outputs are reported in the given order.
    /// Freezes the recording; the recorder is left empty.
    pub fn finish(&self, outputs: &[Var<'_>]) -> Tape {
        let outputs = outputs.iter().map(|v| v.idx).collect();
        self.zero.set(None);
        self.one.set(None);
        Tape {
            ops: self.ops.take(),
            dot_args: self.dot_args.take(),
            slots: self.slots.take(),
            n_inputs: self.n_inputs.replace(0),
            outputs,
        }
    }
}

impl<'r> Var<'r> {
    fn same(&self, other: &Var<'r>) {
        debug_assert!(std::ptr::eq(self.rec, other.rec), "vars from different recorders");
    }

    fn unary(self, op: fn(u32) -> Op, fold: fn(f64) -> f64) -> Self {
        match self.rec.const_of(self.idx) {
            Some(c) => self.rec.constant(fold(c)),
            None => self.rec.push(op(self.idx)),
        }
    }

    /// Index of this node in the recording.
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

impl<'r> Add for Var<'r> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.same(&o);
        match (self.rec.const_of(self.idx), self.rec.const_of(o.idx)) {
            (Some(a), Some(b)) => self.rec.constant(a + b),
            (Some(a), None) if a == 0.0 => o,
            (None, Some(b)) if b == 0.0 => self,
            (Some(a), None) => self.rec.push(Op::Offset(o.idx, a)),
            (None, Some(b)) => self.rec.push(Op::Offset(self.idx, b)),
            (None, None) => self.rec.push(Op::Add(self.idx, o.idx)),
        }
    }
}

impl<'r> Sub for Var<'r> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.same(&o);
        match (self.rec.const_of(self.idx), self.rec.const_of(o.idx)) {
            (Some(a), Some(b)) => self.rec.constant(a - b),
            (None, Some(b)) if b == 0.0 => self,
            (Some(a), None) if a == 0.0 => -o,
            (None, Some(b)) => self.rec.push(Op::Offset(self.idx, -b)),
            _ => self.rec.push(Op::Sub(self.idx, o.idx)),
        }
    }
}

impl<'r> Mul for Var<'r> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.same(&o);
        match (self.rec.const_of(self.idx), self.rec.const_of(o.idx)) {
            (Some(a), Some(b)) => self.rec.constant(a * b),
            (Some(a), None) => o * a,
            (None, Some(b)) => self * b,
            (None, None) => self.rec.push(Op::Mul(self.idx, o.idx)),
        }
    }
}

impl<'r> Neg for Var<'r> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, |c| -c)
    }
}

impl<'r> Add<f64> for Var<'r> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        if c == 0.0 {
            return self;
        }
        match self.rec.const_of(self.idx) {
            Some(a) => self.rec.constant(a + c),
            None => self.rec.push(Op::Offset(self.idx, c)),
        }
    }
}

impl<'r> Mul<f64> for Var<'r> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        if c == 1.0 {
            return self;
        }
        if c == 0.0 {
            return self.rec.constant(0.0);
        }
        match self.rec.const_of(self.idx) {
            Some(a) => self.rec.constant(a * c),
            None => self.rec.push(Op::Scale(self.idx, c)),
        }
    }
}

impl<'r> Scalar for Var<'r> {
    fn lift(&self, c: f64) -> Self {
        self.rec.constant(c)
    }
    fn value(&self) -> f64 {
        // Only constants have a value at recording time; generic code must not
        // branch on the values of recorded variables.
        self.rec.const_of(self.idx).unwrap_or(f64::NAN)
    }
    fn tanh(self) -> Self {
        self.unary(Op::Tanh, f64::tanh)
    }
    fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid, sigmoid_f64)
    }
    fn relu(self) -> Self {
        self.unary(Op::Relu, |c| c.max(0.0))
    }
    fn step(self) -> Self {
        self.unary(Op::Step, |c| if c > 0.0 { 1.0 } else { 0.0 })
    }
    fn sin(self) -> Self {
        self.unary(Op::Sin, f64::sin)
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos, f64::cos)
    }
    fn exp(self) -> Self {
        self.unary(Op::Exp, f64::exp)
    }
    fn recip(self) -> Self {
        self.unary(Op::Recip, f64::recip)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len());
        let rec = a[0].rec;
        let mut args = rec.dot_args.borrow_mut();
        let start = args.len() as u32;
        let mut len = 0u32;
        let mut folded = 0.0;
        for (x, y) in a.iter().zip(b) {
            match (rec.const_of(x.idx), rec.const_of(y.idx)) {
                (Some(p), Some(q)) => folded += p * q,
                (Some(p), _) | (_, Some(p)) if p == 0.0 => {}
                _ => {
                    args.push(x.idx);
                    args.push(y.idx);
                    len += 1;
                }
            }
        }
        drop(args);
        let node = if len == 0 {
            rec.constant(0.0)
        } else {
            rec.push(Op::Dot(start, len))
        };
        node + folded
    }
}

/// An immutable recorded graph.
#[derive(Debug, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    dot_args: Vec<u32>,
    slots: Vec<Slot>,
    n_inputs: usize,
    outputs: Vec<u32>,
}

/// Per-thread evaluation buffers for a [`Tape`].
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    vals: Vec<f64>,
    adj: Vec<f64>,
    inputs: Vec<f64>,
    evaluated: bool,
}

/// Pullback of a cotangent, one vector per declared input slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slots
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

impl Tape {
    pub fn workspace(&self) -> Workspace {
        Workspace {
            vals: vec![0.0; self.ops.len()],
            adj: vec![0.0; self.ops.len()],
            inputs: vec![0.0; self.n_inputs],
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn slot_range(&self, name: &str) -> Option<Range<usize>> {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.range.clone())
    }

    /// Evaluates the tape with every declared slot bound by name.
    pub fn forward_eval(&self, ws: &mut Workspace, inputs: &[(&str, &[f64])]) -> Result<Vec<f64>> {
        let mut flat = vec![0.0; self.n_inputs];
        for slot in &self.slots {
            let bound = inputs
                .iter()
                .find(|(n, _)| *n == slot.name)
                .ok_or_else(|| Error::Config(format!("input slot `{}` is not bound", slot.name)))?;
            if bound.1.len() != slot.range.len() {
                return Err(Error::Dimension {
                    what: format!("input slot `{}`", slot.name),
                    expected: slot.range.len(),
                    got: bound.1.len(),
                });
            }
            flat[slot.range.clone()].copy_from_slice(bound.1);
        }
        if let Some((n, _)) = inputs
            .iter()
            .find(|(n, _)| self.slots.iter().all(|s| s.name != *n))
        {
            return Err(Error::Config(format!("unknown input slot `{n}`")));
        }
        self.forward(ws, &flat);
        Ok(self.outputs(ws))
    }

    /// Evaluates on a flat input vector laid out in slot declaration order.
    pub fn forward(&self, ws: &mut Workspace, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_inputs, "flat input length");
        if ws.vals.len() != self.ops.len() {
            *ws = self.workspace();
        }
        ws.inputs.copy_from_slice(flat);
        let vals = &mut ws.vals;
        for (i, op) in self.ops.iter().enumerate() {
            let v = match *op {
                Op::Input(k) => ws.inputs[k as usize],
                Op::Const(c) => c,
                Op::Add(a, b) => vals[a as usize] + vals[b as usize],
                Op::Sub(a, b) => vals[a as usize] - vals[b as usize],
                Op::Mul(a, b) => vals[a as usize] * vals[b as usize],
                Op::Neg(a) => -vals[a as usize],
                Op::Scale(a, c) => vals[a as usize] * c,
                Op::Offset(a, c) => vals[a as usize] + c,
                Op::Tanh(a) => vals[a as usize].tanh(),
                Op::Sigmoid(a) => sigmoid_f64(vals[a as usize]),
                Op::Relu(a) => vals[a as usize].max(0.0),
                Op::Step(a) => {
                    if vals[a as usize] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Op::Sin(a) => vals[a as usize].sin(),
                Op::Cos(a) => vals[a as usize].cos(),
                Op::Exp(a) => vals[a as usize].exp(),
                Op::Recip(a) => 1.0 / vals[a as usize],
                Op::Dot(start, len) => {
                    let args = &self.dot_args[start as usize..(start + 2 * len) as usize];
                    args.chunks_exact(2)
                        .map(|p| vals[p[0] as usize] * vals[p[1] as usize])
                        .sum()
                }
            };
            vals[i] = v;
        }
        ws.evaluated = true;
    }

    pub fn outputs(&self, ws: &Workspace) -> Vec<f64> {
        self.outputs.iter().map(|&o| ws.vals[o as usize]).collect()
    }

    pub fn output(&self, ws: &Workspace, k: usize) -> f64 {
        ws.vals[self.outputs[k] as usize]
    }

    /// Cotangent-Jacobian product after [`Tape::forward_eval`], split per slot.
    pub fn vjp(&self, ws: &mut Workspace, cotangent: &[f64]) -> Result<Gradients> {
        if !ws.evaluated {
            return Err(Error::Config("vjp called before forward evaluation".into()));
        }
        if cotangent.len() != self.outputs.len() {
            return Err(Error::Dimension {
                what: "cotangent".into(),
                expected: self.outputs.len(),
                got: cotangent.len(),
            });
        }
        let mut flat = vec![0.0; self.n_inputs];
        self.vjp_accumulate(ws, cotangent, &mut flat);
        Ok(Gradients {
            slots: self
                .slots
                .iter()
                .map(|s| (s.name.clone(), flat[s.range.clone()].to_vec()))
                .collect(),
        })
    }

    /// Adds `cotangentᵀ J` into `grad`, a flat buffer over all inputs.
    pub fn vjp_accumulate(&self, ws: &mut Workspace, cotangent: &[f64], grad: &mut [f64]) {
        debug_assert!(ws.evaluated);
        assert_eq!(grad.len(), self.n_inputs);
        let Workspace { vals, adj, .. } = ws;
        adj.iter_mut().for_each(|a| *a = 0.0);
        for (&o, &c) in self.outputs.iter().zip(cotangent) {
            adj[o as usize] += c;
        }
        for i in (0..self.ops.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Input(k) => grad[k as usize] += g,
                Op::Const(_) | Op::Step(_) => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (vals[a as usize], vals[b as usize]);
                    adj[a as usize] += g * vb;
                    adj[b as usize] += g * va;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::Scale(a, c) => adj[a as usize] += g * c,
                Op::Offset(a, _) => adj[a as usize] += g,
                Op::Tanh(a) => {
                    let y = vals[i];
                    adj[a as usize] += g * (1.0 - y * y);
                }
                Op::Sigmoid(a) => {
                    let y = vals[i];
                    adj[a as usize] += g * y * (1.0 - y);
                }
                Op::Relu(a) => {
                    if vals[a as usize] > 0.0 {
                        adj[a as usize] += g;
                    }
                }
                Op::Sin(a) => adj[a as usize] += g * vals[a as usize].cos(),
                Op::Cos(a) => adj[a as usize] -= g * vals[a as usize].sin(),
                Op::Exp(a) => adj[a as usize] += g * vals[i],
                Op::Recip(a) => {
                    let y = vals[i];
                    adj[a as usize] -= g * y * y;
                }
                Op::Dot(start, len) => {
                    let args = &self.dot_args[start as usize..(start + 2 * len) as usize];
                    for p in args.chunks_exact(2) {
                        let (x, y) = (p[0] as usize, p[1] as usize);
                        let (vx, vy) = (vals[x], vals[y]);
                        adj[x] += g * vy;
                        adj[y] += g * vx;
                    }
                }
            }
        }
    }
}
