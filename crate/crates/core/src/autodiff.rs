//! Reverse-mode automatic differentiation over a scalar tape.
//!
//! All numerical code in this crate (basis evaluation, interpolation, the
//! Newton iterations and the propagator) is written once against the
//! [`Scalar`] trait. Running it with `f64` is the gradient-free fast path;
//! running it with [`DiffValue`] records every primitive onto a [`Tape`] so a
//! single [`backward`] sweep yields the partials of one output with respect
//! to every FOD coefficient that was read. Both paths perform the same
//! floating-point operations in the same order, so forward values are
//! bit-identical with and without recording.
//!
//! Comparisons (thresholds, masks, bounds checks) never carry adjoints: the
//! gradient is that of the computation with its branch pattern held fixed.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Inputs to `acos` are clamped to `[-1 + ACOS_EPS, 1 - ACOS_EPS]`.
pub const ACOS_EPS: f64 = 1e-12;

/// The differentiable real number all core math is written against.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(value: f64) -> Self;
    fn value(self) -> f64;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    /// Derivative `sign(x)` with `sign(0) = 0`.
    fn abs(self) -> Self;
    /// `acos` of the input clamped to `[-1 + ACOS_EPS, 1 - ACOS_EPS]`.
    fn acos(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    /// Derivative 1 inside `[lo, hi]`, 0 at saturation.
    fn clamp(self, lo: f64, hi: f64) -> Self;
    fn stop_gradient(self) -> Self;
    fn dot(a: &[Self], b: &[Self]) -> Self;
}

fn dot_f64(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.zip(b) {
        acc += x * y;
    }
    acc
}

fn clamp_f64(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

// Opaque wrappers: if LLVM sees sin and cos of the same argument it may fuse
// them into `sincos`, whose last bit can differ from `sin`. Keeping every
// call behind the same boundary keeps taped and untaped runs bit-identical.
#[inline(never)]
pub(crate) fn sin_f64(x: f64) -> f64 {
    x.sin()
}

#[inline(never)]
pub(crate) fn cos_f64(x: f64) -> f64 {
    x.cos()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(value: f64) -> Self {
        value
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        sin_f64(self)
    }
    #[inline]
    fn cos(self) -> Self {
        cos_f64(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn acos(self) -> Self {
        f64::acos(clamp_f64(self, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS))
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    #[inline]
    fn clamp(self, lo: f64, hi: f64) -> Self {
        clamp_f64(self, lo, hi)
    }
    #[inline]
    fn stop_gradient(self) -> Self {
        self
    }
    #[inline]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        dot_f64(a.iter().copied(), b.iter().copied())
    }
}

/// Identifies one FOD coefficient: voxel index triple and SH coefficient index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoeffKey {
    pub voxel: [usize; 3],
    pub coeff: usize,
}

/// Scalar primitives that can be recorded explicitly with [`Tape::record`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Atan2,
    Acos,
    Sqrt,
    Abs,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Inputs are `a_0..a_n, b_0..b_n`.
    Dot,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    start: u32,
    len: u32,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
    inputs: HashMap<CoeffKey, u32>,
    input_order: Vec<(u32, CoeffKey)>,
    poisoned: Option<usize>,
}

/// Append-only record of scalar operations.
///
/// A tape is single-writer; build one per thread (or per sub-batch).
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

#[derive(Clone, Copy)]
struct NodeRef<'t> {
    tape: &'t Tape,
    id: u32,
}

/// A real value that may be attached to a tape node.
#[derive(Clone, Copy)]
pub struct DiffValue<'t> {
    value: f64,
    node: Option<NodeRef<'t>>,
}

impl fmt::Debug for DiffValue<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{}@{}", self.value, n.id),
            None => write!(f, "{}@const", self.value),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Approximate heap footprint of the node and edge storage.
    pub fn memory_bytes(&self) -> usize {
        let inner = self.inner.borrow();
        inner.nodes.len() * std::mem::size_of::<Node>()
            + inner.edges.len() * std::mem::size_of::<(u32, f64)>()
            + inner.input_order.len() * (std::mem::size_of::<(u32, CoeffKey)>() * 2)
    }

    /// First node that produced a non-finite value or partial, if any.
    pub fn poisoned(&self) -> Option<usize> {
        self.inner.borrow().poisoned
    }

    /// Coefficients registered as inputs, in first-touch order.
    pub fn inputs(&self) -> Vec<CoeffKey> {
        self.inner.borrow().input_order.iter().map(|&(_, k)| k).collect()
    }

    /// An unregistered leaf (e.g. a seed coordinate).
    pub fn var(&self, value: f64) -> DiffValue<'_> {
        self.push(value, &[])
    }

    /// The leaf for a FOD coefficient, created on first touch.
    pub fn coefficient(&self, key: CoeffKey, value: f64) -> DiffValue<'_> {
        let existing = self.inner.borrow().inputs.get(&key).copied();
        let id = match existing {
            Some(id) => id,
            None => {
                let leaf = self.push(value, &[]);
                let id = leaf.node.map(|n| n.id).unwrap_or_default();
                let mut inner = self.inner.borrow_mut();
                inner.inputs.insert(key, id);
                inner.input_order.push((id, key));
                id
            }
        };
        DiffValue {
            value,
            node: Some(NodeRef { tape: self, id }),
        }
    }

    fn push(&self, value: f64, edges: &[(u32, f64)]) -> DiffValue<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let start = inner.edges.len() as u32;
        inner.edges.extend_from_slice(edges);
        inner.nodes.push(Node {
            start,
            len: edges.len() as u32,
        });
        if inner.poisoned.is_none() && (!value.is_finite() || edges.iter().any(|(_, p)| !p.is_finite())) {
            inner.poisoned = Some(id);
        }
        DiffValue {
            value,
            node: Some(NodeRef {
                tape: self,
                id: id as u32,
            }),
        }
    }

    /// Records `op` applied to `inputs`, failing if the result is non-finite.
    pub fn record<'t>(&'t self, op: Primitive, inputs: &[DiffValue<'t>]) -> Result<DiffValue<'t>> {
        let arity_err = |n: usize| Error::InvalidParameter(format!("{op:?} takes {n} inputs, got {}", inputs.len()));
        let unary = |f: fn(DiffValue<'t>) -> DiffValue<'t>| match inputs {
            [a] => Ok(f(*a)),
            _ => Err(arity_err(1)),
        };
        let binary = |f: fn(DiffValue<'t>, DiffValue<'t>) -> DiffValue<'t>| match inputs {
            [a, b] => Ok(f(*a, *b)),
            _ => Err(arity_err(2)),
        };
        let lifted: Vec<DiffValue<'t>> = inputs.iter().map(|v| self.attach(*v)).collect();
        let inputs = lifted.as_slice();
        let out = match op {
            Primitive::Add => binary(|a, b| a + b),
            Primitive::Sub => binary(|a, b| a - b),
            Primitive::Mul => binary(|a, b| a * b),
            Primitive::Div => {
                if let [_, b] = inputs {
                    if b.value == 0.0 {
                        return Err(Error::InvalidParameter("division by zero".into()));
                    }
                }
                binary(|a, b| a / b)
            }
            Primitive::Sin => unary(Scalar::sin),
            Primitive::Cos => unary(Scalar::cos),
            Primitive::Atan2 => binary(Scalar::atan2),
            Primitive::Acos => unary(Scalar::acos),
            Primitive::Sqrt => {
                if let [a] = inputs {
                    if a.value < 0.0 {
                        return Err(Error::InvalidParameter("sqrt of a negative value".into()));
                    }
                }
                unary(Scalar::sqrt)
            }
            Primitive::Abs => unary(Scalar::abs),
            Primitive::Clamp { lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::InvalidParameter(format!("clamp bounds [{lo}, {hi}]")));
                }
                match inputs {
                    [a] => Ok(a.clamp(lo, hi)),
                    _ => Err(arity_err(1)),
                }
            }
            Primitive::Dot => {
                if !inputs.len().is_multiple_of(2) {
                    return Err(Error::InvalidParameter("dot needs two equal halves".into()));
                }
                let (a, b) = inputs.split_at(inputs.len() / 2);
                Ok(DiffValue::dot(a, b))
            }
        }?;
        if !out.value.is_finite() {
            return Err(Error::TapePoisoned {
                node: out.node_id().unwrap_or(self.len()),
            });
        }
        Ok(out)
    }

    // Constants stay constants; values must not come from another tape.
    fn attach<'t>(&'t self, v: DiffValue<'t>) -> DiffValue<'t> {
        if let Some(n) = v.node {
            assert!(std::ptr::eq(n.tape, self), "value belongs to a different tape");
        }
        v
    }
}

impl<'t> DiffValue<'t> {
    pub fn constant(value: f64) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|n| n.id as usize)
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        match self.node {
            None => Self::constant(value),
            Some(n) => n.tape.push(value, &[(n.id, partial)]),
        }
    }

    fn binary(a: Self, b: Self, value: f64, da: f64, db: f64) -> Self {
        match (a.node, b.node) {
            (None, None) => Self::constant(value),
            (Some(na), None) => na.tape.push(value, &[(na.id, da)]),
            (None, Some(nb)) => nb.tape.push(value, &[(nb.id, db)]),
            (Some(na), Some(nb)) => {
                debug_assert!(std::ptr::eq(na.tape, nb.tape), "mixed tapes");
                na.tape.push(value, &[(na.id, da), (nb.id, db)])
            }
        }
    }
}

impl<'t> Add for DiffValue<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::binary(self, rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for DiffValue<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::binary(self, rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for DiffValue<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::binary(self, rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for DiffValue<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.value;
        let value = self.value / rhs.value;
        Self::binary(self, rhs, value, inv, -value * inv)
    }
}

impl<'t> Neg for DiffValue<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for DiffValue<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for DiffValue<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for DiffValue<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for DiffValue<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Scalar for DiffValue<'t> {
    fn constant(value: f64) -> Self {
        DiffValue::constant(value)
    }

    fn value(self) -> f64 {
        self.value
    }

    fn sin(self) -> Self {
        self.unary(sin_f64(self.value), cos_f64(self.value))
    }

    fn cos(self) -> Self {
        self.unary(cos_f64(self.value), -sin_f64(self.value))
    }

    fn sqrt(self) -> Self {
        let r = f64::sqrt(self.value);
        let partial = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.unary(r, partial)
    }

    fn abs(self) -> Self {
        self.unary(f64::abs(self.value), sign(self.value))
    }

    fn acos(self) -> Self {
        let lo = -1.0 + ACOS_EPS;
        let hi = 1.0 - ACOS_EPS;
        let x = clamp_f64(self.value, lo, hi);
        let partial = if self.value < lo || self.value > hi {
            0.0
        } else {
            -1.0 / f64::sqrt(1.0 - x * x)
        };
        self.unary(f64::acos(x), partial)
    }

    fn atan2(self, x: Self) -> Self {
        let (yv, xv) = (self.value, x.value);
        let r2 = xv * xv + yv * yv;
        let (dy, dx) = if r2 > 0.0 { (xv / r2, -yv / r2) } else { (0.0, 0.0) };
        Self::binary(self, x, f64::atan2(yv, xv), dy, dx)
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        let partial = if self.value < lo || self.value > hi { 0.0 } else { 1.0 };
        self.unary(clamp_f64(self.value, lo, hi), partial)
    }

    fn stop_gradient(self) -> Self {
        DiffValue::constant(self.value)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let value = dot_f64(a.iter().map(|v| v.value), b.iter().map(|v| v.value));
        let mut tape = None;
        let mut edges = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            if let Some(n) = x.node {
                tape = Some(n.tape);
                edges.push((n.id, y.value));
            }
            if let Some(n) = y.node {
                tape = Some(n.tape);
                edges.push((n.id, x.value));
            }
        }
        match tape {
            None => DiffValue::constant(value),
            Some(t) => t.push(value, &edges),
        }
    }
}

/// Returns a constant carrying the same value; comparisons feed masks through this.
pub fn stop_gradient<T: Scalar>(v: T) -> T {
    v.stop_gradient()
}

/// Which streamline coordinate a gradient was taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputId {
    pub streamline: usize,
    pub step: usize,
    pub axis: usize,
}

/// Sparse partials of one output with respect to FOD coefficients.
#[derive(Debug, Clone, Default)]
pub struct GradientResult {
    pub output: Option<OutputId>,
    pub partials: BTreeMap<CoeffKey, f64>,
}

impl GradientResult {
    /// Distinct voxels with at least one nonzero partial.
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        let mut v: Vec<[usize; 3]> = self.partials.keys().map(|k| k.voxel).collect();
        v.dedup();
        v
    }
}

/// Single reverse sweep from `output`, accumulating adjoints into the
/// registered coefficient inputs. Zero partials are omitted.
pub fn backward(tape: &Tape, output: DiffValue<'_>) -> Result<GradientResult> {
    let node = output.node.ok_or(Error::NoGradient)?;
    assert!(std::ptr::eq(node.tape, tape), "output belongs to a different tape");
    let inner = tape.inner.borrow();
    if let Some(p) = inner.poisoned {
        if p <= node.id as usize {
            return Err(Error::TapePoisoned { node: p });
        }
    }
    let top = node.id as usize;
    let mut adjoint = vec![0.0f64; top + 1];
    adjoint[top] = 1.0;
    for id in (0..=top).rev() {
        let a = adjoint[id];
        if a == 0.0 {
            continue;
        }
        let n = inner.nodes[id];
        let edges = &inner.edges[n.start as usize..(n.start + n.len) as usize];
        for &(parent, partial) in edges {
            adjoint[parent as usize] += a * partial;
        }
    }
    let mut partials = BTreeMap::new();
    for &(id, key) in &inner.input_order {
        let id = id as usize;
        if id <= top && adjoint[id] != 0.0 {
            partials.insert(key, adjoint[id]);
        }
    }
    Ok(GradientResult { output: None, partials })
}

/// Source of leaf values for generic numerical code: plain reals or tape nodes.
pub trait Recorder {
    type Value: Scalar;

    /// Leaf for a stored FOD coefficient.
    fn coefficient(&self, key: CoeffKey, value: f64) -> Self::Value;
    /// Unregistered input leaf.
    fn input(&self, value: f64) -> Self::Value;
}

/// The gradient-free recorder.
#[derive(Debug, Clone, Copy, Default)]
pub struct Untaped;

impl Recorder for Untaped {
    type Value = f64;

    #[inline]
    fn coefficient(&self, _key: CoeffKey, value: f64) -> f64 {
        value
    }

    #[inline]
    fn input(&self, value: f64) -> f64 {
        value
    }
}

impl<'t> Recorder for &'t Tape {
    type Value = DiffValue<'t>;

    fn coefficient(&self, key: CoeffKey, value: f64) -> DiffValue<'t> {
        Tape::coefficient(self, key, value)
    }

    fn input(&self, value: f64) -> DiffValue<'t> {
        self.var(value)
    }
}
