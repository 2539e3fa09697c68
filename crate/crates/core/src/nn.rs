//! Parameter containers and the two layer types the models are built from.
//!
//! Layers are generic over their tensor type: `Linear<Array2<f64>>` owns
//! parameter values, `Linear<Var>` is the same layer bound into a [`Graph`].

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Var};

/// A tree of named parameter tensors. `visit`, `visit_mut` and `bind` must
/// enumerate tensors in the same order.
pub trait Module {
    type Bound;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>));

    fn bind(&self, b: &mut Binder<'_>) -> Self::Bound;

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, a| out.push(a));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, a| out.push(a));
        out
    }
}

/// Moves parameter values into a graph, as trainable leaves or constants.
pub struct Binder<'g> {
    graph: &'g mut Graph,
    trainable: bool,
    leaves: Vec<Var>,
}

impl<'g> Binder<'g> {
    pub fn trainable(graph: &'g mut Graph) -> Self {
        Self { graph, trainable: true, leaves: Vec::new() }
    }

    pub fn frozen(graph: &'g mut Graph) -> Self {
        Self { graph, trainable: false, leaves: Vec::new() }
    }

    pub fn tensor(&mut self, a: &Array2<f64>) -> Var {
        if self.trainable {
            let v = self.graph.leaf(a.clone());
            self.leaves.push(v);
            v
        } else {
            self.graph.constant(a.clone())
        }
    }

    /// Trainable leaves in binding order.
    pub fn into_leaves(self) -> Vec<Var> {
        self.leaves
    }
}

/// Binds `m` into `g`, returning the bound module and its leaves (empty when
/// frozen).
pub fn bind<M: Module>(g: &mut Graph, m: &M, trainable: bool) -> (M::Bound, Vec<Var>) {
    let mut b = if trainable { Binder::trainable(g) } else { Binder::frozen(g) };
    let bound = m.bind(&mut b);
    (bound, b.into_leaves())
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// Affine layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Array2<f64>> {
    pub weight: T,
    pub bias: T,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: uniform(input, output, limit, rng),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

impl Module for Linear {
    type Bound = Linear<Var>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn bind(&self, b: &mut Binder<'_>) -> Linear<Var> {
        Linear {
            weight: b.tensor(&self.weight),
            bias: b.tensor(&self.bias),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.weight);
        g.add_row(y, self.bias)
    }
}

/// Single-layer LSTM. Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T = Array2<f64>> {
    pub w_ih: T,
    pub w_hh: T,
    pub bias: T,
}

impl Lstm {
    /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights; forget-gate bias set to one.
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let limit = 1.0 / (hidden as f64).sqrt();
        let mut bias = Array2::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        Self {
            w_ih: uniform(input, 4 * hidden, limit, rng),
            w_hh: uniform(hidden, 4 * hidden, limit, rng),
            bias,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.nrows()
    }
}

impl Module for Lstm {
    type Bound = Lstm<Var>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_hh"), &self.w_hh);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<f64>)) {
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_hh"), &mut self.w_hh);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn bind(&self, b: &mut Binder<'_>) -> Lstm<Var> {
        Lstm {
            w_ih: b.tensor(&self.w_ih),
            w_hh: b.tensor(&self.w_hh),
            bias: b.tensor(&self.bias),
        }
    }
}

/// Hidden and cell state of one LSTM step.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm<Var> {
    fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.w_hh).0
    }

    /// Input projection plus bias for a stacked `(T * B) x in` input.
    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        let p = g.matmul(x, self.w_ih);
        g.add_row(p, self.bias)
    }

    /// Bias-only projection, the pre-activation of a zero input.
    pub fn zero_input(&self, g: &mut Graph, batch: usize) -> Var {
        let zeros = g.constant(Array2::zeros((batch, 4 * self.hidden(g))));
        g.add_row(zeros, self.bias)
    }

    /// One step from a projected input `pre` (`B x 4H`, bias included).
    pub fn step(&self, g: &mut Graph, pre: Var, state: Option<LstmState>) -> LstmState {
        let h_dim = self.hidden(g);
        let pre = match state {
            Some(s) => {
                let r = g.matmul(s.h, self.w_hh);
                g.add(pre, r)
            }
            None => pre,
        };
        let i = g.slice_cols(pre, 0, h_dim);
        let i = g.sigmoid(i);
        let cell = g.slice_cols(pre, 2 * h_dim, 3 * h_dim);
        let cell = g.tanh(cell);
        let o = g.slice_cols(pre, 3 * h_dim, 4 * h_dim);
        let o = g.sigmoid(o);
        let mut c = g.mul(i, cell);
        if let Some(s) = state {
            let f = g.slice_cols(pre, h_dim, 2 * h_dim);
            let f = g.sigmoid(f);
            let kept = g.mul(f, s.c);
            c = g.add(c, kept);
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }

    /// Runs over a stacked `(T * B) x in` sequence and returns the hidden
    /// state of every frame in natural order. With `reverse`, frame `t`
    /// summarizes frames `t..T`.
    pub fn run(&self, g: &mut Graph, x: Var, batch: usize, reverse: bool) -> Vec<Var> {
        let n_frames = g.shape(x).0 / batch;
        let proj = self.project(g, x);
        let mut out = vec![None; n_frames];
        let mut state = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n_frames).rev())
        } else {
            Box::new(0..n_frames)
        };
        for t in order {
            let pre = g.slice_rows(proj, t * batch, (t + 1) * batch);
            let s = self.step(g, pre, state);
            out[t] = Some(s.h);
            state = Some(s);
        }
        out.into_iter().map(|h| h.expect("every frame visited")).collect()
    }
}
