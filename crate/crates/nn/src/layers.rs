use rand::Rng;

use crate::params::{normal, uniform, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::Mat;

/// `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform(±1/√input) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(input, output, bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, output))));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// All-zero weights and bias; the layer outputs exactly zero until trained.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Mat::zeros((input, output)));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, output))));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        ids
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Plain forward pass on one row vector.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        assert_eq!(x.len(), w.nrows(), "linear input width");
        let mut out: Vec<f64> = match self.bias {
            Some(b) => store.get(b).row(0).to_vec(),
            None => vec![0.0; w.ncols()],
        };
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(w.row(i).iter()) {
                *o += xi * wv;
            }
        }
        out
    }
}

/// Gate layout along the `4H` axis: input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Parameters of an [`LstmCell`] already placed in a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmCell {
    /// All weights uniform in ±1/√H.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_input: store.add(format!("{name}.w_input"), uniform(input, 4 * hidden, bound, rng)),
            w_hidden: store.add(format!("{name}.w_hidden"), uniform(hidden, 4 * hidden, bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(1, 4 * hidden, bound, rng)),
            input,
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_input, self.w_hidden, self.bias]
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w_input: g.param(store, self.w_input),
            w_hidden: g.param(store, self.w_hidden),
            bias: g.param(store, self.bias),
            hidden: self.hidden,
        }
    }
}

impl BoundLstm {
    /// Input projection `X · W_x + b` for many rows at once.
    pub fn project(&self, g: &mut Graph, x: Var) -> Var {
        let p = g.matmul(x, self.w_input);
        g.add_row(p, self.bias)
    }

    /// One step from a pre-projected input. Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, projected: Var, h: Var, c: Var) -> (Var, Var) {
        let hh = self.hidden;
        let rec = g.matmul(h, self.w_hidden);
        let gates = g.add(projected, rec);
        let i = g.slice_cols(gates, 0, hh);
        let f = g.slice_cols(gates, hh, hh);
        let cand = g.slice_cols(gates, 2 * hh, hh);
        let o = g.slice_cols(gates, 3 * hh, hh);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_new = g.add(keep, write);
        let squashed = g.tanh(c_new);
        let h_new = g.mul(o, squashed);
        (h_new, c_new)
    }
}

/// Gate layout along the `3H` axis: reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_input: store.add(format!("{name}.w_input"), uniform(input, 3 * hidden, bound, rng)),
            w_hidden: store.add(format!("{name}.w_hidden"), uniform(hidden, 3 * hidden, bound, rng)),
            b_input: store.add(format!("{name}.b_input"), uniform(1, 3 * hidden, bound, rng)),
            b_hidden: store.add(format!("{name}.b_hidden"), uniform(1, 3 * hidden, bound, rng)),
            input,
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_input, self.w_hidden, self.b_input, self.b_hidden]
    }

    /// `h' = (1 - u) ⊙ n + u ⊙ h` with `n = tanh(x W_n + r ⊙ (h U_n + b_hn))`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        let hh = self.hidden;
        let wi = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let bi = g.param(store, self.b_input);
        let bh = g.param(store, self.b_hidden);
        let xi = g.matmul(x, wi);
        let xi = g.add_row(xi, bi);
        let hr = g.matmul(h, wh);
        let hr = g.add_row(hr, bh);
        let xr = g.slice_cols(xi, 0, hh);
        let xu = g.slice_cols(xi, hh, hh);
        let xn = g.slice_cols(xi, 2 * hh, hh);
        let hr_r = g.slice_cols(hr, 0, hh);
        let hr_u = g.slice_cols(hr, hh, hh);
        let hr_n = g.slice_cols(hr, 2 * hh, hh);
        let r = g.add(xr, hr_r);
        let r = g.sigmoid(r);
        let u = g.add(xu, hr_u);
        let u = g.sigmoid(u);
        let gated = g.mul(r, hr_n);
        let n = g.add(xn, gated);
        let n = g.tanh(n);
        // h' = n + u ⊙ (h - n)
        let diff = g.sub(h, n);
        let upd = g.mul(u, diff);
        g.add(n, upd)
    }
}

/// Small-variance Gaussian table, used for embeddings.
pub fn embedding_table<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut R,
) -> ParamId {
    store.add(name, normal(rows, dim, 0.1, rng))
}
