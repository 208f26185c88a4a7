//! Layer library recorded on a [`Tape`]. All layers take row-batched inputs:
//! a `[rows, features]` matrix is `rows` independent examples.

use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x W + b` with `W: [input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let weight = store.insert_weight(&format!("{name}.W"), input, output, rng)?;
        let bias = Some(store.insert_bias(&format!("{name}.b"), output)?);
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let weight = store.insert_weight(&format!("{name}.W"), input, output, rng)?;
        Ok(Linear {
            weight,
            bias: None,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input || tape.shape(x).len() != 2 {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, expected [_, {}]", tape.shape(x), self.input),
            ));
        }
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected stack. `hidden` is applied between layers, `output` after
/// the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `sizes = [input, h1, ..., output]`; layers are named `{name}.l{k}`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp `{name}` needs at least input and output sizes"
            )));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, rng, &format!("{name}.l{k}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            let act = if k == last { self.output } else { self.hidden };
            h = act.apply(tape, h);
        }
        Ok(h)
    }
}

/// Standard GRU cell:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    w_z: ParamId,
    w_r: ParamId,
    w_h: ParamId,
    u_z: ParamId,
    u_r: ParamId,
    u_h: ParamId,
    b_z: ParamId,
    b_r: ParamId,
    b_h: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut w = |gate: &str| store.insert_weight(&format!("{name}.W_{gate}"), input, hidden, rng);
        let (w_z, w_r, w_h) = (w("z")?, w("r")?, w("h")?);
        let mut u = |gate: &str| store.insert_weight(&format!("{name}.U_{gate}"), hidden, hidden, rng);
        let (u_z, u_r, u_h) = (u("z")?, u("r")?, u("h")?);
        let mut b = |gate: &str| store.insert_bias(&format!("{name}.b_{gate}"), hidden);
        let (b_z, b_r, b_h) = (b("z")?, b("r")?, b("h")?);
        Ok(GruCell {
            input,
            hidden,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input || hs[1] != self.hidden || xs[0] != hs[0]
        {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "x {xs:?}, h {hs:?}, expected [_, {}] and [_, {}]",
                    self.input, self.hidden
                ),
            ));
        }
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, hin: Var| -> Result<Var> {
            let w = tape.param(store, w);
            let u = tape.param(store, u);
            let b = tape.param(store, b);
            let xw = tape.matmul(x, w)?;
            let hu = tape.matmul(hin, u)?;
            let s = tape.add(xw, hu)?;
            tape.add_row(s, b)
        };
        let z_pre = gate(tape, self.w_z, self.u_z, self.b_z, h)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, self.w_r, self.u_r, self.b_r, h)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let c_pre = gate(tape, self.w_h, self.u_h, self.b_h, rh)?;
        let candidate = tape.tanh(c_pre);
        let diff = tape.sub(candidate, h)?;
        let step = tape.mul(z, diff)?;
        tape.add(h, step)
    }
}

/// Bi-directional GRU returning `[h_fwd_final, h_bwd_final]` per row.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiGru {
            forward: GruCell::new(store, rng, &format!("{name}.gru_fwd"), input, hidden)?,
            backward: GruCell::new(store, rng, &format!("{name}.gru_bwd"), input, hidden)?,
        })
    }

    pub fn output_size(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `steps[t]` is the `[rows, input]` slice at time `t`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, steps: &[Var]) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(Error::InvalidArgument("bigru_encode: empty sequence".into()));
        };
        let rows = tape.value(first).rows();
        let mut hf = tape.constant(Tensor::zeros(&[rows, self.forward.hidden]));
        for &x in steps {
            hf = self.forward.forward(tape, store, x, hf)?;
        }
        let mut hb = tape.constant(Tensor::zeros(&[rows, self.backward.hidden]));
        for &x in steps.iter().rev() {
            hb = self.backward.forward(tape, store, x, hb)?;
        }
        tape.concat_cols(&[hf, hb])
    }
}

/// One graph-convolution pass `act(D^-1/2 (A + I) D^-1/2 H W)` over a batch
/// of graphs; `D` is the degree matrix of `A + I`.
///
/// `h: [B, n, d]`, `adj: [B, n, n]`, `w: [d, d']` -> `[B, n, d']`.
pub fn gcn_propagate(
    tape: &mut Tape,
    h: Var,
    adj: Var,
    w: Var,
    act: Activation,
) -> Result<Var> {
    let (sh, sa, sw) = (
        tape.shape(h).to_vec(),
        tape.shape(adj).to_vec(),
        tape.shape(w).to_vec(),
    );
    if sh.len() != 3
        || sa.len() != 3
        || sw.len() != 2
        || sa[0] != sh[0]
        || sa[1] != sh[1]
        || sa[2] != sh[1]
        || sw[0] != sh[2]
    {
        return Err(Error::shape(
            "gcn_layer",
            format!("H {sh:?}, A {sa:?}, W {sw:?}"),
        ));
    }
    if tape.value(adj).data().iter().any(|&a| a < 0.0) {
        return Err(Error::InvalidArgument(
            "gcn_layer: adjacency has negative entries".into(),
        ));
    }
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    let with_loops = tape.add_eye(adj)?;
    let degree = tape.row_sum(with_loops);
    let inv_sqrt = tape.powf(degree, -0.5);
    let norm = tape.scale_sym(with_loops, inv_sqrt)?;
    let flat = tape.reshape(h, &[b * n, d])?;
    let hw = tape.matmul(flat, w)?;
    let hw = tape.reshape(hw, &[b, n, sw[1]])?;
    let out = tape.batch_matmul(norm, hw)?;
    Ok(act.apply(tape, out))
}

/// GCN layer owning its weight (no bias).
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        Ok(GcnLayer {
            weight: store.insert_weight(&format!("{name}.W"), input, output, rng)?,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, adj: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        gcn_propagate(tape, h, adj, w, self.activation)
    }
}
