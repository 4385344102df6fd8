//! Single-layer LSTM and BiLSTM recorded on the tape.

use rand::Rng;

use crate::error::NumericError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter names for one direction. Gate layout in the 4h axis is
/// [input, forget, cell, output].
#[derive(Debug, Clone)]
pub struct LstmSpec {
    pub w_ih: String,
    pub w_hh: String,
    pub bias: String,
    pub hidden: usize,
}

impl LstmSpec {
    pub fn new(prefix: &str, hidden: usize) -> Self {
        LstmSpec {
            w_ih: format!("{prefix}/w_ih"),
            w_hh: format!("{prefix}/w_hh"),
            bias: format!("{prefix}/bias"),
            hidden,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, input_dim: usize, rng: &mut R) {
        let h = self.hidden;
        let s_ih = (1.0 / input_dim as f64).sqrt();
        let s_hh = (1.0 / h as f64).sqrt();
        store.insert(&self.w_ih, Tensor::rand_uniform(rng, input_dim, 4 * h, -s_ih, s_ih));
        store.insert(&self.w_hh, Tensor::rand_uniform(rng, h, 4 * h, -s_hh, s_hh));
        store.insert(&self.bias, Tensor::zeros(1, 4 * h));
    }
}

pub struct LstmOut {
    /// one 1×h hidden state per input row, in input order
    pub hiddens: Vec<Var>,
    pub final_hidden: Var,
}

/// Run over the rows of `inputs` (m×d). `reverse` walks the rows backward
/// while still reporting hiddens in input order.
pub fn lstm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &LstmSpec,
    inputs: Var,
    reverse: bool,
) -> Result<LstmOut, NumericError> {
    let m = tape.value(inputs).rows();
    let h = spec.hidden;
    let w_ih = tape.param(store, &spec.w_ih)?;
    let w_hh = tape.param(store, &spec.w_hh)?;
    let bias = tape.param(store, &spec.bias)?;

    // all input projections in one gemm
    let pre_all = tape.matmul(inputs, w_ih)?;

    let mut hidden = tape.leaf(Tensor::zeros(1, h))?;
    let mut cell = tape.leaf(Tensor::zeros(1, h))?;
    let mut hiddens: Vec<Var> = vec![hidden; m];

    let steps: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for t in steps {
        let x_pre = tape.slice_rows(pre_all, t, 1)?;
        let h_pre = tape.matmul(hidden, w_hh)?;
        let z = tape.add(x_pre, h_pre)?;
        let z = tape.add(z, bias)?;
        let i_gate = tape.slice_cols(z, 0, h)?;
        let f_gate = tape.slice_cols(z, h, h)?;
        let g_gate = tape.slice_cols(z, 2 * h, h)?;
        let o_gate = tape.slice_cols(z, 3 * h, h)?;
        let i_gate = tape.sigmoid(i_gate)?;
        let f_gate = tape.sigmoid(f_gate)?;
        let g_gate = tape.tanh(g_gate)?;
        let o_gate = tape.sigmoid(o_gate)?;
        let fc = tape.mul(f_gate, cell)?;
        let ig = tape.mul(i_gate, g_gate)?;
        cell = tape.add(fc, ig)?;
        let c_tanh = tape.tanh(cell)?;
        hidden = tape.mul(o_gate, c_tanh)?;
        hiddens[t] = hidden;
    }
    Ok(LstmOut { hiddens, final_hidden: hidden })
}

#[derive(Debug, Clone)]
pub struct BiLstmSpec {
    pub fwd: LstmSpec,
    pub bwd: LstmSpec,
}

impl BiLstmSpec {
    pub fn new(prefix: &str, hidden_per_dir: usize) -> Self {
        BiLstmSpec {
            fwd: LstmSpec::new(&format!("{prefix}/fwd"), hidden_per_dir),
            bwd: LstmSpec::new(&format!("{prefix}/bwd"), hidden_per_dir),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, input_dim: usize, rng: &mut R) {
        self.fwd.init(store, input_dim, rng);
        self.bwd.init(store, input_dim, rng);
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }
}

pub struct BiLstmOut {
    /// m×2h matrix of per-step [fwd ‖ bwd] hiddens
    pub sequence: Var,
    /// 1×2h [final fwd ‖ final bwd]
    pub summary: Var,
}

pub fn bilstm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &BiLstmSpec,
    inputs: Var,
) -> Result<BiLstmOut, NumericError> {
    let f = lstm_forward(tape, store, &spec.fwd, inputs, false)?;
    let b = lstm_forward(tape, store, &spec.bwd, inputs, true)?;
    let rows: Vec<Var> = f
        .hiddens
        .iter()
        .zip(&b.hiddens)
        .map(|(&hf, &hb)| tape.concat_cols(&[hf, hb]))
        .collect::<Result<_, _>>()?;
    let sequence = tape.concat_rows(&rows)?;
    let summary = tape.concat_cols(&[f.final_hidden, b.final_hidden])?;
    Ok(BiLstmOut { sequence, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let spec = BiLstmSpec::new("enc", 3);
        spec.init(&mut store, 4, &mut rng);
        let x = Tensor::rand_uniform(&mut rng, 5, 4, -1.0, 1.0);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xs = tape.leaf(x.clone()).unwrap();
            let out = bilstm_forward(&mut tape, store, &spec, xs).unwrap();
            (
                tape.value(out.sequence).clone(),
                tape.value(out.summary).clone(),
            )
        };
        let (seq1, sum1) = run(&store);
        let (seq2, sum2) = run(&store);
        assert_eq!(seq1.shape(), (5, 6));
        assert_eq!(sum1.shape(), (1, 6));
        assert_eq!(seq1, seq2);
        assert_eq!(sum1, sum2);
    }

    #[test]
    fn reverse_direction_sees_sequence_backward() {
        // a 1-step and reversed 1-step LSTM agree; longer sequences differ
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let spec = LstmSpec::new("l", 3);
        spec.init(&mut store, 2, &mut rng);
        let x = Tensor::rand_uniform(&mut rng, 4, 2, -1.0, 1.0);
        let mut tape = Tape::new();
        let xs = tape.leaf(x).unwrap();
        let f = lstm_forward(&mut tape, &store, &spec, xs, false).unwrap();
        let b = lstm_forward(&mut tape, &store, &spec, xs, true).unwrap();
        assert_ne!(tape.value(f.final_hidden), tape.value(b.final_hidden));
        // reversed final state is the state after consuming row 0 last
        assert_eq!(tape.value(b.hiddens[0]), tape.value(b.final_hidden));
    }

    #[test]
    fn bilstm_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let spec = BiLstmSpec::new("enc", 2);
        spec.init(&mut store, 3, &mut rng);
        let x = Tensor::rand_uniform(&mut rng, 3, 3, -1.0, 1.0);
        let mut f = move |s: &ParamStore, t: &mut Tape| {
            let xs = t.leaf(x.clone())?;
            let out = bilstm_forward(t, s, &spec, xs)?;
            let sq = t.mul(out.sequence, out.sequence)?;
            let a = t.mean(sq)?;
            let b = t.mean(out.summary)?;
            t.add(a, b)
        };
        let rep = gradient_check(&mut f, &store, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-6, "rel err {}", rep.max_rel_error);
    }
}
