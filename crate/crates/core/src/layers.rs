//! Recurrent cells, bidirectional encoders and the two attention forms used
//! by the generators.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::ModelError;

/// Uniform init bound for weight matrices; biases start at zero.
pub const INIT_BOUND: f64 = 0.08;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self, ModelError> {
        let w = store.uniform(format!("{name}.w"), &[out_dim, in_dim], INIT_BOUND, rng)?;
        let b = if bias { Some(store.zeros(format!("{name}.b"), &[out_dim])?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(self.w);
        let y = tape.matmul(w, x)?;
        Ok(match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)?
            }
            None => y,
        })
    }
}

/// A single-step recurrent transition.
pub trait RecurrentCell {
    type State: Clone;

    fn input_size(&self) -> usize;
    fn hidden_size(&self) -> usize;
    fn zero_state(&self, tape: &mut Tape<'_>) -> Self::State;
    fn step(&self, tape: &mut Tape<'_>, x: Var, prev: &Self::State) -> Result<Self::State, ModelError>;
    /// The externally visible hidden vector of a state.
    fn output(state: &Self::State) -> Var;
}

/// Runs `cell` over `inputs`, returning the state after every step.
pub fn run_cell<C: RecurrentCell>(
    cell: &C,
    tape: &mut Tape<'_>,
    inputs: &[Var],
    init: C::State,
) -> Result<Vec<C::State>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut s = init;
    for &x in inputs {
        s = cell.step(tape, x, &s)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// GRU with reset/update/candidate gates stacked in that order.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w_ih: store.uniform(format!("{name}.w_ih"), &[3 * hidden, input], INIT_BOUND, rng)?,
            w_hh: store.uniform(format!("{name}.w_hh"), &[3 * hidden, hidden], INIT_BOUND, rng)?,
            b_ih: store.zeros(format!("{name}.b_ih"), &[3 * hidden])?,
            b_hh: store.zeros(format!("{name}.b_hh"), &[3 * hidden])?,
            input,
            hidden,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

impl RecurrentCell for GruCell {
    type State = Var;

    fn input_size(&self) -> usize {
        self.input
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn zero_state(&self, tape: &mut Tape<'_>) -> Var {
        tape.constant(crate::autodiff::Tensor::zeros(&[self.hidden]))
    }

    fn step(&self, tape: &mut Tape<'_>, x: Var, h: &Var) -> Result<Var, ModelError> {
        let hd = self.hidden;
        let (w_ih, w_hh, b_ih, b_hh) =
            (tape.param(self.w_ih), tape.param(self.w_hh), tape.param(self.b_ih), tape.param(self.b_hh));
        let gi = tape.matmul(w_ih, x)?;
        let gi = tape.add(gi, b_ih)?;
        let gh = tape.matmul(w_hh, *h)?;
        let gh = tape.add(gh, b_hh)?;

        let (ir, hr) = (tape.slice(gi, 0, hd)?, tape.slice(gh, 0, hd)?);
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let (iz, hz) = (tape.slice(gi, hd, hd)?, tape.slice(gh, hd, hd)?);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let (inn, hn) = (tape.slice(gi, 2 * hd, hd)?, tape.slice(gh, 2 * hd, hd)?);
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(inn, rhn)?;
        let n = tape.tanh(n);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let d = tape.sub(*h, n)?;
        let zd = tape.mul(z, d)?;
        Ok(tape.add(n, zd)?)
    }

    fn output(state: &Var) -> Var {
        *state
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// LSTM with input/forget/cell/output gates stacked in that order.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
    input: usize,
    hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w_ih: store.uniform(format!("{name}.w_ih"), &[4 * hidden, input], INIT_BOUND, rng)?,
            w_hh: store.uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], INIT_BOUND, rng)?,
            b: store.zeros(format!("{name}.b"), &[4 * hidden])?,
            input,
            hidden,
        })
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w_ih, self.w_hh, self.b]
    }
}

impl RecurrentCell for LstmCell {
    type State = LstmState;

    fn input_size(&self) -> usize {
        self.input
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn zero_state(&self, tape: &mut Tape<'_>) -> LstmState {
        let z = tape.constant(crate::autodiff::Tensor::zeros(&[self.hidden]));
        LstmState { h: z, c: z }
    }

    fn step(&self, tape: &mut Tape<'_>, x: Var, prev: &LstmState) -> Result<LstmState, ModelError> {
        let hd = self.hidden;
        let (w_ih, w_hh, b) = (tape.param(self.w_ih), tape.param(self.w_hh), tape.param(self.b));
        let gi = tape.matmul(w_ih, x)?;
        let gh = tape.matmul(w_hh, prev.h)?;
        let gates = tape.add(gi, gh)?;
        let gates = tape.add(gates, b)?;
        let i = tape.slice(gates, 0, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(gates, hd, hd)?;
        let f = tape.sigmoid(f);
        let g = tape.slice(gates, 2 * hd, hd)?;
        let g = tape.tanh(g);
        let o = tape.slice(gates, 3 * hd, hd)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, prev.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    fn output(state: &LstmState) -> Var {
        state.h
    }
}

/// Result of a bidirectional pass over a sequence (top layer).
#[derive(Debug, Clone)]
pub struct BiOutput<S> {
    /// Slot `k` is the forward state at `k` concatenated with the backward state at `k`.
    pub slots: Vec<Var>,
    /// Forward state after the last token.
    pub last_forward: S,
    /// Backward state after the first token (the end of the backward pass).
    pub last_backward: S,
}

/// Stacked bidirectional recurrent encoder.
#[derive(Debug, Clone)]
pub struct BiEncoder<C> {
    layers: Vec<(C, C)>,
    dropout: f64,
}

impl<C: RecurrentCell> BiEncoder<C> {
    pub fn from_layers(layers: Vec<(C, C)>, dropout: f64) -> Self {
        Self { layers, dropout }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].0.hidden_size()
    }

    pub fn slot_dim(&self) -> usize {
        2 * self.hidden_size()
    }

    pub fn layers(&self) -> &[(C, C)] {
        &self.layers
    }

    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<BiOutput<C::State>, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptySequence("bi_encode"));
        }
        let mut xs = inputs.to_vec();
        let mut out = None;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                xs = xs.into_iter().map(|x| tape.dropout(x, self.dropout)).collect();
            }
            let init = fwd.zero_state(tape);
            let fs = run_cell(fwd, tape, &xs, init)?;
            let rev: Vec<Var> = xs.iter().rev().copied().collect();
            let init = bwd.zero_state(tape);
            let mut bs = run_cell(bwd, tape, &rev, init)?;
            bs.reverse();
            let slots = fs
                .iter()
                .zip(&bs)
                .map(|(f, b)| tape.concat(&[C::output(f), C::output(b)]))
                .collect::<Result<Vec<_>, _>>()?;
            xs = slots.clone();
            out = Some(BiOutput {
                slots,
                last_forward: fs.last().cloned().expect("non-empty"),
                last_backward: bs[0].clone(),
            });
        }
        out.ok_or(ModelError::Config("encoder has no layers".into()))
    }
}

impl BiEncoder<GruCell> {
    pub fn gru<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        let mut v = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { 2 * hidden };
            v.push((
                GruCell::new(store, rng, &format!("{name}.l{l}.fwd"), inp, hidden)?,
                GruCell::new(store, rng, &format!("{name}.l{l}.bwd"), inp, hidden)?,
            ));
        }
        Ok(Self::from_layers(v, dropout))
    }
}

impl BiEncoder<LstmCell> {
    pub fn lstm<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        let mut v = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { 2 * hidden };
            v.push((
                LstmCell::new(store, rng, &format!("{name}.l{l}.fwd"), inp, hidden)?,
                LstmCell::new(store, rng, &format!("{name}.l{l}.bwd"), inp, hidden)?,
            ));
        }
        Ok(Self::from_layers(v, dropout))
    }
}

/// Attention output: the weighted sum and the weights that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub context: Var,
    pub weights: Var,
}

/// Bilinear attention over memory slots: score_k = h_kᵀ W s.
///
/// `slots` is an `(L, D)` matrix, `key` has length `K`, `w` is `(D, K)`.
pub fn bilinear_attend(tape: &mut Tape<'_>, slots: Var, key: Var, w: Var) -> Result<Attended, ModelError> {
    let ws = tape.matmul(w, key)?;
    let scores = tape.matmul(slots, ws)?;
    let weights = tape.softmax(scores, 0)?;
    let context = tape.matmul(weights, slots)?;
    Ok(Attended { context, weights })
}

/// Additive attention over a bag of vectors: s_w = vᵀ tanh(W [x_w ⊕ key]).
pub fn additive_attend(tape: &mut Tape<'_>, members: &[Var], key: Var, v: Var, w: Var) -> Result<Attended, ModelError> {
    if members.is_empty() {
        return Err(ModelError::EmptySequence("additive_attend"));
    }
    let mut scores = Vec::with_capacity(members.len());
    for &m in members {
        let x = tape.concat(&[m, key])?;
        let hid = tape.matmul(w, x)?;
        let hid = tape.tanh(hid);
        scores.push(tape.matmul(v, hid)?);
    }
    let scores = tape.concat(&scores)?;
    let weights = tape.softmax(scores, 0)?;
    let stacked = tape.stack(members)?;
    let context = tape.matmul(weights, stacked)?;
    Ok(Attended { context, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheck, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, bound: f64) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
    }

    fn vecs(tape: &mut Tape<'_>, rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Var> {
        (0..n).map(|_| tape.constant(Tensor::uniform(&[d], 1.0, rng))).collect()
    }

    #[test]
    fn zero_gru_halves_state() {
        let mut s = ParamStore::new();
        let cell = GruCell::new(&mut s, &mut rng(), "g", 3, 4).unwrap();
        zero_all(&mut s);
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::vector(vec![1.0, -1.0, 2.0]));
        let h = t.constant(Tensor::vector(vec![0.4, -0.8, 1.0, 0.0]));
        let h1 = cell.step(&mut t, x, &h).unwrap();
        assert_eq!(t.value(h1).data(), &[0.2, -0.4, 0.5, 0.0]);
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let mut s = ParamStore::new();
        let cell = LstmCell::new(&mut s, &mut rng(), "l", 3, 4).unwrap();
        zero_all(&mut s);
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::vector(vec![1.0, -1.0, 2.0]));
        let st = cell.zero_state(&mut t);
        let h = t.constant(Tensor::vector(vec![0.3, 0.3, 0.3, 0.3]));
        let next = cell.step(&mut t, x, &LstmState { h, c: st.c }).unwrap();
        assert_eq!(t.value(next.h).data(), &[0.0; 4]);
    }

    #[test]
    fn empty_sequence_returns_initial_state() {
        let mut s = ParamStore::new();
        let cell = GruCell::new(&mut s, &mut rng(), "g", 3, 4).unwrap();
        let mut t = Tape::new(&s);
        let init = cell.zero_state(&mut t);
        assert!(run_cell(&cell, &mut t, &[], init).unwrap().is_empty());
    }

    #[test]
    fn bi_encode_slot_dimension() {
        let mut s = ParamStore::new();
        let enc = BiEncoder::lstm(&mut s, &mut rng(), "e", 4, 500, 1, 0.0).unwrap();
        let mut t = Tape::new(&s);
        let xs = vecs(&mut t, &mut rng(), 1, 4);
        let out = enc.encode(&mut t, &xs).unwrap();
        assert_eq!(out.slots.len(), 1);
        assert_eq!(t.value(out.slots[0]).shape(), &[1000]);
        assert!(matches!(enc.encode(&mut t, &[]), Err(ModelError::EmptySequence(_))));
    }

    #[test]
    fn reversal_swaps_directions_when_cells_match() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let enc = BiEncoder::gru(&mut s, &mut r, "e", 3, 5, 1, 0.0).unwrap();
        let (f, b) = &enc.layers()[0];
        for (pf, pb) in f.params().into_iter().zip(b.params()) {
            let v = Tensor::uniform(s.tensor(pf).shape(), 0.5, &mut r);
            s.get_mut(pf).tensor = v.clone();
            s.get_mut(pb).tensor = v;
        }
        let mut t = Tape::new(&s);
        let xs = vecs(&mut t, &mut r, 2, 3);
        let fwd = enc.encode(&mut t, &xs).unwrap();
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let bwd = enc.encode(&mut t, &rev).unwrap();
        for k in 0..2 {
            let a = t.value(fwd.slots[k]).data();
            let b = t.value(bwd.slots[1 - k]).data();
            assert_eq!(&a[..5], &b[5..]);
            assert_eq!(&a[5..], &b[..5]);
        }
    }

    #[test]
    fn every_slot_sees_the_whole_sequence() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let enc = BiEncoder::lstm(&mut s, &mut r, "e", 3, 4, 2, 0.0).unwrap();
        randomize(&mut s, &mut r, 0.5);
        let base: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[3], 1.0, &mut r)).collect();
        let run = |inputs: &[Tensor]| {
            let mut t = Tape::new(&s);
            let xs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let out = enc.encode(&mut t, &xs).unwrap();
            out.slots.iter().map(|v| t.value(*v).data().to_vec()).collect::<Vec<_>>()
        };
        let orig = run(&base);
        for j in 0..4 {
            let mut p = base.clone();
            p[j].data_mut()[0] += 0.1;
            let pert = run(&p);
            for k in 0..4 {
                assert_ne!(orig[k], pert[k], "slot {k} ignores token {j}");
            }
        }
    }

    #[test]
    fn bilinear_attention_cases() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let slots = t.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let key = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let a = bilinear_attend(&mut t, slots, key, w).unwrap();
        for p in t.value(a.weights).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = t.constant(Tensor::new(&[1, 2], vec![7.0, -1.0]).unwrap());
        let w = t.constant(Tensor::uniform(&[2, 2], 1.0, &mut rng()));
        let a = bilinear_attend(&mut t, one, key, w).unwrap();
        assert_eq!(t.value(a.weights).data(), &[1.0]);
        assert_eq!(t.value(a.context).data(), &[7.0, -1.0]);
    }

    #[test]
    fn additive_attention_cases() {
        let s = ParamStore::new();
        let mut r = rng();
        let mut t = Tape::new(&s);
        let key = t.constant(Tensor::uniform(&[3], 1.0, &mut r));
        let w = t.constant(Tensor::uniform(&[4, 5], 1.0, &mut r));
        let v = t.constant(Tensor::uniform(&[4], 1.0, &mut r));
        let m = vecs(&mut t, &mut r, 1, 2);
        let a = additive_attend(&mut t, &m, key, v, w).unwrap();
        assert_eq!(t.value(a.weights).data(), &[1.0]);
        assert_eq!(t.value(a.context).data(), t.value(m[0]).data());

        let zero_v = t.constant(Tensor::zeros(&[4]));
        let ms = vecs(&mut t, &mut r, 4, 2);
        let a = additive_attend(&mut t, &ms, key, zero_v, w).unwrap();
        assert!(t.value(a.weights).data().iter().all(|p| (p - 0.25).abs() < 1e-15));

        let a = additive_attend(&mut t, &ms, key, v, w).unwrap();
        assert!((t.value(a.weights).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(additive_attend(&mut t, &[], key, v, w).is_err());
    }

    fn check(store: &mut ParamStore, f: impl FnMut(&mut Tape<'_>) -> Result<Var, ModelError>) {
        let report = grad_check(store, &GradCheck::default(), f).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gru_gradients() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let enc = BiEncoder::gru(&mut s, &mut r, "e", 3, 4, 2, 0.0).unwrap();
        randomize(&mut s, &mut r, 0.5);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3], 1.0, &mut r)).collect();
        check(&mut s, |t| {
            let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let out = enc.encode(t, &v)?;
            let m = t.stack(&out.slots)?;
            let m = t.tanh(m);
            let m = t.mul(m, m)?;
            Ok(t.sum(m))
        });
    }

    #[test]
    fn lstm_gradients() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let enc = BiEncoder::lstm(&mut s, &mut r, "e", 3, 4, 2, 0.3).unwrap();
        randomize(&mut s, &mut r, 0.5);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3], 1.0, &mut r)).collect();
        let opts = GradCheck { dropout_seed: Some(9), ..GradCheck::default() };
        let report = grad_check(&mut s, &opts, |t| -> Result<Var, ModelError> {
            let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let out = enc.encode(t, &v)?;
            let cat = t.concat(&[out.last_forward.c, out.last_backward.h, out.slots[1]])?;
            let sq = t.mul(cat, cat)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_gradients() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let slots = s.uniform("slots", &[4, 3], 1.0, &mut r).unwrap();
        let key = s.uniform("key", &[2], 1.0, &mut r).unwrap();
        let wb = s.uniform("wb", &[3, 2], 1.0, &mut r).unwrap();
        let wa = s.uniform("wa", &[5, 5], 1.0, &mut r).unwrap();
        let va = s.uniform("va", &[5], 1.0, &mut r).unwrap();
        let lin = Linear::new(&mut s, &mut r, "lin", 3, 2, true).unwrap();
        randomize(&mut s, &mut r, 1.0);
        check(&mut s, |t| {
            let (sl, k, wb, wa, va) = (t.param(slots), t.param(key), t.param(wb), t.param(wa), t.param(va));
            let a = bilinear_attend(t, sl, k, wb)?;
            let members: Vec<Var> = (0..4).map(|i| t.embedding(sl, i)).collect::<Result<_, _>>()?;
            let b = additive_attend(t, &members, k, va, wa)?;
            let y = lin.forward(t, b.context)?;
            let y = t.tanh(y);
            let c = t.concat(&[a.context, a.weights, y])?;
            let c = t.mul(c, c)?;
            Ok(t.sum(c))
        });
    }
}
