//! Neural building blocks: embeddings, a single-layer LSTM encoder, ReLU
//! feedforward heads, and the character-level LSTM generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Binding, NodeId, Tape};
use crate::tensor::{ParamId, Params, Tensor};

/// Word and character embedding width.
pub const EMBED_DIM: usize = 32;
/// Hidden layer width of every feedforward head.
pub const HEAD_HIDDEN: usize = 64;

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor { shape: vec![rows, cols], data }
}

/// Gate order: input, forget, output, candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: [ParamId; 4],
    pub wh: [ParamId; 4],
    pub b: [ParamId; 4],
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let names = ["i", "f", "o", "g"];
        let mut wx = Vec::new();
        let mut wh = Vec::new();
        let mut b = Vec::new();
        for n in names {
            wx.push(params.add(format!("{prefix}.wx_{n}"), glorot(rng, hidden, input_dim))?);
            wh.push(params.add(format!("{prefix}.wh_{n}"), glorot(rng, hidden, hidden))?);
            b.push(params.add(format!("{prefix}.b_{n}"), Tensor::zeros(vec![hidden]))?);
        }
        Ok(LstmCell {
            wx: wx.try_into().unwrap(),
            wh: wh.try_into().unwrap(),
            b: b.try_into().unwrap(),
            input_dim,
            hidden,
        })
    }

    /// One step: returns (h', c').
    pub fn step(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let gate = |tape: &mut Tape, k: usize| -> Result<NodeId> {
            let a = tape.matvec(bind.node(self.wx[k]), x)?;
            let b = tape.matvec(bind.node(self.wh[k]), h)?;
            let s = tape.add(a, b)?;
            tape.add(s, bind.node(self.b[k]))
        };
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let o = gate(tape, 2)?;
        let o = tape.sigmoid(o);
        let g = gate(tape, 3)?;
        let g = tape.tanh(g);

        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// Word embeddings plus the encoding LSTM; produces r(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub embed: ParamId,
    pub cell: LstmCell,
    pub vocab: usize,
    pub hidden: usize,
}

impl Encoder {
    pub fn init(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        hidden: usize,
    ) -> Result<Self> {
        let embed = params.add("enc.embed", glorot(rng, vocab, EMBED_DIM))?;
        let cell = LstmCell::init(params, rng, "enc.lstm", EMBED_DIM, hidden)?;
        Ok(Encoder { embed, cell, vocab, hidden })
    }
}

/// Run the encoder over a token sequence; r(x) is the final hidden state.
/// Dropout is applied to the LSTM input vector at each timestep when
/// `train` is set.
pub fn lstm_encode(
    tape: &mut Tape,
    bind: &Binding,
    enc: &Encoder,
    tokens: &[usize],
    dropout: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty token sequence".into()));
    }
    let mut h = tape.constant(Tensor::zeros(vec![enc.hidden]));
    let mut c = tape.constant(Tensor::zeros(vec![enc.hidden]));
    for &tok in tokens {
        let mut e = tape.embed_row(bind.node(enc.embed), tok)?;
        if train && dropout > 0.0 {
            e = tape.dropout(e, dropout, rng)?;
        }
        let (h2, c2) = enc.cell.step(tape, bind, e, h, c)?;
        h = h2;
        c = c2;
    }
    Ok(h)
}

/// Feedforward head: one 64-unit ReLU hidden layer, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Head {
    pub fn init(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Head {
            w1: params.add(format!("{prefix}.w1"), glorot(rng, HEAD_HIDDEN, input))?,
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(vec![HEAD_HIDDEN]))?,
            w2: params.add(format!("{prefix}.w2"), glorot(rng, output, HEAD_HIDDEN))?,
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(vec![output]))?,
            input,
            output,
        })
    }
}

/// logits = W2 relu(W1 r + b1) + b2
pub fn head_forward(tape: &mut Tape, bind: &Binding, head: &Head, r: NodeId) -> Result<NodeId> {
    if tape.value(r).shape != vec![head.input] {
        return Err(Error::shape(format!(
            "head expects input [{}], got {:?}",
            head.input,
            tape.value(r).shape
        )));
    }
    let a = tape.matvec(bind.node(head.w1), r)?;
    let a = tape.add(a, bind.node(head.b1))?;
    let a = tape.relu(a);
    let l = tape.matvec(bind.node(head.w2), a)?;
    tape.add(l, bind.node(head.b2))
}

/// Character-level LSTM language model seeded from r(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharLm {
    pub embed: ParamId,
    pub cell: LstmCell,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub vocab: usize,
    pub hidden: usize,
}

impl CharLm {
    pub fn init(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        hidden: usize,
    ) -> Result<Self> {
        let embed = params.add("lm.embed", glorot(rng, vocab, EMBED_DIM))?;
        let cell = LstmCell::init(params, rng, "lm.lstm", EMBED_DIM, hidden)?;
        let proj_w = params.add("lm.proj_w", glorot(rng, vocab, hidden))?;
        let proj_b = params.add("lm.proj_b", Tensor::zeros(vec![vocab]))?;
        Ok(CharLm { embed, cell, proj_w, proj_b, vocab, hidden })
    }
}

/// Teacher-forced reconstruction loss of `chars`, with h0 = r(x), c0 = 0 and
/// a begin-of-sequence symbol preceding the first character. The loss sums
/// the per-character NLL over the whole string; gradient reaches both the
/// generator parameters and, through `r`, the encoder.
pub fn charlm_nll(
    tape: &mut Tape,
    bind: &Binding,
    lm: &CharLm,
    chars: &[usize],
    bos: usize,
    r: NodeId,
) -> Result<NodeId> {
    if chars.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty character sequence".into()));
    }
    if tape.value(r).shape != vec![lm.hidden] {
        return Err(Error::shape(format!(
            "char-LM hidden size {} does not match r of shape {:?}",
            lm.hidden,
            tape.value(r).shape
        )));
    }
    let mut h = r;
    let mut c = tape.constant(Tensor::zeros(vec![lm.hidden]));
    let mut loss = tape.constant(Tensor::scalar(0.0));
    let mut prev = bos;
    for &target in chars {
        let e = tape.embed_row(bind.node(lm.embed), prev)?;
        let (h2, c2) = lm.cell.step(tape, bind, e, h, c)?;
        h = h2;
        c = c2;
        let logits = tape.matvec(bind.node(lm.proj_w), h)?;
        let logits = tape.add(logits, bind.node(lm.proj_b))?;
        let nll = tape.nll_categorical(logits, target)?;
        loss = tape.add(loss, nll)?;
        prev = target;
    }
    Ok(loss)
}
