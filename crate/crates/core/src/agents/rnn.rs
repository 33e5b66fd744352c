use super::session::{Encoded, Layers, Weights};
use super::{AgentConfig, Init, Result};
use crate::navworld::vocab;
use crate::tensor::{NodeId, Tape, Tensor};

pub(super) fn init(c: &AgentConfig, p: &mut Init) -> Result<()> {
    let (e, h) = (c.embed_dim, c.hidden_dim);
    let half = h / 2;
    p.embedding("tok_emb", c.vocab_size, e)?;
    for dir in ["fwd", "bwd"] {
        p.glorot(&format!("enc_{dir}_wx"), e, 3 * half)?;
        p.glorot(&format!("enc_{dir}_wh"), half, 3 * half)?;
        p.zeros(&format!("enc_{dir}_b"), &[3 * half])?;
    }
    p.glorot("init_w", h, h)?;
    p.zeros("init_b", &[h])?;
    p.uniform("step_emb", &[c.step_cap, h], 0.5)?;
    p.glorot("att_w", h, h)?;
    p.glorot("val_w", h, h)?;
    p.zeros("val_b", &[h])?;
    p.glorot("cand_w", c.feature_dim, h)?;
    p.zeros("cand_b", &[h])?;
    p.glorot("dec_wx", 2 * h, 3 * h)?;
    p.glorot("dec_wh", h, 3 * h)?;
    p.zeros("dec_b", &[3 * h])?;
    p.glorot("act_w", h, h)
}

/// GRU cell given the precomputed input projection `xw` (`[3h]`, bias included).
fn gru(tape: &mut Tape, xw: NodeId, h: NodeId, wh: NodeId, size: usize) -> Result<NodeId> {
    let hw = tape.matmul(h, wh)?;
    let part = |tape: &mut Tape, n: NodeId, i: usize| tape.slice(n, 0, i * size, (i + 1) * size);
    let (xr, xz, xn) = (part(tape, xw, 0)?, part(tape, xw, 1)?, part(tape, xw, 2)?);
    let (hr, hz, hn) = (part(tape, hw, 0)?, part(tape, hw, 1)?, part(tape, hw, 2)?);
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(xn, rh)?;
    let n = tape.tanh(n)?;
    let diff = tape.sub(h, n)?;
    let keep = tape.mul(z, diff)?;
    Ok(tape.add(n, keep)?)
}

/// Bidirectional GRU over `e`. `<pad>` positions carry the hidden state through unchanged.
pub(super) fn encode(c: &AgentConfig, w: &Weights, tape: &mut Tape, e: NodeId, ids: &[usize]) -> Result<NodeId> {
    let half = c.hidden_dim / 2;
    let len = ids.len();
    let mut outputs: [Vec<Option<NodeId>>; 2] = [vec![None; len], vec![None; len]];
    for (di, dir) in ["fwd", "bwd"].into_iter().enumerate() {
        let xw = tape.matmul(e, w.get(&format!("enc_{dir}_wx")))?;
        let xw = tape.add(xw, w.get(&format!("enc_{dir}_b")))?;
        let wh = w.get(&format!("enc_{dir}_wh"));
        let mut h = tape.constant(Tensor::zeros(&[half]));
        let order: Box<dyn Iterator<Item = usize>> = if di == 0 { Box::new(0..len) } else { Box::new((0..len).rev()) };
        for i in order {
            if ids[i] != vocab::PAD {
                let xi = tape.row(xw, i)?;
                h = gru(tape, xi, h, wh, half)?;
            }
            outputs[di][i] = Some(h);
        }
    }
    let rows: Vec<NodeId> = (0..len)
        .map(|i| tape.concat(&[outputs[0][i].unwrap(), outputs[1][i].unwrap()], 0))
        .collect::<std::result::Result<_, _>>()?;
    Ok(tape.stack(&rows)?)
}

/// Value transform `v(x) = x W + b`, kept on the tape and as plain vectors.
pub(super) fn prepare(_c: &AgentConfig, w: &Weights, tape: &mut Tape, x: NodeId) -> Result<Layers> {
    let v = tape.matmul(x, w.get("val_w"))?;
    let v = tape.add(v, w.get("val_b"))?;
    Ok(Layers { keys: vec![x], values: vec![v], value_vectors: vec![tape.value(v).clone()] })
}

/// Decoder state from the final forward and first backward encoder outputs.
pub(super) fn initial_state(c: &AgentConfig, w: &Weights, tape: &mut Tape, x: NodeId, len: usize) -> Result<NodeId> {
    let half = c.hidden_dim / 2;
    let last = tape.row(x, len - 1)?;
    let first = tape.row(x, 0)?;
    let fwd = tape.slice(last, 0, 0, half)?;
    let bwd = tape.slice(first, 0, half, 2 * half)?;
    let joined = tape.concat(&[fwd, bwd], 0)?;
    let s = tape.matmul(joined, w.get("init_w"))?;
    let s = tape.add(s, w.get("init_b"))?;
    Ok(tape.tanh(s)?)
}

pub(super) fn step(
    c: &AgentConfig,
    w: &Weights,
    tape: &mut Tape,
    enc: &Encoded,
    state: NodeId,
    prev: NodeId,
    cands: NodeId,
    t: usize,
) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
    let h = c.hidden_dim;
    let step_vec = tape.row(w.get("step_emb"), t)?;
    let query = tape.add(state, step_vec)?;
    let q = tape.matmul(query, w.get("att_w"))?;
    let scores = tape.matmul(enc.layers.keys[0], q)?;
    let scores = tape.scale(scores, 1.0 / (h as f64).sqrt())?;
    let alpha = tape.masked_softmax(scores, enc.cross_mask.clone())?;
    let ctx = tape.matmul(alpha, enc.layers.values[0])?;
    let input = tape.concat(&[prev, ctx], 0)?;
    let xw = tape.matmul(input, w.get("dec_wx"))?;
    let xw = tape.add(xw, w.get("dec_b"))?;
    let new_state = gru(tape, xw, state, w.get("dec_wh"), h)?;
    let logits = super::transformer::score_candidates(c, w, tape, new_state, cands)?;
    Ok((new_state, logits, vec![alpha]))
}
