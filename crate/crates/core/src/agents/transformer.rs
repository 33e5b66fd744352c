use super::session::{Encoded, Layers, Weights};
use super::{self_attention_mask, AgentConfig, Init, Result};
use crate::tensor::{NodeId, Tape, Tensor};

pub(super) fn init(c: &AgentConfig, p: &mut Init) -> Result<()> {
    let (e, h) = (c.embed_dim, c.hidden_dim);
    p.embedding("tok_emb", c.vocab_size, e)?;
    p.uniform("pos_emb", &[c.max_instruction_len, e], 0.1)?;
    p.glorot("in_w", e, h)?;
    p.zeros("in_b", &[h])?;
    for l in 0..c.encoder_layers {
        for w in ["q", "k", "v", "o"] {
            p.glorot(&format!("enc{l}_{w}"), h, h)?;
        }
        p.glorot(&format!("enc{l}_ff1_w"), h, 2 * h)?;
        p.zeros(&format!("enc{l}_ff1_b"), &[2 * h])?;
        p.glorot(&format!("enc{l}_ff2_w"), 2 * h, h)?;
        p.zeros(&format!("enc{l}_ff2_b"), &[h])?;
    }
    p.uniform("state_init", &[h], 0.1)?;
    p.uniform("step_emb", &[c.step_cap, h], 0.5)?;
    for w in ["q", "k", "v", "o"] {
        p.glorot(&format!("cross_{w}"), h, h)?;
    }
    p.glorot("cand_w", c.feature_dim, h)?;
    p.zeros("cand_b", &[h])?;
    p.glorot("upd_w", 3 * h, h)?;
    p.zeros("upd_b", &[h])?;
    p.glorot("act_w", h, h)
}

/// Self-attention encoder over `e`; returns the linguistic features.
pub(super) fn encode(c: &AgentConfig, w: &Weights, tape: &mut Tape, e: NodeId, ids: &[usize]) -> Result<NodeId> {
    let len = ids.len();
    let pos = tape.slice(w.get("pos_emb"), 0, 0, len)?;
    let h0 = tape.add(e, pos)?;
    let h0 = tape.matmul(h0, w.get("in_w"))?;
    let mut x = tape.add(h0, w.get("in_b"))?;
    let mask = self_attention_mask(ids);
    let heads = c.heads;
    let d = c.hidden_dim / heads;
    for l in 0..c.encoder_layers {
        let q = tape.matmul(x, w.get(&format!("enc{l}_q")))?;
        let k = tape.matmul(x, w.get(&format!("enc{l}_k")))?;
        let v = tape.matmul(x, w.get(&format!("enc{l}_v")))?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice(q, 1, hd * d, (hd + 1) * d)?;
            let kh = tape.slice(k, 1, hd * d, (hd + 1) * d)?;
            let vh = tape.slice(v, 1, hd * d, (hd + 1) * d)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let att = tape.masked_softmax(scores, mask.clone())?;
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat(&outs, 1)?;
        let att_out = tape.matmul(cat, w.get(&format!("enc{l}_o")))?;
        x = tape.add(x, att_out)?;
        let f = tape.matmul(x, w.get(&format!("enc{l}_ff1_w")))?;
        let f = tape.add(f, w.get(&format!("enc{l}_ff1_b")))?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, w.get(&format!("enc{l}_ff2_w")))?;
        let f = tape.add(f, w.get(&format!("enc{l}_ff2_b")))?;
        x = tape.add(x, f)?;
    }
    Ok(x)
}

/// Per-head keys and values of the decision-time cross-attention, plus each
/// token's per-head contribution vector through the output projection.
pub(super) fn prepare(c: &AgentConfig, w: &Weights, tape: &mut Tape, x: NodeId) -> Result<Layers> {
    let d = c.hidden_dim / c.heads;
    let k = tape.matmul(x, w.get("cross_k"))?;
    let v = tape.matmul(x, w.get("cross_v"))?;
    let out_w = w.value("cross_o");
    let mut keys = Vec::with_capacity(c.heads);
    let mut values = Vec::with_capacity(c.heads);
    let mut value_vectors = Vec::with_capacity(c.heads);
    for hd in 0..c.heads {
        keys.push(tape.slice(k, 1, hd * d, (hd + 1) * d)?);
        let vh = tape.slice(v, 1, hd * d, (hd + 1) * d)?;
        let rows = Tensor::matrix(d, c.hidden_dim, out_w.data()[hd * d * c.hidden_dim..(hd + 1) * d * c.hidden_dim].to_vec())?;
        value_vectors.push(tape.value(vh).matmul(&rows)?);
        values.push(vh);
    }
    Ok(Layers { keys, values, value_vectors })
}

pub(super) fn initial_state(w: &Weights) -> NodeId {
    w.get("state_init")
}

/// One decision: cross-attend, update the state, score candidates.
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
    let d = c.hidden_dim / c.heads;
    let step_vec = tape.row(w.get("step_emb"), t)?;
    let query = tape.add(state, step_vec)?;
    let q = tape.matmul(query, w.get("cross_q"))?;
    let mut alphas = Vec::with_capacity(c.heads);
    let mut ctxs = Vec::with_capacity(c.heads);
    for hd in 0..c.heads {
        let qh = tape.slice(q, 0, hd * d, (hd + 1) * d)?;
        let scores = tape.matmul(enc.layers.keys[hd], qh)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let alpha = tape.masked_softmax(scores, enc.cross_mask.clone())?;
        ctxs.push(tape.matmul(alpha, enc.layers.values[hd])?);
        alphas.push(alpha);
    }
    let ctx = tape.concat(&ctxs, 0)?;
    let ctx = tape.matmul(ctx, w.get("cross_o"))?;
    let joined = tape.concat(&[state, ctx, prev], 0)?;
    let upd = tape.matmul(joined, w.get("upd_w"))?;
    let upd = tape.add(upd, w.get("upd_b"))?;
    let new_state = tape.tanh(upd)?;
    let logits = score_candidates(c, w, tape, new_state, cands)?;
    Ok((new_state, logits, alphas))
}

pub(super) fn score_candidates(c: &AgentConfig, w: &Weights, tape: &mut Tape, state: NodeId, cands: NodeId) -> Result<NodeId> {
    let key = tape.matmul(state, w.get("act_w"))?;
    let logits = tape.matmul(cands, key)?;
    Ok(tape.scale(logits, 1.0 / (c.hidden_dim as f64).sqrt())?)
}
