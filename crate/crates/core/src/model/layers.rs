//! Sublayers of the encoder and decoder, written against a tape.

use numkit::{Tape, Tensor, Var};

use super::params::{Attention, GraphAttention, LayerNorm, Mlp};
use crate::encoding::GraphInput;
use crate::error::{QgError, Result};

/// Dropout settings shared by every sublayer of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Ctx {
    pub dropout: f64,
    pub train: bool,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            train: false,
        }
    }
}

pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positive dims")
}

/// Row-major `k×k` mask allowing position `i` to see `0..=i`.
pub fn causal_mask(k: usize) -> Vec<bool> {
    (0..k * k).map(|x| x % k <= x / k).collect()
}

fn ones(tape: &mut Tape, rows: usize, cols: usize) -> Var {
    tape.constant(Tensor::full(&[rows, cols], 1.0))
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`.
/// Returns the projected output and each head's coefficient matrix.
pub fn attention_with_coefficients(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    w: &Attention<Var>,
    n_heads: usize,
    mask: Option<&[bool]>,
    ctx: Ctx,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q_in).cols();
    let dk = d / n_heads;
    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut coefs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, a, b)?,
                tape.slice_cols(k, a, b)?,
                tape.slice_cols(v, a, b)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let alpha = tape.softmax_rows(s, mask)?;
        coefs.push(alpha);
        let alpha = tape.dropout(alpha, ctx.dropout, ctx.train)?;
        heads.push(tape.matmul(alpha, vh)?);
    }
    let cat = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((tape.matmul(cat, w.wf)?, coefs))
}

pub fn attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    w: &Attention<Var>,
    n_heads: usize,
    mask: Option<&[bool]>,
    ctx: Ctx,
) -> Result<Var> {
    Ok(attention_with_coefficients(tape, q_in, kv_in, w, n_heads, mask, ctx)?.0)
}

pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    w: &Attention<Var>,
    n_heads: usize,
    mask: Option<&[bool]>,
    ctx: Ctx,
) -> Result<Var> {
    attention(tape, x, x, w, n_heads, mask, ctx)
}

/// `relu(x W1 + b1) W2 + b2`, with dropout on the hidden activation.
pub fn feed_forward(tape: &mut Tape, x: Var, w: &Mlp<Var>, ctx: Ctx) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, ctx.dropout, ctx.train)?;
    let o = tape.matmul(h, w.w2)?;
    Ok(tape.add_row(o, w.b2)?)
}

pub fn mlp(tape: &mut Tape, x: Var, w: &Mlp<Var>) -> Result<Var> {
    feed_forward(tape, x, w, Ctx::eval())
}

/// `LN(x + dropout(sub))`.
pub fn residual_norm(
    tape: &mut Tape,
    x: Var,
    sub: Var,
    ln: &LayerNorm<Var>,
    eps: f64,
    ctx: Ctx,
) -> Result<Var> {
    let sub = tape.dropout(sub, ctx.dropout, ctx.train)?;
    let y = tape.add(x, sub)?;
    Ok(tape.layer_norm(y, ln.gain, ln.bias, eps)?)
}

/// Mean of the token rows covered by each node span.
pub fn pool_nodes(tape: &mut Tape, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
    let t = tape.value(x).rows();
    let mut p = vec![0.0; spans.len() * t];
    for (n, &(a, b)) in spans.iter().enumerate() {
        if a >= b || b > t {
            return Err(QgError::Alignment(format!(
                "node {n} span {a}..{b} outside {t} tokens"
            )));
        }
        let w = 1.0 / (b - a) as f64;
        p[n * t + a..n * t + b].fill(w);
    }
    let p = tape.constant(Tensor::new(vec![spans.len(), t], p)?);
    Ok(tape.matmul(p, x)?)
}

/// Relational graph attention from pooled node embeddings of `x`.
/// Node `i` attends over its out-edges `(i, j, r)` with scores
/// `q_i · (k_j + γ_r) / √d` and values `v_j + γ_r`. Returns node outputs
/// and the per-edge coefficients (edges grouped by source).
pub fn graph_attention_with_coefficients(
    tape: &mut Tape,
    x: Var,
    graph: &GraphInput,
    w: &GraphAttention<Var>,
    ctx: Ctx,
) -> Result<(Var, Var, Vec<(usize, usize, usize)>)> {
    let n = graph.node_spans.len();
    let d = tape.value(x).cols();
    let mut edges = graph.edges.clone();
    edges.sort_by_key(|e| e.0);
    let mut segments = Vec::with_capacity(n);
    let mut start = 0;
    for node in 0..n {
        let end = start + edges[start..].iter().take_while(|e| e.0 == node).count();
        if end == start {
            return Err(QgError::DegenerateNode { node });
        }
        segments.push((start, end));
        start = end;
    }
    if start != edges.len() {
        return Err(QgError::Alignment(format!(
            "edge source {} has no node",
            edges[start].0
        )));
    }
    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let tgt: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let rel: Vec<usize> = edges.iter().map(|e| e.2).collect();
    if let Some(&bad) = tgt.iter().find(|&&t| t >= n) {
        return Err(QgError::Alignment(format!("edge target {bad} has no node")));
    }

    let nodes = pool_nodes(tape, x, &graph.node_spans)?;
    let q = tape.matmul(nodes, w.wq)?;
    let k = tape.matmul(nodes, w.wk)?;
    let v = tape.matmul(nodes, w.wv)?;
    let gamma = tape.embedding(w.gamma, &rel)?;
    let qe = tape.gather_rows(q, &src)?;
    let ke = tape.gather_rows(k, &tgt)?;
    let ke = tape.add(ke, gamma)?;
    let prod = tape.mul(qe, ke)?;
    let col = ones(tape, d, 1);
    let scores = tape.matmul(prod, col)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = tape.segment_softmax(scores, &segments)?;
    let alpha_d = tape.dropout(alpha, ctx.dropout, ctx.train)?;
    let row = ones(tape, 1, d);
    let spread = tape.matmul(alpha_d, row)?;
    let ve = tape.gather_rows(v, &tgt)?;
    let ve = tape.add(ve, gamma)?;
    let weighted = tape.mul(ve, spread)?;
    let mut agg = vec![0.0; n * edges.len()];
    for (e, &s) in src.iter().enumerate() {
        agg[s * edges.len() + e] = 1.0;
    }
    let agg = tape.constant(Tensor::new(vec![n, edges.len()], agg)?);
    let z = tape.matmul(agg, weighted)?;
    Ok((tape.matmul(z, w.wf)?, alpha, edges))
}

pub fn graph_attention(
    tape: &mut Tape,
    x: Var,
    graph: &GraphInput,
    w: &GraphAttention<Var>,
    ctx: Ctx,
) -> Result<Var> {
    Ok(graph_attention_with_coefficients(tape, x, graph, w, ctx)?.0)
}

/// Replaces every token covered by a node with `f([z_t, z̃_t])`, where
/// `z̃_t` is the mean output of the nodes covering token `t`. Other
/// tokens pass through.
pub fn fuse(
    tape: &mut Tape,
    z: Var,
    node_out: Var,
    spans: &[(usize, usize)],
    w: &Mlp<Var>,
) -> Result<Var> {
    let t = tape.value(z).rows();
    let n = spans.len();
    let mut cover = vec![0usize; t];
    for &(a, b) in spans {
        for c in &mut cover[a..b.min(t)] {
            *c += 1;
        }
    }
    let vertex: Vec<bool> = cover.iter().map(|&c| c > 0).collect();
    if !vertex.iter().any(|&v| v) {
        return Ok(z);
    }
    let mut m = vec![0.0; t * n];
    for (node, &(a, b)) in spans.iter().enumerate() {
        for tok in a..b.min(t) {
            m[tok * n + node] = 1.0 / cover[tok] as f64;
        }
    }
    let m = tape.constant(Tensor::new(vec![t, n], m)?);
    let per_token = tape.matmul(m, node_out)?;
    let cat = tape.concat_cols(&[z, per_token])?;
    let f = mlp(tape, cat, w)?;
    Ok(tape.select_rows(f, z, &vertex)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    fn eye(tape: &mut Tape, d: usize) -> Var {
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        mat(tape, &rows)
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![1.0, -2.0]]);
        let w = Attention {
            wq: mat(&mut tape, &[vec![0.3, 0.1], vec![0.2, 0.5]]),
            wk: mat(&mut tape, &[vec![0.7, 0.0], vec![0.1, 0.9]]),
            wv: mat(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]),
            wf: mat(&mut tape, &[vec![0.5, 0.0], vec![0.0, 2.0]]),
        };
        let out = self_attention(&mut tape, x, &w, 1, None, Ctx::eval()).unwrap();
        // x Wv = [-5, -6]; times Wf = [-2.5, -12].
        assert_eq!(tape.value(out).data(), &[-2.5, -12.0]);
    }

    #[test]
    fn two_token_hand_computation() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let i = eye(&mut tape, 2);
        let w = Attention {
            wq: i,
            wk: i,
            wv: mat(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]),
            wf: i,
        };
        let (out, coefs) =
            attention_with_coefficients(&mut tape, x, x, &w, 1, None, Ctx::eval()).unwrap();
        // scores [[1,0],[0,1]] / sqrt(2); weight on self = 1/(1+e^{-1/sqrt2}).
        let a = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
        let expect = [
            a * 1.0 + (1.0 - a) * 3.0,
            a * 2.0 + (1.0 - a) * 4.0,
            (1.0 - a) * 1.0 + a * 3.0,
            (1.0 - a) * 2.0 + a * 4.0,
        ];
        for (g, e) in tape.value(out).data().iter().zip(expect) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
        let c = tape.value(coefs[0]);
        assert_abs_diff_eq!(c.get(0, 0) + c.get(0, 1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &vec![vec![0.4, -0.3, 0.2, 0.9]; 3]);
        let r = mat(&mut tape, &vec![vec![0.1, 0.2, 0.3, 0.4]; 4]);
        let w = Attention {
            wq: r,
            wk: r,
            wv: r,
            wf: r,
        };
        let (_, coefs) =
            attention_with_coefficients(&mut tape, x, x, &w, 2, None, Ctx::eval()).unwrap();
        for c in coefs {
            for v in tape.value(c).data() {
                assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn feed_forward_zero_weights_give_bias() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let z = mat(&mut tape, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let w = Mlp {
            w1: z,
            b1: tape.constant(Tensor::vector(vec![0.0, 0.0])),
            w2: z,
            b2: tape.constant(Tensor::vector(vec![7.0, -1.0])),
        };
        let out = feed_forward(&mut tape, x, &w, Ctx::eval()).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn feed_forward_hand_computation_and_row_permutation() {
        let mut tape = Tape::new();
        let w = Mlp {
            w1: mat(&mut tape, &[vec![1.0, -1.0], vec![2.0, 0.5]]),
            b1: tape.constant(Tensor::vector(vec![0.5, 0.0])),
            w2: mat(&mut tape, &[vec![1.0, 0.0], vec![-1.0, 3.0]]),
            b2: tape.constant(Tensor::vector(vec![0.0, 1.0])),
        };
        let x = mat(&mut tape, &[vec![1.0, 1.0], vec![-1.0, 2.0]]);
        let out = feed_forward(&mut tape, x, &w, Ctx::eval()).unwrap();
        // row0: h = relu([3.5, -0.5]) = [3.5, 0] -> [3.5, 1]
        // row1: h = relu([3.5, 2.0]) = [3.5, 2] -> [1.5, 7]
        assert_eq!(tape.value(out).data(), &[3.5, 1.0, 1.5, 7.0]);
        let xp = mat(&mut tape, &[vec![-1.0, 2.0], vec![1.0, 1.0]]);
        let outp = feed_forward(&mut tape, xp, &w, Ctx::eval()).unwrap();
        assert_eq!(tape.value(outp).data(), &[1.5, 7.0, 3.5, 1.0]);
    }

    #[test]
    fn causal_mask_layout() {
        assert_eq!(causal_mask(2), [true, false, true, true]);
    }

    #[test]
    fn positional_rows() {
        let p = positional_encoding(3, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(p.get(1, 0), 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(2, 3), (2.0 / 100.0f64).cos(), epsilon = 1e-15);
    }

    fn graph_weights(tape: &mut Tape, d: usize, n_rel: usize, gamma: Vec<Vec<f64>>) -> GraphAttention<Var> {
        let e = eye(tape, d);
        let g = if gamma.is_empty() {
            tape.constant(Tensor::zeros(&[n_rel, d]))
        } else {
            mat(tape, &gamma)
        };
        GraphAttention {
            wq: e,
            wk: e,
            wv: e,
            wf: e,
            gamma: g,
        }
    }

    #[test]
    fn single_neighbor_takes_whole_value() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let w = graph_weights(&mut tape, 2, 2, vec![vec![0.0, 0.0], vec![0.25, -0.5]]);
        let g = GraphInput {
            node_spans: vec![(0, 1), (1, 2)],
            edges: vec![(0, 1, 1), (1, 0, 1)],
        };
        let out = graph_attention(&mut tape, x, &g, &w, Ctx::eval()).unwrap();
        assert_eq!(tape.value(out).row(0), &[-0.75, 0.0]);
        assert_eq!(tape.value(out).row(1), &[1.25, 1.5]);
    }

    #[test]
    fn three_node_path_two_relations() {
        // Path 0 - 1 - 2 with relation 0 on (0,1) and relation 1 on (1,2).
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let gam = [[0.5, 0.0], [0.0, -1.0]];
        let w = graph_weights(&mut tape, 2, 2, gam.iter().map(|r| r.to_vec()).collect());
        let g = GraphInput {
            node_spans: vec![(0, 1), (1, 2), (2, 3)],
            edges: vec![(0, 1, 0), (1, 0, 0), (1, 2, 1), (2, 1, 1)],
        };
        let (out, alpha, _) =
            graph_attention_with_coefficients(&mut tape, x, &g, &w, Ctx::eval()).unwrap();
        // Node 1 attends to node 0 via r0 and node 2 via r1.
        let q1 = [0.0, 1.0];
        let k0 = [1.0 + gam[0][0], 0.0 + gam[0][1]];
        let k2 = [1.0 + gam[1][0], 1.0 + gam[1][1]];
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let s0 = dot(q1, k0) / 2f64.sqrt();
        let s2 = dot(q1, k2) / 2f64.sqrt();
        let a0 = s0.exp() / (s0.exp() + s2.exp());
        let expect = [a0 * k0[0] + (1.0 - a0) * k2[0], a0 * k0[1] + (1.0 - a0) * k2[1]];
        let o = tape.value(out);
        assert_abs_diff_eq!(o.get(1, 0), expect[0], epsilon = 1e-12);
        assert_abs_diff_eq!(o.get(1, 1), expect[1], epsilon = 1e-12);
        assert_eq!(o.row(0), &[0.5, 1.0]);
        assert_eq!(o.row(2), &[0.0, 0.0]);
        let a = tape.value(alpha).data();
        assert_abs_diff_eq!(a[1] + a[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn isolated_node_is_an_error() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = graph_weights(&mut tape, 2, 1, vec![]);
        let g = GraphInput {
            node_spans: vec![(0, 1), (1, 2)],
            edges: vec![(0, 1, 0)],
        };
        assert!(matches!(
            graph_attention(&mut tape, x, &g, &w, Ctx::eval()),
            Err(QgError::DegenerateNode { node: 1 })
        ));
    }

    #[test]
    fn fuse_identity_cases() {
        let mut tape = Tape::new();
        let z = mat(&mut tape, &[vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 4.0]]);
        let node = mat(&mut tape, &[vec![9.0, 9.0]]);
        // relu([z, -z]) then [I; -I] reproduces z.
        let w = Mlp {
            w1: mat(
                &mut tape,
                &[
                    vec![1.0, 0.0, -1.0, 0.0],
                    vec![0.0, 1.0, 0.0, -1.0],
                    vec![0.0; 4],
                    vec![0.0; 4],
                ],
            ),
            b1: tape.constant(Tensor::zeros(&[4])),
            w2: mat(
                &mut tape,
                &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]],
            ),
            b2: tape.constant(Tensor::zeros(&[2])),
        };
        let out = fuse(&mut tape, z, node, &[(1, 3)], &w).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(z).data());
        let empty = fuse(&mut tape, z, node, &[], &w).unwrap();
        assert_eq!(empty, z);
    }
}
