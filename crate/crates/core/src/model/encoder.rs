use super::{EncoderConfig, LayerWeights, ModelWeights, TokenizedSequence};
use crate::error::{shape_str, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Graph nodes recorded for one encoder layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `E^{l-1}` as seen by the attention heads.
    pub input: NodeId,
    /// `d_s × d_s`, row `i` is the attention distribution of token `i`.
    pub attention: Vec<NodeId>,
    /// `d_s × d_v`, row `i` is `o_{h,i} = V·a_i`.
    pub head_output: Vec<NodeId>,
    /// Post-attention layer norm output, input of the MLP.
    pub attention_block: NodeId,
    /// `E^l`.
    pub hidden: NodeId,
}

/// Everything one forward pass records: the full graph plus handles to the
/// quantities the analyses read or differentiate.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    graph: Graph<T>,
    seq_len: usize,
    n_heads: usize,
    e0: NodeId,
    embedding_norm: NodeId,
    layers: Vec<LayerTrace>,
}

impl<T: Scalar> EncoderTrace<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Node holding `E^0`, the summed word, position and segment embeddings.
    pub fn e0_node(&self) -> NodeId {
        self.e0
    }

    pub fn e0(&self) -> &Tensor<T> {
        self.graph.value(self.e0)
    }

    /// Node holding the embedding layer norm output (input of layer 1).
    pub fn embedding_norm_node(&self) -> NodeId {
        self.embedding_norm
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> Result<&LayerTrace> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::Index(format!(
                "layer {l} out of range 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }

    pub fn check_head(&self, h: usize) -> Result<()> {
        if h >= self.n_heads {
            return Err(Error::Index(format!(
                "head {h} out of range 0..{}",
                self.n_heads
            )));
        }
        Ok(())
    }

    pub fn check_token(&self, i: usize) -> Result<()> {
        if i >= self.seq_len {
            return Err(Error::Index(format!(
                "token {i} out of range 0..{}",
                self.seq_len
            )));
        }
        Ok(())
    }

    /// `E^l` for `l ≥ 1`; `l = 0` gives the normalized embeddings fed to
    /// layer 1.
    pub fn hidden_node(&self, l: usize) -> Result<NodeId> {
        if l == 0 {
            Ok(self.embedding_norm)
        } else {
            Ok(self.layer(l)?.hidden)
        }
    }

    pub fn hidden(&self, l: usize) -> Result<&Tensor<T>> {
        Ok(self.graph.value(self.hidden_node(l)?))
    }

    pub fn attention_node(&self, l: usize, h: usize) -> Result<NodeId> {
        self.check_head(h)?;
        Ok(self.layer(l)?.attention[h])
    }

    pub fn attention(&self, l: usize, h: usize) -> Result<&Tensor<T>> {
        Ok(self.graph.value(self.attention_node(l, h)?))
    }

    pub fn head_output_node(&self, l: usize, h: usize) -> Result<NodeId> {
        self.check_head(h)?;
        Ok(self.layer(l)?.head_output[h])
    }

    pub fn head_output(&self, l: usize, h: usize) -> Result<&Tensor<T>> {
        Ok(self.graph.value(self.head_output_node(l, h)?))
    }
}

/// One head's projection weights, sliced out of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
}

impl<T: Scalar> HeadWeights<T> {
    pub fn from_layer(layer: &LayerWeights<T>, config: &EncoderConfig, h: usize) -> Result<Self> {
        if h >= config.n_heads {
            return Err(Error::Index(format!(
                "head {h} out of range 0..{}",
                config.n_heads
            )));
        }
        let (dq, dv) = (config.d_q, config.d_v);
        Ok(Self {
            q_weight: cols(&layer.q_weight, h * dq, dq)?,
            q_bias: Tensor::vector(layer.q_bias.data()[h * dq..(h + 1) * dq].to_vec()),
            k_weight: cols(&layer.k_weight, h * dq, dq)?,
            k_bias: Tensor::vector(layer.k_bias.data()[h * dq..(h + 1) * dq].to_vec()),
            v_weight: cols(&layer.v_weight, h * dv, dv)?,
            v_bias: Tensor::vector(layer.v_bias.data()[h * dv..(h + 1) * dv].to_vec()),
        })
    }
}

fn cols<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, _) = t.as_matrix_dims("column slice")?;
    let mut data = Vec::with_capacity(m * len);
    for r in 0..m {
        data.extend_from_slice(&t.row(r)[start..start + len]);
    }
    Tensor::matrix(m, len, data)
}

/// `softmax(Q Kᵀ / √d_q)` and its product with `V`, for per-head `Q`, `K`, `V`.
fn scaled_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId)> {
    let d_q = g.value(q).cols();
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, T::one() / T::from_usize_lossy(d_q).sqrt())?;
    let attn = g.softmax(scaled)?;
    let out = g.matmul(attn, v)?;
    Ok((attn, out))
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: &Tensor<T>, b: &Tensor<T>) -> Result<NodeId> {
    let w = g.leaf(w.clone());
    let b = g.leaf(b.clone());
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<NodeId> {
    let gm = g.leaf(gamma.clone());
    let bt = g.leaf(beta.clone());
    g.layer_norm(x, gm, bt, T::lit(eps))
}

/// Single attention head on embeddings `e` (`d_s × d_e`). Returns the
/// attention matrix (`d_s × d_s`) and head output (`d_s × d_v`).
pub fn attention_head<T: Scalar>(
    e: &Tensor<T>,
    head: &HeadWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.leaf(e.clone());
    let q = linear(&mut g, x, &head.q_weight, &head.q_bias)?;
    let k = linear(&mut g, x, &head.k_weight, &head.k_bias)?;
    let v = linear(&mut g, x, &head.v_weight, &head.v_bias)?;
    let (a, o) = scaled_attention(&mut g, q, k, v)?;
    Ok((g.value(a).clone(), g.value(o).clone()))
}

fn embed_nodes<T: Scalar>(
    g: &mut Graph<T>,
    seq: &TokenizedSequence,
    weights: &ModelWeights<T>,
    config: &EncoderConfig,
) -> Result<NodeId> {
    seq.validate(config)?;
    let word = g.leaf(weights.word.clone());
    let pos = g.leaf(weights.position.clone());
    let typ = g.leaf(weights.token_type.clone());
    let w = g.gather(word, &seq.token_ids)?;
    let positions: Vec<usize> = (0..seq.len()).collect();
    let p = g.gather(pos, &positions)?;
    let t = g.gather(typ, &seq.segment_ids)?;
    let wp = g.add(w, p)?;
    g.add(wp, t)
}

/// `E^0`: row `i` is `word[token_i] + position[i] + type[segment_i]`, before
/// the embedding layer norm.
pub fn embed<T: Scalar>(
    seq: &TokenizedSequence,
    weights: &ModelWeights<T>,
    config: &EncoderConfig,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let e0 = embed_nodes(&mut g, seq, weights, config)?;
    Ok(g.value(e0).clone())
}

/// Traced forward pass from token ids.
pub fn forward<T: Scalar>(
    seq: &TokenizedSequence,
    weights: &ModelWeights<T>,
    config: &EncoderConfig,
) -> Result<EncoderTrace<T>> {
    let mut g = Graph::new();
    let e0 = embed_nodes(&mut g, seq, weights, config)?;
    run_layers(g, e0, weights, config)
}

/// Traced forward pass from a given `E^0` (`d_s × d_e`), which becomes a leaf.
pub fn forward_from_embeddings<T: Scalar>(
    e0: Tensor<T>,
    weights: &ModelWeights<T>,
    config: &EncoderConfig,
) -> Result<EncoderTrace<T>> {
    let (d_s, d_e) = e0.as_matrix_dims("input embeddings")?;
    if d_e != config.d_e || d_s == 0 || d_s > config.max_position {
        return Err(Error::Dimension(format!(
            "input embeddings {} incompatible with d_e={} and max_position={}",
            shape_str(e0.shape()),
            config.d_e,
            config.max_position
        )));
    }
    let mut g = Graph::new();
    let e0 = g.leaf(e0);
    run_layers(g, e0, weights, config)
}

fn run_layers<T: Scalar>(
    mut g: Graph<T>,
    e0: NodeId,
    weights: &ModelWeights<T>,
    config: &EncoderConfig,
) -> Result<EncoderTrace<T>> {
    config.validate()?;
    if weights.layers.len() != config.n_layers {
        return Err(Error::Input(format!(
            "weights have {} layers, config expects {}",
            weights.layers.len(),
            config.n_layers
        )));
    }
    let seq_len = g.value(e0).rows();
    let eps = config.ln_eps;
    let embedding_norm = layer_norm(&mut g, e0, &weights.emb_ln_gamma, &weights.emb_ln_beta, eps)?;
    let mut x = embedding_norm;
    let mut layers = Vec::with_capacity(config.n_layers);
    for lw in &weights.layers {
        let q = linear(&mut g, x, &lw.q_weight, &lw.q_bias)?;
        let k = linear(&mut g, x, &lw.k_weight, &lw.k_bias)?;
        let v = linear(&mut g, x, &lw.v_weight, &lw.v_bias)?;
        let mut attention = Vec::with_capacity(config.n_heads);
        let mut head_output = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = g.slice_cols(q, h * config.d_q, config.d_q)?;
            let kh = g.slice_cols(k, h * config.d_q, config.d_q)?;
            let vh = g.slice_cols(v, h * config.d_v, config.d_v)?;
            let (a, o) = scaled_attention(&mut g, qh, kh, vh)?;
            attention.push(a);
            head_output.push(o);
        }
        let heads = g.concat(&head_output)?;
        let proj = linear(&mut g, heads, &lw.out_weight, &lw.out_bias)?;
        let res = g.add(x, proj)?;
        let attention_block = layer_norm(&mut g, res, &lw.attn_ln_gamma, &lw.attn_ln_beta, eps)?;
        let f1 = linear(&mut g, attention_block, &lw.fc1_weight, &lw.fc1_bias)?;
        let act = g.gelu(f1, config.activation)?;
        let f2 = linear(&mut g, act, &lw.fc2_weight, &lw.fc2_bias)?;
        let res2 = g.add(attention_block, f2)?;
        let hidden = layer_norm(&mut g, res2, &lw.mlp_ln_gamma, &lw.mlp_ln_beta, eps)?;
        layers.push(LayerTrace {
            input: x,
            attention,
            head_output,
            attention_block,
            hidden,
        });
        x = hidden;
    }
    Ok(EncoderTrace {
        graph: g,
        seq_len,
        n_heads: config.n_heads,
        e0,
        embedding_norm,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_model(seed: u64) -> (EncoderConfig, ModelWeights<f64>) {
        let c = EncoderConfig::toy(2, 2, 8, 4, 16);
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let w = ModelWeights::random_dense(&c, 0.5, &mut rng).unwrap();
        (c, w)
    }

    #[test]
    fn embed_zero_tables_is_zero() {
        let c = EncoderConfig::toy(1, 1, 4, 4, 8);
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut w = ModelWeights::<f64>::random(&c, 0.1, &mut rng).unwrap();
        w.word = Tensor::zeros(vec![c.vocab_size, c.d_e]);
        w.position = Tensor::zeros(vec![c.max_position, c.d_e]);
        w.token_type = Tensor::zeros(vec![c.type_vocab_size, c.d_e]);
        let e = embed(&TokenizedSequence::new("s", vec![1, 2, 3]), &w, &c).unwrap();
        assert_eq!(e.shape(), &[3, 4]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_single_token_is_sum_of_rows() {
        let (c, w) = toy_model(4);
        let e = embed(&TokenizedSequence::new("s", vec![7]), &w, &c).unwrap();
        for k in 0..c.d_e {
            let want = w.word.get(7, k) + w.position.get(0, k) + w.token_type.get(0, k);
            assert_eq!(e.get(0, k), want);
        }
    }

    #[test]
    fn embed_one_hot_tables() {
        // Word rows, position rows and type rows light disjoint coordinates.
        let c = EncoderConfig {
            vocab_size: 2,
            max_position: 2,
            type_vocab_size: 2,
            ..EncoderConfig::toy(1, 1, 6, 6, 4)
        };
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut w = ModelWeights::<f64>::random(&c, 0.1, &mut rng).unwrap();
        let one_hot = |rows: usize, off: usize| {
            let mut d = vec![0.0; rows * 6];
            for r in 0..rows {
                d[r * 6 + off + r] = 1.0;
            }
            Tensor::matrix(rows, 6, d).unwrap()
        };
        w.word = one_hot(2, 0);
        w.position = one_hot(2, 2);
        w.token_type = one_hot(2, 4);
        let seq = TokenizedSequence {
            id: "s".into(),
            token_ids: vec![1, 0],
            segment_ids: vec![0, 1],
            display_tokens: None,
        };
        let e = embed(&seq, &w, &c).unwrap();
        assert_eq!(e.row(0), &[0., 1., 1., 0., 1., 0.]);
        assert_eq!(e.row(1), &[1., 0., 0., 1., 0., 1.]);
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let (c, w) = toy_model(0);
        let msg = embed(&TokenizedSequence::new("s", vec![1, 99]), &w, &c)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("99") && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn zero_query_head_is_uniform() {
        let (c, w) = toy_model(1);
        let mut hw = HeadWeights::from_layer(&w.layers[0], &c, 0).unwrap();
        hw.q_weight = Tensor::zeros(vec![8, 4]);
        hw.q_bias = Tensor::zeros(vec![4]);
        let e = embed(&TokenizedSequence::new("s", vec![1, 2, 3, 4, 5]), &w, &c).unwrap();
        let (a, o) = attention_head(&e, &hw).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.2));
        assert_eq!(o.shape(), &[5, 4]);
    }

    #[test]
    fn singleton_attention_is_one() {
        let (c, w) = toy_model(2);
        let hw = HeadWeights::from_layer(&w.layers[1], &c, 1).unwrap();
        let e = embed(&TokenizedSequence::new("s", vec![3]), &w, &c).unwrap();
        let (a, _) = attention_head(&e, &hw).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn closed_form_two_token_head() {
        // d_e = d_q = d_v = 1: q_i = e_i, k_i = e_i, v_i = e_i.
        let hw = HeadWeights {
            q_weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            q_bias: Tensor::vector(vec![0.0]),
            k_weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            k_bias: Tensor::vector(vec![0.0]),
            v_weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            v_bias: Tensor::vector(vec![0.0]),
        };
        // Token 0 has e_0 = 1 so its logits are (e_0·e_0, e_0·e_1) = (1, 1 + ln 3):
        // softmax gives (1/4, 3/4).
        let e1 = 1.0 + 3f64.ln();
        let e = Tensor::matrix(2, 1, vec![1.0, e1]).unwrap();
        let (a, o) = attention_head(&e, &hw).unwrap();
        assert!((a.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((a.get(0, 1) - 0.75).abs() < 1e-15);
        assert!((o.get(0, 0) - (0.25 * 1.0 + 0.75 * e1)).abs() < 1e-15);
    }

    #[test]
    fn trace_shapes_and_row_sums() {
        let (c, w) = toy_model(3);
        let seq = TokenizedSequence::new("s", vec![1, 2, 3, 4, 5, 6, 7]);
        let t = forward(&seq, &w, &c).unwrap();
        assert_eq!(t.seq_len(), 7);
        for l in 1..=2 {
            assert_eq!(t.hidden(l).unwrap().shape(), &[7, 8]);
            for h in 0..2 {
                let a = t.attention(l, h).unwrap();
                assert_eq!(a.shape(), &[7, 7]);
                assert_eq!(t.head_output(l, h).unwrap().shape(), &[7, 4]);
                for i in 0..7 {
                    let s: f64 = a.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        assert!(t.attention(3, 0).is_err());
        assert!(t.attention(1, 2).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_replayable() {
        let (c, w) = toy_model(5);
        let seq = TokenizedSequence::new("s", vec![4, 9, 1]);
        let a = forward(&seq, &w, &c).unwrap();
        let b = forward(&seq, &w, &c).unwrap();
        assert_eq!(a.hidden(2).unwrap().data(), b.hidden(2).unwrap().data());
        let replay = a.graph().replay(&[]).unwrap();
        let id = a.hidden_node(2).unwrap();
        assert_eq!(replay[id.index()].data(), a.hidden(2).unwrap().data());
    }

    #[test]
    fn forward_from_embeddings_matches_forward() {
        let (c, w) = toy_model(6);
        let seq = TokenizedSequence::new("s", vec![2, 3, 5, 8]);
        let a = forward(&seq, &w, &c).unwrap();
        let b = forward_from_embeddings(a.e0().clone(), &w, &c).unwrap();
        assert_eq!(a.hidden(2).unwrap().data(), b.hidden(2).unwrap().data());
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let (c, w) = toy_model(7);
        let w32 = ModelWeights::<f32>::from_archive(&w.to_archive(&c), &c).unwrap();
        let seq = TokenizedSequence::new("s", vec![2, 3, 5, 8]);
        let a = forward(&seq, &w, &c).unwrap();
        let b = forward(&seq, &w32, &c).unwrap();
        let diff = a
            .hidden(2)
            .unwrap()
            .max_abs_diff(&b.hidden(2).unwrap().cast());
        assert!(diff < 1e-4, "{diff}");
    }
}
