//! Hidden Token Attribution.
//!
//! The contribution of a source vector `x_i` to a target vector `y` is the
//! Frobenius norm of the Jacobian block `∂y/∂x_i`, normalized over all
//! sources:
//!
//! ```text
//! c_i = ‖∂y/∂x_i‖_F / Σ_k ‖∂y/∂x_k‖_F
//! ```
//!
//! Gradients are never detached: softmax, layer norm and MLP paths all
//! contribute. When every block is exactly zero the row is undefined rather
//! than `0/0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{JacobianMode, JacobianOptions, NodeId, Target};
use crate::model::EncoderTrace;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A rank-1 vector inside an [`EncoderTrace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VectorRef {
    /// Row of `E^0` (pre-norm embedding sum).
    Input { token: usize },
    /// Row of the normalized embeddings that enter layer 1.
    EmbeddingNorm { token: usize },
    /// Row of `E^l`, `layer ≥ 1`; `layer = 0` is the same as `EmbeddingNorm`.
    Hidden { layer: usize, token: usize },
    /// Row `o_{h,j}` of a head output.
    HeadOutput {
        layer: usize,
        head: usize,
        token: usize,
    },
}

impl VectorRef {
    fn resolve<T: Scalar>(self, trace: &EncoderTrace<T>) -> Result<(NodeId, usize)> {
        let (node, token) = match self {
            VectorRef::Input { token } => (trace.e0_node(), token),
            VectorRef::EmbeddingNorm { token } => (trace.embedding_norm_node(), token),
            VectorRef::Hidden { layer, token } => (trace.hidden_node(layer)?, token),
            VectorRef::HeadOutput { layer, head, token } => {
                (trace.head_output_node(layer, head)?, token)
            }
        };
        trace.check_token(token)?;
        Ok((node, token))
    }
}

/// Where input contributions are anchored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputAnchor {
    /// `E^0` before the embedding layer norm.
    #[default]
    PreNorm,
    /// The embedding layer norm output.
    PostNorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttributionOptions {
    pub jacobian: JacobianOptions,
    pub input_anchor: InputAnchor,
}

impl AttributionOptions {
    pub fn with_mode(mode: JacobianMode) -> Self {
        Self {
            jacobian: JacobianOptions {
                mode,
                ..JacobianOptions::default()
            },
            ..Self::default()
        }
    }
}

/// One normalized contribution row.
#[derive(Clone, Debug, PartialEq)]
pub enum Contribution<T> {
    Defined(Vec<T>),
    /// Every Jacobian block was zero: the target does not depend on any source.
    Undefined,
}

impl<T> Contribution<T> {
    pub fn defined(&self) -> Option<&[T]> {
        match self {
            Contribution::Defined(v) => Some(v),
            Contribution::Undefined => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    HeadOutput,
    HiddenEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Input,
    PreviousLayer,
}

/// `d_s × d_s` contributions; entry `(j, i)` is the contribution of source
/// token `i` to target token `j`. Undefined rows hold NaN and are listed in
/// `undefined_rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionMatrix<T> {
    pub layer: usize,
    pub head: Option<usize>,
    pub target: TargetKind,
    pub source: SourceKind,
    pub values: Tensor<T>,
    pub undefined_rows: Vec<usize>,
}

impl<T: Scalar> ContributionMatrix<T> {
    pub fn seq_len(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, j: usize) -> Option<&[T]> {
        if self.undefined_rows.contains(&j) {
            None
        } else {
            Some(self.values.row(j))
        }
    }
}

fn frobenius<T: Scalar>(block: impl Iterator<Item = T>) -> T {
    block.map(|v| v * v).sum::<T>().sqrt()
}

fn normalize<T: Scalar>(norms: Vec<T>) -> Contribution<T> {
    let total: T = norms.iter().copied().sum();
    if total == T::zero() {
        return Contribution::Undefined;
    }
    Contribution::Defined(norms.into_iter().map(|n| n / total).collect())
}

/// Contribution of each source vector to the target vector.
pub fn contribution<T: Scalar>(
    trace: &EncoderTrace<T>,
    target: VectorRef,
    sources: &[VectorRef],
    opts: AttributionOptions,
) -> Result<Contribution<T>> {
    let (tnode, trow) = target.resolve(trace)?;
    let resolved: Vec<(NodeId, usize)> = sources
        .iter()
        .map(|s| s.resolve(trace))
        .collect::<Result<_>>()?;
    for (a, ra) in resolved.iter().enumerate() {
        if resolved[..a].contains(ra) {
            return Err(Error::Input(format!(
                "source {:?} is listed twice",
                sources[a]
            )));
        }
    }
    if resolved.is_empty() {
        return Err(Error::Input(
            "contribution needs at least one source".into(),
        ));
    }
    let graph = trace.graph();
    let mut norms = vec![T::zero(); resolved.len()];
    let mut nodes: Vec<NodeId> = resolved.iter().map(|(n, _)| *n).collect();
    nodes.sort();
    nodes.dedup();
    for node in nodes {
        let jac = graph.jacobian_of(Target::Row(tnode, trow), node, opts.jacobian)?;
        let q = jac.cols();
        let d = graph.value(node).cols();
        for (k, &(n, r)) in resolved.iter().enumerate() {
            if n != node {
                continue;
            }
            norms[k] = frobenius((0..jac.rows()).flat_map(|p| {
                jac.data()[p * q + r * d..p * q + (r + 1) * d]
                    .iter()
                    .copied()
            }));
        }
    }
    Ok(normalize(norms))
}

/// Full contribution matrix from every row of `source` to every row of
/// `target`.
fn contribution_matrix<T: Scalar>(
    trace: &EncoderTrace<T>,
    target: NodeId,
    source: NodeId,
    opts: AttributionOptions,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let graph = trace.graph();
    let d_s = trace.seq_len();
    let p = graph.value(target).cols();
    let d = graph.value(source).cols();
    let q = d_s * d;
    let mut values = Vec::with_capacity(d_s * d_s);
    let mut undefined = Vec::new();
    let whole = match opts.jacobian.mode {
        // One set of forward sweeps yields the Jacobian for every target row.
        JacobianMode::Forward => {
            Some(graph.jacobian_of(Target::Whole(target), source, opts.jacobian)?)
        }
        JacobianMode::Reverse => None,
    };
    for j in 0..d_s {
        let jac;
        let (rows, row_off) = match &whole {
            Some(w) => (w, j * p),
            None => {
                jac = graph.jacobian_of(Target::Row(target, j), source, opts.jacobian)?;
                (&jac, 0)
            }
        };
        let norms: Vec<T> = (0..d_s)
            .map(|i| {
                frobenius((row_off..row_off + p).flat_map(|r| {
                    rows.data()[r * q + i * d..r * q + (i + 1) * d]
                        .iter()
                        .copied()
                }))
            })
            .collect();
        match normalize(norms) {
            Contribution::Defined(v) => values.extend(v),
            Contribution::Undefined => {
                log::warn!(
                    "contribution row {j} is undefined: target does not depend on any source"
                );
                undefined.push(j);
                values.extend(std::iter::repeat_n(T::nan(), d_s));
            }
        }
    }
    Ok((Tensor::matrix(d_s, d_s, values)?, undefined))
}

/// `C(e_i^{l-1}, o_{h,j}^l)`: contribution of the head's input embeddings to
/// its output. For `l = 1` the sources are the normalized embeddings.
pub fn previous_layer_contribution<T: Scalar>(
    trace: &EncoderTrace<T>,
    l: usize,
    h: usize,
    opts: AttributionOptions,
) -> Result<ContributionMatrix<T>> {
    let target = trace.head_output_node(l, h)?;
    let source = trace.layer(l)?.input;
    let (values, undefined_rows) = contribution_matrix(trace, target, source, opts)?;
    Ok(ContributionMatrix {
        layer: l,
        head: Some(h),
        target: TargetKind::HeadOutput,
        source: SourceKind::PreviousLayer,
        values,
        undefined_rows,
    })
}

fn input_node<T: Scalar>(trace: &EncoderTrace<T>, anchor: InputAnchor) -> NodeId {
    match anchor {
        InputAnchor::PreNorm => trace.e0_node(),
        InputAnchor::PostNorm => trace.embedding_norm_node(),
    }
}

/// `C(e_i^0, o_{h,j}^l)`: contribution of the model input to a head output.
pub fn input_contribution<T: Scalar>(
    trace: &EncoderTrace<T>,
    l: usize,
    h: usize,
    opts: AttributionOptions,
) -> Result<ContributionMatrix<T>> {
    let target = trace.head_output_node(l, h)?;
    let source = input_node(trace, opts.input_anchor);
    let (values, undefined_rows) = contribution_matrix(trace, target, source, opts)?;
    Ok(ContributionMatrix {
        layer: l,
        head: Some(h),
        target: TargetKind::HeadOutput,
        source: SourceKind::Input,
        values,
        undefined_rows,
    })
}

/// `C(e_i^0, e_j^l)`: contribution of the model input to the layer output.
pub fn hidden_contribution<T: Scalar>(
    trace: &EncoderTrace<T>,
    l: usize,
    opts: AttributionOptions,
) -> Result<ContributionMatrix<T>> {
    let target = trace.layer(l)?.hidden;
    let source = input_node(trace, opts.input_anchor);
    let (values, undefined_rows) = contribution_matrix(trace, target, source, opts)?;
    Ok(ContributionMatrix {
        layer: l,
        head: None,
        target: TargetKind::HiddenEmbedding,
        source: SourceKind::Input,
        values,
        undefined_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, EncoderConfig, ModelWeights, TokenizedSequence};
    use rand::SeedableRng;

    fn toy(seed: u64, len: usize) -> (EncoderConfig, ModelWeights<f64>, TokenizedSequence) {
        let c = EncoderConfig::toy(2, 2, 8, 4, 16);
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let w = ModelWeights::random_dense(&c, 0.3, &mut rng).unwrap();
        let seq = TokenizedSequence::new("s", (1..=len).collect());
        (c, w, seq)
    }

    #[test]
    fn single_token_is_one() {
        let (c, w, seq) = toy(1, 1);
        let t = forward(&seq, &w, &c).unwrap();
        let r = contribution(
            &t,
            VectorRef::HeadOutput {
                layer: 2,
                head: 1,
                token: 0,
            },
            &[VectorRef::Input { token: 0 }],
            AttributionOptions::default(),
        )
        .unwrap();
        assert_eq!(r, Contribution::Defined(vec![1.0]));
        for m in [
            previous_layer_contribution(&t, 1, 0, AttributionOptions::default()).unwrap(),
            input_contribution(&t, 2, 1, AttributionOptions::default()).unwrap(),
            hidden_contribution(&t, 2, AttributionOptions::default()).unwrap(),
        ] {
            assert_eq!(m.values.data(), &[1.0]);
        }
    }

    #[test]
    fn contribution_agrees_with_matrix_row() {
        let (c, w, seq) = toy(2, 4);
        let t = forward(&seq, &w, &c).unwrap();
        let m = input_contribution(&t, 2, 0, AttributionOptions::default()).unwrap();
        let sources: Vec<VectorRef> = (0..4).map(|i| VectorRef::Input { token: i }).collect();
        let r = contribution(
            &t,
            VectorRef::HeadOutput {
                layer: 2,
                head: 0,
                token: 3,
            },
            &sources,
            AttributionOptions::default(),
        )
        .unwrap();
        let r = r.defined().unwrap();
        for (i, v) in r.iter().enumerate() {
            assert!((v - m.values.get(3, i)).abs() < 1e-15);
        }
    }

    #[test]
    fn mixed_source_nodes() {
        let (c, w, seq) = toy(3, 3);
        let t = forward(&seq, &w, &c).unwrap();
        let r = contribution(
            &t,
            VectorRef::Hidden { layer: 2, token: 1 },
            &[
                VectorRef::Input { token: 0 },
                VectorRef::Hidden { layer: 1, token: 2 },
            ],
            AttributionOptions::default(),
        )
        .unwrap();
        let r = r.defined().unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_target_is_undefined() {
        let (c, w, seq) = toy(4, 3);
        let t = forward(&seq, &w, &c).unwrap();
        // Layer-2 sources cannot influence a layer-1 head output.
        let r = contribution(
            &t,
            VectorRef::HeadOutput {
                layer: 1,
                head: 0,
                token: 0,
            },
            &[
                VectorRef::Hidden { layer: 2, token: 0 },
                VectorRef::Hidden { layer: 2, token: 1 },
            ],
            AttributionOptions::default(),
        )
        .unwrap();
        assert_eq!(r, Contribution::Undefined);
    }

    #[test]
    fn locator_errors() {
        let (c, w, seq) = toy(5, 3);
        let t = forward(&seq, &w, &c).unwrap();
        let opts = AttributionOptions::default();
        let tgt = VectorRef::HeadOutput {
            layer: 1,
            head: 0,
            token: 0,
        };
        assert!(matches!(
            contribution(&t, tgt, &[VectorRef::Input { token: 3 }], opts),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            contribution(
                &t,
                VectorRef::HeadOutput {
                    layer: 1,
                    head: 2,
                    token: 0
                },
                &[VectorRef::Input { token: 0 }],
                opts
            ),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            contribution(
                &t,
                tgt,
                &[VectorRef::Input { token: 1 }, VectorRef::Input { token: 1 }],
                opts
            ),
            Err(Error::Input(_))
        ));
        assert!(previous_layer_contribution(&t, 0, 0, opts).is_err());
        assert!(input_contribution(&t, 3, 0, opts).is_err());
    }

    #[test]
    fn post_norm_anchor_matches_previous_layer_at_layer_one() {
        let (c, w, seq) = toy(6, 4);
        let t = forward(&seq, &w, &c).unwrap();
        let opts = AttributionOptions {
            input_anchor: InputAnchor::PostNorm,
            ..AttributionOptions::default()
        };
        let a = input_contribution(&t, 1, 1, opts).unwrap();
        let b = previous_layer_contribution(&t, 1, 1, opts).unwrap();
        assert_eq!(a.values, b.values);
    }
}
