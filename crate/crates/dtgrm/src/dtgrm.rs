//! Dilated temporal graph reasoning: per-frame 3-node graphs, DRGC
//! layers, and the stacked refinement stages.
//!
//! Every frame t at level k owns two graphs over the nodes
//! (t-tau, t, t+tau) with tau = 2^k: a similarity graph whose edge
//! logits are cosine similarities of the hidden rows, and a learned
//! graph whose logits come from a dilated convolution. Out-of-range
//! nodes are masked: their logits never enter the softmax, their
//! feature rows are zero, and their adjacency rows/columns are exactly
//! zero after normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{compose_scalars, stack_cols, Tensor};

/// Floor for the cosine denominator.
pub const EPSILON: f64 = 1e-8;

/// Nodes per dilated temporal graph.
pub const GRAPH_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphVariant {
    /// Similarity and learned graphs fused by addition.
    Both,
    SOnly,
    LOnly,
    /// Graph reasoning replaced by a plain dilated convolution of
    /// matched width.
    Conv,
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GraphVariant::Both => "both",
            GraphVariant::SOnly => "s-only",
            GraphVariant::LOnly => "l-only",
            GraphVariant::Conv => "conv",
        };
        f.write_str(s)
    }
}

impl FromStr for GraphVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(GraphVariant::Both),
            "s-only" => Ok(GraphVariant::SOnly),
            "l-only" => Ok(GraphVariant::LOnly),
            "conv" => Ok(GraphVariant::Conv),
            other => Err(Error::Config(format!(
                "unknown graph variant {other:?} (expected both, s-only, l-only or conv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DtgrmConfig {
    pub d_hidden: usize,
    /// DRGC layers per stage; level k works at dilation 2^k.
    pub num_levels: usize,
    /// Refinement stages stacked after the backbone; 0 disables
    /// refinement entirely.
    pub num_stages: usize,
    pub graph_variant: GraphVariant,
}

impl Default for DtgrmConfig {
    fn default() -> Self {
        DtgrmConfig {
            d_hidden: 64,
            num_levels: 10,
            num_stages: 3,
            graph_variant: GraphVariant::Both,
        }
    }
}

impl DtgrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.num_levels == 0 {
            return Err(Error::Config(
                "dtgrm d_hidden and num_levels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Graph node indices (t-tau, t, t+tau) and their in-range mask.
pub fn node_indices(t: usize, tau: usize, t_len: usize) -> ([i64; 3], [bool; 3]) {
    let t = t as i64;
    let tau = tau as i64;
    let idx = [t - tau, t, t + tau];
    let valid = idx.map(|i| i >= 0 && i < t_len as i64);
    (idx, valid)
}

/// Similarity-graph logits for one frame: 3x3 with cosine similarities
/// between valid node rows, exact 1 on the valid diagonal, exact
/// symmetry, and 0 at masked entries.
pub fn build_s_graph<T: Scalar>(
    h: &Tensor<T>,
    t: usize,
    tau: usize,
    epsilon: f64,
) -> (Tensor<T>, [bool; 3]) {
    let (t_len, d) = h.dims2("s-graph hidden");
    assert!(t < t_len, "frame {t} out of range for {t_len} frames");
    let (idx, valid) = node_indices(t, tau, t_len);

    let mut base = vec![T::zero(); 9];
    for i in 0..3 {
        if valid[i] {
            base[i * 3 + i] = T::one();
        }
    }
    let row = |i: usize| h.index_rows(&[Some(idx[i] as usize)]).reshape(vec![d]);
    let mut placements = Vec::new();
    for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
        if valid[i] && valid[j] {
            let c = row(i).cosine_rows(&row(j), T::of(epsilon));
            // the logit matrix is symmetric by construction
            placements.push((i * 3 + j, c.clone()));
            placements.push((j * 3 + i, c));
        }
    }
    (compose_scalars(vec![3, 3], base, &placements), valid)
}

/// Learned-graph logits for every frame: a dilated convolution to 9
/// channels; row t reshapes row-major into frame t's 3x3 logits.
pub fn build_l_graph<T: Scalar>(
    h: &Tensor<T>,
    filter: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Tensor<T> {
    assert_eq!(filter.shape()[2], 9, "l-graph filter must emit 9 channels");
    h.conv1d(filter, Some(bias), dilation)
}

/// Row-wise masked softmax over a 3x3 logit matrix. Masked columns are
/// exactly 0; rows of invalid source nodes are all zero.
pub fn normalize_adjacency<T: Scalar>(logits: &Tensor<T>, valid: &[bool; 3]) -> Tensor<T> {
    assert_eq!(logits.shape(), vec![3, 3], "adjacency logits must be 3x3");
    let mut mask = [false; 9];
    for i in 0..3 {
        for j in 0..3 {
            mask[i * 3 + j] = valid[i] && valid[j];
        }
    }
    logits.softmax_rows_permissive(&mask)
}

/// One graph-convolution step: ReLU(A X W).
pub fn gcn_apply<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    a.matmul(x).matmul(w).relu()
}

/// Both graphs of one frame at one level, fully materialized. The
/// training path computes only what the center row needs; this form
/// exists for inspection and for invariant tests.
pub struct FrameGraph<T: Scalar> {
    pub center: usize,
    pub level: usize,
    pub dilation: usize,
    pub node_indices: [i64; 3],
    pub valid: [bool; 3],
    pub s_logits: Tensor<T>,
    pub l_logits: Tensor<T>,
    pub adj_s: Tensor<T>,
    pub adj_l: Tensor<T>,
}

impl<T: Scalar> FrameGraph<T> {
    pub fn build(
        h: &Tensor<T>,
        t: usize,
        level: usize,
        l_filter: &Tensor<T>,
        l_bias: &Tensor<T>,
    ) -> Self {
        let tau = 1 << level;
        let (t_len, _) = h.dims2("frame-graph hidden");
        let (idx, valid) = node_indices(t, tau, t_len);
        let (s_logits, _) = build_s_graph(h, t, tau, EPSILON);
        let l_all = build_l_graph(h, l_filter, l_bias, tau);
        let l_logits = l_all
            .index_rows(&[Some(t)])
            .reshape(vec![3, 3]);
        let adj_s = normalize_adjacency(&s_logits, &valid);
        let adj_l = normalize_adjacency(&l_logits, &valid);
        FrameGraph {
            center: t,
            level,
            dilation: tau,
            node_indices: idx,
            valid,
            s_logits,
            l_logits,
            adj_s,
            adj_l,
        }
    }

    /// Node feature matrix X: rows of h at the node indices, zero rows
    /// for invalid nodes.
    pub fn gather_nodes(&self, h: &Tensor<T>) -> Tensor<T> {
        let rows: Vec<Option<usize>> = self
            .node_indices
            .iter()
            .zip(&self.valid)
            .map(|(&i, &v)| v.then_some(i as usize))
            .collect();
        h.index_rows(&rows)
    }
}

struct SParams<T: Scalar> {
    w: Parameter<T>,
}

struct LParams<T: Scalar> {
    w: Parameter<T>,
    filter: Parameter<T>,
    bias: Parameter<T>,
}

struct ConvParams<T: Scalar> {
    w: Parameter<T>,
    b: Parameter<T>,
}

/// One DRGC layer: graph reasoning at dilation 2^level plus a residual
/// update through a 1x1 fusion convolution (no bias, so zero weights
/// leave the hidden state untouched).
pub struct DrgcLevel<T: Scalar> {
    level: usize,
    dilation: usize,
    s: Option<SParams<T>>,
    l: Option<LParams<T>>,
    conv: Option<ConvParams<T>>,
    fusion_w: Parameter<T>,
}

impl<T: Scalar> DrgcLevel<T> {
    fn new(
        prefix: &str,
        level: usize,
        d: usize,
        variant: GraphVariant,
        rng: &mut SplitMix64,
    ) -> Self {
        let s = matches!(variant, GraphVariant::Both | GraphVariant::SOnly).then(|| SParams {
            w: Parameter::uniform(format!("{prefix}.s.w"), vec![d, d], d, rng),
        });
        let l = matches!(variant, GraphVariant::Both | GraphVariant::LOnly).then(|| LParams {
            w: Parameter::uniform(format!("{prefix}.l.w"), vec![d, d], d, rng),
            filter: Parameter::uniform(format!("{prefix}.l.filter"), vec![3, d, 9], 3 * d, rng),
            bias: Parameter::zeros(format!("{prefix}.l.bias"), vec![9]),
        });
        let conv = matches!(variant, GraphVariant::Conv).then(|| ConvParams {
            w: Parameter::uniform(format!("{prefix}.conv.w"), vec![3, d, d], 3 * d, rng),
            b: Parameter::zeros(format!("{prefix}.conv.b"), vec![d]),
        });
        DrgcLevel {
            level,
            dilation: 1 << level,
            s,
            l,
            conv,
            fusion_w: Parameter::uniform(format!("{prefix}.fusion.w"), vec![d, d], d, rng),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn l_graph_params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.l.as_ref().map(|l| (l.filter.tensor(), l.bias.tensor()))
    }

    /// Center-row messages (A X)[center] for every frame at once, given
    /// the per-frame center-row adjacency (T x 3).
    fn messages(
        h: &Tensor<T>,
        x_prev: &Tensor<T>,
        x_next: &Tensor<T>,
        adj_row: &Tensor<T>,
    ) -> Tensor<T> {
        x_prev
            .mul_col_broadcast(&adj_row.col(0))
            .add(&h.mul_col_broadcast(&adj_row.col(1)))
            .add(&x_next.mul_col_broadcast(&adj_row.col(2)))
    }

    /// h_{k+1} = fusion(o) + h_k, where o is the center row of the
    /// graph-convolution output for every frame. Only that row feeds
    /// the residual, so the whole level reduces to row-1 adjacencies.
    pub fn forward(&self, h: &Tensor<T>) -> Tensor<T> {
        let (t_len, _) = h.dims2("drgc hidden");
        let tau = self.dilation;

        if let Some(conv) = &self.conv {
            let o = h.conv1d(conv.w.tensor(), Some(conv.b.tensor()), tau).relu();
            return o.matmul(self.fusion_w.tensor()).add(h);
        }

        let prev_rows: Vec<Option<usize>> = (0..t_len).map(|t| t.checked_sub(tau)).collect();
        let next_rows: Vec<Option<usize>> =
            (0..t_len).map(|t| (t + tau < t_len).then_some(t + tau)).collect();
        let x_prev = h.index_rows(&prev_rows);
        let x_next = h.index_rows(&next_rows);
        let mut mask = Vec::with_capacity(3 * t_len);
        for t in 0..t_len {
            mask.push(prev_rows[t].is_some());
            mask.push(true);
            mask.push(next_rows[t].is_some());
        }

        let mut o: Option<Tensor<T>> = None;
        if let Some(s) = &self.s {
            // cosine of the center row against each neighbor; the center
            // self-similarity is the constant 1 (cos(v, v) carries no
            // gradient); masked entries never reach the softmax
            let c_prev = h.cosine_rows(&x_prev, T::of(EPSILON));
            let c_next = h.cosine_rows(&x_next, T::of(EPSILON));
            let ones = Tensor::filled(vec![t_len], T::one());
            let row_logits = stack_cols(&[&c_prev, &ones, &c_next]);
            let adj = row_logits.softmax(1, Some(&mask));
            let out = Self::messages(h, &x_prev, &x_next, &adj)
                .matmul(s.w.tensor())
                .relu();
            o = Some(out);
        }
        if let Some(l) = &self.l {
            let logits9 = build_l_graph(h, l.filter.tensor(), l.bias.tensor(), tau);
            let row_logits = logits9.slice_cols(3, 6);
            let adj = row_logits.softmax(1, Some(&mask));
            let out = Self::messages(h, &x_prev, &x_next, &adj)
                .matmul(l.w.tensor())
                .relu();
            o = Some(match o {
                Some(prev) => prev.add(&out),
                None => out,
            });
        }
        let o = o.expect("drgc level has no active graph");
        o.matmul(self.fusion_w.tensor()).add(h)
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut ps = Vec::new();
        if let Some(s) = &self.s {
            ps.push(&s.w);
        }
        if let Some(l) = &self.l {
            ps.extend([&l.w, &l.filter, &l.bias]);
        }
        if let Some(c) = &self.conv {
            ps.extend([&c.w, &c.b]);
        }
        ps.push(&self.fusion_w);
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = Vec::new();
        if let Some(s) = &mut self.s {
            ps.push(&mut s.w);
        }
        if let Some(l) = &mut self.l {
            ps.extend([&mut l.w, &mut l.filter, &mut l.bias]);
        }
        if let Some(c) = &mut self.conv {
            ps.extend([&mut c.w, &mut c.b]);
        }
        ps.push(&mut self.fusion_w);
        ps
    }
}

/// One refinement stage: embed likelihoods, run the DRGC stack with
/// doubling dilations, classify from the final hidden state.
pub struct DtgrmStage<T: Scalar> {
    embed_w: Parameter<T>,
    embed_b: Parameter<T>,
    levels: Vec<DrgcLevel<T>>,
    head_w: Parameter<T>,
    head_b: Parameter<T>,
}

impl<T: Scalar> DtgrmStage<T> {
    pub fn new(
        prefix: &str,
        num_classes: usize,
        cfg: &DtgrmConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let d = cfg.d_hidden;
        DtgrmStage {
            embed_w: Parameter::uniform(
                format!("{prefix}.embed.w"),
                vec![num_classes, d],
                num_classes,
                rng,
            ),
            embed_b: Parameter::zeros(format!("{prefix}.embed.b"), vec![d]),
            levels: (0..cfg.num_levels)
                .map(|k| {
                    DrgcLevel::new(&format!("{prefix}.level{k}"), k, d, cfg.graph_variant, rng)
                })
                .collect(),
            head_w: Parameter::uniform(format!("{prefix}.head.w"), vec![d, num_classes], d, rng),
            head_b: Parameter::zeros(format!("{prefix}.head.b"), vec![num_classes]),
        }
    }

    /// Level-0 hidden state from class likelihoods.
    pub fn embed_likelihoods(&self, y: &Tensor<T>) -> Tensor<T> {
        y.matmul(self.embed_w.tensor())
            .add_row_broadcast(self.embed_b.tensor())
    }

    pub fn levels(&self) -> &[DrgcLevel<T>] {
        &self.levels
    }

    /// Refined likelihoods plus the final hidden state (kept for the
    /// exchange-detection head).
    pub fn forward(&self, y: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut h = self.embed_likelihoods(y);
        for level in &self.levels {
            h = level.forward(&h);
        }
        let y_out = h
            .matmul(self.head_w.tensor())
            .add_row_broadcast(self.head_b.tensor())
            .softmax_rows();
        (y_out, h)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut ps = vec![&self.embed_w, &self.embed_b];
        for l in &self.levels {
            ps.extend(l.params());
        }
        ps.extend([&self.head_w, &self.head_b]);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = vec![&mut self.embed_w, &mut self.embed_b];
        for l in &mut self.levels {
            ps.extend(l.params_mut());
        }
        ps.extend([&mut self.head_w, &mut self.head_b]);
        ps
    }
}
