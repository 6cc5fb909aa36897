//! Progressive prediction.
//!
//! Each round confirms the highest-scoring unconfirmed code (if its
//! probability reaches `tau`) and blends its feature row into the rows of its
//! unconfirmed neighbors: `P_j <- lambda P_c + (1 - lambda) P_j`. The same
//! blends are tracked as a row-mixing matrix `M` so that `P = M Araw` can be
//! replayed on a differentiation tape.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::graph::CoocGraph;
use crate::head::Scorer;
use crate::tensor::Tensor;
use crate::tree::CodeTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborSource {
    #[default]
    Graph,
    /// Parent and children in the code tree.
    Tree,
    Union,
}

impl NeighborSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Graph => "graph",
            Self::Tree => "tree",
            Self::Union => "union",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Self::Graph),
            "tree" => Ok(Self::Tree),
            "union" => Ok(Self::Union),
            other => Err(Error::Config(format!("unknown neighbor source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendTarget {
    #[default]
    Features,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmConfig {
    pub lambda: f64,
    pub rounds: usize,
    pub tau: f64,
    pub neighbors: NeighborSource,
    pub blend: BlendTarget,
    /// Feed blended features into the training loss.
    pub in_training: bool,
}

impl Default for PmConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            rounds: 3,
            tau: 0.5,
            neighbors: NeighborSource::Graph,
            blend: BlendTarget::Features,
            in_training: false,
        }
    }
}

impl PmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda = {} must lie in [0, 1]", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// Neighbor lists per label for the configured source, sorted ascending.
pub fn neighbor_lists(graph: &CoocGraph, tree: &CodeTree, source: NeighborSource) -> Vec<Vec<usize>> {
    let l = tree.num_labels();
    (0..l)
        .map(|c| {
            let mut set = BTreeSet::new();
            if matches!(source, NeighborSource::Graph | NeighborSource::Union) && c < graph.num_labels() {
                set.extend(graph.neighbors(c));
            }
            if matches!(source, NeighborSource::Tree | NeighborSource::Union) {
                let node = tree.node(c + 1);
                if let Some(p) = node.parent {
                    if p != tree.root() {
                        set.insert(p - 1);
                    }
                }
                set.extend(node.children.iter().map(|&ch| ch - 1));
            }
            set.into_iter().collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmStep {
    pub round: usize,
    pub code: usize,
    pub prob: f64,
    /// Known only when gold labels were supplied.
    pub correct: Option<bool>,
    /// Neighbors whose rows were blended.
    pub affected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PmTrace {
    pub steps: Vec<PmStep>,
}

impl PmTrace {
    pub fn confirmed(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.code).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmOutput {
    /// Blended features (`L x d_e`); equal to the input for logit blending.
    pub p: Tensor,
    /// Row-mixing matrix applied to the features or to the logits.
    pub mix: Tensor,
    /// Final logits after the last blend.
    pub logits: Vec<f64>,
    pub trace: PmTrace,
}

impl PmOutput {
    pub fn mix_is_identity(&self) -> bool {
        self.mix == Tensor::identity(self.mix.rows())
    }
}

fn blend_rows(t: &mut Tensor, c: usize, j: usize, lambda: f64) {
    let cols = t.cols();
    for k in 0..cols {
        let v = lambda * t.get(c, k) + (1.0 - lambda) * t.get(j, k);
        t.set(j, k, v);
    }
}

/// Runs the confirmation rounds for one document.
pub fn apply<S: Scorer + ?Sized>(
    araw: &Tensor,
    scorer: &S,
    neighbors: &[Vec<usize>],
    gold: Option<&[f64]>,
    cfg: &PmConfig,
) -> Result<PmOutput> {
    cfg.validate()?;
    let l = araw.rows();
    if neighbors.len() != l || gold.is_some_and(|g| g.len() != l) {
        return Err(crate::error::shape_err("progressive", araw.shape(), (neighbors.len(), 1)));
    }
    let mut p = araw.clone();
    let mut mix = Tensor::identity(l);
    let mut logits = scorer.logits(&p)?;
    let mut confirmed = alloc::vec![false; l];
    let mut trace = PmTrace::default();
    for round in 0..cfg.rounds {
        let mut best: Option<usize> = None;
        for c in 0..l {
            if !confirmed[c] && best.is_none_or(|b| logits[c] > logits[b]) {
                best = Some(c);
            }
        }
        let Some(c) = best else { break };
        let prob = sigmoid(logits[c]);
        if prob < cfg.tau {
            break;
        }
        confirmed[c] = true;
        let correct = gold.map(|g| g[c] > 0.5);
        if correct == Some(false) {
            trace.steps.push(PmStep {
                round,
                code: c,
                prob,
                correct,
                affected: Vec::new(),
            });
            break;
        }
        let affected: Vec<usize> = neighbors[c].iter().copied().filter(|&j| j != c && !confirmed[j]).collect();
        for &j in &affected {
            blend_rows(&mut mix, c, j, cfg.lambda);
            match cfg.blend {
                BlendTarget::Features => blend_rows(&mut p, c, j, cfg.lambda),
                BlendTarget::Logits => logits[j] = cfg.lambda * logits[c] + (1.0 - cfg.lambda) * logits[j],
            }
        }
        if cfg.blend == BlendTarget::Features && !affected.is_empty() {
            logits = scorer.logits(&p)?;
        }
        trace.steps.push(PmStep {
            round,
            code: c,
            prob,
            correct,
            affected,
        });
    }
    Ok(PmOutput { p, mix, logits, trace })
}

/// The `lambda` grid `0, 0.1, ..., 1.0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
