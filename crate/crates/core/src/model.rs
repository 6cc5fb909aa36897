//! Full model: parameters, derived context, and the per-document forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::doc_encoder::{self, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{CoocGraph, EdgeWeighting, PprConfig, PprMode, PprOperator};
use crate::head::{self, HeadParams, HeadScorer, HeadVars};
use crate::hierarchy::{self, BprConfig, BprEncoders, BlockVars, DescEmbedding, TreeInputs};
use crate::position::{self, PosProjection};
use crate::progressive::{self, BlendTarget, PmConfig, PmTrace};
use crate::tensor::{matmul_t, Tensor};
use crate::tree::CodeTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    Full,
    NoPm,
    NoBhpe,
    NoPp,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Full, Self::NoPm, Self::NoBhpe, Self::NoPp];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoPm => "no_pm",
            Self::NoBhpe => "no_bhpe",
            Self::NoPp => "no_pp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Branching capacity; defaults to the tree's maximum.
    pub pos_n: Option<usize>,
    /// Depth capacity; defaults to the tree's maximum.
    pub pos_k: Option<usize>,
    pub ppr: PprConfig,
    pub ppr_mode: PprMode,
    pub edge_weighting: EdgeWeighting,
    pub pm: PmConfig,
    pub mode: AblationMode,
    pub bpr: BprConfig,
    /// Train the hierarchy encoders with the main loss as well.
    pub joint_bpr: bool,
    /// Train the position projection (joint mode only).
    pub train_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pos_n: None,
            pos_k: None,
            ppr: PprConfig::default(),
            ppr_mode: PprMode::ClosedForm,
            edge_weighting: EdgeWeighting::Binary,
            pm: PmConfig::default(),
            mode: AblationMode::Full,
            bpr: BprConfig::default(),
            joint_bpr: false,
            train_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ppr.validate()?;
        self.pm.validate()?;
        if self.train_projection && !self.joint_bpr {
            return Err(Error::Config("train_projection requires joint_bpr".into()));
        }
        Ok(())
    }

    pub fn capacity(&self, tree: &CodeTree) -> (usize, usize) {
        (
            self.pos_n.unwrap_or(tree.max_branching()).max(1),
            self.pos_k.unwrap_or(tree.max_depth()).max(1),
        )
    }
}

/// Every tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub bpr: BprEncoders,
    pub projection: PosProjection,
    /// Fixed description-token table.
    pub desc_table: Tensor,
}

impl ModelParams {
    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embedding".into(), &self.encoder.embedding));
        for (i, w) in self.encoder.conv_w.iter().enumerate() {
            out.push((format!("conv_w.{i}"), w));
        }
        for (i, b) in self.encoder.conv_b.iter().enumerate() {
            out.push((format!("conv_b.{i}"), b));
        }
        out.push(("head.w_a".into(), &self.head.w_a));
        out.push(("head.b_a".into(), &self.head.b_a));
        out.push(("head.w_fc".into(), &self.head.w_fc));
        out.push(("head.score_vecs".into(), &self.head.score_vecs));
        out.push(("head.score_bias".into(), &self.head.score_bias));
        for (pre, blk) in [("bpr.up", &self.bpr.up), ("bpr.down", &self.bpr.down)] {
            for (name, t) in hierarchy::BLOCK_TENSORS.iter().zip(blk.tensors()) {
                out.push((format!("{pre}.{name}"), t));
            }
        }
        out.push(("projection".into(), &self.projection.matrix));
        out.push(("desc_table".into(), &self.desc_table));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding".into(), &mut self.encoder.embedding));
        for (i, w) in self.encoder.conv_w.iter_mut().enumerate() {
            out.push((format!("conv_w.{i}"), w));
        }
        for (i, b) in self.encoder.conv_b.iter_mut().enumerate() {
            out.push((format!("conv_b.{i}"), b));
        }
        out.push(("head.w_a".into(), &mut self.head.w_a));
        out.push(("head.b_a".into(), &mut self.head.b_a));
        out.push(("head.w_fc".into(), &mut self.head.w_fc));
        out.push(("head.score_vecs".into(), &mut self.head.score_vecs));
        out.push(("head.score_bias".into(), &mut self.head.score_bias));
        for (pre, blk) in [("bpr.up", &mut self.bpr.up), ("bpr.down", &mut self.bpr.down)] {
            for (name, t) in hierarchy::BLOCK_TENSORS.iter().zip(blk.tensors_mut()) {
                out.push((format!("{pre}.{name}"), t));
            }
        }
        out.push(("projection".into(), &mut self.projection.matrix));
        out.push(("desc_table".into(), &mut self.desc_table));
        out
    }

    /// Tensors updated by the per-document loss: encoder and head.
    pub fn doc_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.encoder.embedding];
        out.extend(self.encoder.conv_w.iter_mut());
        out.extend(self.encoder.conv_b.iter_mut());
        out.extend([
            &mut self.head.w_a,
            &mut self.head.b_a,
            &mut self.head.w_fc,
            &mut self.head.score_vecs,
            &mut self.head.score_bias,
        ]);
        out
    }

    pub fn doc_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.encoder.embedding];
        out.extend(self.encoder.conv_w.iter());
        out.extend(self.encoder.conv_b.iter());
        out.extend([&self.head.w_a, &self.head.b_a, &self.head.w_fc, &self.head.score_vecs, &self.head.score_bias]);
        out
    }

    /// Tensors updated through the code representations in joint mode.
    pub fn tree_tensors_mut(&mut self, with_projection: bool) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.bpr.up.tensors_mut());
        out.extend(self.bpr.down.tensors_mut());
        if with_projection {
            out.push(&mut self.projection.matrix);
        }
        out
    }

    pub fn tree_tensors(&self, with_projection: bool) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(self.bpr.up.tensors());
        out.extend(self.bpr.down.tensors());
        if with_projection {
            out.push(&self.projection.matrix);
        }
        out
    }
}

/// Non-trainable structures derived from the tree, graph and parameters.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub tree: CodeTree,
    pub graph: CoocGraph,
    pub ppr_op: PprOperator,
    pub neighbors: Vec<Vec<usize>>,
    pub desc: DescEmbedding,
    /// `nodes x d_pos`, root row zero.
    pub raw_positions: Tensor,
    pub inputs: TreeInputs,
    /// `L x d_e`.
    pub vpt: Tensor,
}

#[derive(Debug, Clone)]
pub struct HieNet {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub ctx: ModelContext,
}

fn raw_node_positions(tree: &CodeTree, n: usize, k: usize) -> Result<Tensor> {
    let labels = position::encode_all(tree, n, k)?;
    let mut out = Tensor::zeros(tree.len(), n * k);
    for l in 0..labels.rows() {
        out.row_mut(l + 1).copy_from_slice(labels.row(l));
    }
    Ok(out)
}

impl HieNet {
    /// Fresh parameters for `tree`, with the co-occurrence graph built from
    /// the training label sets.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        cfg: ModelConfig,
        tree: CodeTree,
        vocab: usize,
        train_label_sets: &[Vec<usize>],
    ) -> Result<Self> {
        cfg.validate()?;
        let l = tree.num_labels();
        if l == 0 {
            return Err(Error::Config("the code tree has no codes".into()));
        }
        let graph = CoocGraph::build(l, train_label_sets, cfg.edge_weighting)?;
        let d_e = cfg.encoder.d_e;
        let (n, k) = cfg.capacity(&tree);
        position::check_capacity(&tree, n, k)?;
        let encoder = EncoderParams::init(rng, &cfg.encoder, vocab);
        let head = HeadParams::init(rng, cfg.encoder.d_h(), d_e, l);
        let desc = DescEmbedding::build(rng, &tree, d_e);
        let projection = PosProjection::orthonormal(rng, d_e, n * k);
        let bpr = BprEncoders::init(rng, d_e);
        let params = ModelParams {
            encoder,
            head,
            bpr,
            projection,
            desc_table: desc.table.clone(),
        };
        Self::assemble(cfg, params, tree, graph)
    }

    /// Rebuilds the context around existing parameters.
    pub fn assemble(cfg: ModelConfig, params: ModelParams, tree: CodeTree, graph: CoocGraph) -> Result<Self> {
        cfg.validate()?;
        let (n, k) = cfg.capacity(&tree);
        let raw_positions = raw_node_positions(&tree, n, k)?;
        let mut desc = DescEmbedding::build(&mut rand::rngs::mock::StepRng::new(0, 0), &tree, cfg.encoder.d_e);
        if desc.table.shape() != params.desc_table.shape() {
            return Err(crate::error::shape_err("desc_table", desc.table.shape(), params.desc_table.shape()));
        }
        desc.table = params.desc_table.clone();
        let inits = hierarchy::code_inits(&tree, &desc)?;
        let positions = matmul_t(&raw_positions, false, &params.projection.matrix, true)?;
        let inputs = TreeInputs::new(&tree, inits, positions)?;
        let ppr_op = PprOperator::new(&graph, &cfg.ppr, cfg.ppr_mode)?;
        let neighbors = progressive::neighbor_lists(&graph, &tree, cfg.pm.neighbors);
        let ctx = ModelContext {
            vpt: Tensor::zeros(tree.num_labels(), cfg.encoder.d_e),
            tree,
            graph,
            ppr_op,
            neighbors,
            desc,
            raw_positions,
            inputs,
        };
        let mut model = Self { cfg, params, ctx };
        model.refresh()?;
        Ok(model)
    }

    /// Recomputes positions and code representations from the parameters.
    pub fn refresh(&mut self) -> Result<()> {
        let positions = matmul_t(&self.ctx.raw_positions, false, &self.params.projection.matrix, true)?;
        self.ctx.inputs.positions = positions;
        self.ctx.vpt = match self.cfg.mode {
            AblationMode::NoBhpe => self.ctx.inputs.inits.slice_rows(1, self.ctx.tree.num_labels()),
            _ => hierarchy::code_repr(&self.ctx.tree, &self.ctx.inputs, &self.params.bpr)?.vpt,
        };
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.ctx.tree.num_labels()
    }

    pub fn vocab(&self) -> usize {
        self.params.encoder.vocab()
    }

    /// Staged pre-training of the hierarchy encoders.
    pub fn pretrain_bpr(&mut self) -> Result<hierarchy::BprTrainReport> {
        let rep = hierarchy::train_bpr(&self.ctx.tree, &self.ctx.inputs, &mut self.params.bpr, &self.cfg.bpr)?;
        self.refresh()?;
        Ok(rep)
    }

    pub fn set_mode(&mut self, mode: AblationMode) -> Result<()> {
        self.cfg.mode = mode;
        self.refresh()
    }

    pub fn set_pm(&mut self, pm: PmConfig) -> Result<()> {
        pm.validate()?;
        if pm.neighbors != self.cfg.pm.neighbors {
            self.ctx.neighbors = progressive::neighbor_lists(&self.ctx.graph, &self.ctx.tree, pm.neighbors);
        }
        self.cfg.pm = pm;
        Ok(())
    }
}

/// Variables for the document-side parameters on one tape.
#[derive(Debug, Clone)]
pub struct DocVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl DocVars {
    /// All document-side tensors of `params`, trainable or constant.
    pub fn register<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, trainable: bool) -> Result<Self> {
        let mut reg = |t: &'a Tensor| if trainable { tape.param(t) } else { tape.constant_ref(t) };
        let embedding = reg(&params.encoder.embedding)?;
        let conv_w = params.encoder.conv_w.iter().map(&mut reg).collect::<Result<Vec<_>>>()?;
        let conv_b = params.encoder.conv_b.iter().map(&mut reg).collect::<Result<Vec<_>>>()?;
        let head = HeadVars {
            w_a: reg(&params.head.w_a)?,
            b_a: reg(&params.head.b_a)?,
            w_fc: reg(&params.head.w_fc)?,
            score_vecs: reg(&params.head.score_vecs)?,
            score_bias: reg(&params.head.score_bias)?,
        };
        Ok(Self {
            encoder: EncoderVars {
                embedding,
                conv_w,
                conv_b,
            },
            head,
        })
    }

    /// Variables in the order of [`ModelParams::doc_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![self.encoder.embedding];
        v.extend(&self.encoder.conv_w);
        v.extend(&self.encoder.conv_b);
        v.extend([self.head.w_a, self.head.b_a, self.head.w_fc, self.head.score_vecs, self.head.score_bias]);
        v
    }

    /// Rebuilds from variables ordered as [`DocVars::flat`].
    pub fn from_flat(v: &[Var], channels: usize) -> Self {
        let c = channels;
        Self {
            encoder: EncoderVars {
                embedding: v[0],
                conv_w: v[1..1 + c].to_vec(),
                conv_b: v[1 + c..1 + 2 * c].to_vec(),
            },
            head: HeadVars {
                w_a: v[1 + 2 * c],
                b_a: v[2 + 2 * c],
                w_fc: v[3 + 2 * c],
                score_vecs: v[4 + 2 * c],
                score_bias: v[5 + 2 * c],
            },
        }
    }
}

/// Per-call switches for [`forward_doc`].
#[derive(Debug, Clone, Default)]
pub struct ForwardOpts<'g> {
    /// Inverted-dropout mask for the embedded document.
    pub dropout: Option<Tensor>,
    /// Run the progressive mechanism.
    pub pm: bool,
    /// Gold vector for the confirmation stop rule (diagnostic traces).
    pub pm_gold: Option<&'g [f64]>,
}

#[derive(Debug, Clone)]
pub struct DocOutput {
    pub logits: Var,
    pub probs: Var,
    pub araw: Var,
    pub ppr: Var,
    pub p: Var,
    pub trace: Option<PmTrace>,
}

/// Document tokens to head outputs. `vpt` is `L x d_e`.
#[allow(clippy::too_many_arguments)]
pub fn forward_doc<'a>(
    tape: &mut Tape<'a>,
    cfg: &ModelConfig,
    ctx: &'a ModelContext,
    vars: &DocVars,
    vpt: Var,
    ids: &[Option<usize>],
    opts: &ForwardOpts<'_>,
) -> Result<DocOutput> {
    let x = doc_encoder::embed(tape, vars.encoder.embedding, ids)?;
    let x = tape.dropout(x, opts.dropout.clone())?;
    let repr = doc_encoder::forward(tape, x, &cfg.encoder, &vars.encoder)?;
    let att = head::code_wise_attention(tape, repr.h, vpt, vars.head.w_a, vars.head.b_a)?;
    let araw = att.araw;
    let ppr = match cfg.mode {
        AblationMode::NoPp => araw,
        _ => tape.linear(araw, &ctx.ppr_op)?,
    };
    let use_pm = opts.pm && cfg.mode != AblationMode::NoPm;
    let mut p = araw;
    let mut trace = None;
    let mut logit_mix = None;
    if use_pm {
        let scorer = HeadScorer {
            ppr: tape.value(ppr),
            w_fc: tape.value(vars.head.w_fc),
            score_vecs: tape.value(vars.head.score_vecs),
            score_bias: tape.value(vars.head.score_bias),
        };
        let out = progressive::apply(tape.value(araw), &scorer, &ctx.neighbors, opts.pm_gold, &cfg.pm)?;
        let identity = out.mix_is_identity();
        trace = Some(out.trace);
        if !identity {
            match cfg.pm.blend {
                BlendTarget::Features => {
                    let m = tape.constant(out.mix)?;
                    p = tape.matmul(m, araw)?;
                }
                BlendTarget::Logits => logit_mix = Some(out.mix),
            }
        }
    }
    let mut logits = head::aggregate(tape, p, ppr, vars.head.w_fc, vars.head.score_vecs, vars.head.score_bias)?;
    if let Some(m) = logit_mix {
        let m = tape.constant(m)?;
        logits = tape.matmul(m, logits)?;
    }
    let probs = tape.sigmoid(logits)?;
    Ok(DocOutput {
        logits,
        probs,
        araw,
        ppr,
        p,
        trace,
    })
}

/// Code representations on the tape from the hierarchy encoders and the
/// projection; returns `(Vpt, alignment loss)`.
pub fn vpt_on_tape(
    tape: &mut Tape<'_>,
    ctx: &ModelContext,
    up: &BlockVars,
    down: &BlockVars,
    projection: Var,
) -> Result<(Var, Var)> {
    let raw = tape.constant(ctx.raw_positions.clone())?;
    let positions = tape.matmul_t(raw, false, projection, true)?;
    let inits = tape.constant(ctx.inputs.inits.clone())?;
    let (vt, loss) = hierarchy::vt_on_tape(tape, &ctx.tree, inits, positions, up, down)?;
    let (n, d) = tape.value(positions).shape();
    let vp = tape.slice(positions, 1, n - 1, 0, d)?;
    Ok((tape.add(vt, vp)?, loss))
}

/// 0/1 target vector over the label space.
pub fn gold_vector(labels: usize, gold: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; labels];
    for &l in gold {
        if l < labels {
            g[l] = 1.0;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub trace: Option<PmTrace>,
}

impl HieNet {
    pub fn prepare(&self, tokens: &[usize]) -> Result<Vec<Option<usize>>> {
        doc_encoder::prepare_ids(tokens, &self.cfg.encoder, self.vocab())
    }

    /// Inference on one document with the configured branches.
    pub fn predict(&self, tokens: &[usize], pm_gold: Option<&[f64]>) -> Result<Prediction> {
        let ids = self.prepare(tokens)?;
        let mut tape = Tape::new();
        let vars = DocVars::register(&mut tape, &self.params, false)?;
        let vpt = tape.constant_ref(&self.ctx.vpt)?;
        let opts = ForwardOpts {
            dropout: None,
            pm: true,
            pm_gold,
        };
        let out = forward_doc(&mut tape, &self.cfg, &self.ctx, &vars, vpt, &ids, &opts)?;
        Ok(Prediction {
            probs: tape.value(out.probs).data().to_vec(),
            trace: out.trace,
        })
    }
}

/// Central-difference check of the loss on one document with respect to
/// every document-side and hierarchy tensor, the projection included.
pub fn full_grad_check(
    model: &HieNet,
    tokens: &[usize],
    gold: &[usize],
    dropout: Option<Tensor>,
    eps: f64,
) -> Result<GradCheckReport> {
    let ids = model.prepare(tokens)?;
    let gold = gold_vector(model.num_labels(), gold);
    let channels = model.cfg.encoder.filter_sizes.len();
    let mut params: Vec<Tensor> = model.params.doc_tensors().into_iter().cloned().collect();
    let n_doc = params.len();
    params.extend(model.params.tree_tensors(true).into_iter().cloned());
    grad_check(
        |t, v| {
            let vars = DocVars::from_flat(&v[..n_doc], channels);
            let mut up = BlockVars([Var::default(); 8]);
            let mut down = BlockVars([Var::default(); 8]);
            up.0.copy_from_slice(&v[n_doc..n_doc + 8]);
            down.0.copy_from_slice(&v[n_doc + 8..n_doc + 16]);
            let (vpt, bpr) = vpt_on_tape(t, &model.ctx, &up, &down, v[n_doc + 16])?;
            let opts = ForwardOpts {
                dropout: dropout.clone(),
                pm: true,
                pm_gold: None,
            };
            let out = forward_doc(t, &model.cfg, &model.ctx, &vars, vpt, &ids, &opts)?;
            let loss = t.bce(out.probs, &gold)?;
            t.add(loss, bpr)
        },
        &params,
        eps,
    )
}

/// A toy instance with every branch active, used for gradient checks.
pub struct ToyInstance {
    pub model: HieNet,
    pub docs: Vec<(Vec<usize>, Vec<usize>)>,
}

/// `L` codes, documents of `n_tokens` tokens, width `d_e`, blend `lambda`.
pub fn toy_instance(seed: u64, labels: usize, n_tokens: usize, d_e: usize, lambda: f64) -> Result<ToyInstance> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<(String, String)> = (0..labels)
        .map(|i| {
            if i < 2 {
                (format!("{}", 100 + i), format!("group {i}"))
            } else {
                (format!("{}.{}", 100 + i % 2, i / 2), format!("group {} item {}", i % 2, i / 2))
            }
        })
        .collect();
    let tree = CodeTree::build(&codes)?;
    let vocab = 12;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d_e,
            filter_sizes: vec![1, 3],
            d_c: 3,
            max_len: n_tokens,
        },
        pm: PmConfig {
            lambda,
            rounds: 2,
            tau: 0.5,
            in_training: true,
            ..PmConfig::default()
        },
        joint_bpr: true,
        train_projection: true,
        ..ModelConfig::default()
    };
    let label_sets = vec![vec![2, 3, 4], vec![3, 5], vec![0, 4]];
    let mut model = HieNet::new(&mut rng, cfg, tree, vocab, &label_sets)?;
    // Zero biases put padded positions exactly on the relu kink.
    for b in &mut model.params.encoder.conv_b {
        *b = crate::init::uniform(&mut rng, 1, b.cols(), 0.5);
    }
    // Make one code confidently positive so the progressive rounds fire.
    model.params.head.score_bias.set(3, 0, 2.0);
    let docs = (0..3)
        .map(|d| {
            let toks: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(0..vocab)).collect();
            (toks, label_sets[d].clone())
        })
        .collect();
    Ok(ToyInstance { model, docs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(mode: AblationMode) -> HieNet {
        let mut toy = toy_instance(1, 6, 12, 6, 0.3).unwrap().model;
        toy.cfg.joint_bpr = false;
        toy.cfg.train_projection = false;
        toy.set_mode(mode).unwrap();
        toy
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(AblationMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(AblationMode::parse("w/o").is_err());
    }

    #[test]
    fn predictions_are_probabilities() {
        let m = small_model(AblationMode::Full);
        let p = m.predict(&[1, 2, 3, 4, 5], None).unwrap();
        assert_eq!(p.probs.len(), 6);
        assert!(p.probs.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(p.trace.is_some());
    }

    #[test]
    fn no_pm_matches_lambda_zero() {
        let mut full = small_model(AblationMode::Full);
        full.set_pm(PmConfig { lambda: 0.0, ..full.cfg.pm }).unwrap();
        let nopm = small_model(AblationMode::NoPm);
        let toks = [3, 1, 4, 1, 5, 9, 2, 6];
        assert_eq!(full.predict(&toks, None).unwrap().probs, nopm.predict(&toks, None).unwrap().probs);
    }

    #[test]
    fn no_bhpe_uses_description_means() {
        let m = small_model(AblationMode::NoBhpe);
        assert_eq!(m.ctx.vpt, m.ctx.inputs.inits.slice_rows(1, 6));
    }

    #[test]
    fn ablation_flags_only_touch_their_branch() {
        let toks = [2, 7, 1, 8, 2, 8];
        let full = small_model(AblationMode::Full);
        let nopp = small_model(AblationMode::NoPp);
        let run = |m: &HieNet| {
            let ids = m.prepare(&toks).unwrap();
            let mut tape = Tape::new();
            let vars = DocVars::register(&mut tape, &m.params, false).unwrap();
            let vpt = tape.constant_ref(&m.ctx.vpt).unwrap();
            let out = forward_doc(&mut tape, &m.cfg, &m.ctx, &vars, vpt, &ids, &ForwardOpts::default()).unwrap();
            (tape.value(out.araw).clone(), tape.value(out.ppr).clone())
        };
        let (a_full, ppr_full) = run(&full);
        let (a_nopp, ppr_nopp) = run(&nopp);
        assert_eq!(a_full, a_nopp);
        assert_eq!(ppr_nopp, a_nopp);
        assert_ne!(ppr_full, a_full);
    }

    #[test]
    fn params_named_in_a_stable_order() {
        let m = small_model(AblationMode::Full);
        let names: Vec<String> = m.params.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&String::from("bpr.down.b2")));
        let mut p = m.params.clone();
        assert_eq!(p.named_mut().len(), names.len());
        assert_eq!(p.doc_tensors_mut().len(), m.params.doc_tensors().len());
    }

    #[test]
    fn full_model_gradient_check() {
        let toy = toy_instance(3, 6, 16, 8, 0.3).unwrap();
        let m = &toy.model;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (toks, gold) in &toy.docs {
            let n = m.prepare(toks).unwrap().len();
            let mask = crate::autodiff::dropout_mask(&mut rng, n, 8, 0.2);
            let report = full_grad_check(m, toks, gold, mask, 1e-5).unwrap();
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
        let trace = m.predict(&toy.docs[0].0, None).unwrap().trace.unwrap();
        assert!(trace.steps.iter().any(|s| !s.affected.is_empty()), "progressive rounds never blended anything");
    }
}
