//! Staged training loop with early stopping, evaluation, ablations and the
//! λ sweep.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, dropout_mask, AdamConfig, AdamState, Tape};
use crate::error::{Error, Result};
use crate::hierarchy::BprTrainReport;
use crate::metrics::{self, EvalResult};
use crate::model::{forward_doc, gold_vector, vpt_on_tape, AblationMode, DocVars, ForwardOpts, HieNet, ModelConfig};
use crate::progressive::PmConfig;
use crate::synth::{self, LabeledDoc};
use crate::tensor::Tensor;
use crate::tree::CodeTree;

/// A document resolved against the label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub doc_id: String,
    pub tokens: Vec<usize>,
    pub gold: Vec<usize>,
}

pub fn examples(tree: &CodeTree, docs: &[LabeledDoc]) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            Ok(Example {
                doc_id: d.doc_id.clone(),
                tokens: d.tokens.clone(),
                gold: synth::label_indices(tree, d)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    /// Epochs without a strict improvement of validation micro-F1.
    pub patience: usize,
    pub max_epochs: usize,
    /// Stop as soon as validation micro-F1 reaches this value.
    pub stop_at_val_micro_f1: Option<f64>,
    pub pretrain_bpr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            batch_size: 32,
            adam: AdamConfig::default(),
            dropout: 0.2,
            patience: 10,
            max_epochs: 100,
            stop_at_val_micro_f1: None,
            pretrain_bpr: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Index-ordered map over a batch. Implementations may run items
/// concurrently but must return results in index order.
pub trait BatchMap {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchMap for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Stream seed for `(seed, epoch, item)`.
pub fn derive_seed(seed: u64, epoch: u64, item: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ item.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and gradients of one document.
#[derive(Debug, Clone)]
pub struct DocGrad {
    pub loss: f64,
    /// Ordered as [`crate::model::ModelParams::doc_tensors`].
    pub grads: Vec<Tensor>,
    /// Gradient with respect to `Vpt`, joint mode only.
    pub vpt: Option<Tensor>,
}

pub fn doc_grad(model: &HieNet, ex: &Example, dropout: f64, mask_seed: u64, joint: bool) -> Result<DocGrad> {
    let ids = model.prepare(&ex.tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mask = dropout_mask(&mut rng, ids.len(), model.cfg.encoder.d_e, dropout);
    let gold = gold_vector(model.num_labels(), &ex.gold);
    let mut tape = Tape::new();
    let vars = DocVars::register(&mut tape, &model.params, true)?;
    let vpt = if joint {
        tape.param(&model.ctx.vpt)?
    } else {
        tape.constant_ref(&model.ctx.vpt)?
    };
    let in_training = model.cfg.pm.in_training;
    let opts = ForwardOpts {
        dropout: mask,
        pm: in_training,
        pm_gold: in_training.then_some(gold.as_slice()),
    };
    let out = forward_doc(&mut tape, &model.cfg, &model.ctx, &vars, vpt, &ids, &opts)?;
    let loss = tape.bce(out.probs, &gold)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mut g = tape.backward(loss)?;
    let grads = vars
        .flat()
        .into_iter()
        .zip(model.params.doc_tensors())
        .map(|(v, t)| g.take_or_zeros(v, t.shape()))
        .collect();
    let vpt = joint.then(|| g.take_or_zeros(vpt, model.ctx.vpt.shape()));
    Ok(DocGrad { loss: value, grads, vpt })
}

fn tree_step(model: &mut HieNet, g_vpt: &Tensor, state: &mut AdamState, adam: &AdamConfig) -> Result<()> {
    let with_proj = model.cfg.train_projection;
    let grads = {
        let mut tape = Tape::new();
        let up = model.params.bpr.up.on_tape(&mut tape, true)?;
        let down = model.params.bpr.down.on_tape(&mut tape, true)?;
        let proj = if with_proj {
            tape.param(&model.params.projection.matrix)?
        } else {
            tape.constant_ref(&model.params.projection.matrix)?
        };
        let (vpt, bpr) = vpt_on_tape(&mut tape, &model.ctx, &up, &down, proj)?;
        let g = tape.constant(g_vpt.clone())?;
        let lin = tape.mul(vpt, g)?;
        let lin = tape.sum(lin)?;
        let loss = tape.add(lin, bpr)?;
        let mut gr = tape.backward(loss)?;
        let mut vars: Vec<_> = up.0.iter().chain(down.0.iter()).copied().collect();
        if with_proj {
            vars.push(proj);
        }
        let shapes: Vec<_> = model.params.tree_tensors(with_proj).iter().map(|t| t.shape()).collect();
        vars.into_iter().zip(shapes).map(|(v, s)| gr.take_or_zeros(v, s)).collect::<Vec<_>>()
    };
    adam_step(&mut model.params.tree_tensors_mut(with_proj), &grads, state, adam)?;
    model.refresh()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: EvalResult,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub bpr: Option<BprTrainReport>,
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    /// 1-based epoch of the retained checkpoint; 0 means the initial one.
    pub best_epoch: usize,
    pub best_val_micro_f1: f64,
    pub stopped_early: bool,
    pub reached_target: bool,
}

/// Probabilities for every example with the configured branches.
pub fn predict_all<M: BatchMap>(model: &HieNet, data: &[Example], map: &M) -> Result<Vec<Vec<f64>>> {
    map.map(data.len(), |i| model.predict(&data[i].tokens, None).map(|p| p.probs))
        .into_iter()
        .collect()
}

pub fn evaluate<M: BatchMap>(model: &HieNet, data: &[Example], map: &M) -> Result<(Vec<Vec<f64>>, EvalResult)> {
    let scores = predict_all(model, data, map)?;
    let gold: Vec<Vec<usize>> = data.iter().map(|e| e.gold.clone()).collect();
    let r = metrics::evaluate(&scores, &gold, &metrics::DEFAULT_P_AT);
    Ok((scores, r))
}

fn check_labels(model: &HieNet, data: &[Example]) -> Result<()> {
    let l = model.num_labels();
    for ex in data {
        if let Some(&bad) = ex.gold.iter().find(|&&g| g >= l) {
            return Err(Error::Dataset(alloc::format!("document {} has label {bad} outside the tree", ex.doc_id)));
        }
    }
    Ok(())
}

/// Pre-trains the hierarchy encoders, then minimizes the classification
/// loss. The best validation checkpoint is restored on return.
pub fn train<M: BatchMap>(
    model: &mut HieNet,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    map: &M,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_labels(model, train)?;
    check_labels(model, val)?;
    let hierarchy_on = model.cfg.mode != AblationMode::NoBhpe;
    let bpr = if cfg.pretrain_bpr && hierarchy_on {
        Some(model.pretrain_bpr()?)
    } else {
        None
    };
    let joint = model.cfg.joint_bpr && hierarchy_on;
    let mut doc_state = AdamState::new(&model.params.doc_tensors());
    let mut tree_state = AdamState::new(&model.params.tree_tensors(model.cfg.train_projection));

    let mut best_f1 = evaluate(model, val, map)?.1.micro_f1;
    let mut best = model.params.clone();
    let mut report = TrainReport {
        bpr,
        log: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_val_micro_f1: best_f1,
        stopped_early: false,
        reached_target: false,
    };
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = {
                let m: &HieNet = model;
                map.map(batch.len(), |i| {
                    let idx = batch[i];
                    doc_grad(m, &train[idx], cfg.dropout, derive_seed(cfg.seed, epoch as u64, idx as u64), joint)
                })
            };
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Option<Vec<Tensor>> = None;
            let mut g_vpt: Option<Tensor> = None;
            for r in results {
                let r = r?;
                loss_sum += r.loss;
                match grads.as_mut() {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
                if let Some(v) = r.vpt {
                    match g_vpt.as_mut() {
                        None => g_vpt = Some(v),
                        Some(acc) => acc.add_assign(&v)?,
                    }
                }
            }
            let grads: Vec<Tensor> = grads.unwrap_or_default().into_iter().map(|g| g.scale(scale)).collect();
            adam_step(&mut model.params.doc_tensors_mut(), &grads, &mut doc_state, &cfg.adam)?;
            if let Some(g) = g_vpt {
                tree_step(model, &g.scale(scale), &mut tree_state, &cfg.adam)?;
            }
        }
        let (_, val_result) = evaluate(model, val, map)?;
        let improved = val_result.micro_f1 > best_f1;
        if improved {
            best_f1 = val_result.micro_f1;
            best = model.params.clone();
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: if train.is_empty() { 0.0 } else { loss_sum / train.len() as f64 },
            val: val_result,
            improved,
        };
        on_epoch(&entry);
        report.log.push(entry);
        report.epochs_run = epoch;
        if cfg.stop_at_val_micro_f1.is_some_and(|t| best_f1 >= t) {
            report.reached_target = true;
            break;
        }
        if stale >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    model.params = best;
    model.refresh()?;
    report.best_val_micro_f1 = best_f1;
    Ok(report)
}

/// Fresh model seeded from `seed`, with the graph built from `train`.
pub fn init_model(seed: u64, cfg: ModelConfig, tree: CodeTree, vocab: usize, train: &[Example]) -> Result<HieNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<Vec<usize>> = train.iter().map(|e| e.gold.clone()).collect();
    HieNet::new(&mut rng, cfg, tree, vocab, &sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub report: TrainReport,
    pub test: EvalResult,
}

/// Trains and tests each mode from the same seed and data.
#[allow(clippy::too_many_arguments)]
pub fn ablate<M: BatchMap>(
    cfg: &ModelConfig,
    tree: &CodeTree,
    vocab: usize,
    train_set: &[Example],
    val: &[Example],
    test: &[Example],
    tcfg: &TrainConfig,
    modes: &[AblationMode],
    map: &M,
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            let mcfg = ModelConfig { mode, ..cfg.clone() };
            let mut model = init_model(tcfg.seed, mcfg, tree.clone(), vocab, train_set)?;
            let report = train(&mut model, train_set, val, tcfg, map, |_| {})?;
            let (_, test) = evaluate(&model, test, map)?;
            Ok(AblationRow { mode, report, test })
        })
        .collect()
}

/// Inference-only sweep over the progressive blend factor.
pub fn lambda_sweep<M: BatchMap>(model: &HieNet, data: &[Example], values: &[f64], map: &M) -> Result<Vec<(f64, EvalResult)>> {
    let mut m = model.clone();
    values
        .iter()
        .map(|&lambda| {
            m.set_pm(PmConfig { lambda, ..model.cfg.pm })?;
            Ok((lambda, evaluate(&m, data, map)?.1))
        })
        .collect()
}

/// Mean training loss over `data` without dropout, for diagnostics.
pub fn mean_loss(model: &HieNet, data: &[Example]) -> Result<f64> {
    let mut sum = 0.0;
    for ex in data {
        let p = model.predict(&ex.tokens, None)?;
        let gold = gold_vector(model.num_labels(), &ex.gold);
        sum += crate::autodiff::bce_value(&p.probs, &gold);
    }
    Ok(if data.is_empty() { 0.0 } else { sum / data.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::doc_encoder::EncoderConfig;
    use crate::hierarchy::BprConfig;
    use crate::synth::GenConfig;

    fn tiny_corpus() -> (crate::synth::Corpus, Vec<Example>, Vec<Example>) {
        let corpus = synth::generate(&GenConfig {
            num_codes: 12,
            branching: 3,
            vocab_size: 80,
            train_docs: 40,
            val_docs: 10,
            test_docs: 10,
            labels_mean: 3,
            labels_spread: 1,
            labels_cap: 5,
            num_cliques: 2,
            clique_size: 3,
            ..GenConfig::default()
        })
        .unwrap();
        let tr = examples(&corpus.tree, &corpus.train).unwrap();
        let va = examples(&corpus.tree, &corpus.val).unwrap();
        (corpus, tr, va)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_e: 8,
                filter_sizes: vec![1, 3],
                d_c: 6,
                max_len: 32,
            },
            bpr: BprConfig {
                max_epochs: 5,
                ..BprConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (c, tr, va) = tiny_corpus();
        let mut m = init_model(1, tiny_cfg(), c.tree.clone(), c.vocab_size, &tr).unwrap();
        let tcfg = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            max_epochs: 2,
            pretrain_bpr: false,
            ..TrainConfig::default()
        };
        let before = m.params.clone();
        let rep = train(&mut m, &tr, &va, &tcfg, &Sequential, |_| {}).unwrap();
        assert_eq!(rep.epochs_run, 2);
        assert_eq!(m.params, before);
    }

    #[test]
    fn single_document_overfits() {
        let (c, _, _) = tiny_corpus();
        let leaves: Vec<usize> = (0..c.tree.num_labels())
            .filter(|&l| c.tree.node(l + 1).children.is_empty())
            .take(2)
            .collect();
        let ex = Example {
            doc_id: "d".into(),
            tokens: vec![5, 9, 13, 21, 34],
            gold: leaves,
        };
        let mut m = init_model(2, tiny_cfg(), c.tree.clone(), c.vocab_size, &[ex.clone()]).unwrap();
        let tcfg = TrainConfig {
            adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
            dropout: 0.0,
            max_epochs: 200,
            patience: 1000,
            pretrain_bpr: false,
            ..TrainConfig::default()
        };
        let data = [ex];
        let rep = train(&mut m, &data, &data, &tcfg, &Sequential, |_| {}).unwrap();
        let last = rep.log.last().unwrap().train_loss;
        assert!(last < 0.05, "loss {last}");
    }

    #[test]
    fn early_stop_after_patience_on_a_plateau() {
        let (c, tr, va) = tiny_corpus();
        let mut m = init_model(3, tiny_cfg(), c.tree.clone(), c.vocab_size, &tr).unwrap();
        let tcfg = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            max_epochs: 50,
            patience: 10,
            pretrain_bpr: false,
            ..TrainConfig::default()
        };
        let rep = train(&mut m, &tr, &va, &tcfg, &Sequential, |_| {}).unwrap();
        assert!(rep.stopped_early);
        assert_eq!(rep.epochs_run, 10);
        assert_eq!(rep.best_epoch, 0);
    }

    #[test]
    fn training_is_reproducible() {
        let (c, tr, va) = tiny_corpus();
        let tcfg = TrainConfig {
            adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = init_model(4, tiny_cfg(), c.tree.clone(), c.vocab_size, &tr).unwrap();
            let rep = train(&mut m, &tr, &va, &tcfg, &Sequential, |_| {}).unwrap();
            (m.params, rep)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn joint_mode_moves_the_hierarchy_encoders() {
        let (c, tr, va) = tiny_corpus();
        let cfg = ModelConfig {
            joint_bpr: true,
            train_projection: true,
            ..tiny_cfg()
        };
        let mut m = init_model(5, cfg, c.tree.clone(), c.vocab_size, &tr).unwrap();
        let tcfg = TrainConfig {
            adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
            max_epochs: 1,
            pretrain_bpr: false,
            patience: 0,
            ..TrainConfig::default()
        };
        let before = m.params.clone();
        train(&mut m, &tr, &va, &tcfg, &Sequential, |_| {}).unwrap();
        // The retained checkpoint may be the initial one; check the update path directly.
        let mut m2 = init_model(5, m.cfg.clone(), c.tree.clone(), c.vocab_size, &tr).unwrap();
        let g = doc_grad(&m2, &tr[0], 0.0, 0, true).unwrap();
        let mut st = AdamState::new(&m2.params.tree_tensors(true));
        tree_step(&mut m2, g.vpt.as_ref().unwrap(), &mut st, &tcfg.adam).unwrap();
        assert_ne!(m2.params.bpr, before.bpr);
        assert_ne!(m2.params.projection, before.projection);
    }

    #[test]
    fn labels_outside_the_tree_are_rejected() {
        let (c, tr, va) = tiny_corpus();
        let mut m = init_model(6, tiny_cfg(), c.tree.clone(), c.vocab_size, &tr).unwrap();
        let bad = vec![Example {
            doc_id: "x".into(),
            tokens: vec![1],
            gold: vec![999],
        }];
        assert!(matches!(
            train(&mut m, &bad, &va, &TrainConfig::default(), &Sequential, |_| {}),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn lambda_zero_matches_no_pm() {
        let (c, tr, va) = tiny_corpus();
        let m = init_model(7, tiny_cfg(), c.tree.clone(), c.vocab_size, &tr).unwrap();
        let sweep = lambda_sweep(&m, &va, &[0.0, 0.5], &Sequential).unwrap();
        let mut nopm = m.clone();
        nopm.set_mode(AblationMode::NoPm).unwrap();
        assert_eq!(sweep[0].1, evaluate(&nopm, &va, &Sequential).unwrap().1);
        assert_eq!(sweep, lambda_sweep(&m, &va, &[0.0, 0.5], &Sequential).unwrap());
    }

    #[test]
    fn all_ablation_modes_run() {
        let (c, tr, va) = tiny_corpus();
        let tcfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let rows = ablate(&tiny_cfg(), &c.tree, c.vocab_size, &tr, &va, &va, &tcfg, &AblationMode::ALL, &Sequential).unwrap();
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 0, 1));
    }
}
