//! Plain-text `key = value` configuration covering every tunable default.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use hienet_core::graph::{EdgeWeighting, PprMode};
use hienet_core::model::{AblationMode, ModelConfig};
use hienet_core::progressive::{BlendTarget, NeighborSource};
use hienet_core::synth::GenConfig;
use hienet_core::trainer::TrainConfig;

use crate::error::{io_err, parse_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt_str<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), ToString::to_string)
}

pub fn ppr_mode_str(m: PprMode) -> &'static str {
    match m {
        PprMode::ClosedForm => "closed_form",
        PprMode::Iterate => "iterate",
    }
}

pub fn parse_ppr_mode(v: &str) -> Result<PprMode> {
    match v {
        "closed_form" => Ok(PprMode::ClosedForm),
        "iterate" => Ok(PprMode::Iterate),
        _ => Err(Error::Config(format!("unknown ppr mode `{v}`"))),
    }
}

pub fn weighting_str(w: EdgeWeighting) -> &'static str {
    match w {
        EdgeWeighting::Binary => "binary",
        EdgeWeighting::Counts => "counts",
    }
}

pub fn parse_weighting(v: &str) -> Result<EdgeWeighting> {
    match v {
        "binary" => Ok(EdgeWeighting::Binary),
        "counts" => Ok(EdgeWeighting::Counts),
        _ => Err(Error::Config(format!("unknown edge weighting `{v}`"))),
    }
}

pub fn blend_str(b: BlendTarget) -> &'static str {
    match b {
        BlendTarget::Features => "features",
        BlendTarget::Logits => "logits",
    }
}

pub fn parse_blend(v: &str) -> Result<BlendTarget> {
    match v {
        "features" => Ok(BlendTarget::Features),
        "logits" => Ok(BlendTarget::Logits),
        _ => Err(Error::Config(format!("unknown blend target `{v}`"))),
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let g = &self.gen;
        let m = &self.model;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("gen.seed", g.seed.to_string()),
            ("gen.branching", g.branching.to_string()),
            ("gen.depth", g.depth.to_string()),
            ("gen.num_codes", g.num_codes.to_string()),
            ("gen.vocab_size", g.vocab_size.to_string()),
            ("gen.tokens_per_label", g.tokens_per_label.to_string()),
            ("gen.train_docs", g.train_docs.to_string()),
            ("gen.val_docs", g.val_docs.to_string()),
            ("gen.test_docs", g.test_docs.to_string()),
            ("gen.labels_mean", g.labels_mean.to_string()),
            ("gen.labels_spread", g.labels_spread.to_string()),
            ("gen.labels_cap", g.labels_cap.to_string()),
            ("gen.num_cliques", g.num_cliques.to_string()),
            ("gen.clique_size", g.clique_size.to_string()),
            ("gen.clique_prob", g.clique_prob.to_string()),
            ("gen.zipf_exponent", g.zipf_exponent.to_string()),
            ("gen.noise_rate", g.noise_rate.to_string()),
            ("encoder.d_e", m.encoder.d_e.to_string()),
            ("encoder.filter_sizes", list(&m.encoder.filter_sizes)),
            ("encoder.d_c", m.encoder.d_c.to_string()),
            ("encoder.max_len", m.encoder.max_len.to_string()),
            ("position.n", opt_str(&m.pos_n, "auto")),
            ("position.k", opt_str(&m.pos_k, "auto")),
            ("position.train_projection", m.train_projection.to_string()),
            ("graph.weighting", weighting_str(m.edge_weighting).into()),
            ("ppr.d", m.ppr.d.to_string()),
            ("ppr.max_iters", m.ppr.max_iters.to_string()),
            ("ppr.tol", m.ppr.tol.to_string()),
            ("ppr.mode", ppr_mode_str(m.ppr_mode).into()),
            ("pm.lambda", m.pm.lambda.to_string()),
            ("pm.rounds", m.pm.rounds.to_string()),
            ("pm.tau", m.pm.tau.to_string()),
            ("pm.neighbors", m.pm.neighbors.as_str().into()),
            ("pm.blend", blend_str(m.pm.blend).into()),
            ("pm.in_training", m.pm.in_training.to_string()),
            ("model.mode", m.mode.as_str().into()),
            ("bpr.lr", m.bpr.lr.to_string()),
            ("bpr.max_epochs", m.bpr.max_epochs.to_string()),
            ("bpr.stop_below", m.bpr.stop_below.to_string()),
            ("bpr.joint", m.joint_bpr.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.adam.lr.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.eps", t.adam.eps.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.stop_at_val_micro_f1", opt_str(&t.stop_at_val_micro_f1, "none")),
            ("train.pretrain_bpr", t.pretrain_bpr.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.gen;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "gen.seed" => g.seed = parse(key, v)?,
            "gen.branching" => g.branching = parse(key, v)?,
            "gen.depth" => g.depth = parse(key, v)?,
            "gen.num_codes" => g.num_codes = parse(key, v)?,
            "gen.vocab_size" => g.vocab_size = parse(key, v)?,
            "gen.tokens_per_label" => g.tokens_per_label = parse(key, v)?,
            "gen.train_docs" => g.train_docs = parse(key, v)?,
            "gen.val_docs" => g.val_docs = parse(key, v)?,
            "gen.test_docs" => g.test_docs = parse(key, v)?,
            "gen.labels_mean" => g.labels_mean = parse(key, v)?,
            "gen.labels_spread" => g.labels_spread = parse(key, v)?,
            "gen.labels_cap" => g.labels_cap = parse(key, v)?,
            "gen.num_cliques" => g.num_cliques = parse(key, v)?,
            "gen.clique_size" => g.clique_size = parse(key, v)?,
            "gen.clique_prob" => g.clique_prob = parse(key, v)?,
            "gen.zipf_exponent" => g.zipf_exponent = parse(key, v)?,
            "gen.noise_rate" => g.noise_rate = parse(key, v)?,
            "encoder.d_e" => m.encoder.d_e = parse(key, v)?,
            "encoder.filter_sizes" => {
                m.encoder.filter_sizes = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "encoder.d_c" => m.encoder.d_c = parse(key, v)?,
            "encoder.max_len" => m.encoder.max_len = parse(key, v)?,
            "position.n" => m.pos_n = parse_opt(key, v)?,
            "position.k" => m.pos_k = parse_opt(key, v)?,
            "position.train_projection" => m.train_projection = parse_bool(key, v)?,
            "graph.weighting" => m.edge_weighting = parse_weighting(v)?,
            "ppr.d" => m.ppr.d = parse(key, v)?,
            "ppr.max_iters" => m.ppr.max_iters = parse(key, v)?,
            "ppr.tol" => m.ppr.tol = parse(key, v)?,
            "ppr.mode" => m.ppr_mode = parse_ppr_mode(v)?,
            "pm.lambda" => m.pm.lambda = parse(key, v)?,
            "pm.rounds" => m.pm.rounds = parse(key, v)?,
            "pm.tau" => m.pm.tau = parse(key, v)?,
            "pm.neighbors" => m.pm.neighbors = NeighborSource::parse(v)?,
            "pm.blend" => m.pm.blend = parse_blend(v)?,
            "pm.in_training" => m.pm.in_training = parse_bool(key, v)?,
            "model.mode" => m.mode = AblationMode::parse(v)?,
            "bpr.lr" => m.bpr.lr = parse(key, v)?,
            "bpr.max_epochs" => m.bpr.max_epochs = parse(key, v)?,
            "bpr.stop_below" => m.bpr.stop_below = parse(key, v)?,
            "bpr.joint" => m.joint_bpr = parse_bool(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.adam.lr = parse(key, v)?,
            "train.beta1" => t.adam.beta1 = parse(key, v)?,
            "train.beta2" => t.adam.beta2 = parse(key, v)?,
            "train.eps" => t.adam.eps = parse(key, v)?,
            "train.dropout" => t.dropout = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.stop_at_val_micro_f1" => t.stop_at_val_micro_f1 = parse_opt(key, v)?,
            "train.pretrain_bpr" => t.pretrain_bpr = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(origin, i + 1, "expected `key = value`"))?;
            self.set(k.trim(), v.trim()).map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Model section only, for checkpoints.
pub fn model_pairs(m: &ModelConfig) -> Vec<(String, String)> {
    let rc = RunConfig {
        model: m.clone(),
        ..RunConfig::default()
    };
    rc.to_pairs()
        .into_iter()
        .filter(|(k, _)| !k.starts_with("gen.") && !k.starts_with("train."))
        .collect()
}

pub fn model_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut rc = RunConfig::default();
    for (k, v) in pairs {
        rc.set(k, v)?;
    }
    Ok(rc.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("pm.lambda", "0.7").unwrap();
        c.set("encoder.filter_sizes", "2, 4").unwrap();
        c.set("position.n", "9").unwrap();
        c.set("train.stop_at_val_micro_f1", "0.9").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let mut back = RunConfig::default();
        back.model.pm.lambda = 0.9;
        back.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = RunConfig::default();
        let err = c.apply_text("# comment\n\npm.tau = 0.4\nbogus = 1\n", Path::new("cfg.txt")).unwrap_err();
        assert!(err.to_string().starts_with("cfg.txt:4:"), "{err}");
        assert_eq!(c.model.pm.tau, 0.4);
        assert!(c.apply_text("pm.tau\n", Path::new("c")).is_err());
        assert!(c.set("pm.in_training", "maybe").is_err());
    }

    #[test]
    fn model_section_round_trip() {
        let mut m = ModelConfig::default();
        m.mode = AblationMode::NoPp;
        m.ppr.d = 0.15;
        assert_eq!(model_from_pairs(&model_pairs(&m)).unwrap(), m);
    }
}
