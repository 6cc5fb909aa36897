//! Versioned JSON checkpoints of named tensors plus everything needed to
//! rebuild the model context.

use std::path::Path;

use hienet_core::graph::CoocGraph;
use hienet_core::model::HieNet;
use hienet_core::tensor::Tensor;
use hienet_core::tree::CodeTree;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::io;

pub const FORMAT: &str = "hienet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: Vec<(String, String)>,
    pub codes: Vec<(String, String)>,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &HieNet) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: config::model_pairs(&model.cfg),
            codes: model.ctx.tree.records(),
            vocab_size: model.vocab(),
            num_labels: model.num_labels(),
            edges: model.ctx.graph.edges(),
            tensors: model
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every tensor must be present with its expected shape.
    pub fn into_model(self) -> Result<HieNet> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let cfg = config::model_from_pairs(&self.config)?;
        let tree = CodeTree::build(&self.codes)?;
        if tree.num_labels() != self.num_labels {
            return Err(Error::Checkpoint(format!("{} codes but {} labels recorded", tree.num_labels(), self.num_labels)));
        }
        let graph = CoocGraph::from_edges(self.num_labels, &self.edges)?;
        // Shapes come from a throwaway initialization with the same config.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = HieNet::new(&mut rng, cfg.clone(), tree.clone(), self.vocab_size, &[])?.params;
        {
            let mut slots = params.named_mut();
            if slots.len() != self.tensors.len() {
                return Err(Error::Checkpoint(format!("expected {} tensors, found {}", slots.len(), self.tensors.len())));
            }
            for ((name, slot), t) in slots.iter_mut().zip(self.tensors) {
                if *name != t.name {
                    return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", t.name)));
                }
                if slot.shape() != (t.rows, t.cols) {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {}x{}, expected {}x{}",
                        t.rows,
                        t.cols,
                        slot.rows(),
                        slot.cols()
                    )));
                }
                **slot = Tensor::from_vec(t.rows, t.cols, t.data)?;
            }
        }
        Ok(HieNet::assemble(cfg, params, tree, graph)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

pub fn save(path: &Path, model: &HieNet) -> Result<()> {
    io::write_text(path, &Checkpoint::from_model(model).to_json()?)
}

pub fn load(path: &Path) -> Result<HieNet> {
    let ck: Checkpoint = serde_json::from_str(&io::read_text(path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ck.into_model()
}
