//! Seeded synthetic corpora with planted taxonomy, co-occurrence cliques and
//! per-code signature tokens.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::doc_encoder::PAD;
use crate::error::{Error, Result};
use crate::tree::CodeTree;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDoc {
    pub doc_id: String,
    pub tokens: Vec<usize>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub branching: usize,
    pub depth: usize,
    /// Number of codes, excluding the virtual root.
    pub num_codes: usize,
    pub vocab_size: usize,
    pub tokens_per_label: usize,
    pub train_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
    pub labels_mean: usize,
    pub labels_spread: usize,
    pub labels_cap: usize,
    pub num_cliques: usize,
    pub clique_size: usize,
    /// Probability that a document contains a planted clique.
    pub clique_prob: f64,
    /// Exponent of the power-law weights over leaves for extra labels.
    pub zipf_exponent: f64,
    /// Fraction of a document's tokens that are filler.
    pub noise_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            branching: 7,
            depth: 2,
            num_codes: 50,
            vocab_size: 301,
            tokens_per_label: 2,
            train_docs: 2000,
            val_docs: 400,
            test_docs: 400,
            labels_mean: 16,
            labels_spread: 6,
            labels_cap: 22,
            num_cliques: 6,
            clique_size: 4,
            clique_prob: 0.8,
            zipf_exponent: 1.0,
            noise_rate: 0.2,
        }
    }
}

impl GenConfig {
    /// Sparse labels dominated by planted cliques, so that co-occurrence
    /// carries most of the label signal.
    pub fn planted_cliques() -> Self {
        Self {
            labels_mean: 4,
            labels_spread: 1,
            labels_cap: 6,
            num_cliques: 8,
            clique_size: 4,
            clique_prob: 1.0,
            ..Self::default()
        }
    }

    pub fn signature_tokens(&self) -> usize {
        self.num_codes * self.tokens_per_label
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.branching == 0 || self.branching > 10 || self.depth == 0 {
            return bad(format!("branching must be in 1..=10 and depth positive (got {}, {})", self.branching, self.depth));
        }
        let mut cap = 0usize;
        let mut level = 1usize;
        for _ in 0..self.depth {
            level = level.saturating_mul(self.branching);
            cap = cap.saturating_add(level);
        }
        if self.num_codes == 0 || self.num_codes > cap {
            return bad(format!("{} codes do not fit branching {} depth {}", self.num_codes, self.branching, self.depth));
        }
        if self.tokens_per_label == 0 {
            return bad("tokens_per_label must be positive".into());
        }
        let needed = 1 + self.signature_tokens() + usize::from(self.noise_rate > 0.0);
        if self.vocab_size < needed {
            return bad(format!("vocab_size {} too small; signatures need {needed}", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} must lie in [0, 1)", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.clique_prob) {
            return bad(format!("clique_prob {} must lie in [0, 1]", self.clique_prob));
        }
        if self.labels_cap == 0 || self.labels_mean == 0 {
            return bad("label counts must be positive".into());
        }
        Ok(())
    }
}

/// Ground truth recorded by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    /// Cliques as sorted code strings.
    pub cliques: Vec<Vec<String>>,
    /// Signature token ids per code.
    pub signatures: BTreeMap<String, Vec<usize>>,
    /// Co-occurring train-split pairs not inside a single planted clique,
    /// as `(smaller code, larger code)`.
    pub extra_edges: BTreeSet<(String, String)>,
    /// First filler token id; filler ids run to `vocab_size - 1`.
    pub noise_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// `(code, description)` records in generation order.
    pub codes: Vec<(String, String)>,
    pub tree: CodeTree,
    pub vocab_size: usize,
    pub train: Vec<LabeledDoc>,
    pub val: Vec<LabeledDoc>,
    pub test: Vec<LabeledDoc>,
    pub planted: Planted,
}

/// Breadth-first filled code list: `100`, `101`, ... at depth 1, then
/// `100.0`, `100.1`, ... and `100.00`, ... below.
pub fn code_list(branching: usize, depth: usize, num_codes: usize) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut frontier: Vec<(String, String)> = Vec::new();
    for i in 0..branching {
        if out.len() == num_codes {
            return out;
        }
        let rec = (format!("{}", 100 + i), format!("category {}", 100 + i));
        out.push(rec.clone());
        frontier.push(rec);
    }
    for level in 2..=depth {
        let mut next = Vec::new();
        for (code, desc) in &frontier {
            for i in 0..branching {
                if out.len() == num_codes {
                    return out;
                }
                let child = if level == 2 { format!("{code}.{i}") } else { format!("{code}{i}") };
                let rec = (child, format!("{desc} variant{level} {i}"));
                out.push(rec.clone());
                next.push(rec);
            }
        }
        frontier = next;
    }
    out
}

fn label_count(rng: &mut ChaCha8Rng, cfg: &GenConfig, leaves: usize) -> usize {
    let lo = cfg.labels_mean.saturating_sub(cfg.labels_spread).max(1);
    let hi = cfg.labels_mean + cfg.labels_spread;
    rng.gen_range(lo..=hi).min(cfg.labels_cap).min(leaves)
}

/// Weighted draw without replacement.
fn draw_weighted(rng: &mut ChaCha8Rng, pool: &[usize], weights: &[f64], exclude: &BTreeSet<usize>) -> Option<usize> {
    let total: f64 = pool.iter().zip(weights).filter(|(p, _)| !exclude.contains(p)).map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (&p, &w) in pool.iter().zip(weights) {
        if exclude.contains(&p) {
            continue;
        }
        last = Some(p);
        if u < w {
            return Some(p);
        }
        u -= w;
    }
    last
}

pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let codes = code_list(cfg.branching, cfg.depth, cfg.num_codes);
    let tree = CodeTree::build(&codes)?;
    let l = tree.num_labels();
    let leaves: Vec<usize> = (0..l).filter(|&c| tree.node(c + 1).children.is_empty()).collect();

    let mut signatures = BTreeMap::new();
    let mut sig_of = vec![Vec::new(); l];
    let mut next = PAD + 1;
    for (c, sig) in sig_of.iter_mut().enumerate() {
        *sig = (next..next + cfg.tokens_per_label).collect();
        next += cfg.tokens_per_label;
        signatures.insert(String::from(tree.label_code(c).as_str()), sig.clone());
    }
    let noise_start = next;

    let mut cliques: Vec<Vec<usize>> = Vec::new();
    let size = cfg.clique_size.min(leaves.len());
    for _ in 0..cfg.num_cliques {
        if size == 0 {
            break;
        }
        let mut members: Vec<usize> = leaves.choose_multiple(&mut rng, size).copied().collect();
        members.sort_unstable();
        cliques.push(members);
    }

    let mut ranked = leaves.clone();
    ranked.shuffle(&mut rng);
    let weights: Vec<f64> = (0..ranked.len())
        .map(|r| 1.0 / libm::pow((r + 1) as f64, cfg.zipf_exponent))
        .collect();

    let code_str = |c: usize| String::from(tree.label_code(c).as_str());
    let make_split = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<LabeledDoc> {
        (0..n)
            .map(|i| {
                let target = label_count(rng, cfg, leaves.len());
                let mut set = BTreeSet::new();
                if !cliques.is_empty() && rng.gen::<f64>() < cfg.clique_prob {
                    let k = rng.gen_range(0..cliques.len());
                    set.extend(cliques[k].iter().copied());
                }
                while set.len() < target {
                    match draw_weighted(rng, &ranked, &weights, &set) {
                        Some(c) => {
                            set.insert(c);
                        }
                        None => break,
                    }
                }
                let mut tokens: Vec<usize> = set.iter().flat_map(|&c| sig_of[c].iter().copied()).collect();
                if cfg.noise_rate > 0.0 {
                    let filler = libm::round(tokens.len() as f64 * cfg.noise_rate / (1.0 - cfg.noise_rate)) as usize;
                    for _ in 0..filler {
                        tokens.push(rng.gen_range(noise_start..cfg.vocab_size));
                    }
                }
                tokens.shuffle(rng);
                LabeledDoc {
                    doc_id: format!("{prefix}-{i:05}"),
                    tokens,
                    labels: set.iter().map(|&c| code_str(c)).collect(),
                }
            })
            .collect()
    };
    let train = make_split(cfg.train_docs, "train", &mut rng);
    let val = make_split(cfg.val_docs, "val", &mut rng);
    let test = make_split(cfg.test_docs, "test", &mut rng);

    let clique_pairs: BTreeSet<(usize, usize)> = cliques
        .iter()
        .flat_map(|m| {
            m.iter()
                .enumerate()
                .flat_map(move |(x, &a)| m[x + 1..].iter().map(move |&b| (a, b)))
        })
        .collect();
    let mut extra_edges = BTreeSet::new();
    for doc in &train {
        let ids: Vec<usize> = doc.labels.iter().map(|s| tree.label_of(s)).collect::<Result<_>>()?;
        for (x, &a) in ids.iter().enumerate() {
            for &b in &ids[x + 1..] {
                let (a, b) = (a.min(b), a.max(b));
                if !clique_pairs.contains(&(a, b)) {
                    extra_edges.insert((code_str(a), code_str(b)));
                }
            }
        }
    }
    let planted = Planted {
        cliques: cliques.iter().map(|m| m.iter().map(|&c| code_str(c)).collect()).collect(),
        signatures,
        extra_edges,
        noise_start,
    };
    Ok(Corpus {
        codes,
        tree,
        vocab_size: cfg.vocab_size,
        train,
        val,
        test,
        planted,
    })
}

/// Label indices of a document's gold codes.
pub fn label_indices(tree: &CodeTree, doc: &LabeledDoc) -> Result<Vec<usize>> {
    doc.labels
        .iter()
        .map(|s| {
            tree.label_of(s)
                .map_err(|_| Error::Dataset(format!("document {} uses code `{s}` outside the tree", doc.doc_id)))
        })
        .collect()
}
