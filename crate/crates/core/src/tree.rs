//! Code taxonomy.
//!
//! Codes nest under their longest proper prefix that is present in the code
//! list. Prefixes are produced by dropping trailing characters after the dot
//! (`521.00 -> 521.0 -> 521`), and undotted codes longer than three
//! characters truncate to their three-character category. Codes without a
//! present prefix hang off a virtual root. Children are ordered
//! lexicographically, which fixes every node's `child_index`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Canonical code string such as `"401.9"` or `"15.9"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodeId(String);

impl CodeId {
    pub fn new(s: impl Into<String>) -> Result<Self> {
        let s = s.into();
        if s.is_empty() {
            return Err(Error::EmptyCode);
        }
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn root() -> Self {
        Self(String::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_root() {
            f.write_str("<root>")
        } else {
            f.write_str(&self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeNode {
    pub id: CodeId,
    pub description: Vec<String>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    pub child_index: usize,
}

/// Rooted code taxonomy stored in depth-first pre-order.
///
/// Node 0 is the virtual root; node `i > 0` corresponds to label `i - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTree {
    nodes: Vec<CodeNode>,
    index: BTreeMap<String, usize>,
    max_branching: usize,
    max_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeKind {
    ParentChild,
    Sibling,
}

/// A mutually exclusive pair found in a label set. For parent-child pairs
/// the ancestor comes first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MePair {
    pub first: CodeId,
    pub second: CodeId,
    pub kind: MeKind,
}

/// Lowercased whitespace tokenization used for descriptions.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Successively shorter prefixes of `code`, longest first.
pub fn proper_prefixes(code: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut cur = code;
    loop {
        let next = if cur.contains('.') {
            let mut s = drop_last_char(cur);
            if let Some(stripped) = s.strip_suffix('.') {
                s = stripped;
            }
            s
        } else if cur.chars().count() > 3 {
            let end = cur.char_indices().nth(3).map_or(cur.len(), |(i, _)| i);
            &cur[..end]
        } else {
            break;
        };
        if next.is_empty() {
            break;
        }
        out.push(next);
        cur = next;
    }
    out
}

fn drop_last_char(s: &str) -> &str {
    match s.char_indices().last() {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl CodeTree {
    /// Builds the taxonomy from `(code, description)` records.
    pub fn build<S: AsRef<str>, D: AsRef<str>>(codes: &[(S, D)]) -> Result<Self> {
        let mut descs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (code, desc) in codes {
            let code = code.as_ref();
            if code.is_empty() {
                return Err(Error::EmptyCode);
            }
            if descs
                .insert(code.to_string(), tokenize(desc.as_ref()))
                .is_some()
            {
                return Err(Error::DuplicateCode(code.to_string()));
            }
        }

        // Children keyed by parent code; "" is the virtual root. BTreeMap
        // iteration gives lexicographic order for free.
        let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for code in descs.keys() {
            let parent = proper_prefixes(code)
                .into_iter()
                .find(|p| descs.contains_key(*p))
                .unwrap_or("");
            children.entry(parent).or_default().push(code.as_str());
        }

        let mut nodes = Vec::with_capacity(descs.len() + 1);
        nodes.push(CodeNode {
            id: CodeId::root(),
            description: Vec::new(),
            parent: None,
            children: Vec::new(),
            depth: 0,
            child_index: 0,
        });
        // Iterative pre-order walk: (code, parent node, depth, child index).
        let mut stack: Vec<(&str, usize, usize, usize)> = Vec::new();
        if let Some(top) = children.get("") {
            for (i, c) in top.iter().enumerate().rev() {
                stack.push((c, 0, 1, i));
            }
        }
        while let Some((code, parent, depth, child_index)) = stack.pop() {
            let idx = nodes.len();
            nodes.push(CodeNode {
                id: CodeId(code.to_string()),
                description: descs[code].clone(),
                parent: Some(parent),
                children: Vec::new(),
                depth,
                child_index,
            });
            nodes[parent].children.push(idx);
            if let Some(kids) = children.get(code) {
                for (i, c) in kids.iter().enumerate().rev() {
                    stack.push((c, idx, depth + 1, i));
                }
            }
        }

        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.0.clone(), i))
            .collect();
        let max_branching = nodes.iter().map(|n| n.children.len()).max().unwrap_or(0);
        let max_depth = nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        Ok(Self {
            nodes,
            index,
            max_branching,
            max_depth,
        })
    }

    pub fn nodes(&self) -> &[CodeNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &CodeNode {
        &self.nodes[idx]
    }

    pub fn root(&self) -> usize {
        0
    }

    /// Node count including the virtual root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Number of real codes, i.e. the label count.
    pub fn num_labels(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn max_branching(&self) -> usize {
        self.max_branching
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Node index of a code. The empty string names the virtual root.
    pub fn index_of(&self, code: &str) -> Result<usize> {
        self.index
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownCode(code.to_string()))
    }

    pub fn label_of(&self, code: &str) -> Result<usize> {
        match self.index_of(code)? {
            0 => Err(Error::UnknownCode(code.to_string())),
            i => Ok(i - 1),
        }
    }

    pub fn label_code(&self, label: usize) -> &CodeId {
        &self.nodes[label + 1].id
    }

    pub fn parent(&self, code: &str) -> Result<Option<&CodeId>> {
        let idx = self.index_of(code)?;
        Ok(self.nodes[idx].parent.map(|p| &self.nodes[p].id))
    }

    pub fn children(&self, code: &str) -> Result<Vec<&CodeId>> {
        let idx = self.index_of(code)?;
        Ok(self.nodes[idx]
            .children
            .iter()
            .map(|&c| &self.nodes[c].id)
            .collect())
    }

    pub fn siblings(&self, code: &str) -> Result<Vec<&CodeId>> {
        let idx = self.index_of(code)?;
        Ok(match self.nodes[idx].parent {
            None => Vec::new(),
            Some(p) => self.nodes[p]
                .children
                .iter()
                .filter(|&&c| c != idx)
                .map(|&c| &self.nodes[c].id)
                .collect(),
        })
    }

    pub fn depth(&self, code: &str) -> Result<usize> {
        Ok(self.nodes[self.index_of(code)?].depth)
    }

    /// Node indices from the first level down to `idx` (root excluded).
    pub fn path_from_root(&self, idx: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = idx;
        while let Some(p) = self.nodes[cur].parent {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn is_ancestor(&self, anc: usize, desc: usize) -> bool {
        let mut cur = self.nodes[desc].parent;
        while let Some(p) = cur {
            if p == anc {
                return true;
            }
            cur = self.nodes[p].parent;
        }
        false
    }

    /// Mutually exclusive pairs inside a label set. Diagnostic only.
    pub fn me_pairs<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<MePair>> {
        let mut idx: Vec<usize> = labels
            .iter()
            .map(|l| self.index_of(l.as_ref()))
            .collect::<Result<_>>()?;
        idx.sort_unstable();
        idx.dedup();
        let mut out = Vec::new();
        for (i, &a) in idx.iter().enumerate() {
            for &b in &idx[i + 1..] {
                // Pre-order puts ancestors first, so `a` can only be the ancestor.
                if self.is_ancestor(a, b) {
                    out.push(MePair {
                        first: self.nodes[a].id.clone(),
                        second: self.nodes[b].id.clone(),
                        kind: MeKind::ParentChild,
                    });
                } else if self.nodes[a].parent == self.nodes[b].parent
                    && self.nodes[a].parent != Some(0)
                {
                    // Top-level codes share only the virtual root, which is
                    // not a real code.
                    out.push(MePair {
                        first: self.nodes[a].id.clone(),
                        second: self.nodes[b].id.clone(),
                        kind: MeKind::Sibling,
                    });
                }
            }
        }
        Ok(out)
    }

    /// The `(code, description)` records the tree was built from.
    pub fn records(&self) -> Vec<(String, String)> {
        self.nodes[1..]
            .iter()
            .map(|n| (n.id.0.clone(), n.description.join(" ")))
            .collect()
    }
}
