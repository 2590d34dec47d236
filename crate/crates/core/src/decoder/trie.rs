use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sembpe::TokenId;

const TRIE_MAGIC: &str = "# capsid-trie";
const TRIE_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    /// Items whose SID ends here, sorted. More than one means a collision.
    items: Vec<String>,
}

/// Prefix tree over item SIDs. An item is reachable only through its
/// end-of-item edge, so a short SID that prefixes a longer one stays distinct.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SidTrie {
    nodes: Vec<Node>,
    vocab_size: u32,
    num_items: usize,
}

impl PartialEq for SidTrie {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size && self.entries() == other.entries()
    }
}

/// Inserts every `(item id, tokens)` pair. Distinct items with the same SID
/// share one terminus.
pub fn build_trie<'a, I>(items: I, vocab_size: u32) -> Result<SidTrie>
where
    I: IntoIterator<Item = (&'a str, &'a [TokenId])>,
{
    let mut trie = SidTrie::new(vocab_size);
    for (id, tokens) in items {
        trie.insert(id, tokens)?;
    }
    Ok(trie)
}

impl SidTrie {
    pub fn new(vocab_size: u32) -> Self {
        Self {
            nodes: vec![Node::default()],
            vocab_size,
            num_items: 0,
        }
    }

    pub fn insert(&mut self, id: &str, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid(format!("item {id} has an empty SID")));
        }
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!(
                "item id {id:?} must be nonempty without whitespace"
            )));
        }
        let mut node = 0;
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::UnknownToken(t));
            }
            node = match self.nodes[node].children.get(&t) {
                Some(&next) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[node].children.insert(t, next);
                    next
                }
            };
        }
        let items = &mut self.nodes[node].items;
        if let Err(pos) = items.binary_search_by(|s| s.as_str().cmp(id)) {
            items.insert(pos, id.to_string());
            self.num_items += 1;
        }
        Ok(())
    }

    /// SID token count, excluding end of item.
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn end_of_item(&self) -> TokenId {
        self.vocab_size
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn is_empty(&self) -> bool {
        self.num_items == 0
    }

    pub(crate) fn root(&self) -> usize {
        0
    }

    pub(crate) fn child(&self, node: usize, token: TokenId) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub(crate) fn children(&self, node: usize) -> impl Iterator<Item = (TokenId, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub(crate) fn items_at(&self, node: usize) -> &[String] {
        &self.nodes[node].items
    }

    fn walk(&self, tokens: &[TokenId]) -> Option<usize> {
        tokens
            .iter()
            .try_fold(self.root(), |n, &t| self.child(n, t))
    }

    /// Items whose SID is exactly `tokens`.
    pub fn lookup(&self, tokens: &[TokenId]) -> &[String] {
        self.walk(tokens).map_or(&[], |n| self.items_at(n))
    }

    pub fn contains(&self, tokens: &[TokenId]) -> bool {
        !self.lookup(tokens).is_empty()
    }

    /// Every `(item id, tokens)` in depth-first token order.
    pub fn entries(&self) -> Vec<(String, Vec<TokenId>)> {
        let mut out = Vec::with_capacity(self.num_items);
        let mut stack = vec![(self.root(), Vec::new())];
        while let Some((node, path)) = stack.pop() {
            for id in self.items_at(node) {
                out.push((id.clone(), path.clone()));
            }
            for (t, child) in self.children(node).collect::<Vec<_>>().into_iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((child, p));
            }
        }
        out
    }

    /// Header line then one `item-id token … EOI` record per item.
    pub fn to_text(&self) -> String {
        let mut out = format!("{TRIE_MAGIC} v{TRIE_VERSION} vocab={}\n", self.vocab_size);
        for (id, tokens) in self.entries() {
            out.push_str(&id);
            for t in tokens {
                let _ = write!(out, " {t}");
            }
            out.push_str(" EOI\n");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut trie: Option<SidTrie> = None;
        for raw in text.split_inclusive('\n') {
            let start = offset;
            offset += raw.len() as u64;
            let line = raw.trim_end_matches(['\n', '\r']);
            let Some(trie) = trie.as_mut() else {
                let rest = line
                    .strip_prefix(TRIE_MAGIC)
                    .ok_or_else(|| Error::format(start, "missing trie header"))?;
                let mut parts = rest.split_whitespace();
                let version = parts
                    .next()
                    .and_then(|v| v.strip_prefix('v'))
                    .and_then(|v| v.parse::<u32>().ok())
                    .ok_or_else(|| Error::format(start, "bad trie version"))?;
                if version > TRIE_VERSION {
                    return Err(Error::Version {
                        found: version,
                        supported: TRIE_VERSION,
                    });
                }
                let vocab = parts
                    .next()
                    .and_then(|v| v.strip_prefix("vocab="))
                    .and_then(|v| v.parse::<u32>().ok())
                    .ok_or_else(|| Error::format(start, "bad trie vocabulary size"))?;
                trie = Some(SidTrie::new(vocab));
                continue;
            };
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 3 || parts[parts.len() - 1] != "EOI" {
                return Err(Error::format(start, "expected `item-id token … EOI`"));
            }
            let tokens = parts[1..parts.len() - 1]
                .iter()
                .map(|t| t.parse::<TokenId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(start, "bad token"))?;
            trie.insert(parts[0], &tokens)
                .map_err(|e| Error::format(start, e.to_string()))?;
        }
        trie.ok_or_else(|| Error::format(0, "empty trie file"))
    }
}
