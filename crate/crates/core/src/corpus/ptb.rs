//! Penn-Treebank bracketed trees.

use thiserror::Error;

use crate::bio::Span;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bracketed tree, offset {offset}: {message}")]
pub struct PtbError {
    pub offset: usize,
    pub message: String,
}

fn err(offset: usize, message: impl Into<String>) -> PtbError {
    PtbError {
        offset,
        message: message.into(),
    }
}

const ESCAPES: [(&str, &str); 6] = [
    ("-LRB-", "("),
    ("-RRB-", ")"),
    ("-LSB-", "["),
    ("-RSB-", "]"),
    ("-LCB-", "{"),
    ("-RCB-", "}"),
];

pub fn decode_word(w: &str) -> String {
    ESCAPES
        .iter()
        .find(|(esc, _)| *esc == w)
        .map(|(_, raw)| raw.to_string())
        .unwrap_or_else(|| w.to_string())
}

pub fn encode_word(w: &str) -> String {
    ESCAPES
        .iter()
        .find(|(_, raw)| *raw == w)
        .map(|(esc, _)| esc.to_string())
        .unwrap_or_else(|| w.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub span: Span,
    pub depth: usize,
    /// Token index for terminal nodes.
    pub token: Option<usize>,
}

impl TreeNode {
    pub fn is_terminal(&self) -> bool {
        self.token.is_some()
    }
}

/// A constituency tree stored as an arena. Terminal nodes carry the words;
/// preterminals are internal nodes whose single child is a terminal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstituencyTree {
    nodes: Vec<TreeNode>,
    root: usize,
    leaves: Vec<usize>,
}

impl ConstituencyTree {
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.leaves.len()
    }

    /// Words at the leaves, left to right.
    pub fn words(&self) -> Vec<&str> {
        self.leaves.iter().map(|&l| self.nodes[l].label.as_str()).collect()
    }

    /// Terminal node of token `i`.
    pub fn leaf(&self, i: usize) -> usize {
        self.leaves[i]
    }

    pub fn is_preterminal(&self, id: usize) -> bool {
        let n = &self.nodes[id];
        n.children.len() == 1 && self.nodes[n.children[0]].is_terminal()
    }

    /// Constituents are the non-terminals above the part-of-speech level. The
    /// root always counts as one so that every tree has at least one.
    pub fn is_constituent(&self, id: usize) -> bool {
        let n = &self.nodes[id];
        !n.is_terminal() && (id == self.root || !self.is_preterminal(id))
    }

    /// Constituent ids in pre-order.
    pub fn constituents(&self) -> Vec<usize> {
        self.preorder()
            .into_iter()
            .filter(|&id| self.is_constituent(id))
            .collect()
    }

    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        out
    }

    /// Proper ancestors of `id`, nearest first.
    pub fn ancestors(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out
    }

    /// Bracketed rendering with words re-escaped.
    pub fn to_bracketed(&self) -> String {
        let mut out = String::new();
        self.render(self.root, &mut out);
        out
    }

    fn render(&self, id: usize, out: &mut String) {
        let n = &self.nodes[id];
        if n.is_terminal() {
            out.push_str(&encode_word(&n.label));
            return;
        }
        out.push('(');
        out.push_str(&n.label);
        for &c in &n.children {
            out.push(' ');
            self.render(c, out);
        }
        out.push(')');
    }
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(s: &str) -> Vec<(usize, Tok<'_>)> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'(' {
            out.push((i, Tok::Open));
            i += 1;
        } else if c == b')' {
            out.push((i, Tok::Close));
            i += 1;
        } else {
            let start = i;
            while i < bytes.len()
                && !bytes[i].is_ascii_whitespace()
                && bytes[i] != b'('
                && bytes[i] != b')'
            {
                i += 1;
            }
            out.push((start, Tok::Atom(&s[start..i])));
        }
    }
    out
}

/// Parses one bracketed tree. An unlabeled outer bracket becomes `ROOT`.
pub fn parse_ptb(input: &str) -> Result<ConstituencyTree, PtbError> {
    let toks = lex(input);
    if toks.is_empty() {
        return Err(err(0, "empty input"));
    }
    if toks[0].1 != Tok::Open {
        return Err(err(toks[0].0, "expected '('"));
    }
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut leaves = Vec::new();
    // Stack of open node ids.
    let mut stack: Vec<usize> = Vec::new();
    let mut root = None;
    let mut pos = 0;
    while pos < toks.len() {
        let (offset, ref tok) = toks[pos];
        if root.is_some() {
            return Err(err(offset, "trailing input after complete tree"));
        }
        match tok {
            Tok::Open => {
                let (label, consumed) = match toks.get(pos + 1) {
                    Some((_, Tok::Atom(a))) => (a.to_string(), 2),
                    Some((_, Tok::Open)) => (String::new(), 1),
                    Some((o, Tok::Close)) => return Err(err(*o, "empty bracket")),
                    None => return Err(err(input.len(), "unbalanced: missing ')'")),
                };
                let parent = stack.last().copied();
                let id = nodes.len();
                nodes.push(TreeNode {
                    label,
                    children: Vec::new(),
                    parent,
                    span: Span::new(leaves.len(), leaves.len()),
                    depth: stack.len(),
                    token: None,
                });
                if let Some(p) = parent {
                    nodes[p].children.push(id);
                }
                stack.push(id);
                pos += consumed;
            }
            Tok::Atom(a) => {
                let Some(&parent) = stack.last() else {
                    return Err(err(offset, "word outside brackets"));
                };
                let id = nodes.len();
                let token = leaves.len();
                nodes.push(TreeNode {
                    label: decode_word(a),
                    children: Vec::new(),
                    parent: Some(parent),
                    span: Span::new(token, token + 1),
                    depth: stack.len(),
                    token: Some(token),
                });
                nodes[parent].children.push(id);
                leaves.push(id);
                pos += 1;
            }
            Tok::Close => {
                let Some(id) = stack.pop() else {
                    return Err(err(offset, "unbalanced: unexpected ')'"));
                };
                if nodes[id].children.is_empty() {
                    return Err(err(offset, format!("node {:?} has no children", nodes[id].label)));
                }
                nodes[id].span.end = leaves.len();
                if stack.is_empty() {
                    root = Some(id);
                }
                pos += 1;
            }
        }
    }
    let Some(root) = root else {
        return Err(err(input.len(), "unbalanced: missing ')'"));
    };
    if nodes[root].label.is_empty() {
        nodes[root].label = "ROOT".to_string();
    }
    // An unlabeled bracket below the root has no sensible reading.
    if let Some(n) = nodes.iter().find(|n| !n.is_terminal() && n.label.is_empty()) {
        return Err(err(0, format!("unlabeled inner bracket at span {}", n.span)));
    }
    Ok(ConstituencyTree {
        nodes,
        root,
        leaves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_noun_phrase() {
        let t = parse_ptb("(NP (JJ Great) (NN food))").unwrap();
        assert_eq!(t.words(), vec!["Great", "food"]);
        let cons = t.constituents();
        assert_eq!(cons.len(), 1);
        assert_eq!(t.node(cons[0]).label, "NP");
        assert_eq!(t.node(cons[0]).span, Span::new(0, 2));
        let preterminals = (0..t.len()).filter(|&i| t.is_preterminal(i)).count();
        assert_eq!(preterminals, 2);
    }

    #[test]
    fn minimal_tree() {
        let t = parse_ptb("(X a)").unwrap();
        assert_eq!(t.words(), vec!["a"]);
        assert_eq!(t.num_tokens(), 1);
        assert!(t.is_constituent(t.root()));
    }

    #[test]
    fn escapes_are_decoded_and_reencoded() {
        let src = "(ROOT (S (NP (NN x)) (PRN (-LRB- -LRB-) (NN y) (-RRB- -RRB-))))";
        let t = parse_ptb(src).unwrap();
        assert_eq!(t.words(), vec!["x", "(", "y", ")"]);
        assert_eq!(t.to_bracketed(), src);
    }

    #[test]
    fn unlabeled_outer_bracket() {
        let t = parse_ptb("( (S (NN a)))").unwrap();
        assert_eq!(t.node(t.root()).label, "ROOT");
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(parse_ptb("").unwrap_err().offset, 0);
        assert_eq!(parse_ptb("   ").unwrap_err().offset, 0);
        let e = parse_ptb("(NP (NN a)").unwrap_err();
        assert_eq!(e.offset, 10);
        let e = parse_ptb("(NP (NN a)))").unwrap_err();
        assert_eq!(e.offset, 11);
        let e = parse_ptb("(NP ())").unwrap_err();
        assert_eq!(e.offset, 5);
        assert!(parse_ptb("(A b) (C d)").is_err());
        assert!(parse_ptb("(NP)").is_err());
    }

    #[test]
    fn spans_are_unions_of_children() {
        let t = parse_ptb(
            "(ROOT (S (NP (JJ Great) (NN food)) (CC but) (S (NP (DT the) (NN service)) (VP (VBD was) (ADJP (JJ dreadful)))) (. !)))",
        )
        .unwrap();
        for n in t.nodes() {
            if n.is_terminal() {
                continue;
            }
            let first = t.node(n.children[0]).span.start;
            let last = t.node(*n.children.last().unwrap()).span.end;
            assert_eq!(n.span, Span::new(first, last));
        }
        assert_eq!(t.num_tokens(), 8);
    }
}
