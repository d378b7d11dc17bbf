//! CoNLL-U dependency blocks.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConlluError {
    #[error("line {line}: expected at least 8 columns, found {found}")]
    Columns { line: usize, found: usize },
    #[error("line {line}: invalid {column} value {value:?}")]
    BadValue {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: duplicate token id {id}")]
    DuplicateId { line: usize, id: usize },
    #[error("line {line}: token id {id} out of sequence (expected {expected})")]
    OutOfSequence {
        line: usize,
        id: usize,
        expected: usize,
    },
    #[error("line {line}: head {head} out of range for {len} tokens")]
    HeadOutOfRange { line: usize, head: usize, len: usize },
    #[error("line {line}: token {id} is its own head")]
    SelfLoop { line: usize, id: usize },
    #[error("line {line}: second root-headed token")]
    MultipleRoots { line: usize },
    #[error("no root-headed token")]
    MissingRoot,
    #[error("line {line}: token {id} is on a cycle that never reaches the root")]
    Cycle { line: usize, id: usize },
    #[error("empty block")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepEdge {
    /// 0-based head index, `None` for the root.
    pub head: Option<usize>,
    pub dependent: usize,
    pub relation: String,
}

/// One labeled head per token, indexed by dependent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    forms: Vec<String>,
    edges: Vec<DepEdge>,
}

impl DependencyGraph {
    pub fn edges(&self) -> &[DepEdge] {
        &self.edges
    }

    pub fn forms(&self) -> &[String] {
        &self.forms
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn root(&self) -> usize {
        self.edges
            .iter()
            .position(|e| e.head.is_none())
            .expect("validated graph has a root")
    }

    /// Renders a minimal ten-column block.
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for (e, form) in self.edges.iter().zip(&self.forms) {
            let head = e.head.map_or(0, |h| h + 1);
            out.push_str(&format!(
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_\n",
                e.dependent + 1,
                form,
                head,
                e.relation
            ));
        }
        out
    }
}

/// Parses a single sentence block. Comment lines, multi-word token ranges
/// (`3-4`) and empty nodes (`5.1`) are skipped. Line numbers in errors are
/// 1-based within the block.
pub fn parse_conllu(block: &str) -> Result<DependencyGraph, ConlluError> {
    let mut forms = Vec::new();
    let mut raw: Vec<(usize, usize, String)> = Vec::new(); // (line, head, rel)
    for (lineno, line) in block.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        let id_str = cols[0].trim();
        if id_str.contains('-') || id_str.contains('.') {
            continue;
        }
        if cols.len() < 8 {
            return Err(ConlluError::Columns {
                line: lineno,
                found: cols.len(),
            });
        }
        let id: usize = id_str.parse().map_err(|_| ConlluError::BadValue {
            line: lineno,
            column: "ID",
            value: id_str.to_string(),
        })?;
        let expected = forms.len() + 1;
        if id < expected {
            return Err(ConlluError::DuplicateId { line: lineno, id });
        }
        if id != expected {
            return Err(ConlluError::OutOfSequence {
                line: lineno,
                id,
                expected,
            });
        }
        let head: usize = cols[6].trim().parse().map_err(|_| ConlluError::BadValue {
            line: lineno,
            column: "HEAD",
            value: cols[6].to_string(),
        })?;
        let rel = cols[7].trim();
        if rel.is_empty() || rel == "_" {
            return Err(ConlluError::BadValue {
                line: lineno,
                column: "DEPREL",
                value: rel.to_string(),
            });
        }
        forms.push(cols[1].to_string());
        raw.push((lineno, head, rel.to_string()));
    }
    if forms.is_empty() {
        return Err(ConlluError::Empty);
    }
    let n = forms.len();
    let mut edges = Vec::with_capacity(n);
    let mut root_seen = false;
    for (i, (line, head, rel)) in raw.iter().enumerate() {
        if *head > n {
            return Err(ConlluError::HeadOutOfRange {
                line: *line,
                head: *head,
                len: n,
            });
        }
        if *head == i + 1 {
            return Err(ConlluError::SelfLoop {
                line: *line,
                id: i + 1,
            });
        }
        if *head == 0 {
            if root_seen {
                return Err(ConlluError::MultipleRoots { line: *line });
            }
            root_seen = true;
        }
        edges.push(DepEdge {
            head: head.checked_sub(1),
            dependent: i,
            relation: rel.clone(),
        });
    }
    if !root_seen {
        return Err(ConlluError::MissingRoot);
    }
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while let Some(h) = edges[cur].head {
            cur = h;
            steps += 1;
            if steps > n {
                return Err(ConlluError::Cycle {
                    line: raw[start].0,
                    id: start + 1,
                });
            }
        }
    }
    Ok(DependencyGraph { forms, edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_block() {
        let g = parse_conllu("1 Great _ _ _ _ 2 amod\n2 food _ _ _ _ 0 root\n").unwrap();
        assert_eq!(
            g.edges()[0],
            DepEdge {
                head: Some(1),
                dependent: 0,
                relation: "amod".into()
            }
        );
        assert_eq!(g.root(), 1);
        assert_eq!(g.edges()[1].head, None);
    }

    #[test]
    fn single_token() {
        let g = parse_conllu("1\thello\t_\t_\t_\t_\t0\troot\t_\t_").unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.edges()[0].head, None);
    }

    #[test]
    fn skips_comments_ranges_and_empty_nodes() {
        let block = "# text = don't go\n1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n1\tdo\t_\t_\t_\t_\t3\taux\t_\t_\n2\tn't\t_\t_\t_\t_\t3\tadvmod\t_\t_\n2.1\tx\t_\t_\t_\t_\t_\t_\t_\t_\n3\tgo\t_\t_\t_\t_\t0\troot\t_\t_\n";
        let g = parse_conllu(block).unwrap();
        assert_eq!(g.forms(), &["do", "n't", "go"]);
    }

    #[test]
    fn head_out_of_range_names_line() {
        let block = "1 a _ _ _ _ 5 dep\n2 b _ _ _ _ 0 root\n3 c _ _ _ _ 2 dep\n";
        assert_eq!(
            parse_conllu(block).unwrap_err(),
            ConlluError::HeadOutOfRange {
                line: 1,
                head: 5,
                len: 3
            }
        );
    }

    #[test]
    fn round_trips_through_rendering() {
        let g = parse_conllu("1 Great _ _ _ _ 2 amod\n2 food _ _ _ _ 0 root\n").unwrap();
        assert_eq!(parse_conllu(&g.to_conllu()).unwrap(), g);
    }
}
