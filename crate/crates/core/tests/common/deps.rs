//! Source-level module dependency walker. From a starting file it follows
//! every `crate::`, `super::` and `self::` path, resolving re-exports to the
//! file that defines the item. Trait impls are not reached by path and so
//! are invisible to it.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

const ROOT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/src");

/// Files that handle pixels, the tokenizer or the selector.
pub const SENDER_SIDE: [&str; 8] = [
    "vq.rs",
    "harness/dataset.rs",
    "harness/edge.rs",
    "harness/pipeline.rs",
    "harness/train.rs",
    "selection/scorer.rs",
    "modeling/teacher.rs",
    "modeling/losses.rs",
];

fn module_file(m: &[String]) -> Option<PathBuf> {
    if m.is_empty() {
        return Some(PathBuf::from("lib.rs"));
    }
    let rel = m.join("/");
    [format!("{rel}.rs"), format!("{rel}/mod.rs")]
        .into_iter()
        .map(PathBuf::from)
        .find(|p| Path::new(ROOT).join(p).exists())
}

fn is_namespace(f: &Path) -> bool {
    f.ends_with("lib.rs") || f.ends_with("mod.rs")
}

fn module_of(f: &Path) -> Vec<String> {
    let mut parts: Vec<String> = f.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let last = parts.pop().unwrap();
    if last != "mod.rs" && last != "lib.rs" {
        parts.push(last.trim_end_matches(".rs").to_string());
    }
    parts
}

/// Source without test modules and line comments.
pub fn source(f: &Path) -> String {
    let text = std::fs::read_to_string(Path::new(ROOT).join(f)).unwrap();
    let text = text.split("#[cfg(test)]").next().unwrap();
    text.lines()
        .map(|l| l.split("//").next().unwrap())
        .collect::<Vec<_>>()
        .join("\n")
}

fn ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

struct Parser<'a> {
    s: &'a [u8],
    i: usize,
}

impl Parser<'_> {
    fn ws(&mut self) {
        while self.i < self.s.len() && (self.s[self.i] as char).is_whitespace() {
            self.i += 1;
        }
    }

    fn ident(&mut self) -> Option<String> {
        self.ws();
        let start = self.i;
        while self.i < self.s.len() && ident_char(self.s[self.i] as char) {
            self.i += 1;
        }
        (self.i > start).then(|| String::from_utf8_lossy(&self.s[start..self.i]).into_owned())
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.ws();
        if self.s[self.i..].starts_with(tok.as_bytes()) {
            self.i += tok.len();
            true
        } else {
            false
        }
    }

    /// One use-tree (or inline path) as a list of flattened paths.
    fn tree(&mut self, prefix: Vec<String>) -> Vec<Vec<String>> {
        let mut path = prefix;
        loop {
            if self.eat("{") {
                let mut out = Vec::new();
                while !self.eat("}") {
                    out.extend(self.tree(path.clone()));
                    self.eat(",");
                }
                return out;
            }
            if self.eat("*") {
                path.push("*".into());
                return vec![path];
            }
            match self.ident() {
                Some(id) if id == "self" && !path.is_empty() => {}
                Some(id) => path.push(id),
                None => return vec![path],
            }
            if self.eat(" as ") || self.eat("as ") {
                self.ident();
            }
            if !self.eat("::") {
                return vec![path];
            }
        }
    }
}

/// Absolute module paths named in `text`, written inside module `here`.
fn paths_in(text: &str, here: &[String]) -> Vec<Vec<String>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    for kw in ["crate::", "super::", "self::"] {
        for (at, _) in text.match_indices(kw) {
            if at > 0 && (ident_char(bytes[at - 1] as char)) {
                continue;
            }
            let base: Vec<String> = match kw {
                "crate::" => vec![],
                "super::" => here[..here.len() - 1].to_vec(),
                _ => here.to_vec(),
            };
            let mut p = Parser { s: bytes, i: at + kw.len() };
            out.extend(p.tree(base));
        }
    }
    out
}

/// Child modules a namespace file refers to by relative path.
fn child_paths(text: &str, here: &[String]) -> Vec<Vec<String>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(name) = line.trim().trim_start_matches("pub ").strip_prefix("mod ").and_then(|r| r.strip_suffix(';')) else {
            continue;
        };
        let needle = format!("{name}::");
        let used = text
            .match_indices(&needle)
            .any(|(at, _)| at == 0 || !(ident_char(bytes[at - 1] as char) || bytes[at - 1] == b':'));
        if used {
            out.push([here, &[name.to_string()]].concat());
        }
    }
    out
}

/// Re-export statements of a namespace file, as absolute paths.
fn reexports(f: &Path) -> Vec<Vec<String>> {
    let here = module_of(f);
    let text = source(f);
    let mut out = Vec::new();
    for (at, _) in text.match_indices("pub use ") {
        let mut p = Parser { s: text.as_bytes(), i: at + 8 };
        for path in p.tree(vec![]) {
            let abs = match path.first().map(String::as_str) {
                Some("crate") => path[1..].to_vec(),
                Some("super") => [&here[..here.len() - 1], &path[1..]].concat(),
                _ => [here.as_slice(), &path].concat(),
            };
            out.push(abs);
        }
    }
    out
}

/// Text of `f` that counts as its own dependencies. Re-exports of a
/// namespace file are only followed when a name is actually used.
fn own_text(f: &Path) -> String {
    let text = source(f);
    if !is_namespace(f) {
        return text;
    }
    let mut kept = String::new();
    let mut rest = text.as_str();
    while let Some(at) = rest.find("pub use ") {
        kept.push_str(&rest[..at]);
        let end = rest[at..].find(';').map_or(rest.len(), |e| at + e + 1);
        rest = &rest[end..];
    }
    kept.push_str(rest);
    kept
}

fn resolve(path: &[String], out: &mut Vec<PathBuf>) {
    let k = (0..=path.len()).rev().find(|&k| module_file(&path[..k]).is_some()).unwrap();
    let file = module_file(&path[..k]).unwrap();
    out.push(file.clone());
    let Some(name) = path.get(k) else { return };
    if !is_namespace(&file) {
        return;
    }
    for target in reexports(&file) {
        let last = target.last().unwrap();
        if last == name || last == "*" {
            let mut full = target.clone();
            if last == "*" {
                full.pop();
                full.push(name.clone());
            }
            full.extend_from_slice(&path[k + 1..]);
            resolve(&full, out);
        }
    }
}

pub fn closure(start: &str) -> BTreeSet<PathBuf> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([PathBuf::from(start)]);
    while let Some(f) = queue.pop_front() {
        if !seen.insert(f.clone()) {
            continue;
        }
        let mut next = Vec::new();
        let text = own_text(&f);
        let here = module_of(&f);
        let mut paths = paths_in(&text, &here);
        if is_namespace(&f) {
            paths.extend(child_paths(&text, &here));
        }
        for p in paths {
            resolve(&p, &mut next);
        }
        queue.extend(next.into_iter().filter(|n| !seen.contains(n)));
    }
    seen
}
