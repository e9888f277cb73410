//! Dynamic prefix tree over valid semantic-ID paths.
//!
//! Children are kept in sorted dense arrays and located by binary search;
//! leaves carry reference-counted item multisets (re-tokenization during
//! continued training can transiently insert the same (path, item) pair
//! twice). Empty branches are pruned on removal, so structural equality
//! with a freshly built trie holds after any balanced op sequence.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::codebook::{parse_path, path_string, SidPath};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct Node {
    /// Sorted by code; binary-searched.
    children: Vec<(u16, Node)>,
    /// Item multiset; populated only at depth k.
    items: BTreeMap<u64, u32>,
    /// Total item count (with multiplicity) in this subtree.
    count: usize,
}

impl Node {
    fn child(&self, code: u16) -> Option<&Node> {
        self.children
            .binary_search_by_key(&code, |(c, _)| *c)
            .ok()
            .map(|i| &self.children[i].1)
    }
}

/// Prefix tree of valid length-`k` paths with item membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trie {
    root: Node,
    k: usize,
    version: u64,
}

impl Trie {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1);
        Self {
            root: Node::default(),
            k,
            version: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.k
    }

    /// Total items (with multiplicity) across all leaves.
    pub fn len(&self) -> usize {
        self.root.count
    }

    pub fn is_empty(&self) -> bool {
        self.root.count == 0
    }

    /// Bumped on every successful insert/remove.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of distinct root-to-leaf paths.
    pub fn path_count(&self) -> usize {
        let mut n = 0;
        let mut stack = vec![(&self.root, 0usize)];
        while let Some((node, depth)) = stack.pop() {
            if depth == self.k {
                n += 1;
                continue;
            }
            for (_, child) in &node.children {
                stack.push((child, depth + 1));
            }
        }
        n
    }

    fn check_path(&self, path: &[u16]) -> Result<()> {
        if path.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "trie: path length {} != k {}",
                path.len(),
                self.k
            )));
        }
        Ok(())
    }

    /// Adds one occurrence of `item_id` under `path`, creating nodes as
    /// needed.
    pub fn insert(&mut self, path: &[u16], item_id: u64) -> Result<()> {
        self.check_path(path)?;
        let mut node = &mut self.root;
        node.count += 1;
        for &code in path {
            let idx = match node.children.binary_search_by_key(&code, |(c, _)| *c) {
                Ok(i) => i,
                Err(i) => {
                    node.children.insert(i, (code, Node::default()));
                    i
                }
            };
            node = &mut node.children[idx].1;
            node.count += 1;
        }
        *node.items.entry(item_id).or_insert(0) += 1;
        self.version += 1;
        Ok(())
    }

    /// Removes one occurrence of `(path, item_id)`, pruning branches whose
    /// subtree becomes empty. Errors if the pair is not present.
    pub fn remove(&mut self, path: &[u16], item_id: u64) -> Result<()> {
        self.check_path(path)?;
        fn recurse(node: &mut Node, path: &[u16], item_id: u64) -> bool {
            match path.split_first() {
                None => match node.items.get_mut(&item_id) {
                    Some(c) => {
                        *c -= 1;
                        if *c == 0 {
                            node.items.remove(&item_id);
                        }
                        node.count -= 1;
                        true
                    }
                    None => false,
                },
                Some((&code, rest)) => {
                    let Ok(idx) = node.children.binary_search_by_key(&code, |(c, _)| *c) else {
                        return false;
                    };
                    if !recurse(&mut node.children[idx].1, rest, item_id) {
                        return false;
                    }
                    if node.children[idx].1.count == 0 {
                        node.children.remove(idx);
                    }
                    node.count -= 1;
                    true
                }
            }
        }
        if recurse(&mut self.root, path, item_id) {
            self.version += 1;
            Ok(())
        } else {
            Err(Error::TrieAbsent {
                path: path_string(path),
                item: item_id,
            })
        }
    }

    /// Valid next codes under `prefix`, ascending and duplicate-free.
    /// Empty when the prefix itself is absent.
    pub fn feasible(&self, prefix: &[u16]) -> Vec<u16> {
        debug_assert!(prefix.len() < self.k);
        let mut node = &self.root;
        for &code in prefix {
            match node.child(code) {
                Some(c) => node = c,
                None => return Vec::new(),
            }
        }
        node.children.iter().map(|(c, _)| *c).collect()
    }

    /// Items under a full path (with multiplicity), ascending by item id.
    /// Empty when the path is invalid.
    pub fn resolve(&self, path: &[u16]) -> Vec<u64> {
        debug_assert_eq!(path.len(), self.k);
        let mut node = &self.root;
        for &code in path {
            match node.child(code) {
                Some(c) => node = c,
                None => return Vec::new(),
            }
        }
        let mut out = Vec::with_capacity(node.items.len());
        for (&id, &c) in &node.items {
            for _ in 0..c {
                out.push(id);
            }
        }
        out
    }

    pub fn contains_path(&self, path: &[u16]) -> bool {
        !self.resolve(path).is_empty()
    }

    /// All `(path, item)` pairs, expanded by multiplicity, in sorted order.
    pub fn entries(&self) -> Vec<(SidPath, u64)> {
        let mut out = Vec::new();
        fn walk(node: &Node, prefix: &mut SidPath, out: &mut Vec<(SidPath, u64)>) {
            if node.children.is_empty() {
                for (&id, &c) in &node.items {
                    for _ in 0..c {
                        out.push((prefix.clone(), id));
                    }
                }
            }
            for (code, child) in &node.children {
                prefix.push(*code);
                walk(child, prefix, out);
                prefix.pop();
            }
        }
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    /// Writes the snapshot: sorted `path<TAB>item` lines (multiplicities as
    /// repeated lines) after a `sidsearch-trie v1 k=<k>` header.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "sidsearch-trie v1 k={}", self.k)?;
        for (p, item) in self.entries() {
            writeln!(w, "{}\t{}", path_string(&p), item)?;
        }
        Ok(())
    }

    /// Loads a snapshot written by [`Self::save_snapshot`]; the result is
    /// structurally equal to the trie that produced it.
    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty snapshot".into(),
        })??;
        let k: usize = header
            .strip_prefix("sidsearch-trie v1 k=")
            .and_then(|v| v.parse().ok())
            .ok_or(Error::Parse {
                line: 1,
                message: format!("bad snapshot header {header:?}"),
            })?;
        let mut trie = Trie::new(k);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let line_no = idx + 2;
            let (p, item) = line.split_once('\t').ok_or(Error::Parse {
                line: line_no,
                message: "expected path<TAB>item".into(),
            })?;
            let sid = parse_path(p)?;
            let item: u64 = item.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad item id {item:?}"),
            })?;
            trie.insert(&sid, item)?;
        }
        trie.version = 0;
        Ok(trie)
    }

    /// Verifies the structural invariants: internal nodes have children,
    /// leaves are non-empty, counts add up, children sorted.
    #[cfg(test)]
    fn check_invariants(&self) {
        fn walk(node: &Node, depth: usize, k: usize) -> usize {
            assert!(node.children.windows(2).all(|w| w[0].0 < w[1].0));
            if depth == k {
                assert!(node.children.is_empty());
                let total: usize = node.items.values().map(|&c| c as usize).sum();
                assert!(total > 0, "empty leaf at depth {depth}");
                assert_eq!(node.count, total);
                total
            } else {
                assert!(node.items.is_empty());
                if depth > 0 {
                    assert!(!node.children.is_empty(), "dangling internal node");
                }
                let total: usize = node
                    .children
                    .iter()
                    .map(|(_, c)| walk(c, depth + 1, k))
                    .sum();
                assert_eq!(node.count, total);
                total
            }
        }
        if self.root.count > 0 || !self.root.children.is_empty() {
            walk(&self.root, 0, self.k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn insert_then_remove_restores_empty() {
        let mut t = Trie::new(3);
        t.insert(&[1, 2, 3], 42).unwrap();
        t.remove(&[1, 2, 3], 42).unwrap();
        let mut fresh = Trie::new(3);
        fresh.version = t.version;
        assert_eq!(t, fresh);
    }

    #[test]
    fn refcounted_items_on_one_path() {
        let mut t = Trie::new(2);
        t.insert(&[0, 1], 7).unwrap();
        t.insert(&[0, 1], 9).unwrap();
        t.remove(&[0, 1], 9).unwrap();
        assert_eq!(t.resolve(&[0, 1]), vec![7]);
        assert_eq!(t.feasible(&[0]), vec![1]);
    }

    #[test]
    fn feasible_hand_examples() {
        let mut t = Trie::new(2);
        t.insert(&[0, 0], 1).unwrap();
        t.insert(&[1, 1], 2).unwrap();
        assert_eq!(t.feasible(&[0]), vec![0]);
        assert_eq!(t.feasible(&[]), vec![0, 1]);
        assert_eq!(t.feasible(&[7]), Vec::<u16>::new());
    }

    #[test]
    fn resolve_sorted_and_absent() {
        let mut t = Trie::new(2);
        t.insert(&[3, 4], 42).unwrap();
        t.insert(&[3, 4], 7).unwrap();
        assert_eq!(t.resolve(&[3, 4]), vec![7, 42]);
        assert_eq!(t.resolve(&[3, 5]), Vec::<u64>::new());
    }

    #[test]
    fn remove_absent_names_path_and_item() {
        let mut t = Trie::new(2);
        t.insert(&[3, 4], 42).unwrap();
        let err = t.remove(&[3, 4], 43).unwrap_err().to_string();
        assert!(err.contains("3-4") && err.contains("43"), "{err}");
        let err = t.remove(&[9, 9], 42).unwrap_err().to_string();
        assert!(err.contains("9-9"), "{err}");
    }

    #[test]
    fn duplicate_insert_needs_matching_removes() {
        let mut t = Trie::new(1);
        t.insert(&[5], 1).unwrap();
        t.insert(&[5], 1).unwrap();
        assert_eq!(t.resolve(&[5]), vec![1, 1]);
        t.remove(&[5], 1).unwrap();
        assert_eq!(t.resolve(&[5]), vec![1]);
        t.remove(&[5], 1).unwrap();
        assert!(t.is_empty());
    }

    /// Flat reference model: a multiset of (path, item) pairs.
    #[derive(Default)]
    struct FlatRef {
        pairs: HashMap<(Vec<u16>, u64), u32>,
    }

    impl FlatRef {
        fn insert(&mut self, path: &[u16], item: u64) {
            *self.pairs.entry((path.to_vec(), item)).or_insert(0) += 1;
        }
        fn remove(&mut self, path: &[u16], item: u64) -> bool {
            match self.pairs.get_mut(&(path.to_vec(), item)) {
                Some(c) => {
                    *c -= 1;
                    if *c == 0 {
                        self.pairs.remove(&(path.to_vec(), item));
                    }
                    true
                }
                None => false,
            }
        }
        fn feasible(&self, prefix: &[u16]) -> Vec<u16> {
            let mut out: Vec<u16> = self
                .pairs
                .keys()
                .filter(|(p, _)| p.starts_with(prefix))
                .map(|(p, _)| p[prefix.len()])
                .collect();
            out.sort_unstable();
            out.dedup();
            out
        }
        fn resolve(&self, path: &[u16]) -> Vec<u64> {
            let mut out: Vec<u64> = self
                .pairs
                .iter()
                .filter(|((p, _), _)| p == path)
                .flat_map(|((_, id), &c)| std::iter::repeat(*id).take(c as usize))
                .collect();
            out.sort_unstable();
            out
        }
    }

    #[test]
    fn randomized_ops_match_flat_reference() {
        let k = 3;
        let w = 5u16;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut trie = Trie::new(k);
        let mut flat = FlatRef::default();
        let mut live: Vec<(Vec<u16>, u64)> = Vec::new();

        for step in 0..10_000 {
            let do_insert = live.is_empty() || rng.random_range(0.0..1.0) < 0.55;
            if do_insert {
                let path: Vec<u16> = (0..k).map(|_| rng.random_range(0..w)).collect();
                let item = rng.random_range(0..40u64);
                trie.insert(&path, item).unwrap();
                flat.insert(&path, item);
                live.push((path, item));
            } else {
                let idx = rng.random_range(0..live.len());
                let (path, item) = live.swap_remove(idx);
                assert!(flat.remove(&path, item));
                trie.remove(&path, item).unwrap();
            }

            // Sampled prefix checks every step; exhaustive sweep periodically.
            let plen = rng.random_range(0..k);
            let prefix: Vec<u16> = (0..plen).map(|_| rng.random_range(0..w)).collect();
            assert_eq!(trie.feasible(&prefix), flat.feasible(&prefix));
            let path: Vec<u16> = (0..k).map(|_| rng.random_range(0..w)).collect();
            assert_eq!(trie.resolve(&path), flat.resolve(&path));

            if step % 1000 == 999 {
                trie.check_invariants();
                for a in 0..w {
                    for b in 0..w {
                        assert_eq!(trie.feasible(&[a, b]), flat.feasible(&[a, b]));
                    }
                }
            }
        }
        trie.check_invariants();
    }

    #[test]
    fn snapshot_roundtrip_is_structural_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut trie = Trie::new(3);
        for _ in 0..300 {
            let path: Vec<u16> = (0..3).map(|_| rng.random_range(0..6)).collect();
            trie.insert(&path, rng.random_range(0..50u64)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.snapshot");
        trie.save_snapshot(&p).unwrap();
        let loaded = Trie::load_snapshot(&p).unwrap();
        let mut expect = trie.clone();
        expect.version = 0;
        assert_eq!(loaded, expect);

        // Saving the loaded trie reproduces the bytes.
        let p2 = dir.path().join("t2.snapshot");
        loaded.save_snapshot(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
