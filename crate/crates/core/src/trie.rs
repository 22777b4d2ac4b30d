//! Hexary Merkle Patricia trie with inclusion proofs.
//!
//! The trie is persistent: [`Trie::insert`] returns a new version that shares
//! every untouched subtree with the old one, so block-by-block snapshots are
//! cheap to retain. Node hashes are computed once, when a node is built.
//!
//! Node encoding (children are always referenced by hash):
//!
//! ```text
//! Leaf      0x00 | path | len u32 | value
//! Extension 0x01 | path | child [32]
//! Branch    0x02 | bitmap u16 | child [32] per set bit (ascending) | 0x00
//!                                                                  | 0x01 len u32 value
//! path      nibble count u8 | nibbles packed high-first, odd count zero-padded
//! ```
//!
//! Serialized proof: `count u16 | (len u32 | node)* | len u32 | key | len u32 | value`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::codec::{put_bytes, CodecError, Reader};
use crate::crypto::{digest, Digest};

/// Longest accepted key, in bytes.
pub const MAX_KEY_LEN: usize = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum TrieError {
    #[error("empty key")]
    EmptyKey,
    #[error("key longer than {MAX_KEY_LEN} bytes")]
    KeyTooLong,
    #[error("key absent")]
    KeyAbsent,
}

/// Root of the empty trie.
pub fn empty_root() -> Digest {
    digest(&[])
}

pub fn key_to_nibbles(key: &[u8]) -> Vec<u8> {
    key.iter().flat_map(|b| [b >> 4, b & 0x0f]).collect()
}

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// A trie node in its hash-linked (wire) form.
#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum TrieNode {
    Leaf { key_suffix: Vec<u8>, value: Vec<u8> },
    Extension { shared_prefix: Vec<u8>, child: Digest },
    Branch { children: [Option<Digest>; 16], value: Option<Vec<u8>> },
}

const TAG_LEAF: u8 = 0x00;
const TAG_EXTENSION: u8 = 0x01;
const TAG_BRANCH: u8 = 0x02;

fn put_path(out: &mut Vec<u8>, nibbles: &[u8]) {
    out.push(u8::try_from(nibbles.len()).expect("path bounded by MAX_KEY_LEN"));
    for pair in nibbles.chunks(2) {
        let lo = pair.get(1).copied().unwrap_or(0);
        out.push((pair[0] << 4) | lo);
    }
}

fn read_path(r: &mut Reader<'_>) -> Result<Vec<u8>, CodecError> {
    let count = r.u8()? as usize;
    let packed = r.take(count.div_ceil(2))?;
    let mut nibbles = key_to_nibbles(packed);
    if count % 2 == 1 && nibbles.pop() != Some(0) {
        return Err(CodecError::Malformed);
    }
    Ok(nibbles)
}

impl TrieNode {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            TrieNode::Leaf { key_suffix, value } => {
                out.push(TAG_LEAF);
                put_path(&mut out, key_suffix);
                put_bytes(&mut out, value);
            }
            TrieNode::Extension { shared_prefix, child } => {
                out.push(TAG_EXTENSION);
                put_path(&mut out, shared_prefix);
                out.extend_from_slice(child.as_ref());
            }
            TrieNode::Branch { children, value } => {
                out.push(TAG_BRANCH);
                let bitmap = children
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.is_some())
                    .fold(0u16, |m, (i, _)| m | (1 << i));
                out.extend_from_slice(&bitmap.to_be_bytes());
                for child in children.iter().flatten() {
                    out.extend_from_slice(child.as_ref());
                }
                match value {
                    None => out.push(0),
                    Some(v) => {
                        out.push(1);
                        put_bytes(&mut out, v);
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let node = match r.u8()? {
            TAG_LEAF => {
                let key_suffix = read_path(&mut r)?;
                TrieNode::Leaf { key_suffix, value: r.bytes()?.to_vec() }
            }
            TAG_EXTENSION => {
                let shared_prefix = read_path(&mut r)?;
                if shared_prefix.is_empty() {
                    return Err(CodecError::Malformed);
                }
                TrieNode::Extension { shared_prefix, child: r.digest()? }
            }
            TAG_BRANCH => {
                let bitmap = r.u16()?;
                let mut children = [None; 16];
                for (i, slot) in children.iter_mut().enumerate() {
                    if bitmap & (1 << i) != 0 {
                        *slot = Some(r.digest()?);
                    }
                }
                let value = match r.u8()? {
                    0 => None,
                    1 => Some(r.bytes()?.to_vec()),
                    _ => return Err(CodecError::Malformed),
                };
                TrieNode::Branch { children, value }
            }
            other => return Err(CodecError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(node)
    }
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    encoded: Vec<u8>,
    hash: Digest,
}

#[derive(Debug)]
enum Kind {
    Leaf { suffix: Vec<u8>, value: Vec<u8> },
    Extension { prefix: Vec<u8>, child: Arc<Node> },
    Branch { children: [Option<Arc<Node>>; 16], value: Option<Vec<u8>> },
}

impl Node {
    fn new(kind: Kind) -> Arc<Node> {
        let wire = match &kind {
            Kind::Leaf { suffix, value } => TrieNode::Leaf { key_suffix: suffix.clone(), value: value.clone() },
            Kind::Extension { prefix, child } => {
                TrieNode::Extension { shared_prefix: prefix.clone(), child: child.hash }
            }
            Kind::Branch { children, value } => TrieNode::Branch {
                children: core::array::from_fn(|i| children[i].as_ref().map(|c| c.hash)),
                value: value.clone(),
            },
        };
        let encoded = wire.encode();
        let hash = digest(&encoded);
        Arc::new(Node { kind, encoded, hash })
    }

    fn leaf(suffix: &[u8], value: Vec<u8>) -> Arc<Node> {
        Node::new(Kind::Leaf { suffix: suffix.to_vec(), value })
    }

    fn wrap(prefix: &[u8], child: Arc<Node>) -> Arc<Node> {
        if prefix.is_empty() {
            child
        } else {
            Node::new(Kind::Extension { prefix: prefix.to_vec(), child })
        }
    }
}

fn place(children: &mut [Option<Arc<Node>>; 16], value: &mut Option<Vec<u8>>, rest: &[u8], v: Vec<u8>) {
    match rest.split_first() {
        None => *value = Some(v),
        Some((&first, tail)) => children[first as usize] = Some(Node::leaf(tail, v)),
    }
}

fn insert_at(node: Option<&Arc<Node>>, path: &[u8], value: Vec<u8>) -> Arc<Node> {
    let Some(node) = node else {
        return Node::leaf(path, value);
    };
    match &node.kind {
        Kind::Leaf { suffix, value: old } => {
            if suffix.as_slice() == path {
                return Node::leaf(path, value);
            }
            let common = common_prefix(suffix, path);
            let mut children: [Option<Arc<Node>>; 16] = Default::default();
            let mut slot = None;
            place(&mut children, &mut slot, &suffix[common..], old.clone());
            place(&mut children, &mut slot, &path[common..], value);
            Node::wrap(&path[..common], Node::new(Kind::Branch { children, value: slot }))
        }
        Kind::Extension { prefix, child } => {
            let common = common_prefix(prefix, path);
            if common == prefix.len() {
                let child = insert_at(Some(child), &path[common..], value);
                return Node::new(Kind::Extension { prefix: prefix.clone(), child });
            }
            let mut children: [Option<Arc<Node>>; 16] = Default::default();
            let mut slot = None;
            let split = prefix[common] as usize;
            children[split] = Some(Node::wrap(&prefix[common + 1..], child.clone()));
            place(&mut children, &mut slot, &path[common..], value);
            Node::wrap(&path[..common], Node::new(Kind::Branch { children, value: slot }))
        }
        Kind::Branch { children, value: slot } => {
            let mut children = children.clone();
            let mut slot = slot.clone();
            match path.split_first() {
                None => slot = Some(value),
                Some((&first, tail)) => {
                    let i = first as usize;
                    children[i] = Some(insert_at(children[i].as_ref(), tail, value));
                }
            }
            Node::new(Kind::Branch { children, value: slot })
        }
    }
}

/// Inclusion proof for one `(key, value)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    /// Encoded nodes from the root toward the terminal node.
    pub nodes: Vec<Vec<u8>>,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl MerkleProof {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let count = u16::try_from(self.nodes.len()).expect("proof depth bounded by key length");
        out.extend_from_slice(&count.to_be_bytes());
        for node in &self.nodes {
            put_bytes(&mut out, node);
        }
        put_bytes(&mut out, &self.key);
        put_bytes(&mut out, &self.value);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let count = r.u16()? as usize;
        // Each node costs at least its 4-byte prefix.
        if count * 4 > r.remaining() {
            return Err(CodecError::BadLengthPrefix);
        }
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            nodes.push(r.bytes()?.to_vec());
        }
        let key = r.bytes()?.to_vec();
        let value = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Self { nodes, key, value })
    }
}

/// An immutable trie version. Cloning is O(1).
#[derive(Debug, Clone, Default)]
pub struct Trie {
    root: Option<Arc<Node>>,
    len: usize,
}

impl Trie {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&self, key: &[u8], value: Vec<u8>) -> Result<Trie, TrieError> {
        if key.is_empty() {
            return Err(TrieError::EmptyKey);
        }
        if key.len() > MAX_KEY_LEN {
            return Err(TrieError::KeyTooLong);
        }
        let fresh = self.get(key).is_none();
        let path = key_to_nibbles(key);
        Ok(Trie {
            root: Some(insert_at(self.root.as_ref(), &path, value)),
            len: self.len + usize::from(fresh),
        })
    }

    pub fn root_hash(&self) -> Digest {
        self.root.as_ref().map_or_else(empty_root, |n| n.hash)
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        let path = key_to_nibbles(key);
        let mut rest = path.as_slice();
        let mut node = self.root.as_ref()?;
        loop {
            match &node.kind {
                Kind::Leaf { suffix, value } => {
                    return (suffix.as_slice() == rest).then_some(value.as_slice());
                }
                Kind::Extension { prefix, child } => {
                    rest = rest.strip_prefix(prefix.as_slice())?;
                    node = child;
                }
                Kind::Branch { children, value } => match rest.split_first() {
                    None => return value.as_deref(),
                    Some((&first, tail)) => {
                        node = children[first as usize].as_ref()?;
                        rest = tail;
                    }
                },
            }
        }
    }

    pub fn prove(&self, key: &[u8]) -> Result<MerkleProof, TrieError> {
        let path = key_to_nibbles(key);
        let mut rest = path.as_slice();
        let mut nodes = Vec::new();
        let mut node = self.root.as_ref().ok_or(TrieError::KeyAbsent)?;
        let value = loop {
            nodes.push(node.encoded.clone());
            match &node.kind {
                Kind::Leaf { suffix, value } => {
                    if suffix.as_slice() != rest {
                        return Err(TrieError::KeyAbsent);
                    }
                    break value.clone();
                }
                Kind::Extension { prefix, child } => {
                    rest = rest.strip_prefix(prefix.as_slice()).ok_or(TrieError::KeyAbsent)?;
                    node = child;
                }
                Kind::Branch { children, value } => match rest.split_first() {
                    None => break value.clone().ok_or(TrieError::KeyAbsent)?,
                    Some((&first, tail)) => {
                        node = children[first as usize].as_ref().ok_or(TrieError::KeyAbsent)?;
                        rest = tail;
                    }
                },
            }
        };
        Ok(MerkleProof { nodes, key: key.to_vec(), value })
    }

    /// All `(key, value)` pairs in key order.
    pub fn entries(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        fn walk(node: &Node, path: &mut Vec<u8>, out: &mut Vec<(Vec<u8>, Vec<u8>)>) {
            let pack = |p: &[u8]| p.chunks(2).map(|c| (c[0] << 4) | c[1]).collect::<Vec<u8>>();
            let mark = path.len();
            match &node.kind {
                Kind::Leaf { suffix, value } => {
                    path.extend_from_slice(suffix);
                    out.push((pack(path), value.clone()));
                }
                Kind::Extension { prefix, child } => {
                    path.extend_from_slice(prefix);
                    walk(child, path, out);
                }
                Kind::Branch { children, value } => {
                    if let Some(v) = value {
                        out.push((pack(path), v.clone()));
                    }
                    for (i, child) in children.iter().enumerate() {
                        if let Some(child) = child {
                            path.push(i as u8);
                            walk(child, path, out);
                            path.pop();
                        }
                    }
                }
            }
            path.truncate(mark);
        }
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            walk(root, &mut Vec::new(), &mut out);
        }
        out
    }
}

impl<K: AsRef<[u8]>, V: Into<Vec<u8>>> FromIterator<(K, V)> for Trie {
    /// Panics on empty or over-long keys.
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        iter.into_iter()
            .fold(Trie::new(), |t, (k, v)| t.insert(k.as_ref(), v.into()).expect("valid trie key"))
    }
}

/// `true` iff the proof's hash chain links `root` to `(proof.key, proof.value)`.
pub fn verify_proof(root: &Digest, proof: &MerkleProof) -> bool {
    if proof.key.is_empty() || proof.key.len() > MAX_KEY_LEN {
        return false;
    }
    let path = key_to_nibbles(&proof.key);
    let mut rest = path.as_slice();
    let mut expected = *root;
    for (i, encoded) in proof.nodes.iter().enumerate() {
        let last = i + 1 == proof.nodes.len();
        if digest(encoded) != expected {
            return false;
        }
        let Ok(node) = TrieNode::decode(encoded) else {
            return false;
        };
        match node {
            TrieNode::Leaf { key_suffix, value } => {
                return last && key_suffix == rest && value == proof.value;
            }
            TrieNode::Extension { shared_prefix, child } => {
                let Some(tail) = rest.strip_prefix(shared_prefix.as_slice()) else {
                    return false;
                };
                rest = tail;
                expected = child;
            }
            TrieNode::Branch { children, value } => match rest.split_first() {
                None => return last && value.as_deref() == Some(proof.value.as_slice()),
                Some((&first, tail)) => {
                    let Some(child) = children[first as usize] else {
                        return false;
                    };
                    rest = tail;
                    expected = child;
                }
            },
        }
    }
    false
}

/// Decodes and verifies a serialized proof; malformed bytes verify as `false`.
pub fn verify_encoded_proof(root: &Digest, proof: &[u8]) -> Option<MerkleProof> {
    let proof = MerkleProof::decode(proof).ok()?;
    verify_proof(root, &proof).then_some(proof)
}

/// Trie key of transaction `index`: minimal big-endian bytes, `0` as `0x00`.
pub fn tx_index_key(index: u64) -> Vec<u8> {
    let bytes = index.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count().min(7);
    bytes[skip..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn insert_then_get() {
        let t = Trie::new().insert(b"abc", b"1".to_vec()).unwrap();
        assert_eq!(t.get(b"abc"), Some(&b"1"[..]));
        assert_eq!(t.get(b"abd"), None);
        assert_eq!(Trie::new().insert(b"", vec![]).unwrap_err(), TrieError::EmptyKey);
    }

    #[test]
    fn empty_and_single_leaf_roots() {
        assert_eq!(Trie::new().root_hash(), digest(b""));
        let t = Trie::new().insert(&[0xab], b"v".to_vec()).unwrap();
        let leaf = TrieNode::Leaf { key_suffix: vec![0xa, 0xb], value: b"v".to_vec() };
        assert_eq!(t.root_hash(), digest(&leaf.encode()));
    }

    #[test]
    fn order_independent_with_prefix_keys() {
        let keys: [&[u8]; 4] = [&[0x01], &[0x01, 0x00], &[0x02], &[0x01, 0x00, 0x05]];
        let forward: Trie = keys.iter().map(|k| (*k, k.to_vec())).collect();
        let backward: Trie = keys.iter().rev().map(|k| (*k, k.to_vec())).collect();
        assert_eq!(forward.root_hash(), backward.root_hash());
        for k in keys {
            assert_eq!(forward.get(k), Some(k));
            assert!(verify_proof(&forward.root_hash(), &forward.prove(k).unwrap()));
        }
    }

    #[test]
    fn overwrite_replaces_value() {
        let t = Trie::new().insert(b"k", b"1".to_vec()).unwrap();
        let t2 = t.insert(b"k", b"2".to_vec()).unwrap();
        assert_eq!(t.get(b"k"), Some(&b"1"[..]));
        assert_eq!(t2.get(b"k"), Some(&b"2"[..]));
        assert_eq!(t2.len(), 1);
        assert_ne!(t.root_hash(), t2.root_hash());
    }

    #[test]
    fn proof_rejections() {
        let t: Trie = (0u64..20).map(|i| (tx_index_key(i), vec![i as u8; 3])).collect();
        let proof = t.prove(&tx_index_key(7)).unwrap();
        let root = t.root_hash();
        assert!(verify_proof(&root, &proof));

        let mut bad = proof.clone();
        bad.value[0] ^= 1;
        assert!(!verify_proof(&root, &bad));
        assert!(!verify_proof(&digest(b"other root"), &proof));

        let mut extra = proof.clone();
        extra.nodes.push(extra.nodes[0].clone());
        assert!(!verify_proof(&root, &extra));

        let mut short = proof.clone();
        short.nodes.pop();
        assert!(!verify_proof(&root, &short));
        assert_eq!(t.prove(&tx_index_key(99)), Err(TrieError::KeyAbsent));
    }

    #[test]
    fn proof_serialization_round_trips() {
        let t: Trie = (0u64..5).map(|i| (tx_index_key(i), vec![1, 2, 3])).collect();
        let proof = t.prove(&[0x03]).unwrap();
        assert_eq!(MerkleProof::decode(&proof.encode()).unwrap(), proof);
        assert!(verify_encoded_proof(&t.root_hash(), &proof.encode()).is_some());
        assert!(verify_encoded_proof(&t.root_hash(), &[0xff, 0xff]).is_none());
    }

    #[test]
    fn tx_keys_are_minimal_big_endian() {
        assert_eq!(tx_index_key(0), vec![0x00]);
        assert_eq!(tx_index_key(1), vec![0x01]);
        assert_eq!(tx_index_key(255), vec![0xff]);
        assert_eq!(tx_index_key(256), vec![0x01, 0x00]);
    }

    #[test]
    fn entries_lists_everything_sorted() {
        let t: Trie = [(&b"b"[..], &b"2"[..]), (b"a", b"1"), (b"ab", b"3")].into_iter().collect();
        assert_eq!(
            t.entries(),
            vec![(b"a".to_vec(), b"1".to_vec()), (b"ab".to_vec(), b"3".to_vec()), (b"b".to_vec(), b"2".to_vec())]
        );
    }

    #[test]
    fn node_decode_rejects_bad_padding() {
        let leaf = TrieNode::Leaf { key_suffix: vec![1], value: vec![] }.encode();
        let mut bad = leaf.clone();
        bad[2] |= 0x0f;
        assert!(TrieNode::decode(&leaf).is_ok());
        assert_eq!(TrieNode::decode(&bad), Err(CodecError::Malformed));
    }
}
