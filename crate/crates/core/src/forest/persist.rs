//! Versioned binary forest files.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic            4 bytes  "SQRF"
//! version          u8       FORMAT_VERSION
//! n_trees          u32
//! max_depth        u32      0 = unlimited
//! min_samples_leaf u32
//! features/split   u32      0 = sqrt
//! bootstrap        u8       0 or 1
//! seed             u64
//! n_features       u32
//!   name           u32 length + UTF-8 bytes, repeated n_features times
//! tree_count       u32      must equal n_trees
//!   node_count     u32, then node_count nodes:
//!     tag u8 = 0   leaf:  prob f64, count u64
//!     tag u8 = 1   split: feature u32, threshold f64, left u32, right u32
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use super::{DecisionTree, FeaturesPerSplit, ForestConfig, ForestError, Node, RandomForest};

pub const MAGIC: &[u8; 4] = b"SQRF";
pub const FORMAT_VERSION: u8 = 1;

const TAG_LEAF: u8 = 0;
const TAG_SPLIT: u8 = 1;

impl RandomForest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        let c = &self.config;
        put_u32(&mut out, c.n_trees);
        put_u32(&mut out, c.max_depth.unwrap_or(0));
        put_u32(&mut out, c.min_samples_leaf);
        put_u32(
            &mut out,
            match c.features_per_split {
                FeaturesPerSplit::Sqrt => 0,
                FeaturesPerSplit::Count(k) => k,
            },
        );
        out.push(u8::from(c.bootstrap));
        out.extend_from_slice(&c.seed.to_le_bytes());
        put_u32(&mut out, self.feature_names.len());
        for name in &self.feature_names {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
        }
        put_u32(&mut out, self.trees.len());
        for tree in &self.trees {
            put_u32(&mut out, tree.nodes().len());
            for node in tree.nodes() {
                match *node {
                    Node::Leaf { prob, count } => {
                        out.push(TAG_LEAF);
                        out.extend_from_slice(&prob.to_le_bytes());
                        out.extend_from_slice(&(count as u64).to_le_bytes());
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        out.push(TAG_SPLIT);
                        put_u32(&mut out, feature);
                        out.extend_from_slice(&threshold.to_le_bytes());
                        put_u32(&mut out, left);
                        put_u32(&mut out, right);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ForestError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(ForestError::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(ForestError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n_trees = r.u32()?;
        let max_depth = match r.u32()? {
            0 => None,
            d => Some(d),
        };
        let min_samples_leaf = r.u32()?;
        let features_per_split = match r.u32()? {
            0 => FeaturesPerSplit::Sqrt,
            k => FeaturesPerSplit::Count(k),
        };
        let bootstrap = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(ForestError::Format(format!("bootstrap flag {b}"))),
        };
        let seed = r.u64()?;
        let config = ForestConfig {
            n_trees,
            max_depth,
            min_samples_leaf,
            features_per_split,
            bootstrap,
            seed,
        };
        let n_features = r.u32()?;
        let mut feature_names = Vec::with_capacity(n_features.min(1024));
        for _ in 0..n_features {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| ForestError::Format(format!("feature name: {e}")))?;
            feature_names.push(name.to_string());
        }
        let tree_count = r.u32()?;
        if tree_count != n_trees {
            return Err(ForestError::Format(format!(
                "header says {n_trees} trees, body has {tree_count}"
            )));
        }
        let mut trees = Vec::with_capacity(tree_count.min(4096));
        for _ in 0..tree_count {
            let n_nodes = r.u32()?;
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
            for _ in 0..n_nodes {
                nodes.push(match r.u8()? {
                    TAG_LEAF => Node::Leaf {
                        prob: r.f64()?,
                        count: r.u64()? as usize,
                    },
                    TAG_SPLIT => Node::Split {
                        feature: r.u32()?,
                        threshold: r.f64()?,
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                    tag => return Err(ForestError::Format(format!("unknown node tag {tag}"))),
                });
            }
            trees.push(DecisionTree::from_nodes(nodes)?);
        }
        if r.at != bytes.len() {
            return Err(ForestError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        RandomForest::from_trees(trees, config, feature_names)
    }
}

pub fn save_forest(forest: &RandomForest, path: impl AsRef<Path>) -> Result<(), ForestError> {
    let path = path.as_ref();
    std::fs::write(path, forest.to_bytes()).map_err(|source| ForestError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<RandomForest, ForestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ForestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RandomForest::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("forest dimensions fit in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ForestError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ForestError::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.at
            )));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ForestError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ForestError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, ForestError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ForestError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
