//! Feature-group partitions and interpretation subsets.
//!
//! An input of `n` features is partitioned into named, disjoint groups.
//! An interpretation subset is a union of groups, isomorphic to a binary
//! mask over the `n` features; subsets are partially ordered by strict
//! inclusion. `omega(i)` lists the subsets strictly included in subset
//! `i` (its children); atomic subsets have no children. The Hasse diagram
//! is the transitive reduction of that order.
//!
//! Subsets are sets of *group* indices, never raw feature indices, so
//! masks are group-sparse by construction.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

/// A named, disjoint set of feature indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGroup {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Partition of `[0, n)` into named groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePartition {
    n: usize,
    groups: Vec<FeatureGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemeError {
    /// Groups must be non-empty, disjoint and cover `[0, n)` exactly.
    PartitionError(String),
    /// Two subset specs resolve to the same feature mask.
    DuplicateSubset { first: usize, second: usize },
    /// Subsets must contain at least one group.
    EmptySubset { subset: usize },
    /// A subset references a group index outside the partition.
    UnknownGroup { subset: usize, group: usize },
    /// Subset index out of range.
    SubsetOutOfRange { index: usize, len: usize },
    /// Cross-scheme linking requires a shared group-name namespace.
    NamespaceError(String),
}

impl fmt::Display for SchemeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeError::PartitionError(msg) => write!(f, "invalid partition: {msg}"),
            SchemeError::DuplicateSubset { first, second } => write!(
                f,
                "subsets {first} and {second} cover the same features; duplicate experts are rejected"
            ),
            SchemeError::EmptySubset { subset } => write!(f, "subset {subset} is empty"),
            SchemeError::UnknownGroup { subset, group } => {
                write!(f, "subset {subset} references unknown group index {group}")
            }
            SchemeError::SubsetOutOfRange { index, len } => {
                write!(f, "subset index {index} out of range for {len} subsets")
            }
            SchemeError::NamespaceError(msg) => write!(f, "group-name namespaces differ: {msg}"),
        }
    }
}

impl core::error::Error for SchemeError {}

impl FeaturePartition {
    /// Validates that the groups are non-empty, pairwise disjoint and
    /// cover `[0, n)` exactly.
    pub fn new(n: usize, groups: Vec<FeatureGroup>) -> Result<Self, SchemeError> {
        if n == 0 {
            return Err(SchemeError::PartitionError("n must be positive".into()));
        }
        let mut seen = vec![false; n];
        for g in &groups {
            if g.indices.is_empty() {
                return Err(SchemeError::PartitionError(alloc::format!(
                    "group {:?} is empty",
                    g.name
                )));
            }
            for &d in &g.indices {
                if d >= n {
                    return Err(SchemeError::PartitionError(alloc::format!(
                        "group {:?} references feature {d} beyond n = {n}",
                        g.name
                    )));
                }
                if seen[d] {
                    return Err(SchemeError::PartitionError(alloc::format!(
                        "feature {d} belongs to more than one group"
                    )));
                }
                seen[d] = true;
            }
        }
        if let Some(hole) = seen.iter().position(|s| !s) {
            return Err(SchemeError::PartitionError(alloc::format!(
                "feature {hole} is not covered by any group"
            )));
        }
        let mut names = BTreeSet::new();
        for g in &groups {
            if !names.insert(g.name.as_str()) {
                return Err(SchemeError::PartitionError(alloc::format!(
                    "duplicate group name {:?}",
                    g.name
                )));
            }
        }
        Ok(Self { n, groups })
    }

    /// Convenience constructor from contiguous ranges, in order.
    pub fn from_sizes(named_sizes: &[(&str, usize)]) -> Result<Self, SchemeError> {
        let mut groups = Vec::new();
        let mut start = 0;
        for (name, size) in named_sizes {
            groups.push(FeatureGroup {
                name: String::from(*name),
                indices: (start..start + size).collect(),
            });
            start += size;
        }
        Self::new(start, groups)
    }

    pub fn num_features(&self) -> usize {
        self.n
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }
}

/// The subset family `S`, its masks, the inclusion DAG and a topological
/// order. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretationScheme {
    partition: FeaturePartition,
    subsets: Vec<BTreeSet<usize>>,
    masks: Vec<Vec<bool>>,
    omega: Vec<Vec<usize>>,
    atomic: Vec<bool>,
    topo_order: Vec<usize>,
}

impl InterpretationScheme {
    /// Builds the scheme from subset specs given as sets of group indices.
    pub fn build(
        partition: &FeaturePartition,
        subset_specs: &[Vec<usize>],
    ) -> Result<Self, SchemeError> {
        let n_groups = partition.num_groups();
        let mut subsets: Vec<BTreeSet<usize>> = Vec::with_capacity(subset_specs.len());
        for (s_idx, spec) in subset_specs.iter().enumerate() {
            if spec.is_empty() {
                return Err(SchemeError::EmptySubset { subset: s_idx });
            }
            let mut set = BTreeSet::new();
            for &g in spec {
                if g >= n_groups {
                    return Err(SchemeError::UnknownGroup {
                        subset: s_idx,
                        group: g,
                    });
                }
                set.insert(g);
            }
            subsets.push(set);
        }
        // Identical group sets and identical masks via different
        // decompositions are both rejected: experts on the same support
        // are redundant and break antisymmetry at the mask level.
        let masks: Vec<Vec<bool>> = subsets
            .iter()
            .map(|set| {
                let mut mask = vec![false; partition.num_features()];
                for &g in set {
                    for &d in &partition.groups()[g].indices {
                        mask[d] = true;
                    }
                }
                mask
            })
            .collect();
        for i in 0..masks.len() {
            for j in (i + 1)..masks.len() {
                if masks[i] == masks[j] {
                    return Err(SchemeError::DuplicateSubset {
                        first: i,
                        second: j,
                    });
                }
            }
        }

        let h = subsets.len();
        let mut omega: Vec<Vec<usize>> = vec![Vec::new(); h];
        for i in 0..h {
            for j in 0..h {
                if i != j && subsets[j].is_subset(&subsets[i]) && subsets[j] != subsets[i] {
                    omega[i].push(j);
                }
            }
        }
        let atomic: Vec<bool> = omega.iter().map(|w| w.is_empty()).collect();

        // Linear extension of inclusion: sort by (cardinality, position).
        let mut topo_order: Vec<usize> = (0..h).collect();
        topo_order.sort_by_key(|&i| (subsets[i].len(), i));

        Ok(Self {
            partition: partition.clone(),
            subsets,
            masks,
            omega,
            atomic,
            topo_order,
        })
    }

    pub fn partition(&self) -> &FeaturePartition {
        &self.partition
    }

    pub fn num_features(&self) -> usize {
        self.partition.num_features()
    }

    /// Number of experts H.
    pub fn num_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn subset(&self, i: usize) -> &BTreeSet<usize> {
        &self.subsets[i]
    }

    /// Group names of subset `i`, in group order.
    pub fn subset_group_names(&self, i: usize) -> Vec<&str> {
        self.subsets[i]
            .iter()
            .map(|&g| self.partition.groups()[g].name.as_str())
            .collect()
    }

    /// Binary mask of subset `i` over the `n` features.
    pub fn mask(&self, i: usize) -> Result<&[bool], SchemeError> {
        self.masks.get(i).map(|m| m.as_slice()).ok_or(
            SchemeError::SubsetOutOfRange {
                index: i,
                len: self.masks.len(),
            },
        )
    }

    /// Mask as a 0.0/1.0 vector, for Hadamard restriction of inputs.
    pub fn mask_vector(&self, i: usize) -> Result<Vec<f64>, SchemeError> {
        Ok(self
            .mask(i)?
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect())
    }

    /// Indices of subsets strictly included in subset `i` (its children).
    pub fn omega(&self, i: usize) -> &[usize] {
        &self.omega[i]
    }

    pub fn is_atomic(&self, i: usize) -> bool {
        self.atomic[i]
    }

    /// Subset indices sorted by increasing cardinality, ties broken by
    /// list position; a linear extension of the inclusion order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Cover pairs `(child, parent)` of the inclusion order: the Hasse
    /// diagram, i.e. the transitive reduction of the omega relation.
    pub fn hasse_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for i in 0..self.num_subsets() {
            'child: for &j in &self.omega[i] {
                for &t in &self.omega[i] {
                    if t != j && self.omega[t].contains(&j) {
                        continue 'child; // j ⊊ t ⊊ i: not a cover
                    }
                }
                edges.push((j, i));
            }
        }
        edges.sort_unstable();
        edges
    }

    /// Feature count of subset `i` (popcount of its mask).
    pub fn subset_feature_count(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|&&b| b).count()
    }
}

/// Linking rule for heterogeneous inputs: a stream based on subset `y`
/// of `target` may feed one based on subset `x` of `source` iff the
/// group names of S_y are contained in those of S_x (non-strictly).
/// Subset identity across schemes is judged by group names.
pub fn hetero_link_allowed(
    source: &InterpretationScheme,
    x: usize,
    target: &InterpretationScheme,
    y: usize,
) -> Result<bool, SchemeError> {
    if x >= source.num_subsets() {
        return Err(SchemeError::SubsetOutOfRange {
            index: x,
            len: source.num_subsets(),
        });
    }
    if y >= target.num_subsets() {
        return Err(SchemeError::SubsetOutOfRange {
            index: y,
            len: target.num_subsets(),
        });
    }
    let source_names: BTreeSet<&str> = source
        .partition
        .groups()
        .iter()
        .map(|g| g.name.as_str())
        .collect();
    let target_names: BTreeSet<&str> = target
        .partition
        .groups()
        .iter()
        .map(|g| g.name.as_str())
        .collect();
    if source_names.is_disjoint(&target_names) {
        return Err(SchemeError::NamespaceError(
            "schemes share no group names".into(),
        ));
    }
    let x_names: BTreeSet<&str> = source.subset_group_names(x).into_iter().collect();
    let y_names: BTreeSet<&str> = target.subset_group_names(y).into_iter().collect();
    Ok(y_names.is_subset(&x_names))
}
