use serde::{Deserialize, Serialize};

/// Sorted, duplicate-free set of class ids (logit slots).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassSet(Vec<usize>);

impl ClassSet {
    pub fn new(mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }

    /// `{0, 1, ..., n-1}`.
    pub fn range(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn contains(&self, c: usize) -> bool {
        self.0.binary_search(&c).is_ok()
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Self::new(v)
    }

    pub fn is_subset(&self, other: &ClassSet) -> bool {
        self.0.iter().all(|&c| other.contains(c))
    }

    pub fn is_disjoint(&self, other: &ClassSet) -> bool {
        self.0.iter().all(|&c| !other.contains(c))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_id(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl From<Vec<usize>> for ClassSet {
    fn from(v: Vec<usize>) -> Self {
        Self::new(v)
    }
}

impl From<ClassSet> for Vec<usize> {
    fn from(c: ClassSet) -> Self {
        c.0
    }
}
