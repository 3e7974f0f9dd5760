/// Disjoint-set forest with union by rank and path compression.
#[derive(Debug, Clone, Default)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        Self {
            parent: (0..len).collect(),
            rank: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Adds a new singleton set and returns its index.
    pub fn push(&mut self) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        self.rank.push(0);
        id
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; returns false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    /// Height of the tree containing `x` without compressing it.
    pub fn height(&self, x: usize) -> usize {
        let mut h = 0;
        let mut cur = x;
        while self.parent[cur] != cur {
            cur = self.parent[cur];
            h += 1;
        }
        h
    }

    pub fn rank(&self, x: usize) -> u8 {
        self.rank[x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn find_is_idempotent_and_height_bounded(ops in prop::collection::vec((0usize..64, 0usize..64), 0..200)) {
            let mut uf = UnionFind::new(64);
            for &(a, b) in &ops {
                uf.union(a, b);
            }
            for x in 0..64 {
                let r = uf.find(x);
                prop_assert_eq!(uf.find(r), r);
                prop_assert_eq!(uf.find(x), r);
            }
            for x in 0..64 {
                let r = uf.find(x);
                prop_assert!(uf.height(x) <= uf.rank(r) as usize);
            }
        }
    }

    #[test]
    fn push_extends() {
        let mut uf = UnionFind::new(2);
        let c = uf.push();
        assert!(uf.union(0, c));
        assert!(!uf.union(c, 0));
        assert_eq!(uf.find(c), uf.find(0));
        assert_ne!(uf.find(1), uf.find(0));
    }
}
