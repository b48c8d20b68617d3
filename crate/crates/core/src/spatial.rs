//! Static R-tree over projected bounding boxes, bulk-loaded with
//! sort-tile-recursive packing. Built once per store, then read-only.

use crate::geo::GeoBBox;

const NODE_CAPACITY: usize = 16;

#[derive(Debug, Clone)]
struct Node {
    bbox: GeoBBox,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    /// Entry payloads are opaque indices assigned by the caller.
    Leaf(Vec<(GeoBBox, usize)>),
    Inner(Vec<usize>),
}

/// Bulk-loaded, immutable R-tree.
#[derive(Debug, Clone)]
pub struct RTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl RTree {
    pub fn build(mut entries: Vec<(GeoBBox, usize)>) -> RTree {
        if entries.is_empty() {
            return RTree {
                nodes: Vec::new(),
                root: None,
            };
        }
        let mut tree = RTree {
            nodes: Vec::new(),
            root: None,
        };

        // STR packing: vertical slices by center x, then runs by center y.
        entries.sort_by(|a, b| {
            center_x(&a.0)
                .total_cmp(&center_x(&b.0))
                .then_with(|| center_y(&a.0).total_cmp(&center_y(&b.0)))
        });
        let leaf_count = entries.len().div_ceil(NODE_CAPACITY);
        let slice_count = (leaf_count as f64).sqrt().ceil() as usize;
        let slice_size = entries.len().div_ceil(slice_count);

        let mut leaves: Vec<usize> = Vec::new();
        for slice in entries.chunks(slice_size) {
            let mut slice = slice.to_vec();
            slice.sort_by(|a, b| center_y(&a.0).total_cmp(&center_y(&b.0)));
            for chunk in slice.chunks(NODE_CAPACITY) {
                let bbox = cover(chunk.iter().map(|(b, _)| b));
                tree.nodes.push(Node {
                    bbox,
                    kind: NodeKind::Leaf(chunk.to_vec()),
                });
                leaves.push(tree.nodes.len() - 1);
            }
        }

        // Pack upward until a single root remains.
        let mut level = leaves;
        while level.len() > 1 {
            let mut next = Vec::new();
            for chunk in level.chunks(NODE_CAPACITY) {
                let bbox = cover(chunk.iter().map(|&i| &tree.nodes[i].bbox));
                tree.nodes.push(Node {
                    bbox,
                    kind: NodeKind::Inner(chunk.to_vec()),
                });
                next.push(tree.nodes.len() - 1);
            }
            level = next;
        }
        tree.root = Some(level[0]);
        tree
    }

    /// Indices of all entries whose box intersects `query` (touching counts).
    /// Order is unspecified; callers sort as needed.
    pub fn query(&self, query: &GeoBBox) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(root) = self.root {
            self.collect(root, query, &mut out);
        }
        out
    }

    fn collect(&self, node: usize, query: &GeoBBox, out: &mut Vec<usize>) {
        let node = &self.nodes[node];
        if !node.bbox.intersects(query) {
            return;
        }
        match &node.kind {
            NodeKind::Leaf(entries) => {
                for (bbox, idx) in entries {
                    if bbox.intersects(query) {
                        out.push(*idx);
                    }
                }
            }
            NodeKind::Inner(children) => {
                for &child in children {
                    self.collect(child, query, out);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Leaf(e) => e.len(),
                NodeKind::Inner(_) => 0,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }
}

fn center_x(b: &GeoBBox) -> f64 {
    (b.min.x + b.max.x) / 2.0
}

fn center_y(b: &GeoBBox) -> f64 {
    (b.min.y + b.max.y) / 2.0
}

fn cover<'a>(boxes: impl Iterator<Item = &'a GeoBBox>) -> GeoBBox {
    let mut iter = boxes;
    let first = *iter.next().expect("cover of empty set");
    iter.fold(first, |acc, b| GeoBBox {
        min: crate::geo::MercatorPoint {
            x: acc.min.x.min(b.min.x),
            y: acc.min.y.min(b.min.y),
        },
        max: crate::geo::MercatorPoint {
            x: acc.max.x.max(b.max.x),
            y: acc.max.y.max(b.max.y),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::MercatorPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> GeoBBox {
        GeoBBox::new(
            MercatorPoint { x: x1, y: y1 },
            MercatorPoint { x: x2, y: y2 },
        )
        .unwrap()
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let tree = RTree::build(Vec::new());
        assert!(tree.is_empty());
        assert!(tree.query(&bbox(-1e7, -1e7, 1e7, 1e7)).is_empty());
    }

    #[test]
    fn matches_linear_scan_on_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut entries = Vec::new();
        for i in 0..500 {
            let x = rng.gen_range(-10_000.0..10_000.0);
            let y = rng.gen_range(-10_000.0..10_000.0);
            let w = rng.gen_range(1.0..500.0);
            let h = rng.gen_range(1.0..500.0);
            entries.push((bbox(x, y, x + w, y + h), i));
        }
        let tree = RTree::build(entries.clone());
        assert_eq!(tree.len(), 500);

        for _ in 0..100 {
            let x = rng.gen_range(-12_000.0..12_000.0);
            let y = rng.gen_range(-12_000.0..12_000.0);
            let q = bbox(x, y, x + rng.gen_range(10.0..3_000.0), y + rng.gen_range(10.0..3_000.0));
            let mut got = tree.query(&q);
            got.sort_unstable();
            let mut expect: Vec<usize> = entries
                .iter()
                .filter(|(b, _)| b.intersects(&q))
                .map(|(_, i)| *i)
                .collect();
            expect.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn touching_edges_count_as_intersecting() {
        let tree = RTree::build(vec![(bbox(0.0, 0.0, 10.0, 10.0), 0)]);
        assert_eq!(tree.query(&bbox(10.0, 10.0, 20.0, 20.0)), vec![0]);
    }
}
