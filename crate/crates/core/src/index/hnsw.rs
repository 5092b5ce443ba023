//! Layered small-world neighbor graph.
//!
//! Nodes are inserted in row order. Each node draws a geometric level from
//! the build seed, descends greedily through the upper layers, then runs a
//! beam search of width `ef_construction` on every layer it lives on and links
//! to the closest results, `m` of them on upper layers and
//! `LAYER0_DEGREE_FACTOR * m` on layer 0; neighbor lists over capacity are
//! pruned back to their closest members. After insertion every layer-0 node
//! is made reachable from the entry point, so a beam as wide as the pool sees
//! every vector.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;

use super::{cosine_f32, HnswParams};
use crate::seed::rng_for;

const MAX_LEVEL: usize = 24;
/// Layer-0 degree cap as a multiple of `m`.
pub const LAYER0_DEGREE_FACTOR: usize = 4;
/// Closest full hosts tried when an unreached node needs an in-edge.
const SWAP_HOSTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f64,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    /// Greater means closer; equal similarities prefer the lower row.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    stamp: Vec<u32>,
    current: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            stamp: vec![0; n],
            current: 0,
        }
    }

    fn reset(&mut self) {
        self.current = self.current.wrapping_add(1);
        if self.current == 0 {
            self.stamp.fill(0);
            self.current = 1;
        }
    }

    /// True if `i` was not yet visited in this round.
    fn insert(&mut self, i: u32) -> bool {
        let s = &mut self.stamp[i as usize];
        if *s == self.current {
            false
        } else {
            *s = self.current;
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub(crate) m: usize,
    pub(crate) entry: u32,
    pub(crate) max_level: usize,
    /// `links[node][level]` is the out-neighbor list.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
}

struct Space<'a> {
    vectors: &'a [f32],
    dim: usize,
}

impl Space<'_> {
    fn row(&self, i: u32) -> &[f32] {
        &self.vectors[i as usize * self.dim..][..self.dim]
    }

    fn sim(&self, q: &[f32], i: u32) -> f64 {
        cosine_f32(q, self.row(i))
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn entry(&self) -> usize {
        self.entry as usize
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    pub fn neighbors(&self, node: usize, level: usize) -> &[u32] {
        &self.links[node][level]
    }

    /// Layer 0 holds every node and gets a wider neighbor list.
    pub fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            LAYER0_DEGREE_FACTOR * self.m
        } else {
            self.m
        }
    }

    pub(crate) fn build(vectors: &[f32], dim: usize, p: &HnswParams) -> Self {
        let n = vectors.len() / dim;
        let space = Space { vectors, dim };
        let mut rng = rng_for(p.seed, "hnsw-levels");
        let ml = 1.0 / (p.m as f64).ln();
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
            })
            .collect();

        let mut g = Graph {
            m: p.m,
            entry: 0,
            max_level: levels[0],
            links: levels.iter().map(|&l| vec![Vec::new(); l + 1]).collect(),
        };
        let mut visited = Visited::new(n);
        for node in 1..n as u32 {
            g.insert(&space, node, levels[node as usize], p.ef_construction, &mut visited);
        }
        g.repair_reachability(&space);
        g
    }

    fn insert(&mut self, space: &Space, node: u32, level: usize, efc: usize, visited: &mut Visited) {
        let q = space.row(node);
        let mut ep = vec![Cand {
            sim: space.sim(q, self.entry),
            idx: self.entry,
        }];
        for lc in (level + 1..=self.max_level).rev() {
            ep = self.search_layer(space, q, &ep, 1, lc, visited);
        }
        for lc in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(space, q, &ep, efc, lc, visited);
            let cap = self.max_degree(lc);
            let chosen: Vec<u32> = found.iter().take(cap).map(|c| c.idx).collect();
            for &nb in &chosen {
                self.links[nb as usize][lc].push(node);
                if self.links[nb as usize][lc].len() > cap {
                    self.prune(space, nb, lc);
                }
            }
            self.links[node as usize][lc] = chosen;
            ep = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = node;
        }
    }

    fn prune(&mut self, space: &Space, node: u32, level: usize) {
        let base = space.row(node);
        let mut c: Vec<Cand> = self.links[node as usize][level]
            .iter()
            .map(|&idx| Cand {
                sim: space.sim(base, idx),
                idx,
            })
            .collect();
        c.sort_by(|a, b| b.cmp(a));
        c.truncate(self.max_degree(level));
        self.links[node as usize][level] = c.into_iter().map(|c| c.idx).collect();
    }

    /// Best-first beam search on one layer; results are returned closest first.
    fn search_layer(
        &self,
        space: &Space,
        q: &[f32],
        entries: &[Cand],
        ef: usize,
        level: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        visited.reset();
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &c in entries {
            if visited.insert(c.idx) {
                frontier.push(c);
                best.push(Reverse(c));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(c) = frontier.pop() {
            if best.len() >= ef && best.peek().is_some_and(|w| c < w.0) {
                break;
            }
            for &nb in &self.links[c.idx as usize][level] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    sim: space.sim(q, nb),
                    idx: nb,
                };
                if best.len() < ef || best.peek().is_some_and(|w| cand > w.0) {
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Give every layer-0 node a path from the entry point.
    ///
    /// An unreached node is linked from the closest reached node with a free
    /// slot. When every reached node is full, one of the closest hosts trades
    /// its farthest outgoing edge whose target stays reachable without it.
    fn repair_reachability(&mut self, space: &Space) {
        let n = self.len();
        let mut reached = self.reachable();
        for orphan in 0..n as u32 {
            if reached[orphan as usize] {
                continue;
            }
            let q = space.row(orphan);
            let mut hosts: Vec<Cand> = (0..n as u32)
                .filter(|&v| reached[v as usize])
                .map(|v| Cand {
                    sim: space.sim(q, v),
                    idx: v,
                })
                .collect();
            hosts.sort_by(|a, b| b.cmp(a));
            let free = hosts
                .iter()
                .find(|h| self.links[h.idx as usize][0].len() < self.max_degree(0))
                .map(|h| h.idx);
            match free {
                Some(h) => self.links[h as usize][0].push(orphan),
                None => {
                    if !self.swap_in(space, orphan, &hosts, &reached) {
                        self.links[hosts[0].idx as usize][0].push(orphan);
                    }
                }
            }
            reached = self.reachable();
        }
    }

    fn swap_in(&mut self, space: &Space, orphan: u32, hosts: &[Cand], reached: &[bool]) -> bool {
        for h in hosts.iter().take(SWAP_HOSTS) {
            let v = h.idx as usize;
            let base = space.row(h.idx);
            let mut out: Vec<Cand> = self.links[v][0]
                .iter()
                .map(|&idx| Cand {
                    sim: space.sim(base, idx),
                    idx,
                })
                .collect();
            out.sort();
            for w in out {
                let slot = self.links[v][0]
                    .iter()
                    .position(|&x| x == w.idx)
                    .expect("neighbor present");
                self.links[v][0][slot] = orphan;
                let now = self.reachable();
                if reached.iter().zip(&now).all(|(&was, &is)| !was || is) {
                    return true;
                }
                self.links[v][0][slot] = w.idx;
            }
        }
        false
    }

    fn reachable(&self) -> Vec<bool> {
        let mut reached = vec![false; self.len()];
        let mut queue = VecDeque::from([self.entry]);
        reached[self.entry as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.links[u as usize][0] {
                if !reached[v as usize] {
                    reached[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
        reached
    }

    /// Beam search for `q` (already unit, single precision) returning up to
    /// `ef` `(similarity, row)` pairs.
    pub(crate) fn search(&self, vectors: &[f32], dim: usize, q: &[f32], ef: usize) -> Vec<(f64, u32)> {
        let space = Space { vectors, dim };
        let mut visited = Visited::new(self.len());
        let entry = Cand {
            sim: space.sim(q, self.entry),
            idx: self.entry,
        };
        let mut ep = vec![entry];
        for lc in (1..=self.max_level).rev() {
            ep = self.search_layer(&space, q, &ep, 1, lc, &mut visited);
        }
        if !ep.contains(&entry) {
            ep.push(entry);
        }
        self.search_layer(&space, q, &ep, ef, 0, &mut visited)
            .into_iter()
            .map(|c| (c.sim, c.idx))
            .collect()
    }
}
