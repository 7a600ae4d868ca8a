//! Symbolic stone/potion transition environments.
//!
//! Latent stones are the eight vertices of the unit cube; a latent potion
//! pushes one coordinate toward 0 or 1, succeeding only if the graph contains
//! the corresponding cube edge. Observed stones and potions are related to
//! latent ones by signed axis permutations (stone map, potion map).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STONES: usize = 8;
pub const POTIONS: usize = 6;
pub const EDGES: usize = 12;
/// Number of signed permutations of three axes.
pub const SIGNED_PERMS: usize = 48;

/// Axis permutation plus per-axis flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedPerm {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl SignedPerm {
    pub fn all() -> Vec<SignedPerm> {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(SIGNED_PERMS);
        for perm in PERMS {
            for bits in 0..8 {
                out.push(SignedPerm {
                    perm,
                    flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
                });
            }
        }
        out
    }

    fn map_stone(&self, s: usize) -> usize {
        (0..3).fold(0, |acc, i| {
            let bit = ((s >> i) & 1 == 1) ^ self.flip[i];
            acc | (usize::from(bit) << self.perm[i])
        })
    }

    fn unmap_stone(&self, l: usize) -> usize {
        (0..3).fold(0, |acc, i| {
            let bit = ((l >> self.perm[i]) & 1 == 1) ^ self.flip[i];
            acc | (usize::from(bit) << i)
        })
    }

    /// Potion `2·axis + dir` with `dir = 1` meaning "set the bit".
    fn map_potion(&self, p: usize) -> usize {
        let (axis, dir) = (p / 2, p % 2 == 1);
        2 * self.perm[axis] + usize::from(dir ^ self.flip[axis])
    }
}

/// The twelve cube edges as `(low, high)` vertex pairs differing in one bit.
pub fn cube_edges() -> Vec<(usize, usize)> {
    let mut e = Vec::with_capacity(EDGES);
    for s in 0..STONES {
        for b in 0..3 {
            if s & (1 << b) == 0 {
                e.push((s, s | (1 << b)));
            }
        }
    }
    e
}

/// Bitmask over `cube_edges()`.
pub type Graph = u16;

fn edge_index(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    cube_edges().iter().position(|&e| e == (lo, hi)).expect("not a cube edge")
}

fn connected(g: Graph) -> bool {
    let edges = cube_edges();
    let mut seen = 1u8;
    loop {
        let before = seen;
        for (i, &(a, b)) in edges.iter().enumerate() {
            if g & (1 << i) != 0 && ((seen >> a) & 1 == 1 || (seen >> b) & 1 == 1) {
                seen |= (1 << a) | (1 << b);
            }
        }
        if seen == before {
            return seen == 0xff;
        }
    }
}

/// Latent transition of `stone` under `potion`.
pub fn latent_transition(graph: Graph, stone: usize, potion: usize) -> usize {
    let (axis, set) = (potion / 2, potion % 2 == 1);
    let target = if set { stone | (1 << axis) } else { stone & !(1 << axis) };
    if target != stone && graph & (1 << edge_index(stone, target)) != 0 {
        target
    } else {
        stone
    }
}

/// Frozen pools from which environments `(graph, potion map, stone map)`
/// are assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlchemyPools {
    pub graphs: Vec<Graph>,
    pub potion_maps: Vec<SignedPerm>,
    pub stone_maps: Vec<SignedPerm>,
}

impl AlchemyPools {
    /// Samples distinct connected graphs and distinct maps. Graphs are
    /// preferably chosen so that no two environments share a transition
    /// table; once no such graph remains, the pool is filled without the check.
    pub fn sample(sizes: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        if sizes[1] > SIGNED_PERMS || sizes[2] > SIGNED_PERMS || sizes.contains(&0) {
            return Err(Error::Config(format!("alchemy pool sizes {sizes:?} outside 1..=48")));
        }
        let mut candidates: Vec<Graph> = (0..(1u32 << EDGES)).map(|g| g as Graph).filter(|&g| connected(g)).collect();
        if sizes[0] > candidates.len() {
            return Err(Error::Config(format!(
                "only {} connected graphs exist, {} requested",
                candidates.len(),
                sizes[0]
            )));
        }
        candidates.shuffle(rng);
        let mut maps = SignedPerm::all();
        maps.shuffle(rng);
        let potion_maps = maps[..sizes[1]].to_vec();
        maps.shuffle(rng);
        let stone_maps = maps[..sizes[2]].to_vec();
        let mut pools = AlchemyPools {
            graphs: Vec::with_capacity(sizes[0]),
            potion_maps,
            stone_maps,
        };
        let mut seen = std::collections::HashSet::new();
        let mut rejected = Vec::new();
        for &g in &candidates {
            if pools.graphs.len() == sizes[0] {
                break;
            }
            let tables: Vec<Vec<usize>> = (0..pools.potion_maps.len())
                .flat_map(|p| (0..pools.stone_maps.len()).map(move |s| (p, s)))
                .map(|(p, s)| pools.table_with(g, p, s))
                .collect();
            let fresh: std::collections::HashSet<&Vec<usize>> = tables.iter().collect();
            if fresh.len() == tables.len() && tables.iter().all(|t| !seen.contains(t)) {
                seen.extend(tables);
                pools.graphs.push(g);
            } else {
                rejected.push(g);
            }
        }
        let missing = sizes[0] - pools.graphs.len();
        pools.graphs.extend_from_slice(&rejected[..missing]);
        pools.graphs.sort_unstable();
        Ok(pools)
    }

    fn table_with(&self, graph: Graph, potion_map: usize, stone_map: usize) -> Vec<usize> {
        let pm = &self.potion_maps[potion_map];
        let sm = &self.stone_maps[stone_map];
        (0..STONES * POTIONS)
            .map(|i| sm.unmap_stone(latent_transition(graph, sm.map_stone(i / POTIONS), pm.map_potion(i % POTIONS))))
            .collect()
    }

    pub fn cards(&self) -> Vec<usize> {
        vec![self.graphs.len(), self.potion_maps.len(), self.stone_maps.len()]
    }

    pub fn environment_count(&self) -> usize {
        self.cards().iter().product()
    }

    /// Observed stone after applying observed `potion` to observed `stone`
    /// in environment `env = [graph, potion map, stone map]`.
    pub fn transition(&self, env: &[usize], stone: usize, potion: usize) -> usize {
        let graph = self.graphs[env[0]];
        let pm = &self.potion_maps[env[1]];
        let sm = &self.stone_maps[env[2]];
        let l = latent_transition(graph, sm.map_stone(stone), pm.map_potion(potion));
        sm.unmap_stone(l)
    }

    /// Full observed transition table, indexed `stone * POTIONS + potion`.
    pub fn table(&self, env: &[usize]) -> Vec<usize> {
        (0..STONES * POTIONS)
            .map(|i| self.transition(env, i / POTIONS, i % POTIONS))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng;

    #[test]
    fn signed_perms_are_bijections() {
        let all = SignedPerm::all();
        assert_eq!(all.len(), 48);
        for m in &all {
            let mut seen = [false; STONES];
            for s in 0..STONES {
                assert_eq!(m.unmap_stone(m.map_stone(s)), s);
                seen[m.map_stone(s)] = true;
            }
            assert!(seen.iter().all(|&b| b));
            let mut potions: Vec<usize> = (0..POTIONS).map(|p| m.map_potion(p)).collect();
            potions.sort_unstable();
            assert_eq!(potions, (0..POTIONS).collect::<Vec<_>>());
        }
    }

    #[test]
    fn potion_already_satisfied_is_identity() {
        let full: Graph = (1 << EDGES) - 1;
        for s in 0..STONES {
            for axis in 0..3 {
                let dir = (s >> axis) & 1;
                assert_eq!(latent_transition(full, s, 2 * axis + dir), s);
                assert_eq!(latent_transition(full, s, 2 * axis + 1 - dir), s ^ (1 << axis));
                assert_eq!(latent_transition(0, s, 2 * axis + 1 - dir), s);
            }
        }
    }

    #[test]
    fn pools_are_distinct_and_counted() {
        let p = AlchemyPools::sample([109, 48, 32], &mut rng::stream(0, &[])).unwrap();
        assert_eq!(p.environment_count(), 167_424);
        let mut g = p.graphs.clone();
        g.dedup();
        assert_eq!(g.len(), 109);
        assert!(p.graphs.iter().all(|&g| connected(g)));
    }

    #[test]
    fn observed_identity_potions() {
        let p = AlchemyPools::sample([16, 8, 8], &mut rng::stream(1, &[])).unwrap();
        for env in [[0, 0, 0], [3, 5, 7], [15, 2, 1]] {
            for s in 0..STONES {
                let applied: Vec<usize> = (0..POTIONS).map(|q| p.transition(&env, s, q)).collect();
                // each axis has one potion that cannot move the stone
                assert!(applied.iter().filter(|&&t| t == s).count() >= 3);
            }
        }
    }
}
