//! Symbolic progressive matrices.
//!
//! A grid has three rows of three cells; each cell holds `ATTRIBUTES` values
//! in a cyclic domain of size `VALUES`. Every attribute follows one rule
//! across all rows, and the tuple of rules is the latent.

use rand::seq::SliceRandom;
use rand::Rng;

pub const ATTRIBUTES: usize = 4;
pub const VALUES: usize = 40;
pub const RULES: usize = 4;

pub type Cell = [usize; ATTRIBUTES];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Constant,
    Increase,
    Decrease,
    /// Three distinct values, cyclically shifted from row to row.
    Distribute,
}

impl Rule {
    pub fn from_index(i: usize) -> Rule {
        [Rule::Constant, Rule::Increase, Rule::Decrease, Rule::Distribute][i % RULES]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RavenGrid {
    pub rules: [usize; ATTRIBUTES],
    /// Value triple used by `Distribute` attributes.
    pub triples: [[usize; 3]; ATTRIBUTES],
    pub cells: [[Cell; 3]; 3],
}

fn shift(v: usize, d: isize) -> usize {
    (v as isize + d).rem_euclid(VALUES as isize) as usize
}

pub fn random_triples(rng: &mut impl Rng) -> [[usize; 3]; ATTRIBUTES] {
    std::array::from_fn(|_| {
        let mut vals: Vec<usize> = (0..VALUES).collect();
        vals.partial_shuffle(rng, 3);
        [vals[0], vals[1], vals[2]]
    })
}

pub fn build_grid(rules: [usize; ATTRIBUTES], triples: [[usize; 3]; ATTRIBUTES], rng: &mut impl Rng) -> RavenGrid {
    let mut cells = [[[0; ATTRIBUTES]; 3]; 3];
    for a in 0..ATTRIBUTES {
        for (r, row) in cells.iter_mut().enumerate() {
            let start = rng.gen_range(0..VALUES);
            for (c, cell) in row.iter_mut().enumerate() {
                cell[a] = match Rule::from_index(rules[a]) {
                    Rule::Constant => start,
                    Rule::Increase => shift(start, c as isize),
                    Rule::Decrease => shift(start, -(c as isize)),
                    Rule::Distribute => triples[a][(r + c) % 3],
                };
            }
        }
    }
    RavenGrid { rules, triples, cells }
}

pub fn raven_generate(rules: [usize; ATTRIBUTES], rng: &mut impl Rng) -> RavenGrid {
    let triples = random_triples(rng);
    build_grid(rules, triples, rng)
}

/// The third cell of a row implied by its first two cells.
pub fn complete_row(rules: &[usize; ATTRIBUTES], triples: &[[usize; 3]; ATTRIBUTES], c0: &Cell, c1: &Cell) -> Cell {
    std::array::from_fn(|a| match Rule::from_index(rules[a]) {
        Rule::Constant => c1[a],
        Rule::Increase => shift(c1[a], 1),
        Rule::Decrease => shift(c1[a], -1),
        Rule::Distribute => *triples[a]
            .iter()
            .find(|&&v| v != c0[a] && v != c1[a])
            .unwrap_or(&c1[a]),
    })
}

/// `n` candidate cells containing `answer` exactly once at a random position;
/// every distractor differs from the answer in at least one attribute.
pub fn answer_choices(answer: &Cell, n: usize, rng: &mut impl Rng) -> (Vec<Cell>, usize) {
    let mut choices = vec![*answer];
    while choices.len() < n.max(1) {
        let mut d = *answer;
        let changes = rng.gen_range(1..=ATTRIBUTES);
        let mut attrs: Vec<usize> = (0..ATTRIBUTES).collect();
        attrs.shuffle(rng);
        for &a in &attrs[..changes] {
            d[a] = shift(d[a], rng.gen_range(1..VALUES) as isize);
        }
        if !choices.contains(&d) {
            choices.push(d);
        }
    }
    choices.shuffle(rng);
    let pos = choices.iter().position(|c| c == answer).unwrap();
    (choices, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng;

    #[test]
    fn constant_rule_rows_share_value() {
        let mut r = rng::stream(0, &[]);
        let g = raven_generate([0, 1, 2, 3], &mut r);
        for row in &g.cells {
            assert!(row.iter().all(|c| c[0] == row[0][0]));
            assert_eq!(row[1][1], shift(row[0][1], 1));
            assert_eq!(row[2][2], shift(row[0][2], -2));
        }
    }

    #[test]
    fn completion_matches_generated_rows() {
        let mut r = rng::stream(1, &[]);
        for i in 0..200 {
            let rules = std::array::from_fn(|a| (i >> (2 * a)) % RULES);
            let g = raven_generate(rules, &mut r);
            for row in &g.cells {
                assert_eq!(complete_row(&g.rules, &g.triples, &row[0], &row[1]), row[2]);
            }
        }
    }

    #[test]
    fn distractors_differ_from_answer() {
        let mut r = rng::stream(2, &[]);
        for _ in 0..500 {
            let g = raven_generate([3, 2, 1, 0], &mut r);
            let answer = g.cells[2][2];
            let (choices, pos) = answer_choices(&answer, 8, &mut r);
            assert_eq!(choices.len(), 8);
            assert_eq!(choices[pos], answer);
            assert_eq!(choices.iter().filter(|c| **c == answer).count(), 1);
        }
    }
}
