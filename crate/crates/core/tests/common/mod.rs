#![allow(dead_code)]
// The reference implementations index explicitly on purpose.
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relpred::ModelParams;

/// A knowledge graph whose relations are a function of hidden entity types:
/// `(type(s), type(o))` determines a primary relation and, for some type
/// pairs, a second one. Learnable by a model that infers types from
/// co-occurrence.
pub struct SyntheticKg {
    pub train: Vec<(String, String, String)>,
    pub valid: Vec<(String, String, String)>,
    pub test: Vec<(String, String, String)>,
    pub num_relations: usize,
}

pub fn synthetic_kg(
    num_entities: usize,
    num_types: usize,
    num_relations: usize,
    num_pairs: usize,
    seed: u64,
) -> SyntheticKg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types: Vec<usize> = (0..num_entities).map(|_| rng.random_range(0..num_types)).collect();
    let primary: Vec<Vec<usize>> = (0..num_types)
        .map(|_| (0..num_types).map(|_| rng.random_range(0..num_relations)).collect())
        .collect();
    let secondary: Vec<Vec<Option<usize>>> = (0..num_types)
        .map(|_| {
            (0..num_types)
                .map(|_| rng.random_bool(0.25).then(|| rng.random_range(0..num_relations)))
                .collect()
        })
        .collect();

    let mut pairs = BTreeSet::new();
    while pairs.len() < num_pairs {
        let s = rng.random_range(0..num_entities);
        let o = rng.random_range(0..num_entities);
        if s != o {
            pairs.insert((s, o));
        }
    }
    let mut triples = Vec::new();
    for &(s, o) in &pairs {
        let (ts, to) = (types[s], types[o]);
        let mut rels = vec![primary[ts][to]];
        if let Some(r) = secondary[ts][to] {
            if r != rels[0] {
                rels.push(r);
            }
        }
        for r in rels {
            triples.push((format!("e{s}"), format!("r{r}"), format!("e{o}")));
        }
    }
    // deterministic shuffle, then 80/10/10
    for i in (1..triples.len()).rev() {
        let j = rng.random_range(0..=i);
        triples.swap(i, j);
    }
    let n_valid = triples.len() / 10;
    let test = triples.split_off(triples.len() - n_valid);
    let valid = triples.split_off(triples.len() - n_valid);
    SyntheticKg {
        train: triples,
        valid,
        test,
        num_relations,
    }
}

impl SyntheticKg {
    pub fn write_to(&self, dir: &Path) {
        std::fs::create_dir_all(dir).unwrap();
        for (name, rows) in [("train.txt", &self.train), ("valid.txt", &self.valid), ("test.txt", &self.test)] {
            let mut text = String::new();
            for (s, p, o) in rows {
                writeln!(text, "{s}\t{p}\t{o}").unwrap();
            }
            std::fs::write(dir.join(name), text).unwrap();
        }
    }
}

/// Straight-line evaluation of the summed BCE for one example, written with
/// plain loops over raw entries and independent of the library's kernels.
pub fn reference_loss(
    p: &ModelParams,
    s: usize,
    o: usize,
    mask: &[f64],
    scale: f64,
    y: &[f64],
) -> f64 {
    let d = p.entity.ncols();
    let k = p.hidden_weight.nrows();
    let r = p.output_weight.nrows();
    let mut x = vec![0.0; 2 * d];
    for j in 0..d {
        x[j] = p.entity[[s, j]];
        x[d + j] = p.entity[[o, j]];
    }
    let mut hidden = vec![0.0; k];
    for i in 0..k {
        let mut z = p.hidden_bias[i];
        for j in 0..2 * d {
            z += p.hidden_weight[[i, j]] * x[j];
        }
        hidden[i] = if z > 0.0 { z } else { 0.0 } * mask[i] * scale;
    }
    let mut loss = 0.0;
    for q in 0..r {
        let mut z = p.output_bias[q];
        for i in 0..k {
            z += p.output_weight[[q, i]] * hidden[i];
        }
        let prob = (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7);
        loss -= y[q] * prob.ln() + (1.0 - y[q]) * (1.0 - prob).ln();
    }
    loss
}

/// Hidden pre-activations, used to keep random instances away from ReLU kinks.
pub fn reference_preactivations(p: &ModelParams, s: usize, o: usize) -> Vec<f64> {
    let d = p.entity.ncols();
    (0..p.hidden_weight.nrows())
        .map(|i| {
            let mut z = p.hidden_bias[i];
            for j in 0..d {
                z += p.hidden_weight[[i, j]] * p.entity[[s, j]];
                z += p.hidden_weight[[i, d + j]] * p.entity[[o, j]];
            }
            z
        })
        .collect()
}

/// Selection sort by (score desc, index asc): the O(n^2) ranking oracle.
pub fn selection_sort_ranking(scores: &[f64]) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::with_capacity(scores.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for c in 1..remaining.len() {
            let (a, b) = (remaining[c], remaining[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = c;
            }
        }
        out.push(remaining.remove(best));
    }
    out
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Below this magnitude, entries are compared as if their scale were this value.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Random instance with `|E| <= 10`, `|R| <= 7`, `d, k <= 5`, a random dropout
/// mask and a random multi-hot target; every analytic gradient entry is checked
/// against central differences of [`reference_loss`].
pub fn gradient_check(seed: u64) -> GradCheck {
    use relpred::model::{backward, forward_masked};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let num_entities = rng.random_range(1..=10);
        let num_relations = rng.random_range(1..=7);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=5);
        let mut p = ModelParams::init(num_entities, num_relations, d, k, rng.random()).unwrap();
        p.hidden_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p.output_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let s = rng.random_range(0..num_entities);
        let o = if rng.random_bool(0.15) { s } else { rng.random_range(0..num_entities) };
        let rate = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.1..0.6) };
        let mask: Vec<f64> = (0..k)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
            .collect();
        let scale = 1.0 / (1.0 - rate);
        let y: Vec<f64> = (0..num_relations)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect();

        // A finite-difference step must not cross a ReLU kink.
        if reference_preactivations(&p, s, o).iter().any(|z| z.abs() < 1e-3) {
            continue;
        }

        let cache = forward_masked(&p, s, o, ndarray::Array1::from(mask.clone()), scale).unwrap();
        let (loss, grads) = backward(&p, &cache, ndarray::ArrayView1::from(&y)).unwrap();
        let ref_loss = reference_loss(&p, s, o, &mask, scale, &y);
        assert!((loss - ref_loss).abs() <= 1e-12 * ref_loss.abs().max(1.0));

        let mut check = GradCheck::default();
        let mut compare = |analytic: f64, numeric: f64| {
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            check.entries += 1;
            check.max_rel_err = check.max_rel_err.max(err);
        };
        let fd = |p: &ModelParams, edit: &dyn Fn(&mut ModelParams, f64)| {
            let mut plus = p.clone();
            edit(&mut plus, FD_STEP);
            let mut minus = p.clone();
            edit(&mut minus, -FD_STEP);
            (reference_loss(&plus, s, o, &mask, scale, &y)
                - reference_loss(&minus, s, o, &mask, scale, &y))
                / (2.0 * FD_STEP)
        };

        for i in 0..num_entities {
            for j in 0..d {
                let analytic = grads.entity_rows.get(&i).map_or(0.0, |g| g[j]);
                compare(analytic, fd(&p, &|q, h| q.entity[[i, j]] += h));
            }
        }
        for i in 0..k {
            for j in 0..2 * d {
                compare(grads.hidden_weight[[i, j]], fd(&p, &|q, h| q.hidden_weight[[i, j]] += h));
            }
            compare(grads.hidden_bias[i], fd(&p, &|q, h| q.hidden_bias[i] += h));
        }
        for r in 0..num_relations {
            for i in 0..k {
                compare(grads.output_weight[[r, i]], fd(&p, &|q, h| q.output_weight[[r, i]] += h));
            }
            compare(grads.output_bias[r], fd(&p, &|q, h| q.output_bias[r] += h));
        }
        return check;
    }
}
