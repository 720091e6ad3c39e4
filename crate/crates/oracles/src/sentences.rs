//! Random captions from the shapes grammar.

use rand::Rng;

const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "diamond", "hexagon"];
const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"];
const SIZES: [&str; 2] = ["small", "large"];
const TEXTURES: [&str; 3] = ["striped", "dotted", "checkered"];
const PREDICATES: [&[&str]; 5] = [&["left", "of"], &["right", "of"], &["above"], &["below"], &["near"]];

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn noun_phrase(rng: &mut impl Rng, out: &mut Vec<String>) {
    out.push("a".into());
    match rng.random_range(0..4) {
        0 => out.push(pick(rng, &SIZES).into()),
        1 => out.push(pick(rng, &TEXTURES).into()),
        _ => {}
    }
    out.push(pick(rng, &COLORS).into());
    out.push(pick(rng, &SHAPES).into());
}

/// One to two noun phrases joined by a spatial predicate.
pub fn random_caption(rng: &mut impl Rng) -> Vec<String> {
    let mut out = Vec::new();
    noun_phrase(rng, &mut out);
    if rng.random_bool(0.5) {
        let p = PREDICATES[rng.random_range(0..PREDICATES.len())];
        out.extend(p.iter().map(|w| w.to_string()));
        noun_phrase(rng, &mut out);
    }
    out
}

/// A caption and a perturbed copy sharing most of its words.
pub fn random_pair(rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    let a = random_caption(rng);
    let mut b = if rng.random_bool(0.3) { random_caption(rng) } else { a.clone() };
    for _ in 0..rng.random_range(0..3) {
        if b.is_empty() {
            break;
        }
        let i = rng.random_range(0..b.len());
        match rng.random_range(0..3) {
            0 => b[i] = pick(rng, &COLORS).into(),
            1 => {
                b.remove(i);
            }
            _ => {
                let j = rng.random_range(0..b.len());
                b.swap(i, j);
            }
        }
    }
    (a, b)
}
