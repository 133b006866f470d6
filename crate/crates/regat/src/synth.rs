//! Procedural scenes of colored objects with questions whose answers need one relation kind.
//!
//! Scenes come in twin pairs that share the question and nearly everything else but have
//! different answers: semantic twins swap predicate assignments, spatial and implicit twins swap
//! the contents of two partner slots. A model that ignores the relevant relations cannot tell
//! twins apart.
//!
//! Regions carry a one-hot category and a one-hot color, zero-padded to [`FEATURE_DIM`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regat_core::geometry::{classify_spatial, BBox, DEFAULT_FAR_THRESHOLD};
use regat_core::graph::RelationKind;

use crate::data::Record;
use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 10] = ["man", "woman", "horse", "dog", "hat", "ball", "bat", "box", "table", "cup"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const FEATURE_DIM: usize = 16;
const PERSONS: usize = 2;
/// Semantic predicates used by the generator, with their label codes.
pub const PREDICATES: [(&str, usize); 4] = [("holding", 1), ("riding", 2), ("wearing", 3), ("carrying", 13)];
pub const REGIONS_PER_SCENE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Item {
    cat: usize,
    color: usize,
}

impl Item {
    fn features(self) -> Vec<f64> {
        let mut f = vec![0.0; FEATURE_DIM];
        f[self.cat] = 1.0;
        f[CATEGORIES.len() + self.color] = 1.0;
        f
    }

    fn words(self) -> [&'static str; 2] {
        [COLORS[self.color], CATEGORIES[self.cat]]
    }
}

/// Reads the item back from a feature row.
fn decode(features: &[f64]) -> Option<Item> {
    let hot = |r: std::ops::Range<usize>| {
        let mut it = r.clone().filter(|&i| features.get(i) == Some(&1.0));
        let first = it.next()?;
        it.next().is_none().then_some(first - r.start)
    };
    Some(Item {
        cat: hot(0..CATEGORIES.len())?,
        color: hot(CATEGORIES.len()..CATEGORIES.len() + COLORS.len())?,
    })
}

struct Scene {
    items: Vec<Item>,
    boxes: Vec<[f64; 4]>,
    triples: Vec<[usize; 3]>,
}

struct Pair {
    scenes: [Scene; 2],
    tokens: Vec<String>,
    answers: [String; 2],
}

/// Draws `n` items with distinct `(category, color)` from the given categories.
fn fresh_items(rng: &mut ChaCha8Rng, taken: &mut Vec<Item>, cats: std::ops::Range<usize>, n: usize) -> Vec<Item> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let it = Item {
            cat: rng.gen_range(cats.clone()),
            color: rng.gen_range(0..COLORS.len()),
        };
        if !taken.contains(&it) {
            taken.push(it);
            out.push(it);
        }
    }
    out
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

/// Persons P, Q and objects X, Y, where P and Q relate to X and Y through two predicates in
/// opposite ways. The twin exchanges which predicate links which pair.
fn semantic_pair(rng: &mut ChaCha8Rng) -> Pair {
    let mut taken = Vec::new();
    let (p, q) = loop {
        let v = fresh_items(rng, &mut taken, 0..PERSONS, 2);
        if v[0].color != v[1].color {
            break (v[0], v[1]);
        }
        taken.clear();
    };
    let (x, y) = loop {
        let v = fresh_items(rng, &mut taken, PERSONS..CATEGORIES.len(), 2);
        if v[0].color != v[1].color && v[0].cat != v[1].cat {
            break (v[0], v[1]);
        }
        taken.retain(|t| *t != v[0] && *t != v[1]);
    };
    let distractors = fresh_items(rng, &mut taken, 0..CATEGORIES.len(), 2);
    let items = vec![p, q, x, y, distractors[0], distractors[1]];

    // one box per cell of a 3 × 2 grid
    let mut cells: Vec<usize> = (0..6).collect();
    cells.shuffle(rng);
    let boxes = cells
        .iter()
        .map(|&c| {
            let (cx, cy) = ((c % 3) as f64 * 213.0, (c / 3) as f64 * 240.0);
            let w = rng.gen_range(60..150) as f64;
            let h = rng.gen_range(60..180) as f64;
            [cx + rng.gen_range(0..(213 - w as i64)) as f64, cy + rng.gen_range(0..(240 - h as i64)) as f64, w, h]
        })
        .collect::<Vec<_>>();

    let mut preds = PREDICATES.to_vec();
    preds.shuffle(rng);
    let (p1, p2) = (preds[0], preds[1]);
    let triples = |swap: bool| {
        let (a, b) = if swap { (3, 2) } else { (2, 3) };
        vec![[0, p1.1, a], [0, p2.1, b], [1, p1.1, b], [1, p2.1, a]]
    };
    let scene = |swap| Scene {
        items: items.clone(),
        boxes: boxes.clone(),
        triples: triples(swap),
    };

    let (subj, pred) = (rng.gen_range(0..2), if rng.gen_bool(0.5) { p1 } else { p2 });
    // object of `subj` under `pred` in the first twin, then the second
    let obj = |swap: bool| {
        let first = (subj == 0) == (pred == p1);
        if first != swap {
            2
        } else {
            3
        }
    };
    let (tokens, answers) = match rng.gen_range(0..3) {
        0 => {
            let [c, k] = items[subj].words();
            (
                tokens(&format!("what is the {c} {k} {} ?", pred.0)),
                [0, 1].map(|t| CATEGORIES[items[obj(t == 1)].cat].to_string()),
            )
        }
        1 => {
            let [c, k] = items[subj].words();
            (
                tokens(&format!("what color is the thing the {c} {k} is {} ?", pred.0)),
                [0, 1].map(|t| COLORS[items[obj(t == 1)].color].to_string()),
            )
        }
        _ => {
            // ask from the object's side: who points at it with `pred`
            let target = obj(false);
            let [c, k] = items[target].words();
            let subject_of = |swap: bool| (0..2).find(|&s| triples(swap).contains(&[s, pred.1, target])).expect("each object has one subject per predicate");
            (
                tokens(&format!("what color is the one {} the {c} {k} ?", pred.0)),
                [0, 1].map(|t| COLORS[items[subject_of(t == 1)].color].to_string()),
            )
        }
    };
    Pair {
        scenes: [scene(false), scene(true)],
        tokens,
        answers,
    }
}

/// Anchor box around the middle of the canvas.
fn anchor_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.gen_range(60..=66) as f64;
    let h = rng.gen_range(60..=66) as f64;
    [rng.gen_range(260..=300) as f64 - w / 2.0, rng.gen_range(190..=230) as f64 - h / 2.0, w, h]
        .map(f64::round)
}

fn inside_box(rng: &mut ChaCha8Rng, a: [f64; 4]) -> [f64; 4] {
    let w = rng.gen_range(12..=20) as f64;
    let h = rng.gen_range(12..=20) as f64;
    let x = a[0] + rng.gen_range(4..=(a[2] - w - 4.0) as i64) as f64;
    let y = a[1] + rng.gen_range(4..=(a[3] - h - 4.0) as i64) as f64;
    [x, y, w, h]
}

/// Partner box on side `dir` (0 left, 1 right, 2 above, 3 below) of `a`. With `aligned` the
/// centers share the cross-axis coordinate exactly.
fn side_box(rng: &mut ChaCha8Rng, a: [f64; 4], dir: usize, aligned: bool) -> [f64; 4] {
    let gap = rng.gen_range(15..=40) as f64;
    let mut w = rng.gen_range(30..=50) as f64;
    let mut h = rng.gen_range(30..=50) as f64;
    // matching parity keeps the shared center coordinate on the integer grid
    if aligned {
        if dir < 2 && (h - a[3]) % 2.0 != 0.0 {
            h += 1.0;
        }
        if dir >= 2 && (w - a[2]) % 2.0 != 0.0 {
            w += 1.0;
        }
    }
    let jitter = |rng: &mut ChaCha8Rng| if aligned { 0.0 } else { rng.gen_range(-8..=8) as f64 };
    let (cx2, cy2) = (2.0 * a[0] + a[2], 2.0 * a[1] + a[3]);
    match dir {
        0 | 1 => {
            let x = if dir == 0 { a[0] - gap - w } else { a[0] + a[2] + gap };
            let y = (cy2 - h) / 2.0 + jitter(rng);
            [x, y, w, h]
        }
        _ => {
            let y = if dir == 2 { a[1] - gap - h } else { a[1] + a[3] + gap };
            let x = (cx2 - w) / 2.0 + jitter(rng);
            [x, y, w, h]
        }
    }
}

/// Small box in a canvas corner, unrelated to the anchor under the default far threshold.
fn corner_box(rng: &mut ChaCha8Rng, corner: usize) -> [f64; 4] {
    let w = rng.gen_range(20..=30) as f64;
    let h = rng.gen_range(20..=30) as f64;
    let x = if corner % 2 == 0 { rng.gen_range(4..=12) as f64 } else { 636.0 - w - rng.gen_range(0..=8) as f64 };
    let y = if corner / 2 == 0 { rng.gen_range(4..=12) as f64 } else { 476.0 - h - rng.gen_range(0..=8) as f64 };
    [x, y, w, h]
}

const SPATIAL_SLOTS: [&str; 5] = ["inside", "left of", "right of", "above", "below"];

/// Anchor with one partner inside and one on each side; a corner distractor.
fn spatial_pair(rng: &mut ChaCha8Rng) -> Pair {
    let mut taken = Vec::new();
    let anchor = fresh_items(rng, &mut taken, 0..CATEGORIES.len(), 1)[0];
    let mut partner_cats: Vec<usize> = (0..CATEGORIES.len()).collect();
    partner_cats.shuffle(rng);
    let mut partners = Vec::new();
    for &cat in &partner_cats {
        if partners.len() == SPATIAL_SLOTS.len() {
            break;
        }
        let it = Item {
            cat,
            color: rng.gen_range(0..COLORS.len()),
        };
        if !taken.contains(&it) {
            taken.push(it);
            partners.push(it);
        }
    }
    let distractor = fresh_items(rng, &mut taken, 0..CATEGORIES.len(), 1)[0];

    let a = anchor_box(rng);
    let mut boxes = vec![a, inside_box(rng, a)];
    for dir in 0..4 {
        boxes.push(side_box(rng, a, dir, false));
    }
    let corner = rng.gen_range(0..4);
    boxes.push(corner_box(rng, corner));

    let slot = rng.gen_range(0..SPATIAL_SLOTS.len());
    let other = (slot + rng.gen_range(1..SPATIAL_SLOTS.len())) % SPATIAL_SLOTS.len();
    let mut swapped = partners.clone();
    swapped.swap(slot, other);
    let scene = |ps: &[Item]| {
        let mut items = vec![anchor];
        items.extend_from_slice(ps);
        items.push(distractor);
        Scene {
            items,
            boxes: boxes.clone(),
            triples: Vec::new(),
        }
    };
    let [c, k] = anchor.words();
    Pair {
        tokens: tokens(&format!("what is {} the {c} {k} ?", SPATIAL_SLOTS[slot])),
        answers: [CATEGORIES[partners[slot].cat].to_string(), CATEGORIES[swapped[slot].cat].to_string()],
        scenes: [scene(&partners), scene(&swapped)],
    }
}

const IMPLICIT_SLOTS: [&str; 3] = ["inside", "beside", "on top of"];

/// Anchor with a partner inside, one level beside it, one directly on top; two diagonal
/// distractors. Only unsigned offsets separate the slots.
fn implicit_pair(rng: &mut ChaCha8Rng) -> Pair {
    let mut taken = Vec::new();
    let anchor = fresh_items(rng, &mut taken, 0..CATEGORIES.len(), 1)[0];
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(rng);
    let partners: Vec<Item> = colors[..3]
        .iter()
        .map(|&color| loop {
            let it = Item {
                cat: rng.gen_range(0..CATEGORIES.len()),
                color,
            };
            if !taken.contains(&it) {
                taken.push(it);
                break it;
            }
        })
        .collect();
    let distractors = fresh_items(rng, &mut taken, 0..CATEGORIES.len(), 2);

    let a = anchor_box(rng);
    let side = rng.gen_range(0..2);
    let mut boxes = vec![a, inside_box(rng, a), side_box(rng, a, side, true), side_box(rng, a, 2, true)];
    // diagonal distractors: bottom corner on the side away from the beside partner, and far above
    let (cx, cy) = (a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let sx = if side == 0 { 1.0 } else { -1.0 };
    for (dy, sign) in [(1.0, sx), (-1.0, -sx)] {
        let off_x = rng.gen_range(90..=130) as f64;
        let off_y = rng.gen_range(90..=130) as f64;
        let (w, h) = (rng.gen_range(26..=40) as f64, rng.gen_range(26..=40) as f64);
        boxes.push([(cx + sign * off_x - w / 2.0).round(), (cy + dy * off_y - h / 2.0).round(), w, h]);
    }

    let slot = rng.gen_range(0..IMPLICIT_SLOTS.len());
    let other = (slot + rng.gen_range(1..IMPLICIT_SLOTS.len())) % IMPLICIT_SLOTS.len();
    let mut swapped = partners.clone();
    swapped.swap(slot, other);
    let scene = |ps: &[Item]| {
        let mut items = vec![anchor];
        items.extend_from_slice(ps);
        items.extend_from_slice(&distractors);
        Scene {
            items,
            boxes: boxes.clone(),
            triples: Vec::new(),
        }
    };
    let [c, k] = anchor.words();
    Pair {
        tokens: tokens(&format!("what color is the thing {} the {c} {k} ?", IMPLICIT_SLOTS[slot])),
        answers: [COLORS[partners[slot].color].to_string(), COLORS[swapped[slot].color].to_string()],
        scenes: [scene(&partners), scene(&swapped)],
    }
}

fn to_record(scene: &Scene, order: &[usize], question_id: String, tokens: &[String], answer: &str) -> Record {
    // region r of the record is scene item order[r]
    let mut position = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        position[i] = r;
    }
    Record {
        question_id,
        tokens: tokens.to_vec(),
        boxes: order.iter().map(|&i| scene.boxes[i]).collect(),
        features: order.iter().map(|&i| scene.items[i].features()).collect(),
        triples: scene.triples.iter().map(|&[s, p, o]| [position[s], p, position[o]]).collect(),
        answers: [(answer.to_string(), 10)].into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    /// Scene kinds, used round-robin by twin pair.
    pub kinds: Vec<RelationKind>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            train: 600,
            val: 150,
            kinds: RelationKind::ALL.to_vec(),
        }
    }
}

fn split(rng: &mut ChaCha8Rng, name: &str, n: usize, kinds: &[RelationKind]) -> Result<Vec<Record>> {
    let mut out = Vec::with_capacity(n);
    let mut pair = 0;
    while out.len() < n {
        let kind = kinds[pair % kinds.len()];
        let p = match kind {
            RelationKind::Semantic => semantic_pair(rng),
            RelationKind::Spatial => spatial_pair(rng),
            RelationKind::Implicit => implicit_pair(rng),
        };
        let mut order: Vec<usize> = (0..REGIONS_PER_SCENE).collect();
        order.shuffle(rng);
        for (t, scene) in p.scenes.iter().enumerate() {
            if out.len() == n {
                break;
            }
            let id = format!("{name}-{}-{pair:05}{}", kind.name(), ['a', 'b'][t]);
            let rec = to_record(scene, &order, id, &p.tokens, &p.answers[t]);
            let got = oracle_answer(&rec);
            if got.as_deref() != Some(p.answers[t].as_str()) {
                return Err(Error::CheckFailed(format!(
                    "generated question {} has answer {} but the rule oracle gives {got:?}",
                    rec.question_id, p.answers[t]
                )));
            }
            out.push(rec);
        }
        pair += 1;
    }
    Ok(out)
}

/// Training and validation records, a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Record>, Vec<Record>)> {
    if spec.kinds.is_empty() {
        return Err(Error::Validation("at least one scene kind is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = split(&mut rng, "train", spec.train, &spec.kinds)?;
    let val = split(&mut rng, "val", spec.val, &spec.kinds)?;
    Ok((train, val))
}

fn single(mut it: impl Iterator<Item = usize>) -> Option<usize> {
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

/// Answers a generated question from its tokens, region features, boxes and triples alone.
pub fn oracle_answer(rec: &Record) -> Option<String> {
    let items: Vec<Item> = rec.features.iter().map(|f| decode(f)).collect::<Option<_>>()?;
    let boxes: Vec<BBox> = rec.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).ok()).collect::<Option<_>>()?;
    let find = |color: &str, cat: &str| {
        let mut it = (0..items.len()).filter(|&i| COLORS[items[i].color] == color && CATEGORIES[items[i].cat] == cat);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    };
    let predicate = |word: &str| PREDICATES.iter().find(|p| p.0 == word).map(|p| p.1);
    let cat = |i: usize| CATEGORIES[items[i].cat].to_string();
    let color = |i: usize| COLORS[items[i].color].to_string();
    let center2 = |b: &BBox| (2.0 * b.x + b.w, 2.0 * b.y + b.h);
    let t: Vec<&str> = rec.tokens.iter().map(String::as_str).collect();

    match t.as_slice() {
        ["what", "is", "the", c, k, p, "?"] => {
            let (s, p) = (find(c, k)?, predicate(p)?);
            single(rec.triples.iter().filter(|x| x[0] == s && x[1] == p).map(|x| x[2])).map(cat)
        }
        ["what", "color", "is", "the", "thing", "the", c, k, "is", p, "?"] => {
            let (s, p) = (find(c, k)?, predicate(p)?);
            single(rec.triples.iter().filter(|x| x[0] == s && x[1] == p).map(|x| x[2])).map(color)
        }
        ["what", "color", "is", "the", "one", p, "the", c, k, "?"] => {
            let (o, p) = (find(c, k)?, predicate(p)?);
            single(rec.triples.iter().filter(|x| x[2] == o && x[1] == p).map(|x| x[0])).map(color)
        }
        ["what", "color", "is", "the", "thing", rel @ .., "the", c, k, "?"] => {
            let a = find(c, k)?;
            let (ax, ay) = center2(&boxes[a]);
            let others = (0..items.len()).filter(move |&j| j != a);
            let hit: Box<dyn Iterator<Item = usize>> = match rel {
                ["inside"] => Box::new(others.filter(|&j| boxes[j].within(&boxes[a]))),
                ["beside"] => Box::new(others.filter(|&j| !boxes[j].within(&boxes[a]) && center2(&boxes[j]).1 == ay)),
                ["on", "top", "of"] => Box::new(others.filter(|&j| {
                    let (x, y) = center2(&boxes[j]);
                    x == ax && y < ay && !boxes[j].within(&boxes[a])
                })),
                _ => return None,
            };
            single(hit).map(color)
        }
        ["what", "is", rel @ .., "the", c, k, "?"] => {
            let a = find(c, k)?;
            let class = |j: usize| classify_spatial(&boxes[j], &boxes[a], DEFAULT_FAR_THRESHOLD).ok();
            let test: fn(regat_core::geometry::SpatialClass) -> bool = match rel {
                ["inside"] => |s| s == regat_core::geometry::SpatialClass::INSIDE,
                ["left", "of"] => |s| s.is_left_of(),
                ["right", "of"] => |s| s.is_right_of(),
                ["above"] => |s| s.is_above(),
                ["below"] => |s| s.is_below(),
                _ => return None,
            };
            single((0..items.len()).filter(move |&j| j != a && class(j).is_some_and(test))).map(cat)
        }
        _ => None,
    }
}

/// Template of a generated question: its words with the anchor, predicate and color slots removed.
pub fn template_of(tokens: &[String]) -> String {
    tokens
        .iter()
        .map(String::as_str)
        .filter(|w| !COLORS.contains(w) && !CATEGORIES.contains(w) && !PREDICATES.iter().any(|p| p.0 == *w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scene kind of a generated question id.
pub fn kind_of(question_id: &str) -> Option<RelationKind> {
    question_id.split('-').nth(1)?.parse().ok()
}

/// Fraction of `records` the rule oracle answers correctly.
pub fn oracle_accuracy(records: &[Record]) -> f64 {
    let hits = records
        .iter()
        .filter(|r| oracle_answer(r).is_some_and(|a| r.answers.get(&a).copied().unwrap_or(0) >= 3))
        .count();
    hits as f64 / records.len().max(1) as f64
}

/// Counts of questions per template, grouped by scene kind.
pub fn template_counts(records: &[Record]) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for r in records {
        let kind = kind_of(&r.question_id).map_or("unknown", RelationKind::name).to_string();
        *out.entry((kind, template_of(&r.tokens))).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_inverts_features() {
        for cat in 0..CATEGORIES.len() {
            for color in 0..COLORS.len() {
                let it = Item { cat, color };
                assert_eq!(decode(&it.features()), Some(it));
            }
        }
        assert_eq!(decode(&[0.0; FEATURE_DIM]), None);
    }

    #[test]
    fn twins_share_question_but_not_answer() {
        let (train, _) = generate(&SynthSpec { train: 120, val: 0, ..SynthSpec::default() }).unwrap();
        for pair in train.chunks(2) {
            assert_eq!(pair[0].tokens, pair[1].tokens);
            assert_ne!(pair[0].answers, pair[1].answers);
            assert_eq!(pair[0].boxes, pair[1].boxes);
        }
    }

    #[test]
    fn spatial_anchor_relations_are_unambiguous() {
        let (train, _) = generate(&SynthSpec {
            train: 200,
            val: 0,
            kinds: vec![RelationKind::Spatial],
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(oracle_accuracy(&train), 1.0);
    }
}
