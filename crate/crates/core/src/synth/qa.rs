//! Closed template grammar, question generation and the oracle evaluator.
//!
//! Generation enumerates slot fillings straight from object geometry;
//! [`oracle_answer`] re-parses the emitted tokens and evaluates them against
//! the stored relation set. The corpus builder requires both to agree.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{pair_predicates, Object, Predicate, SceneSpec};
use super::vocab::{Vocab, CATEGORIES, COLORS, MAX_COUNT, N_CATEGORIES, N_COLORS, N_SIZES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Relation,
    Attribute,
    Object,
    Global,
    Category,
}

impl QType {
    pub const ALL: [QType; 5] = [QType::Relation, QType::Attribute, QType::Object, QType::Global, QType::Category];

    pub fn name(self) -> &'static str {
        match self {
            QType::Relation => "relation",
            QType::Attribute => "attribute",
            QType::Object => "object",
            QType::Global => "global",
            QType::Category => "category",
        }
    }

    pub fn templates(self) -> &'static [Template] {
        use Template::*;
        match self {
            QType::Relation => &[LeftOrRight, AboveOrBelow, ExistsLeftOf],
            QType::Attribute => &[ColorOf, SizeOf, HasColor],
            QType::Object => &[ExistsColored, CountCategory],
            QType::Global => &[CountAll, AnyNear],
            QType::Category => &[WhichColored, ColoredIs],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    LeftOrRight,
    AboveOrBelow,
    ExistsLeftOf,
    ColorOf,
    SizeOf,
    HasColor,
    ExistsColored,
    CountCategory,
    CountAll,
    AnyNear,
    WhichColored,
    ColoredIs,
}

impl Template {
    pub const ALL: [Template; 12] = [
        Template::LeftOrRight,
        Template::AboveOrBelow,
        Template::ExistsLeftOf,
        Template::ColorOf,
        Template::SizeOf,
        Template::HasColor,
        Template::ExistsColored,
        Template::CountCategory,
        Template::CountAll,
        Template::AnyNear,
        Template::WhichColored,
        Template::ColoredIs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::LeftOrRight => "left_or_right",
            Template::AboveOrBelow => "above_or_below",
            Template::ExistsLeftOf => "exists_left_of",
            Template::ColorOf => "color_of",
            Template::SizeOf => "size_of",
            Template::HasColor => "has_color",
            Template::ExistsColored => "exists_colored",
            Template::CountCategory => "count_category",
            Template::CountAll => "count_all",
            Template::AnyNear => "any_near",
            Template::WhichColored => "which_colored",
            Template::ColoredIs => "colored_is",
        }
    }

    pub fn qtype(self) -> QType {
        use Template::*;
        match self {
            LeftOrRight | AboveOrBelow | ExistsLeftOf => QType::Relation,
            ColorOf | SizeOf | HasColor => QType::Attribute,
            ExistsColored | CountCategory => QType::Object,
            CountAll | AnyNear => QType::Global,
            WhichColored | ColoredIs => QType::Category,
        }
    }

    pub fn binary(self) -> bool {
        use Template::*;
        matches!(self, ExistsLeftOf | HasColor | ExistsColored | AnyNear | ColoredIs)
    }

    /// Surface forms; the second is the entailed paraphrase. `{a}`/`{b}` take
    /// category words and `{c}` a color word.
    pub fn phrasings(self) -> [&'static str; 2] {
        use Template::*;
        match self {
            LeftOrRight => {
                ["is the {a} to the left or to the right of the {b} ?", "is the {a} on the left or on the right of the {b} ?"]
            }
            AboveOrBelow => ["is the {a} above or below the {b} ?", "is the {a} higher or lower than the {b} ?"],
            ExistsLeftOf => ["is there a {a} to the left of the {b} ?", "is any {a} on the left of the {b} ?"],
            ColorOf => ["what color is the {a} ?", "which color does the {a} have ?"],
            SizeOf => ["what size is the {a} ?", "how big is the {a} ?"],
            HasColor => ["is the {a} {c} ?", "does the {a} look {c} ?"],
            ExistsColored => ["is there a {c} {a} ?", "can you see a {c} {a} ?"],
            CountCategory => ["how many {a} are there ?", "what is the number of {a} ?"],
            CountAll => ["how many objects are there ?", "what is the number of objects ?"],
            AnyNear => ["are any two objects close to each other ?", "is there a pair of objects near each other ?"],
            WhichColored => ["what is the {c} object ?", "which object is {c} ?"],
            ColoredIs => ["is the {c} object a {a} ?", "is the {c} thing a {a} ?"],
        }
    }

    pub fn valid_answers(self, vocab: &Vocab) -> Vec<usize> {
        use Template::*;
        let mut v: Vec<usize> = match self {
            _ if self.binary() => vec![vocab.answer("yes"), vocab.answer("no")],
            LeftOrRight => vec![vocab.answer("left"), vocab.answer("right")],
            AboveOrBelow => vec![vocab.answer("above"), vocab.answer("below")],
            ColorOf => (0..N_COLORS).map(|c| vocab.color_answer(c)).collect(),
            SizeOf => (0..N_SIZES).map(|s| vocab.size_answer(s)).collect(),
            CountCategory | CountAll => (0..=MAX_COUNT).map(|n| vocab.count_answer(n)).collect(),
            WhichColored => (0..N_CATEGORIES).map(|c| vocab.category_answer(c)).collect(),
            _ => unreachable!("binary templates handled above"),
        };
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Slots {
    pub a: Option<usize>,
    pub b: Option<usize>,
    pub c: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: u64,
    pub scene_id: u64,
    pub question: Vec<u32>,
    pub qtype: QType,
    pub template: Template,
    pub answer: usize,
    pub valid_answers: Vec<usize>,
    pub paraphrase_group: u64,
    pub binary: bool,
}

/// A question and its entailed paraphrase.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedQa {
    pub template: Template,
    pub answer: usize,
    pub primary: Vec<u32>,
    pub paraphrase: Vec<u32>,
}

pub fn render(template: Template, phrasing: usize, slots: Slots, vocab: &Vocab) -> Vec<u32> {
    let mut text = template.phrasings()[phrasing].to_string();
    if let Some(a) = slots.a {
        text = text.replace("{a}", CATEGORIES[a]);
    }
    if let Some(b) = slots.b {
        text = text.replace("{b}", CATEGORIES[b]);
    }
    if let Some(c) = slots.c {
        text = text.replace("{c}", COLORS[c]);
    }
    vocab.encode(&text)
}

fn unique_of(objects: &[Object], pred: impl Fn(&Object) -> bool) -> Option<&Object> {
    let mut it = objects.iter().filter(|o| pred(o));
    match (it.next(), it.next()) {
        (Some(o), None) => Some(o),
        _ => None,
    }
}

fn has(preds: &[Predicate], p: Predicate) -> bool {
    preds.contains(&p)
}

/// Every admissible slot filling of `template` on `spec`, with its answer,
/// computed directly from object geometry and attributes.
fn candidates(spec: &SceneSpec, template: Template, vocab: &Vocab) -> Vec<(Slots, usize)> {
    use Template::*;
    let objs = &spec.objects;
    let unique = |cat: usize| unique_of(objs, |o| o.category == cat);
    let cats = 0..N_CATEGORIES;
    let mut out = Vec::new();
    match template {
        LeftOrRight | AboveOrBelow => {
            for a in cats.clone() {
                for b in cats.clone() {
                    let (Some(oa), Some(ob)) = (unique(a), unique(b)) else { continue };
                    if a == b {
                        continue;
                    }
                    let p = pair_predicates(oa, ob);
                    let ans = match template {
                        LeftOrRight if has(&p, Predicate::LeftOf) => "left",
                        LeftOrRight if has(&p, Predicate::RightOf) => "right",
                        AboveOrBelow if has(&p, Predicate::Above) => "above",
                        AboveOrBelow if has(&p, Predicate::Below) => "below",
                        _ => continue,
                    };
                    out.push((Slots { a: Some(a), b: Some(b), c: None }, vocab.answer(ans)));
                }
            }
        }
        ExistsLeftOf => {
            for b in cats.clone() {
                let Some(ob) = unique(b) else { continue };
                for a in cats.clone() {
                    let yes =
                        objs.iter().any(|o| o.id != ob.id && o.category == a && has(&pair_predicates(o, ob), Predicate::LeftOf));
                    out.push((Slots { a: Some(a), b: Some(b), c: None }, vocab.yes_no(yes)));
                }
            }
        }
        ColorOf | SizeOf => {
            for a in cats {
                if let Some(o) = unique(a) {
                    let ans = if template == ColorOf { vocab.color_answer(o.color) } else { vocab.size_answer(o.size) };
                    out.push((Slots { a: Some(a), ..Slots::default() }, ans));
                }
            }
        }
        HasColor => {
            for a in cats {
                if let Some(o) = unique(a) {
                    for c in 0..N_COLORS {
                        out.push((Slots { a: Some(a), b: None, c: Some(c) }, vocab.yes_no(o.color == c)));
                    }
                }
            }
        }
        ExistsColored => {
            for a in cats {
                for c in 0..N_COLORS {
                    let yes = objs.iter().any(|o| o.category == a && o.color == c);
                    out.push((Slots { a: Some(a), b: None, c: Some(c) }, vocab.yes_no(yes)));
                }
            }
        }
        CountCategory => {
            for a in cats {
                let n = objs.iter().filter(|o| o.category == a).count();
                out.push((Slots { a: Some(a), ..Slots::default() }, vocab.count_answer(n)));
            }
        }
        CountAll => out.push((Slots::default(), vocab.count_answer(objs.len()))),
        AnyNear => {
            let yes = objs.iter().any(|s| objs.iter().any(|o| s.id != o.id && has(&pair_predicates(s, o), Predicate::Near)));
            out.push((Slots::default(), vocab.yes_no(yes)));
        }
        WhichColored => {
            for c in 0..N_COLORS {
                if let Some(o) = unique_of(objs, |o| o.color == c) {
                    out.push((Slots { c: Some(c), ..Slots::default() }, vocab.category_answer(o.category)));
                }
            }
        }
        ColoredIs => {
            for c in 0..N_COLORS {
                if let Some(o) = unique_of(objs, |o| o.color == c) {
                    for a in cats.clone() {
                        out.push((Slots { a: Some(a), b: None, c: Some(c) }, vocab.yes_no(o.category == a)));
                    }
                }
            }
        }
    }
    out
}

/// Instantiates one template of `template`'s kind on `spec`.
pub fn generate_template<R: Rng>(spec: &SceneSpec, template: Template, vocab: &Vocab, rng: &mut R) -> Result<GeneratedQa> {
    let cands = candidates(spec, template, vocab);
    if cands.is_empty() {
        return Err(Error::Unsatisfiable(template.name()));
    }
    let pick = if template.binary() {
        // balance yes/no whenever both are available
        let want = vocab.yes_no(rng.gen_bool(0.5));
        let matching: Vec<_> = cands.iter().filter(|(_, a)| *a == want).collect();
        let pool: Vec<_> = if matching.is_empty() { cands.iter().collect() } else { matching };
        *pool[rng.gen_range(0..pool.len())]
    } else if template == Template::CountCategory {
        let zero = vocab.count_answer(0);
        let present: Vec<_> = cands.iter().filter(|(_, a)| *a != zero).collect();
        let absent: Vec<_> = cands.iter().filter(|(_, a)| *a == zero).collect();
        let pool = if absent.is_empty() || (!present.is_empty() && rng.gen_bool(0.75)) { present } else { absent };
        *pool[rng.gen_range(0..pool.len())]
    } else {
        cands[rng.gen_range(0..cands.len())]
    };
    let (slots, answer) = pick;
    Ok(GeneratedQa {
        template,
        answer,
        primary: render(template, 0, slots, vocab),
        paraphrase: render(template, 1, slots, vocab),
    })
}

/// Picks a satisfiable template of type `qtype` and instantiates it.
pub fn generate_qa<R: Rng>(spec: &SceneSpec, qtype: QType, vocab: &Vocab, rng: &mut R) -> Result<GeneratedQa> {
    let mut templates = qtype.templates().to_vec();
    templates.shuffle(rng);
    let mut last = Error::Unsatisfiable(qtype.name());
    for t in templates {
        match generate_template(spec, t, vocab, rng) {
            Ok(q) => return Ok(q),
            Err(e @ Error::Unsatisfiable(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

fn match_pattern(pattern: &str, words: &[&str]) -> Option<Slots> {
    let pat: Vec<&str> = pattern.split_whitespace().collect();
    if pat.len() != words.len() {
        return None;
    }
    let mut slots = Slots::default();
    for (p, w) in pat.iter().zip(words) {
        match *p {
            "{a}" => slots.a = Some(CATEGORIES.iter().position(|c| c == w)?),
            "{b}" => slots.b = Some(CATEGORIES.iter().position(|c| c == w)?),
            "{c}" => slots.c = Some(COLORS.iter().position(|c| c == w)?),
            lit if lit == *w => {}
            _ => return None,
        }
    }
    Some(slots)
}

/// Parses a token sequence against the template grammar.
pub fn parse_question(tokens: &[u32], vocab: &Vocab) -> Result<(Template, Slots)> {
    let words = vocab.decode(tokens)?;
    for t in Template::ALL {
        for phrasing in t.phrasings() {
            if let Some(slots) = match_pattern(phrasing, &words) {
                return Ok((t, slots));
            }
        }
    }
    Err(Error::Parse(words.join(" ")))
}

/// Ground-truth answer by exhaustive evaluation over the scene's stored
/// objects and relations.
pub fn oracle_answer(spec: &SceneSpec, tokens: &[u32], vocab: &Vocab) -> Result<usize> {
    use Template::*;
    let (t, s) = parse_question(tokens, vocab)?;
    let unsat = || Error::Unsatisfiable(t.name());
    let objs = &spec.objects;
    let the = |cat: Option<usize>| -> Result<&Object> {
        let cat = cat.ok_or_else(unsat)?;
        let mut m = objs.iter().filter(|o| o.category == cat);
        match (m.next(), m.next()) {
            (Some(o), None) => Ok(o),
            _ => Err(unsat()),
        }
    };
    let the_colored = |c: Option<usize>| -> Result<&Object> {
        let c = c.ok_or_else(unsat)?;
        let mut m = objs.iter().filter(|o| o.color == c);
        match (m.next(), m.next()) {
            (Some(o), None) => Ok(o),
            _ => Err(unsat()),
        }
    };
    let answer = match t {
        LeftOrRight | AboveOrBelow => {
            let (oa, ob) = (the(s.a)?, the(s.b)?);
            if oa.id == ob.id {
                return Err(unsat());
            }
            let (first, second) =
                if t == LeftOrRight { (Predicate::LeftOf, Predicate::RightOf) } else { (Predicate::Above, Predicate::Below) };
            let names = if t == LeftOrRight { ("left", "right") } else { ("above", "below") };
            if spec.holds(oa.id, first, ob.id) {
                vocab.answer(names.0)
            } else if spec.holds(oa.id, second, ob.id) {
                vocab.answer(names.1)
            } else {
                return Err(unsat());
            }
        }
        ExistsLeftOf => {
            let ob = the(s.b)?;
            let a = s.a.ok_or_else(unsat)?;
            vocab.yes_no(objs.iter().any(|o| o.category == a && spec.holds(o.id, Predicate::LeftOf, ob.id)))
        }
        ColorOf => vocab.color_answer(the(s.a)?.color),
        SizeOf => vocab.size_answer(the(s.a)?.size),
        HasColor => vocab.yes_no(Some(the(s.a)?.color) == s.c),
        ExistsColored => vocab.yes_no(objs.iter().any(|o| Some(o.category) == s.a && Some(o.color) == s.c)),
        CountCategory => vocab.count_answer(objs.iter().filter(|o| Some(o.category) == s.a).count()),
        CountAll => vocab.count_answer(objs.len()),
        AnyNear => vocab.yes_no(spec.relations.iter().any(|r| r.predicate == Predicate::Near)),
        WhichColored => vocab.category_answer(the_colored(s.c)?.category),
        ColoredIs => vocab.yes_no(Some(the_colored(s.c)?.category) == s.a),
    };
    Ok(answer)
}
