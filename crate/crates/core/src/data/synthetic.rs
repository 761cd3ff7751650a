//! Rule-generated informal/formal sentence pairs.
//!
//! Informal sentences come from templates with content slots. The formal side
//! expands contractions, swaps lexicon entries for their formal phrases, and
//! closes with a period. Informal-only marker tokens never survive the rewrite,
//! so a perfect style classifier exists for every generated corpus. Some informal
//! templates carry an inner period, so the closing period alone does not identify
//! the formal register.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;

use super::corpus::{CorpusSplits, TextPair};
use super::tokenize::tokenize;
use crate::error::{Error, Result};
use crate::seed;

const CONTRACTIONS: [(&str, &str); 10] = [
    ("don't", "do not"),
    ("can't", "cannot"),
    ("won't", "will not"),
    ("i'm", "i am"),
    ("it's", "it is"),
    ("isn't", "is not"),
    ("didn't", "did not"),
    ("i've", "i have"),
    ("that's", "that is"),
    ("they're", "they are"),
];

const LEXICON: [(&str, &str); 15] = [
    ("wanna", "want to"),
    ("gonna", "going to"),
    ("gotta", "must"),
    ("u", "you"),
    ("ur", "your"),
    ("pls", "please"),
    ("thx", "thanks"),
    ("kinda", "rather"),
    ("yeah", "yes"),
    ("cuz", "because"),
    ("gimme", "give me"),
    ("lemme", "let me"),
    ("tho", "though"),
    ("prolly", "probably"),
    ("nope", "no"),
];

/// Rewrite table between the informal and formal registers.
#[derive(Clone, Debug)]
pub struct StyleRules {
    // (informal tokens, formal tokens)
    entries: Vec<(Vec<String>, Vec<String>)>,
}

impl Default for StyleRules {
    fn default() -> Self {
        let entries = CONTRACTIONS
            .iter()
            .chain(LEXICON.iter())
            .map(|(inf, form)| (tokenize(inf), tokenize(form)))
            .collect();
        StyleRules { entries }
    }
}

fn match_at(tokens: &[String], at: usize, pattern: &[String]) -> bool {
    tokens.len() >= at + pattern.len() && tokens[at..at + pattern.len()] == *pattern
}

impl StyleRules {
    /// Tokens that only ever appear in informal sentences.
    pub fn informal_markers(&self) -> BTreeSet<String> {
        LEXICON
            .iter()
            .map(|(w, _)| w.to_string())
            .chain(std::iter::once("'".to_string()))
            .collect()
    }

    /// Rewrites every rule match for which `apply` returns true, scanning left to right.
    fn rewrite(
        &self,
        tokens: &[String],
        to_formal: bool,
        apply: &mut dyn FnMut() -> bool,
    ) -> Vec<String> {
        // Longest pattern first so multi-token phrases win over their prefixes.
        let mut order: Vec<&(Vec<String>, Vec<String>)> = self.entries.iter().collect();
        order.sort_by_key(|(i, f)| std::cmp::Reverse(if to_formal { i.len() } else { f.len() }));
        let mut out = Vec::with_capacity(tokens.len() + 4);
        let mut at = 0;
        'scan: while at < tokens.len() {
            for (inf, form) in &order {
                let (from, to) = if to_formal { (inf, form) } else { (form, inf) };
                if match_at(tokens, at, from) {
                    out.extend(if apply() { to } else { from }.iter().cloned());
                    at += from.len();
                    continue 'scan;
                }
            }
            out.push(tokens[at].clone());
            at += 1;
        }
        out
    }

    fn matches(&self, informal: &[String]) -> usize {
        let mut n = 0;
        self.rewrite(informal, true, &mut || {
            n += 1;
            false
        });
        n
    }

    pub fn formalize(&self, informal: &[String]) -> Vec<String> {
        let mut out = self.rewrite(informal, true, &mut || true);
        out.push(".".into());
        out
    }

    /// Formal-looking rewrite that leaves at least one informal phrase untouched;
    /// `None` when the sentence has no rule match.
    pub fn mixed_register(&self, informal: &[String], rng: &mut impl Rng) -> Option<Vec<String>> {
        let n = self.matches(informal);
        if n == 0 {
            return None;
        }
        let keep = rng.gen_range(0..n);
        let formal: Vec<bool> = (0..n).map(|i| i != keep && rng.gen_bool(0.5)).collect();
        let mut next = formal.into_iter();
        let mut out = self.rewrite(informal, true, &mut || next.next().unwrap_or(false));
        out.push(".".into());
        Some(out)
    }

    /// Inverse of [`formalize`](Self::formalize); `None` if the closing period is missing.
    pub fn informalize(&self, formal: &[String]) -> Option<Vec<String>> {
        let (last, body) = formal.split_last()?;
        (last == ".").then(|| self.rewrite(body, false, &mut || true))
    }
}

/// Template with `{slot}` placeholders; parts starting with `?` are optional.
#[derive(Clone, Debug)]
pub struct Template {
    parts: Vec<(String, bool)>,
    weight: f64,
}

impl Template {
    pub fn new(parts: &[&str], weight: f64) -> Self {
        let parts = parts
            .iter()
            .map(|p| match p.strip_prefix('?') {
                Some(rest) => (rest.to_string(), true),
                None => (p.to_string(), false),
            })
            .collect();
        Template { parts, weight }
    }
}

/// Template bank plus slot fillers.
#[derive(Clone, Debug)]
pub struct Templates {
    pub templates: Vec<Template>,
    pub slots: Vec<(&'static str, Vec<&'static str>)>,
    pub rules: StyleRules,
    /// Longest allowed formal sentence, in tokens (excluding EOS).
    pub max_tokens: usize,
}

impl Default for Templates {
    fn default() -> Self {
        let slots = vec![
            (
                "name",
                vec![
                    "john", "mary", "alex", "sarah", "mike", "emma", "david", "lisa", "tom",
                    "anna", "chris", "kate", "paul", "nina", "sam", "leo",
                ],
            ),
            (
                "place",
                vec![
                    "paris", "london", "tokyo", "berlin", "rome", "boston", "school", "work",
                    "church", "home", "town", "mall",
                ],
            ),
            (
                "thing",
                vec![
                    "movie", "song", "album", "show", "game", "book", "concert", "party", "car",
                    "phone", "dog", "pizza", "coffee", "band", "guitar", "camera", "jacket",
                    "ticket", "laptop", "bike",
                ],
            ),
            (
                "adj",
                vec![
                    "good", "great", "funny", "boring", "new", "old", "nice", "weird", "sad",
                    "loud", "cheap", "long",
                ],
            ),
            (
                "time",
                vec![
                    "today", "tomorrow", "tonight", "yesterday", "later", "soon", "monday",
                    "friday",
                ],
            ),
        ];
        let t = Template::new;
        let templates = vec![
            t(&["?yeah .", "i'm gonna see the {thing} with {name}", "?{time}"], 1.0),
            t(&["i've gotta go to {place}", "?{time}", "?cuz it's {adj}"], 1.0),
            t(&["?hey {name} .", "pls lemme know if u wanna come to the {thing}"], 1.0),
            t(&["thx for the {thing} , {name}"], 1.0),
            t(&["{name} didn't like the {thing} tho"], 1.0),
            t(&["they're prolly at the {place} with {name}"], 1.0),
            t(&["?i saw the {thing} .", "that's kinda {adj}", "?tho"], 1.0),
            t(&["gimme ur {thing} pls"], 1.0),
            t(&["nope . i can't make it {time}"], 1.0),
            t(&["it's kinda {adj} . i'm still gonna buy the {thing}"], 1.0),
            t(&["u won't believe what {name} said about the {thing}"], 1.0),
            t(&["?hey .", "{name} isn't gonna like this {thing}"], 1.0),
            t(&["i don't wanna go to {place}", "?{time}"], 1.0),
            t(&["?yeah .", "the {thing} was {adj} cuz {name} was there"], 1.0),
            t(&["lemme get ur {thing}", "?{time}"], 1.0),
            t(&["u gotta see the {thing} . it's {adj}"], 1.0),
            t(&["?sorry .", "{name} can't find ur {thing}"], 1.0),
            t(&["i'm prolly gonna miss the {thing}", "?{time}"], 1.0),
            t(&["they're gonna love ur {thing}"], 1.0),
            t(&["that's the {adj} {thing} i've seen"], 1.0),
            t(&["why didn't u bring the {thing} to {place}"], 1.0),
            t(&["pls don't tell {name} about the {thing}"], 1.0),
            t(&["i won't be at {place}", "?{time}", "?tho"], 1.0),
            t(&["?hey {name} .", "gimme the {adj} {thing}"], 1.0),
        ];
        Templates {
            templates,
            slots,
            rules: StyleRules::default(),
            max_tokens: 19,
        }
    }
}

impl Templates {
    fn fill(&self, template: &Template, rng: &mut impl Rng) -> Vec<String> {
        let mut text = String::new();
        for (part, optional) in &template.parts {
            if *optional && !rng.gen_bool(0.5) {
                continue;
            }
            let mut rest = part.as_str();
            while let Some(open) = rest.find('{') {
                let close = rest[open..].find('}').map(|c| open + c).expect("closed slot");
                text.push_str(&rest[..open]);
                let name = &rest[open + 1..close];
                let fillers = &self
                    .slots
                    .iter()
                    .find(|(n, _)| *n == name)
                    .unwrap_or_else(|| panic!("unknown slot {name}"))
                    .1;
                text.push_str(fillers[rng.gen_range(0..fillers.len())]);
                rest = &rest[close + 1..];
            }
            text.push_str(rest);
            text.push(' ');
        }
        tokenize(&text)
    }

    fn pick(&self, rng: &mut impl Rng) -> &Template {
        let total: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        for t in &self.templates {
            if u < t.weight {
                return t;
            }
            u -= t.weight;
        }
        self.templates.last().expect("non-empty template bank")
    }
}

/// Generates `n_pairs` distinct (informal source, formal target) pairs.
pub fn gen_synthetic_corpus(seed: u64, n_pairs: usize, templates: &Templates) -> Result<Vec<TextPair>> {
    if n_pairs == 0 {
        return Err(Error::Input("n_pairs must be at least 1".into()));
    }
    let mut rng = seed::rng(seed);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(n_pairs);
    let max_attempts = n_pairs * 200;
    for _ in 0..max_attempts {
        if pairs.len() == n_pairs {
            break;
        }
        let informal = templates.fill(templates.pick(&mut rng), &mut rng);
        let formal = templates.rules.formalize(&informal);
        if formal.len() > templates.max_tokens || !seen.insert(informal.clone()) {
            continue;
        }
        pairs.push(TextPair {
            source: informal,
            target: formal,
        });
    }
    if pairs.len() < n_pairs {
        return Err(Error::Input(format!(
            "template bank only yields {} distinct sentences, {n_pairs} requested",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// One mixed-register sentence per informal side that has a rule match.
pub fn mixed_register_sentences(pairs: &[TextPair], rules: &StyleRules, seed: u64) -> Vec<Vec<String>> {
    let mut rng = seed::rng(seed::derive(seed, "mixed-register"));
    pairs
        .iter()
        .filter_map(|p| rules.mixed_register(&p.source, &mut rng))
        .collect()
}

/// Generates `n_train + n_valid + n_test` pairs and cuts them in that order.
pub fn synthetic_splits(
    seed: u64,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
    templates: &Templates,
) -> Result<CorpusSplits> {
    if n_train == 0 {
        return Err(Error::Input("n_train must be at least 1".into()));
    }
    let pairs = gen_synthetic_corpus(seed, n_train + n_valid + n_test, templates)?;
    CorpusSplits::contiguous(pairs, n_valid, n_test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let t = Templates::default();
        let a = gen_synthetic_corpus(7, 300, &t).unwrap();
        let b = gen_synthetic_corpus(7, 300, &t).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_corpus(8, 300, &t).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn formal_side_has_no_informal_markers() {
        let t = Templates::default();
        let markers = t.rules.informal_markers();
        assert!(markers.contains("'") && markers.contains("gonna"));
        for pair in gen_synthetic_corpus(11, 2000, &t).unwrap() {
            assert!(pair.target.iter().all(|tok| !markers.contains(tok)), "{:?}", pair.target);
            assert!(pair.source.iter().any(|tok| markers.contains(tok)), "{:?}", pair.source);
        }
    }

    #[test]
    fn requested_count_within_bounds() {
        let t = Templates::default();
        let pairs = gen_synthetic_corpus(3, 2000, &t).unwrap();
        assert_eq!(pairs.len(), 2000);
        assert!(pairs
            .iter()
            .all(|p| p.target.len() <= t.max_tokens && p.source.len() <= t.max_tokens));
    }

    #[test]
    fn rules_invert_on_every_generated_pair() {
        let t = Templates::default();
        for pair in gen_synthetic_corpus(5, 2400, &t).unwrap() {
            assert_eq!(t.rules.informalize(&pair.target).as_ref(), Some(&pair.source));
        }
    }

    #[test]
    fn zero_pairs_is_an_error() {
        assert!(gen_synthetic_corpus(1, 0, &Templates::default()).is_err());
    }

    #[test]
    fn mixed_register_keeps_a_marker_and_closes_with_a_period() {
        let t = Templates::default();
        let markers = t.rules.informal_markers();
        let pairs = gen_synthetic_corpus(4, 500, &t).unwrap();
        let mixed = mixed_register_sentences(&pairs, &t.rules, 4);
        assert_eq!(mixed.len(), pairs.len());
        for m in &mixed {
            assert!(m.iter().any(|tok| markers.contains(tok)), "{m:?}");
            assert_eq!(m.last().map(String::as_str), Some("."));
        }
        assert_eq!(mixed, mixed_register_sentences(&pairs, &t.rules, 4));
        assert!(t.rules.mixed_register(&tokenize("hello there"), &mut seed::rng(0)).is_none());
    }

    #[test]
    fn rewrite_examples() {
        let r = StyleRules::default();
        let f = r.formalize(&tokenize("i'm gonna see u tho"));
        assert_eq!(f, tokenize("i am going to see you though ."));
        assert!(r.informalize(&tokenize("no period")).is_none());
    }
}
