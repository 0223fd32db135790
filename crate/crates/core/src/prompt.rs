//! Conditioning strings for the text-guided models.
//!
//! Two styles exist. *Textual* prompts are fixed natural-language templates.
//! *Abstract* prompts keep the template's connective words but replace every
//! concept phrase with an opaque token from a run-wide [`ConceptLexicon`], so
//! the model has to learn what each token means from data alone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "2CH")]
    TwoChamber,
    #[serde(rename = "4CH")]
    FourChamber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    EndDiastole,
    #[serde(rename = "ES")]
    EndSystole,
}

impl View {
    pub const ALL: [View; 2] = [View::TwoChamber, View::FourChamber];

    pub fn code(self) -> &'static str {
        match self {
            View::TwoChamber => "2CH",
            View::FourChamber => "4CH",
        }
    }

    pub fn chambers(self) -> u8 {
        match self {
            View::TwoChamber => 2,
            View::FourChamber => 4,
        }
    }
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::EndDiastole, Phase::EndSystole];

    pub fn code(self) -> &'static str {
        match self {
            Phase::EndDiastole => "ED",
            Phase::EndSystole => "ES",
        }
    }

    /// 0 for ED, 1 for ES; the class index used by the phase classifier.
    pub fn index(self) -> usize {
        match self {
            Phase::EndDiastole => 0,
            Phase::EndSystole => 1,
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "2CH" => Ok(View::TwoChamber),
            "4CH" => Ok(View::FourChamber),
            _ => Err(Error::config(format!("unknown view `{s}`"))),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ED" => Ok(Phase::EndDiastole),
            "ES" => Ok(Phase::EndSystole),
            _ => Err(Error::config(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewPhase {
    pub view: View,
    pub phase: Phase,
}

impl ViewPhase {
    pub fn new(view: View, phase: Phase) -> Self {
        Self { view, phase }
    }

    /// The four combinations, in table order 2CH-ED, 2CH-ES, 4CH-ED, 4CH-ES.
    pub fn all() -> [ViewPhase; 4] {
        [
            ViewPhase::new(View::TwoChamber, Phase::EndDiastole),
            ViewPhase::new(View::TwoChamber, Phase::EndSystole),
            ViewPhase::new(View::FourChamber, Phase::EndDiastole),
            ViewPhase::new(View::FourChamber, Phase::EndSystole),
        ]
    }
}

/// Parses the display form, e.g. `2CH-ED`.
impl std::str::FromStr for ViewPhase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (v, p) = s
            .split_once('-')
            .ok_or_else(|| Error::config(format!("view/phase `{s}` is not of the form 2CH-ED")))?;
        Ok(ViewPhase::new(v.parse()?, p.parse()?))
    }
}

impl fmt::Display for ViewPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.view.code(), self.phase.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    Textual,
    Abstract,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub style: PromptStyle,
    pub view_phase: ViewPhase,
}

/// View-only textual template.
pub fn textual_view_template(view: View) -> String {
    format!("ultrasound image of the heart in {}-chamber view", view.chambers())
}

/// Textual template with the phase clause appended.
pub fn render_textual(vp: ViewPhase) -> Prompt {
    Prompt {
        text: format!("{} in the {} phase", textual_view_template(vp.view), vp.phase.code()),
        style: PromptStyle::Textual,
        view_phase: vp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSlot {
    Modality,
    Organ,
    ViewWord,
    PhaseWord,
}

impl fmt::Display for ConceptSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConceptSlot::Modality => "modality",
            ConceptSlot::Organ => "organ",
            ConceptSlot::ViewWord => "view-word",
            ConceptSlot::PhaseWord => "phase-word",
        };
        f.write_str(s)
    }
}

/// Every (slot, concept) pair a lexicon must cover.
pub const CONCEPTS: [(ConceptSlot, &str); 6] = [
    (ConceptSlot::Modality, "ultrasound image"),
    (ConceptSlot::Organ, "heart"),
    (ConceptSlot::ViewWord, "two-chamber"),
    (ConceptSlot::ViewWord, "four-chamber"),
    (ConceptSlot::PhaseWord, "ed"),
    (ConceptSlot::PhaseWord, "es"),
];

const CONNECTIVES: [&str; 7] = ["displays", "the", "in", "a", "view", "during", "phase"];

/// Words that must never appear in an abstract prompt.
pub const CONCEALED_WORDS: [&str; 10] = [
    "ultrasound", "image", "heart", "two-chamber", "four-chamber", "2-chamber", "4-chamber", "ed",
    "es", "chamber",
];

fn view_concept(v: View) -> &'static str {
    match v {
        View::TwoChamber => "two-chamber",
        View::FourChamber => "four-chamber",
    }
}

fn phase_concept(p: Phase) -> &'static str {
    match p {
        Phase::EndDiastole => "ed",
        Phase::EndSystole => "es",
    }
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const MAX_ATTEMPTS: usize = 1000;

/// Run-stable mapping from concept phrases to opaque tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLexicon {
    pub seed: u64,
    pub token_length: usize,
    pub table: BTreeMap<ConceptSlot, BTreeMap<String, String>>,
}

impl ConceptLexicon {
    pub fn build(seed: u64, token_length: usize) -> Result<Self> {
        if token_length < 4 {
            return Err(Error::param("token_length", format!("{token_length} is below 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut used = std::collections::BTreeSet::new();
        let mut table: BTreeMap<ConceptSlot, BTreeMap<String, String>> = BTreeMap::new();
        for (slot, concept) in CONCEPTS {
            let mut attempts = 0;
            let token = loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(Error::Lexicon(format!(
                        "no unused token for `{concept}` after {MAX_ATTEMPTS} attempts"
                    )));
                }
                let t: String = (0..token_length)
                    .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
                    .collect();
                if is_opaque(&t) && !used.contains(&t) {
                    break t;
                }
            };
            used.insert(token.clone());
            table.entry(slot).or_default().insert(concept.to_string(), token);
        }
        Ok(Self {
            seed,
            token_length,
            table,
        })
    }

    pub fn token(&self, slot: ConceptSlot, concept: &str) -> Result<&str> {
        self.table
            .get(&slot)
            .and_then(|m| m.get(concept))
            .map(String::as_str)
            .ok_or_else(|| Error::Lexicon(format!("lexicon has no token for slot {slot} (`{concept}`)")))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.table.values().flat_map(|m| m.values().map(String::as_str))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("lexicon serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Recovers `(view, phase)` from an abstract prompt rendered with this lexicon.
    pub fn decode(&self, text: &str) -> Option<ViewPhase> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let find = |slot, concept| self.token(slot, concept).ok().filter(|t| words.contains(t));
        let view = View::ALL
            .into_iter()
            .filter(|v| find(ConceptSlot::ViewWord, view_concept(*v)).is_some())
            .collect::<Vec<_>>();
        let phase = Phase::ALL
            .into_iter()
            .filter(|p| find(ConceptSlot::PhaseWord, phase_concept(*p)).is_some())
            .collect::<Vec<_>>();
        match (view.as_slice(), phase.as_slice()) {
            ([v], [p]) => Some(ViewPhase::new(*v, *p)),
            _ => None,
        }
    }
}

/// Tokens mix letters and digits and contain no concept or connective word.
fn is_opaque(t: &str) -> bool {
    let has_digit = t.bytes().any(|b| b.is_ascii_digit());
    let has_alpha = t.bytes().any(|b| b.is_ascii_lowercase());
    has_digit
        && has_alpha
        && !CONCEALED_WORDS
            .iter()
            .chain(CONNECTIVES.iter())
            .filter(|w| w.len() > 2)
            .any(|w| t.contains(w))
}

pub fn render_abstract(vp: ViewPhase, lex: &ConceptLexicon) -> Result<Prompt> {
    let modality = lex.token(ConceptSlot::Modality, "ultrasound image")?;
    let organ = lex.token(ConceptSlot::Organ, "heart")?;
    let view = lex.token(ConceptSlot::ViewWord, view_concept(vp.view))?;
    let phase = lex.token(ConceptSlot::PhaseWord, phase_concept(vp.phase))?;
    Ok(Prompt {
        text: format!("{modality} displays the {organ} in a {view} view during the {phase} phase"),
        style: PromptStyle::Abstract,
        view_phase: vp,
    })
}

/// Renders in the requested style; abstract prompts need a lexicon.
pub fn render(vp: ViewPhase, style: PromptStyle, lex: Option<&ConceptLexicon>) -> Result<Prompt> {
    match style {
        PromptStyle::Textual => Ok(render_textual(vp)),
        PromptStyle::Abstract => {
            let lex = lex.ok_or_else(|| Error::config("abstract prompts require a concept lexicon"))?;
            render_abstract(vp, lex)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textual_templates() {
        assert_eq!(
            textual_view_template(View::FourChamber),
            "ultrasound image of the heart in 4-chamber view"
        );
        let p = render_textual(ViewPhase::new(View::TwoChamber, Phase::EndDiastole));
        assert_eq!(p.text, "ultrasound image of the heart in 2-chamber view in the ED phase");
        assert_eq!(p, render_textual(p.view_phase));
    }

    #[test]
    fn lexicon_determinism_and_injectivity() {
        let a = ConceptLexicon::build(3, 8).unwrap();
        assert_eq!(a, ConceptLexicon::build(3, 8).unwrap());
        let toks: Vec<_> = a.tokens().collect();
        assert_eq!(toks.len(), 6);
        for i in 0..toks.len() {
            for j in i + 1..toks.len() {
                assert_ne!(toks[i], toks[j]);
            }
        }
        assert!(toks.iter().all(|t| t.len() == 8 && is_opaque(t)));
        assert!(matches!(
            ConceptLexicon::build(3, 3),
            Err(Error::Parameter { name: "token_length", .. })
        ));
    }

    #[test]
    fn different_seeds_differ() {
        for s in 0..100u64 {
            let a = ConceptLexicon::build(s, 8).unwrap();
            let b = ConceptLexicon::build(s + 1000, 8).unwrap();
            assert!(a.tokens().zip(b.tokens()).any(|(x, y)| x != y));
        }
    }

    #[test]
    fn abstract_prompt_shape() {
        let lex = ConceptLexicon::build(9, 8).unwrap();
        let vp = ViewPhase::new(View::TwoChamber, Phase::EndDiastole);
        let p = render_abstract(vp, &lex).unwrap();
        let expected = format!(
            "{} displays the {} in a {} view during the {} phase",
            lex.token(ConceptSlot::Modality, "ultrasound image").unwrap(),
            lex.token(ConceptSlot::Organ, "heart").unwrap(),
            lex.token(ConceptSlot::ViewWord, "two-chamber").unwrap(),
            lex.token(ConceptSlot::PhaseWord, "ed").unwrap(),
        );
        assert_eq!(p.text, expected);
        let es = render_abstract(ViewPhase::new(View::TwoChamber, Phase::EndSystole), &lex).unwrap();
        let diff: Vec<_> = p
            .text
            .split(' ')
            .zip(es.text.split(' '))
            .filter(|(a, b)| a != b)
            .collect();
        assert_eq!(
            diff,
            vec![(
                lex.token(ConceptSlot::PhaseWord, "ed").unwrap(),
                lex.token(ConceptSlot::PhaseWord, "es").unwrap()
            )]
        );
        assert_eq!(lex.decode(&p.text), Some(vp));
    }

    #[test]
    fn missing_slot_is_named() {
        let mut lex = ConceptLexicon::build(1, 6).unwrap();
        lex.table.remove(&ConceptSlot::Organ);
        let e = render_abstract(ViewPhase::all()[0], &lex).unwrap_err();
        assert!(e.to_string().contains("organ"), "{e}");
    }

    #[test]
    fn lexicon_persists() {
        let dir = tempfile::tempdir().unwrap();
        let lex = ConceptLexicon::build(77, 8).unwrap();
        let p = dir.path().join("lexicon.json");
        lex.save(&p).unwrap();
        let back = ConceptLexicon::load(&p).unwrap();
        assert_eq!(back, lex);
        assert_eq!(back.hash(), lex.hash());
    }
}
