//! Artifact category system and conversions between free-text classifier
//! answers and machine label sets.
//!
//! The built-in 13-category taxonomy is a reconstruction from prose; the
//! exact wording of the original list is not published, so downstream users
//! can load their own via [`Taxonomy::from_toml_str`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Version tag of the built-in taxonomy.
pub const BUILTIN_VERSION: &str = "builtin-13-v1";

/// The distinguished answer for artifact-free images.
pub const NO_ARTIFACTS_PHRASE: &str = "No artifacts";

/// Category ids of the built-in taxonomy, by position.
pub mod builtin_ids {
    pub const ILLEGIBLE_LETTERS: usize = 0;
    pub const AWKWARD_FACIAL_EXPRESSION: usize = 1;
    pub const DISTORTION: usize = 2;
    pub const OMISSION: usize = 3;
    pub const DUPLICATION: usize = 4;
    pub const COLOR_MISBINDING: usize = 5;
    pub const TEXTURE_MISBINDING: usize = 6;
    pub const SPATIAL_POSITION_MISBINDING: usize = 7;
    pub const SHAPE_MISBINDING: usize = 8;
    pub const LUMINOSITY_ANOMALY: usize = 9;
    pub const SHADOW_ANOMALY: usize = 10;
    pub const BLUR: usize = 11;
    pub const OUT_OF_FRAME: usize = 12;
}

/// Coarse grouping of artifact categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseGroup {
    ObjectAware,
    ObjectAgnostic,
    Lighting,
    Others,
}

/// One artifact category: a stable id, a canonical name, and the
/// one-sentence explanation shown in prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactCategory {
    pub id: usize,
    pub name: String,
    pub coarse_group: CoarseGroup,
    pub explanation: String,
}

/// An ordered, validated list of artifact categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    categories: Vec<ArtifactCategory>,
    version: String,
}

#[derive(Deserialize)]
struct TaxonomyDoc {
    version: String,
    #[serde(rename = "category")]
    categories: Vec<CategoryDoc>,
}

#[derive(Deserialize)]
struct CategoryDoc {
    name: String,
    group: CoarseGroup,
    explanation: String,
}

impl Taxonomy {
    /// The built-in 13-category taxonomy.
    pub fn builtin() -> Self {
        use CoarseGroup::*;
        let raw: [(&str, CoarseGroup, &str); 13] = [
            (
                "Illegible letters",
                ObjectAware,
                "Rendered text or lettering is garbled, misshapen, or impossible to read.",
            ),
            (
                "Awkward facial expression",
                ObjectAware,
                "A human or animal face carries an unnatural or implausible expression.",
            ),
            (
                "Distorted components",
                ObjectAgnostic,
                "A component is distorted or deformed, such as a twisted limb or a warped outline.",
            ),
            (
                "Omitted components",
                ObjectAgnostic,
                "An expected component is missing, such as a hand with fewer fingers or a body with fewer limbs.",
            ),
            (
                "Duplicated components",
                ObjectAgnostic,
                "A component appears more times than it should, such as six fingers or an extra limb.",
            ),
            (
                "Color mis-binding",
                ObjectAgnostic,
                "A color attaches to the wrong object, giving it a hue that contradicts common sense.",
            ),
            (
                "Texture mis-binding",
                ObjectAgnostic,
                "A texture attaches to the wrong object or surface.",
            ),
            (
                "Spatial-position mis-binding",
                ObjectAgnostic,
                "Objects sit in spatial positions that contradict each other or the scene.",
            ),
            (
                "Shape mis-binding",
                ObjectAgnostic,
                "An object takes the shape of a different kind of object.",
            ),
            (
                "Luminosity anomaly",
                Lighting,
                "Brightness or light sources are inconsistent with the scene.",
            ),
            (
                "Shadow anomaly",
                Lighting,
                "Shadows are missing, doubled, or fall in impossible directions.",
            ),
            (
                "Blur",
                Others,
                "Part of the image is smeared or out of focus for no plausible reason.",
            ),
            (
                "Out of frame",
                Others,
                "The main subject is cut off by the image border.",
            ),
        ];
        let categories = raw
            .iter()
            .enumerate()
            .map(|(id, (name, group, explanation))| ArtifactCategory {
                id,
                name: (*name).to_string(),
                coarse_group: *group,
                explanation: (*explanation).to_string(),
            })
            .collect();
        let taxonomy = Self {
            categories,
            version: BUILTIN_VERSION.to_string(),
        };
        taxonomy.validate().expect("built-in taxonomy is valid");
        taxonomy
    }

    /// Build a taxonomy from explicit categories; ids are assigned by position.
    pub fn new(
        version: impl Into<String>,
        categories: Vec<(String, CoarseGroup, String)>,
    ) -> Result<Self> {
        let categories = categories
            .into_iter()
            .enumerate()
            .map(|(id, (name, coarse_group, explanation))| ArtifactCategory {
                id,
                name,
                coarse_group,
                explanation,
            })
            .collect();
        let taxonomy = Self {
            categories,
            version: version.into(),
        };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    /// Parse a taxonomy from its TOML document form.
    ///
    /// Schema: a top-level `version` string and one `[[category]]` table per
    /// category with `name`, `group` (one of `object-aware`, `object-agnostic`,
    /// `lighting`, `others`) and `explanation`. Ids are assigned by position.
    pub fn from_toml_str(source: &str) -> Result<Self> {
        let doc: TaxonomyDoc =
            toml::from_str(source).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(
            doc.version,
            doc.categories
                .into_iter()
                .map(|c| (c.name, c.group, c.explanation))
                .collect(),
        )
    }

    /// Load a taxonomy from a TOML file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Validation("taxonomy has no categories".into()));
        }
        for (pos, cat) in self.categories.iter().enumerate() {
            if cat.id != pos {
                return Err(Error::Validation(format!(
                    "category {:?} has id {} at position {}",
                    cat.name, cat.id, pos
                )));
            }
            if cat.explanation.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "category {:?} has an empty explanation",
                    cat.name
                )));
            }
            let name = cat.name.trim();
            if name.is_empty() {
                return Err(Error::Validation(format!("category {} has an empty name", pos)));
            }
            if name != cat.name {
                return Err(Error::Validation(format!(
                    "category name {:?} has leading or trailing whitespace",
                    cat.name
                )));
            }
            // Names are answer tokens: the answer format splits on commas and
            // newlines, so names must not contain either.
            if cat.name.contains(',') || cat.name.contains('\n') {
                return Err(Error::Validation(format!(
                    "category name {:?} contains a comma or newline",
                    cat.name
                )));
            }
            if normalize(&cat.name) == normalize(NO_ARTIFACTS_PHRASE) {
                return Err(Error::Validation(format!(
                    "category name {:?} collides with the no-artifacts phrase",
                    cat.name
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for cat in &self.categories {
            if !seen.insert(normalize(&cat.name)) {
                return Err(Error::Validation(format!(
                    "duplicate category name {:?}",
                    cat.name
                )));
            }
        }
        Ok(())
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[ArtifactCategory] {
        &self.categories
    }

    pub fn category(&self, id: usize) -> Result<&ArtifactCategory> {
        self.categories.get(id).ok_or(Error::UnknownCategory(id))
    }

    /// Case-insensitive lookup of a category id by canonical name.
    pub fn id_of(&self, name: &str) -> Option<usize> {
        let wanted = normalize(name);
        self.categories
            .iter()
            .find(|c| normalize(&c.name) == wanted)
            .map(|c| c.id)
    }

    /// Split free-form classifier output into a label set.
    ///
    /// Tokens are split on commas and newlines, trimmed of surrounding
    /// punctuation, and matched case-insensitively against category names
    /// (exact first, then unique prefix). Unmatched tokens are returned,
    /// never dropped.
    pub fn parse_answer(&self, text: &str) -> Result<ParsedAnswer> {
        let mut ids = BTreeSet::new();
        let mut unmatched = Vec::new();
        let mut saw_no_artifacts = false;

        let no_artifacts = normalize(NO_ARTIFACTS_PHRASE);
        for raw in text.split(|c| c == ',' || c == '\n') {
            let token = raw
                .trim_matches(|c: char| !c.is_alphanumeric())
                .trim()
                .to_string();
            if token.is_empty() {
                continue;
            }
            let norm = normalize(&token);
            if norm == no_artifacts {
                saw_no_artifacts = true;
                continue;
            }
            if let Some(id) = self.id_of(&token) {
                ids.insert(id);
                continue;
            }
            let prefix_hits: Vec<usize> = self
                .categories
                .iter()
                .filter(|c| normalize(&c.name).starts_with(&norm))
                .map(|c| c.id)
                .collect();
            if prefix_hits.len() == 1 {
                ids.insert(prefix_hits[0]);
            } else {
                unmatched.push(token);
            }
        }

        if saw_no_artifacts && !ids.is_empty() {
            return Err(Error::ConflictingAnswer(text.to_string()));
        }
        if saw_no_artifacts {
            return Ok(ParsedAnswer {
                labels: LabelSet::NoArtifacts,
                unmatched,
            });
        }
        if ids.is_empty() {
            return Err(Error::EmptyAnswer { unmatched });
        }
        Ok(ParsedAnswer {
            labels: LabelSet::Artifacts(ids),
            unmatched,
        })
    }

    /// Render a label set in the standardized answer format: category names
    /// in ascending id order joined by ", ", with a final period.
    pub fn canonical_answer(&self, labels: &LabelSet) -> Result<String> {
        match labels {
            LabelSet::NoArtifacts => Ok(format!("{}.", NO_ARTIFACTS_PHRASE)),
            LabelSet::Artifacts(ids) => {
                let mut names = Vec::with_capacity(ids.len());
                for &id in ids {
                    names.push(self.category(id)?.name.as_str());
                }
                Ok(format!("{}.", names.join(", ")))
            }
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Result of parsing a classifier answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub labels: LabelSet,
    pub unmatched: Vec<String>,
}

/// Either the distinguished no-artifacts value or a non-empty set of
/// category ids; the two states never mix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum LabelSet {
    NoArtifacts,
    Artifacts(BTreeSet<usize>),
}

impl LabelSet {
    pub fn no_artifacts() -> Self {
        LabelSet::NoArtifacts
    }

    /// Build an artifact label set; fails on an empty id collection.
    pub fn from_ids<I: IntoIterator<Item = usize>>(ids: I) -> Result<Self> {
        let set: BTreeSet<usize> = ids.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Validation(
                "artifact label set must be non-empty; use NoArtifacts instead".into(),
            ));
        }
        Ok(LabelSet::Artifacts(set))
    }

    pub fn is_no_artifacts(&self) -> bool {
        matches!(self, LabelSet::NoArtifacts)
    }

    /// Category ids, empty for the no-artifacts value.
    pub fn ids(&self) -> BTreeSet<usize> {
        match self {
            LabelSet::NoArtifacts => BTreeSet::new(),
            LabelSet::Artifacts(ids) => ids.clone(),
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        match self {
            LabelSet::NoArtifacts => false,
            LabelSet::Artifacts(ids) => ids.contains(&id),
        }
    }

    /// All ids must exist in the taxonomy.
    pub fn validate_for(&self, taxonomy: &Taxonomy) -> Result<()> {
        if let LabelSet::Artifacts(ids) = self {
            for &id in ids {
                taxonomy.category(id)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSet::NoArtifacts => write!(f, "{}", NO_ARTIFACTS_PHRASE),
            LabelSet::Artifacts(ids) => {
                let parts: Vec<String> = ids.iter().map(|id| id.to_string()).collect();
                write!(f, "{{{}}}", parts.join(","))
            }
        }
    }
}

// JSON form: a sorted array of category ids, with the empty array standing
// for the no-artifacts value. Artifact sets are non-empty by construction,
// so the encoding is unambiguous.
impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LabelSet::NoArtifacts => serializer.serialize_seq(Some(0))?.end(),
            LabelSet::Artifacts(ids) => {
                let mut seq = serializer.serialize_seq(Some(ids.len()))?;
                for id in ids {
                    seq.serialize_element(id)?;
                }
                seq.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct IdSeq;
        impl<'de> Visitor<'de> for IdSeq {
            type Value = LabelSet;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "an array of category ids")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<LabelSet, A::Error> {
                let mut ids = BTreeSet::new();
                while let Some(id) = seq.next_element::<usize>()? {
                    ids.insert(id);
                }
                if ids.is_empty() {
                    Ok(LabelSet::NoArtifacts)
                } else {
                    Ok(LabelSet::Artifacts(ids))
                }
            }
        }
        deserializer.deserialize_seq(IdSeq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_has_13_categories() {
        let t = Taxonomy::builtin();
        assert_eq!(t.len(), 13);
        assert_eq!(t.version(), BUILTIN_VERSION);
        // Category 2 is the distortion category.
        assert_eq!(t.category(2).unwrap().name, "Distorted components");
        assert_eq!(t.id_of("Omitted components"), Some(builtin_ids::OMISSION));
        assert_eq!(t.id_of("Out of frame"), Some(builtin_ids::OUT_OF_FRAME));
    }

    #[test]
    fn single_category_document_loads() {
        let doc = r#"
            version = "mini"
            [[category]]
            name = "Blur"
            group = "others"
            explanation = "Smeared content."
        "#;
        let t = Taxonomy::from_toml_str(doc).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.category(0).unwrap().id, 0);
    }

    #[test]
    fn duplicate_name_rejected() {
        let doc = r#"
            version = "dup"
            [[category]]
            name = "Blur"
            group = "others"
            explanation = "a"
            [[category]]
            name = "blur"
            group = "lighting"
            explanation = "b"
        "#;
        let err = Taxonomy::from_toml_str(doc).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_document_reports_parse_error() {
        let err = Taxonomy::from_toml_str("version = [not toml").unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn parse_no_artifacts_phrase() {
        let t = Taxonomy::builtin();
        let parsed = t.parse_answer("No artifacts.").unwrap();
        assert_eq!(parsed.labels, LabelSet::NoArtifacts);
        assert!(parsed.unmatched.is_empty());
        // Case and whitespace perturbations.
        let parsed = t.parse_answer("  no ARTIFACTS ").unwrap();
        assert_eq!(parsed.labels, LabelSet::NoArtifacts);
    }

    #[test]
    fn parse_two_category_answer() {
        let t = Taxonomy::builtin();
        let parsed = t
            .parse_answer("Distorted components, Duplicated components")
            .unwrap();
        assert_eq!(
            parsed.labels,
            LabelSet::from_ids([builtin_ids::DISTORTION, builtin_ids::DUPLICATION]).unwrap()
        );
        assert!(parsed.unmatched.is_empty());
    }

    #[test]
    fn parse_unique_prefix() {
        let t = Taxonomy::builtin();
        let parsed = t.parse_answer("Distorted, Blur").unwrap();
        assert_eq!(
            parsed.labels,
            LabelSet::from_ids([builtin_ids::DISTORTION, builtin_ids::BLUR]).unwrap()
        );
        // Ambiguous prefix stays unmatched.
        let parsed = t.parse_answer("Sha, Blur").unwrap();
        assert_eq!(parsed.labels, LabelSet::from_ids([builtin_ids::BLUR]).unwrap());
        assert_eq!(parsed.unmatched, vec!["Sha".to_string()]);
    }

    #[test]
    fn parse_unknown_token_is_empty_answer_error() {
        let t = Taxonomy::builtin();
        let err = t.parse_answer("zzz-unknown").unwrap_err();
        match err {
            Error::EmptyAnswer { unmatched } => {
                assert_eq!(unmatched, vec!["zzz-unknown".to_string()])
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn parse_empty_text_is_error() {
        let t = Taxonomy::builtin();
        assert!(matches!(
            t.parse_answer("   "),
            Err(Error::EmptyAnswer { .. })
        ));
    }

    #[test]
    fn parse_conflict_is_error() {
        let t = Taxonomy::builtin();
        let err = t.parse_answer("No artifacts, Blur").unwrap_err();
        assert!(matches!(err, Error::ConflictingAnswer(_)), "{err}");
    }

    #[test]
    fn canonical_answers() {
        let t = Taxonomy::builtin();
        assert_eq!(
            t.canonical_answer(&LabelSet::NoArtifacts).unwrap(),
            "No artifacts."
        );
        assert_eq!(
            t.canonical_answer(&LabelSet::from_ids([2]).unwrap()).unwrap(),
            "Distorted components."
        );
        assert_eq!(
            t.canonical_answer(&LabelSet::from_ids([4, 2]).unwrap()).unwrap(),
            "Distorted components, Duplicated components."
        );
        assert!(matches!(
            t.canonical_answer(&LabelSet::from_ids([99]).unwrap()),
            Err(Error::UnknownCategory(99))
        ));
    }

    #[test]
    fn label_set_json_form() {
        let l = LabelSet::from_ids([4, 2]).unwrap();
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(json, "[2,4]");
        let back: LabelSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
        let none: LabelSet = serde_json::from_str("[]").unwrap();
        assert_eq!(none, LabelSet::NoArtifacts);
    }

    fn arb_label_set(n: usize) -> impl Strategy<Value = LabelSet> {
        prop_oneof![
            Just(LabelSet::NoArtifacts),
            proptest::collection::btree_set(0..n, 1..=n.min(6))
                .prop_map(LabelSet::Artifacts),
        ]
    }

    proptest! {
        #[test]
        fn canonical_parse_round_trip(labels in arb_label_set(13)) {
            let t = Taxonomy::builtin();
            let text = t.canonical_answer(&labels).unwrap();
            let parsed = t.parse_answer(&text).unwrap();
            prop_assert_eq!(parsed.labels, labels);
            prop_assert!(parsed.unmatched.is_empty());
        }

        #[test]
        fn parse_idempotent_under_case_noise(labels in arb_label_set(13), upper in any::<bool>()) {
            let t = Taxonomy::builtin();
            let text = t.canonical_answer(&labels).unwrap();
            let noisy = if upper { text.to_uppercase() } else { format!("  {}  ", text.to_lowercase()) };
            let parsed = t.parse_answer(&noisy).unwrap();
            prop_assert_eq!(parsed.labels, labels);
        }

        #[test]
        fn parse_never_mixes_states(text in ".{0,60}") {
            let t = Taxonomy::builtin();
            if let Ok(parsed) = t.parse_answer(&text) {
                match parsed.labels {
                    LabelSet::NoArtifacts => {}
                    LabelSet::Artifacts(ids) => prop_assert!(!ids.is_empty()),
                }
            }
        }
    }
}
