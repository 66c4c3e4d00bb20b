use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::diffusion::{Color, RenderSpec, Shape, ToyImage};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};

/// Prompt sets per concept: templates drive editing and efficacy,
/// paraphrases probe generalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTier {
    Template,
    Paraphrase,
}

/// One concept as written in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub alias: String,
    pub render: RenderSpec,
    /// Concept the alias is trained to depict instead of this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias_bound_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeShare {
    pub concept: String,
    /// Relative frequency in the training data.
    pub weight: usize,
}

/// A concept whose training images are a skewed mix of other concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedEntry {
    pub name: String,
    pub attributes: Vec<AttributeShare>,
}

/// Serialized registry. Prompt patterns contain one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub templates: Vec<String>,
    pub paraphrases: Vec<String>,
    pub concepts: Vec<ConceptEntry>,
    /// Destination used to express erasure.
    pub neutral: String,
    #[serde(default)]
    pub biased: Vec<BiasedEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub alias: String,
    pub render: RenderSpec,
    pub alias_bound_to: Option<String>,
    pub templates: Vec<String>,
    pub paraphrases: Vec<String>,
    pub alias_templates: Vec<String>,
    pub alias_paraphrases: Vec<String>,
    pub prototype: ToyImage,
}

impl Concept {
    pub fn prompts(&self, tier: PromptTier) -> &[String] {
        match tier {
            PromptTier::Template => &self.templates,
            PromptTier::Paraphrase => &self.paraphrases,
        }
    }

    pub fn alias_prompts(&self, tier: PromptTier) -> &[String] {
        match tier {
            PromptTier::Template => &self.alias_templates,
            PromptTier::Paraphrase => &self.alias_paraphrases,
        }
    }

    pub fn alias_misunderstood(&self) -> bool {
        self.alias_bound_to.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedConcept {
    pub name: String,
    pub attributes: Vec<AttributeShare>,
    pub templates: Vec<String>,
    pub paraphrases: Vec<String>,
}

/// Classifiable concepts plus biased concepts, with expanded prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptRegistry {
    manifest: RegistryManifest,
    concepts: Vec<Concept>,
    biased: Vec<BiasedConcept>,
    by_name: HashMap<String, usize>,
}

fn expand(patterns: &[String], word: &str) -> Vec<String> {
    patterns.iter().map(|p| p.replacen("{}", word, 1)).collect()
}

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
    }
}

impl RegistryManifest {
    /// Sixteen colored glyphs, a blank canvas and one biased concept.
    pub fn toy() -> Self {
        let shapes = [
            (Shape::Square, "square", "block"),
            (Shape::Ring, "ring", "loop"),
            (Shape::Hbar, "bar", "dash"),
            (Shape::Vbar, "pole", "pillar"),
        ];
        let colors = [
            (Color::Red, "crimson"),
            (Color::Green, "emerald"),
            (Color::Blue, "azure"),
            (Color::Yellow, "golden"),
        ];
        // alias → concept it wrongly depicts
        let misbound: HashMap<&str, &str> = [
            ("crimson-loop", "green-bar"),
            ("emerald-pillar", "yellow-ring"),
            ("azure-block", "red-pole"),
            ("golden-dash", "blue-square"),
        ]
        .into_iter()
        .collect();
        let mut concepts = Vec::new();
        for (shape, sname, salias) in shapes {
            for (color, calias) in colors {
                let alias = format!("{calias}-{salias}");
                concepts.push(ConceptEntry {
                    name: format!("{}-{sname}", color_word(color)),
                    alias_bound_to: misbound.get(alias.as_str()).map(|s| s.to_string()),
                    alias,
                    render: RenderSpec::Glyph { shape, color },
                });
            }
        }
        concepts.push(ConceptEntry {
            name: "canvas".into(),
            alias: "backdrop".into(),
            render: RenderSpec::Blank,
            alias_bound_to: None,
        });
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            templates: s(&["a photo of {}", "a picture of {}", "an image of the {}", "{}"]),
            paraphrases: s(&["the {} shown here", "a small drawing of a {}", "look at this {}", "there is a {} in the frame"]),
            concepts,
            neutral: "canvas".into(),
            biased: vec![BiasedEntry {
                name: "orb".into(),
                attributes: vec![
                    AttributeShare { concept: "red-ring".into(), weight: 4 },
                    AttributeShare { concept: "blue-ring".into(), weight: 1 },
                ],
            }],
        }
    }
}

impl ConceptRegistry {
    pub fn toy() -> Self {
        Self::from_manifest(RegistryManifest::toy()).expect("built-in registry is valid")
    }

    pub fn parse(json: &str) -> Result<Self> {
        let m: RegistryManifest =
            serde_json::from_str(json).map_err(|e| Error::InvalidConfig(format!("registry manifest: {e}")))?;
        Self::from_manifest(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes")
    }

    pub fn manifest(&self) -> &RegistryManifest {
        &self.manifest
    }

    pub fn from_manifest(manifest: RegistryManifest) -> Result<Self> {
        let bad = Error::InvalidConfig;
        for p in manifest.templates.iter().chain(&manifest.paraphrases) {
            if p.matches("{}").count() != 1 {
                return Err(bad(format!("prompt pattern `{p}` needs exactly one {{}}")));
            }
        }
        let mut words: HashMap<&str, &str> = HashMap::new();
        for c in &manifest.concepts {
            if c.alias == c.name {
                return Err(bad(format!("alias of `{}` equals its name", c.name)));
            }
            for w in [&c.name, &c.alias] {
                if w.is_empty() || w.contains(char::is_whitespace) {
                    return Err(bad(format!("concept word `{w}` must be one token")));
                }
                if words.insert(w, &c.name).is_some() {
                    return Err(bad(format!("duplicate concept word `{w}`")));
                }
            }
        }
        for b in &manifest.biased {
            if words.insert(&b.name, &b.name).is_some() {
                return Err(bad(format!("duplicate concept word `{}`", b.name)));
            }
        }
        let pattern_words: BTreeSet<&str> = manifest
            .templates
            .iter()
            .chain(&manifest.paraphrases)
            .flat_map(|p| p.split_whitespace())
            .filter(|w| *w != "{}")
            .collect();
        if let Some(w) = pattern_words.iter().find(|w| words.contains_key(*w)) {
            return Err(bad(format!("prompt pattern word `{w}` is also a concept word")));
        }

        let by_name: HashMap<String, usize> =
            manifest.concepts.iter().enumerate().map(|(i, c)| (c.name.clone(), i)).collect();
        let known = |n: &str| by_name.contains_key(n).then_some(()).ok_or_else(|| Error::UnknownConcept(n.into()));
        known(&manifest.neutral)?;
        let concepts = manifest
            .concepts
            .iter()
            .enumerate()
            .map(|(id, c)| {
                if let Some(t) = &c.alias_bound_to {
                    known(t)?;
                    if *t == c.name {
                        return Err(bad(format!("alias of `{}` is bound to its own concept", c.name)));
                    }
                }
                Ok(Concept {
                    id,
                    name: c.name.clone(),
                    alias: c.alias.clone(),
                    render: c.render,
                    alias_bound_to: c.alias_bound_to.clone(),
                    templates: expand(&manifest.templates, &c.name),
                    paraphrases: expand(&manifest.paraphrases, &c.name),
                    alias_templates: expand(&manifest.templates, &c.alias),
                    alias_paraphrases: expand(&manifest.paraphrases, &c.alias),
                    prototype: c.render.prototype(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let biased = manifest
            .biased
            .iter()
            .map(|b| {
                if b.attributes.len() < 2 || b.attributes.iter().any(|a| a.weight == 0) {
                    return Err(bad(format!("biased concept `{}` needs two or more weighted attributes", b.name)));
                }
                for a in &b.attributes {
                    known(&a.concept)?;
                }
                Ok(BiasedConcept {
                    name: b.name.clone(),
                    attributes: b.attributes.clone(),
                    templates: expand(&manifest.templates, &b.name),
                    paraphrases: expand(&manifest.paraphrases, &b.name),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, concepts, biased, by_name })
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concept(&self, name: &str) -> Result<&Concept> {
        self.by_name.get(name).map(|&i| &self.concepts[i]).ok_or_else(|| Error::UnknownConcept(name.into()))
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.concept(name).map(|c| c.id)
    }

    /// Concept whose alias is `alias`.
    pub fn by_alias(&self, alias: &str) -> Result<&Concept> {
        self.concepts.iter().find(|c| c.alias == alias).ok_or_else(|| Error::UnknownConcept(alias.into()))
    }

    pub fn neutral(&self) -> &str {
        &self.manifest.neutral
    }

    pub fn biased(&self, name: &str) -> Result<&BiasedConcept> {
        self.biased.iter().find(|b| b.name == name).ok_or_else(|| Error::UnknownConcept(name.into()))
    }

    pub fn biased_concepts(&self) -> &[BiasedConcept] {
        &self.biased
    }

    /// Prompts of a classifiable or biased concept.
    pub fn prompts(&self, name: &str, tier: PromptTier) -> Result<&[String]> {
        let p = match self.concept(name) {
            Ok(c) => c.prompts(tier),
            Err(_) => {
                let b = self.biased(name)?;
                match tier {
                    PromptTier::Template => &b.templates,
                    PromptTier::Paraphrase => &b.paraphrases,
                }
            }
        };
        if p.is_empty() {
            return Err(Error::EmptyPromptTier(name.into()));
        }
        Ok(p)
    }

    /// Every prompt the toy model is trained on.
    pub fn corpus(&self) -> Vec<String> {
        let mut out = Vec::new();
        for tier in [PromptTier::Template, PromptTier::Paraphrase] {
            for c in &self.concepts {
                out.extend_from_slice(c.prompts(tier));
                out.extend_from_slice(c.alias_prompts(tier));
            }
            for b in &self.biased {
                out.extend(self.prompts(&b.name, tier).expect("biased prompts").iter().cloned());
            }
        }
        out
    }

    /// Sorted word list covering every prompt.
    pub fn vocabulary(&self) -> Vocabulary {
        let words: BTreeSet<&str> = self
            .manifest
            .templates
            .iter()
            .chain(&self.manifest.paraphrases)
            .flat_map(|p| p.split_whitespace())
            .filter(|w| *w != "{}")
            .chain(self.concepts.iter().flat_map(|c| [c.name.as_str(), c.alias.as_str()]))
            .chain(self.biased.iter().map(|b| b.name.as_str()))
            .collect();
        Vocabulary::new(words).expect("registry words are valid tokens")
    }

    /// Words that name a concept, alias or biased concept.
    pub fn concept_words_in<'p>(&self, prompt: &'p str) -> Vec<&'p str> {
        prompt
            .split_whitespace()
            .filter(|w| {
                self.by_name.contains_key(*w)
                    || self.concepts.iter().any(|c| c.alias == *w)
                    || self.biased.iter().any(|b| b.name == *w)
            })
            .collect()
    }
}
