//! Textual constraints and their sentence form fed to the text encoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MASK_TOKEN: &str = "[MASK]";

/// Commonsense relation of a knowledge triplet.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    UsedFor,
    ReceivesAction,
    HasA,
    Causes,
    HasProperty,
    CreatedBy,
    DefinedAs,
    AtLocation,
    HasSubEvent,
    MadeUpOf,
    HasPrerequisite,
    Desires,
    NotDesires,
    IsA,
    CapableOf,
}

impl Relation {
    pub const ALL: [Relation; 15] = [
        Relation::UsedFor,
        Relation::ReceivesAction,
        Relation::HasA,
        Relation::Causes,
        Relation::HasProperty,
        Relation::CreatedBy,
        Relation::DefinedAs,
        Relation::AtLocation,
        Relation::HasSubEvent,
        Relation::MadeUpOf,
        Relation::HasPrerequisite,
        Relation::Desires,
        Relation::NotDesires,
        Relation::IsA,
        Relation::CapableOf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::UsedFor => "UsedFor",
            Relation::ReceivesAction => "ReceivesAction",
            Relation::HasA => "HasA",
            Relation::Causes => "Causes",
            Relation::HasProperty => "HasProperty",
            Relation::CreatedBy => "CreatedBy",
            Relation::DefinedAs => "DefinedAs",
            Relation::AtLocation => "AtLocation",
            Relation::HasSubEvent => "HasSubEvent",
            Relation::MadeUpOf => "MadeUpOf",
            Relation::HasPrerequisite => "HasPrerequisite",
            Relation::Desires => "Desires",
            Relation::NotDesires => "NotDesires",
            Relation::IsA => "IsA",
            Relation::CapableOf => "CapableOf",
        }
    }

    /// Verb phrase joining subject and object in the sentence form.
    pub fn template(self) -> &'static str {
        match self {
            Relation::UsedFor => "is used for",
            Relation::ReceivesAction => "receives action",
            Relation::HasA => "has a",
            Relation::Causes => "causes",
            Relation::HasProperty => "has a property",
            Relation::CreatedBy => "is created by",
            Relation::DefinedAs => "is defined as",
            Relation::AtLocation => "is at location of",
            Relation::HasSubEvent => "has",
            Relation::MadeUpOf => "is made of",
            Relation::HasPrerequisite => "has prerequisite to",
            Relation::Desires => "desires",
            Relation::NotDesires => "not desires",
            Relation::IsA => "is a",
            Relation::CapableOf => "is capable of",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownRelation(s.to_string()))
    }
}

/// Template for a relation given by name.
pub fn template(relation: &str) -> Result<&'static str> {
    Ok(relation.parse::<Relation>()?.template())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskedSlot {
    Subject,
    Object,
    None,
}

impl FromStr for MaskedSlot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" => Ok(MaskedSlot::Subject),
            "object" => Ok(MaskedSlot::Object),
            "none" => Ok(MaskedSlot::None),
            other => Err(Error::Input(format!("unknown masked slot `{other}`"))),
        }
    }
}

impl MaskedSlot {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskedSlot::Subject => "subject",
            MaskedSlot::Object => "object",
            MaskedSlot::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KnowledgeTriplet {
    pub subject: String,
    pub relation: Relation,
    pub object: String,
    pub masked_slot: MaskedSlot,
}

impl KnowledgeTriplet {
    pub fn new(subject: impl Into<String>, relation: Relation, object: impl Into<String>, masked_slot: MaskedSlot) -> Self {
        Self { subject: subject.into(), relation, object: object.into(), masked_slot }
    }

    /// The entity hidden behind the mask, if any.
    pub fn masked_entity(&self) -> Option<&str> {
        match self.masked_slot {
            MaskedSlot::Subject => Some(&self.subject),
            MaskedSlot::Object => Some(&self.object),
            MaskedSlot::None => None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    Triplet,
    Answer,
    Caption,
    Fact,
}

impl ConstraintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::Triplet => "triplet",
            ConstraintKind::Answer => "answer",
            ConstraintKind::Caption => "caption",
            ConstraintKind::Fact => "fact",
        }
    }
}

/// Textual guidance for question generation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Constraint {
    Triplet(KnowledgeTriplet),
    Answer(String),
    Caption(String),
    Fact(String),
}

impl Constraint {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            Constraint::Triplet(_) => ConstraintKind::Triplet,
            Constraint::Answer(_) => ConstraintKind::Answer,
            Constraint::Caption(_) => ConstraintKind::Caption,
            Constraint::Fact(_) => ConstraintKind::Fact,
        }
    }
}

fn entity(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Sentence form of a constraint.
///
/// Triplet entities are lowercased and the masked one is replaced by `[MASK]`.
pub fn render(constraint: &Constraint) -> Result<String> {
    let sentence = match constraint {
        Constraint::Triplet(t) => {
            let subject = if t.masked_slot == MaskedSlot::Subject { MASK_TOKEN.to_string() } else { entity(&t.subject) };
            let object = if t.masked_slot == MaskedSlot::Object { MASK_TOKEN.to_string() } else { entity(&t.object) };
            if subject.is_empty() || object.is_empty() {
                return Err(Error::Input("triplet with an empty entity".into()));
            }
            format!("{subject} {} {object}", t.relation.template())
        }
        Constraint::Answer(a) => {
            let a = a.trim();
            if a.is_empty() {
                return Err(Error::Input("empty answer constraint".into()));
            }
            format!("The answer to the question is {a}")
        }
        Constraint::Caption(s) | Constraint::Fact(s) => {
            if s.trim().is_empty() {
                return Err(Error::Input(format!("empty {} constraint", constraint.kind().as_str())));
            }
            s.clone()
        }
    };
    Ok(sentence)
}
