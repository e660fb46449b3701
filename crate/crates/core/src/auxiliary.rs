//! Frozen single-modality question branches and the sentence embedder shared
//! by them and by the ground-truth questions.
//!
//! Nothing here is trainable: the embedder is a seeded hash table of token
//! vectors and the captioner and question generator are rule based.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{render, Constraint, Relation, MASK_TOKEN};
use crate::toyworld::{object_question, subject_question, Example, Scene, Visual};
use crate::vocab::tokenize;
use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Joint,
    ImageOnly,
    TextOnly,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

impl QuestionEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn distance(&self, other: &QuestionEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &QuestionEmbedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na = self.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.vector.iter().map(|b| b * b).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

/// Maps a sentence to a fixed-width unit vector. Implementations must be pure.
pub trait SentenceEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Mean of per-token Gaussian vectors keyed by a hash of the token, then
/// unit-normalized. Every token, seen or not, has a fixed vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SentenceEmbedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Input("cannot embed an empty sentence".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Input("degenerate sentence embedding".into()));
        }
        Ok(acc.into_iter().map(|a| a / norm).collect())
    }
}

const CAPTION_PREFIX: &str = "a scene with ";

/// Rule-based caption listing the objects in row-major order.
pub fn caption(scene: &Scene) -> String {
    let parts: Vec<String> = scene
        .objects()
        .map(|(_, _, o)| format!("a {} {} {}", o.size_name(), o.color_name(), o.category_name()))
        .collect();
    format!("{CAPTION_PREFIX}{}", parts.join(", "))
}

/// Finds the relation whose template occurs in `words`, preferring longer
/// templates, and splits the sentence around it.
fn split_on_template(words: &[&str]) -> Option<(String, Relation, String)> {
    let mut best: Option<(usize, usize, Relation)> = None;
    for r in Relation::ALL {
        let tmpl: Vec<&str> = r.template().split(' ').collect();
        if tmpl.len() >= words.len() {
            continue;
        }
        for start in 1..words.len() - tmpl.len() {
            if words[start..start + tmpl.len()] == tmpl[..] {
                if best.is_none_or(|(_, len, _)| tmpl.len() > len) {
                    best = Some((start, tmpl.len(), r));
                }
                break;
            }
        }
    }
    best.map(|(start, len, r)| (words[..start].join(" "), r, words[start + len..].join(" ")))
}

fn strip_article(s: &str) -> &str {
    for a in ["a ", "an ", "the "] {
        if let Some(rest) = s.strip_prefix(a) {
            return rest;
        }
    }
    s
}

/// Rule-based question generation from one sentence.
///
/// Captions produced by [`caption`] ask about their first object; templated
/// triplet sentences ask for the masked (or, if none, the trailing) entity;
/// answer sentences ask for the answer; anything else gets a generic frame.
pub fn rule_qg(sentence: &str) -> Result<String> {
    let sentence = sentence.trim();
    if sentence.is_empty() {
        return Err(Error::Input("cannot generate a question from an empty sentence".into()));
    }
    let lower = sentence.to_lowercase();
    if let Some(rest) = lower.strip_prefix(CAPTION_PREFIX) {
        let first = rest.split(',').next().unwrap_or(rest).trim();
        return Ok(format!("what is the {}", strip_article(first)));
    }
    if let Some(answer) = lower.strip_prefix("the answer to the question is ") {
        return Ok(format!("what is {}", answer.trim()));
    }
    let mask = MASK_TOKEN.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if let Some((subject, relation, object)) = split_on_template(&words) {
        if subject == mask {
            return Ok(subject_question("object", relation, &object));
        }
        return Ok(object_question(relation, &format!("the {}", strip_article(&subject))));
    }
    Ok(format!("what is {}", strip_article(&lower).replace(&mask, "what")))
}

/// The two frozen negative branches plus the ground-truth embedder.
pub struct Auxiliary {
    embedder: Box<dyn SentenceEmbedder>,
}

impl Auxiliary {
    pub fn new(embedder: Box<dyn SentenceEmbedder>) -> Self {
        Self { embedder }
    }

    pub fn hashed(dim: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(Box::new(HashedEmbedder::new(dim, seed)?)))
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn sentence_embed(&self, text: &str, source: EmbeddingSource) -> Result<QuestionEmbedding> {
        let vector = self.embedder.embed(text)?;
        if vector.len() != self.dim() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("embedder returned an invalid vector".into()));
        }
        Ok(QuestionEmbedding { vector, source })
    }

    /// Image-only branch: caption, question, embedding.
    pub fn iqgm(&self, scene: &Scene) -> Result<(String, QuestionEmbedding)> {
        let q = rule_qg(&caption(scene))?;
        let e = self.sentence_embed(&q, EmbeddingSource::ImageOnly)?;
        Ok((q, e))
    }

    /// Text-only branch over the rendered constraint sentence.
    pub fn tqgm(&self, t_prime: &str) -> Result<(String, QuestionEmbedding)> {
        let q = rule_qg(t_prime)?;
        let e = self.sentence_embed(&q, EmbeddingSource::TextOnly)?;
        Ok((q, e))
    }

    /// Image-only branch for an example. A caption constraint replaces the
    /// captioning step; features that do not decode to a scene get a generic caption.
    pub fn iqgm_example(&self, ex: &Example) -> Result<(String, QuestionEmbedding)> {
        if let Constraint::Caption(c) = &ex.constraint {
            let q = rule_qg(c)?;
            let e = self.sentence_embed(&q, EmbeddingSource::ImageOnly)?;
            return Ok((q, e));
        }
        match &ex.visual {
            Visual::Scene(s) => self.iqgm(s),
            v => match v.scene() {
                Some(s) => self.iqgm(&s),
                None => {
                    let q = rule_qg("a scene")?;
                    let e = self.sentence_embed(&q, EmbeddingSource::ImageOnly)?;
                    Ok((q, e))
                }
            },
        }
    }

    /// `(Q_gt, Q_i, Q_t)` for an example.
    pub fn targets(&self, ex: &Example) -> Result<[QuestionEmbedding; 3]> {
        let gt = self.sentence_embed(&ex.question, EmbeddingSource::GroundTruth)?;
        let (_, qi) = self.iqgm_example(ex)?;
        let (_, qt) = self.tqgm(&render(&ex.constraint)?)?;
        Ok([gt, qi, qt])
    }
}
