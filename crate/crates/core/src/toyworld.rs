//! Synthetic grid-world scenes, a small commonsense ontology, the ground-truth
//! question grammar, and JSONL ingestion of external dataset records.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use convqg_grad::{Real, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{Constraint, KnowledgeTriplet, MaskedSlot, Relation, MASK_TOKEN};
use crate::{Error, Result};

pub const CATEGORIES: [&str; 12] = [
    "cup", "bench", "carrot", "shelf", "container", "boat", "lamp", "book", "chair", "bottle", "kite", "umbrella",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "black"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];

/// Width of one patch feature row: one-hot category, color and size plus (row, col).
pub const PATCH_DIM: usize = CATEGORIES.len() + COLORS.len() + SIZES.len() + 2;

pub const DEFAULT_GRID: usize = 4;

/// Commonsense facts about every category. Each relation occurs at least once.
pub const KNOWLEDGE: &[(&str, Relation, &str)] = &[
    ("cup", Relation::UsedFor, "drinking"),
    ("cup", Relation::MadeUpOf, "ceramic"),
    ("cup", Relation::AtLocation, "kitchen"),
    ("cup", Relation::IsA, "container"),
    ("cup", Relation::ReceivesAction, "washing"),
    ("bench", Relation::UsedFor, "sitting"),
    ("bench", Relation::AtLocation, "park"),
    ("bench", Relation::MadeUpOf, "wood"),
    ("bench", Relation::CapableOf, "holding people"),
    ("bench", Relation::HasA, "backrest"),
    ("carrot", Relation::IsA, "vegetable"),
    ("carrot", Relation::HasProperty, "orange"),
    ("carrot", Relation::AtLocation, "garden"),
    ("carrot", Relation::ReceivesAction, "eating"),
    ("carrot", Relation::HasPrerequisite, "planting"),
    ("shelf", Relation::AtLocation, "library"),
    ("shelf", Relation::UsedFor, "storing books"),
    ("shelf", Relation::MadeUpOf, "wood"),
    ("shelf", Relation::HasA, "board"),
    ("shelf", Relation::CreatedBy, "carpenter"),
    ("container", Relation::CapableOf, "hold things"),
    ("container", Relation::UsedFor, "storage"),
    ("container", Relation::IsA, "object"),
    ("container", Relation::HasProperty, "hollow"),
    ("container", Relation::MadeUpOf, "plastic"),
    ("boat", Relation::UsedFor, "transportation"),
    ("boat", Relation::AtLocation, "river"),
    ("boat", Relation::CapableOf, "floating"),
    ("boat", Relation::HasA, "sail"),
    ("boat", Relation::CreatedBy, "shipbuilder"),
    ("lamp", Relation::UsedFor, "lighting"),
    ("lamp", Relation::Causes, "brightness"),
    ("lamp", Relation::HasA, "bulb"),
    ("lamp", Relation::AtLocation, "desk"),
    ("lamp", Relation::HasSubEvent, "turning on"),
    ("book", Relation::UsedFor, "reading"),
    ("book", Relation::DefinedAs, "bound pages"),
    ("book", Relation::CreatedBy, "author"),
    ("book", Relation::AtLocation, "shelf"),
    ("book", Relation::HasA, "cover"),
    ("chair", Relation::UsedFor, "sitting"),
    ("chair", Relation::MadeUpOf, "metal"),
    ("chair", Relation::AtLocation, "office"),
    ("chair", Relation::IsA, "furniture"),
    ("chair", Relation::HasA, "leg"),
    ("bottle", Relation::UsedFor, "holding water"),
    ("bottle", Relation::MadeUpOf, "glass"),
    ("bottle", Relation::ReceivesAction, "recycling"),
    ("bottle", Relation::HasProperty, "transparent"),
    ("bottle", Relation::HasSubEvent, "opening"),
    ("kite", Relation::CapableOf, "flying"),
    ("kite", Relation::Desires, "wind"),
    ("kite", Relation::NotDesires, "rain"),
    ("kite", Relation::AtLocation, "sky"),
    ("kite", Relation::MadeUpOf, "paper"),
    ("umbrella", Relation::UsedFor, "rain protection"),
    ("umbrella", Relation::HasSubEvent, "opening"),
    ("umbrella", Relation::DefinedAs, "portable canopy"),
    ("umbrella", Relation::NotDesires, "strong wind"),
    ("umbrella", Relation::Causes, "shade"),
];

fn index_of(names: &[&str], name: &str, what: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::Input(format!("unknown {what} `{name}`")))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub category: usize,
    pub color: usize,
    pub size: usize,
}

impl SceneObject {
    pub fn category_name(&self) -> &'static str {
        CATEGORIES[self.category]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }

    pub fn size_name(&self) -> &'static str {
        SIZES[self.size]
    }
}

/// A `G x G` grid of cells, each empty or holding one object.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub scene_id: String,
    grid_size: usize,
    cells: Vec<Option<SceneObject>>,
}

impl Scene {
    /// An empty canvas. Not a valid scene until it holds at least one object.
    pub fn empty(scene_id: impl Into<String>, grid_size: usize) -> Self {
        Self { scene_id: scene_id.into(), grid_size, cells: vec![None; grid_size * grid_size] }
    }

    /// Builds and validates a scene from `(row, col, object)` placements.
    pub fn new(scene_id: impl Into<String>, grid_size: usize, objects: &[(usize, usize, SceneObject)]) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Input("grid size must be positive".into()));
        }
        let mut scene = Self::empty(scene_id, grid_size);
        for &(row, col, obj) in objects {
            if row >= grid_size || col >= grid_size {
                return Err(Error::Input(format!("cell ({row}, {col}) outside a {grid_size}x{grid_size} grid")));
            }
            if obj.category >= CATEGORIES.len() || obj.color >= COLORS.len() || obj.size >= SIZES.len() {
                return Err(Error::Input(format!("object attribute out of range: {obj:?}")));
            }
            let cell = &mut scene.cells[row * grid_size + col];
            if cell.is_some() {
                return Err(Error::Input(format!("cell ({row}, {col}) occupied twice")));
            }
            *cell = Some(obj);
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects().count();
        if n == 0 {
            return Err(Error::Input(format!("scene {} has no objects", self.scene_id)));
        }
        let mut seen = HashSet::new();
        for (_, _, o) in self.objects() {
            if !seen.insert((o.category, o.color)) {
                return Err(Error::Input(format!(
                    "scene {} repeats the {} {}",
                    self.scene_id,
                    o.color_name(),
                    o.category_name()
                )));
            }
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&SceneObject> {
        self.cells[row * self.grid_size + col].as_ref()
    }

    /// Objects in row-major order.
    pub fn objects(&self) -> impl Iterator<Item = (usize, usize, &SceneObject)> {
        let g = self.grid_size;
        self.cells.iter().enumerate().filter_map(move |(i, c)| c.as_ref().map(|o| (i / g, i % g, o)))
    }

    /// Coarse position phrase such as "top left".
    pub fn location_phrase(&self, row: usize, col: usize) -> String {
        let half = self.grid_size.div_ceil(2);
        let v = if row < half { "top" } else { "bottom" };
        let h = if col < half { "left" } else { "right" };
        format!("{v} {h}")
    }

    /// "the small red cup on the top left". Unambiguous because (category,
    /// color) pairs are unique; size and position are there so the question
    /// carries what only the image knows.
    pub fn referring_expression(&self, row: usize, col: usize) -> Option<String> {
        self.cell(row, col).map(|o| {
            format!(
                "the {} {} {} on the {}",
                o.size_name(),
                o.color_name(),
                o.category_name(),
                self.location_phrase(row, col)
            )
        })
    }

    /// "small red object on the top left": the referring expression without the category.
    pub fn object_description(&self, row: usize, col: usize) -> Option<String> {
        self.cell(row, col)
            .map(|o| format!("{} {} object on the {}", o.size_name(), o.color_name(), self.location_phrase(row, col)))
    }
}

/// One feature row per cell: one-hot category, color, size, then row and column
/// normalized to `[0, 1]`. Empty cells have an all-zero categorical block.
pub fn scene_to_patches<F: Real>(scene: &Scene) -> Tensor<F> {
    let g = scene.grid_size;
    let denom = (g.max(2) - 1) as f64;
    let mut data = vec![F::zero(); g * g * PATCH_DIM];
    for (i, cell) in scene.cells.iter().enumerate() {
        let row = &mut data[i * PATCH_DIM..(i + 1) * PATCH_DIM];
        if let Some(o) = cell {
            row[o.category] = F::one();
            row[CATEGORIES.len() + o.color] = F::one();
            row[CATEGORIES.len() + COLORS.len() + o.size] = F::one();
        }
        row[PATCH_DIM - 2] = F::lit((i / g) as f64 / denom);
        row[PATCH_DIM - 1] = F::lit((i % g) as f64 / denom);
    }
    Tensor::new(vec![g * g, PATCH_DIM], data).expect("patch tensor shape")
}

/// Inverse of [`scene_to_patches`] for feature rows that are exact patch encodings.
pub fn scene_from_patches(scene_id: &str, rows: &[Vec<f32>]) -> Option<Scene> {
    let g = (rows.len() as f64).sqrt() as usize;
    if g == 0 || g * g != rows.len() || rows.iter().any(|r| r.len() != PATCH_DIM) {
        return None;
    }
    let hot = |slice: &[f32]| -> Option<Option<usize>> {
        let ones: Vec<usize> = slice.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        let zeros = slice.iter().filter(|&&v| v == 0.0).count();
        match (ones.len(), zeros + ones.len() == slice.len()) {
            (0, true) => Some(None),
            (1, true) => Some(Some(ones[0])),
            _ => None,
        }
    };
    let mut objects = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let c = hot(&r[..CATEGORIES.len()])?;
        let k = hot(&r[CATEGORIES.len()..CATEGORIES.len() + COLORS.len()])?;
        let s = hot(&r[CATEGORIES.len() + COLORS.len()..PATCH_DIM - 2])?;
        match (c, k, s) {
            (Some(category), Some(color), Some(size)) => {
                objects.push((i / g, i % g, SceneObject { category, color, size }))
            }
            (None, None, None) => {}
            _ => return None,
        }
    }
    Scene::new(scene_id, g, &objects).ok()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

/// Visual input of an example: a synthetic scene, or precomputed patch features.
#[derive(Clone, Debug, PartialEq)]
pub enum Visual {
    Scene(Scene),
    Features(Vec<Vec<f32>>),
}

impl Visual {
    pub fn patches<F: Real>(&self) -> Result<Tensor<F>> {
        match self {
            Visual::Scene(s) => Ok(scene_to_patches(s)),
            Visual::Features(rows) => {
                let t = Tensor::<f32>::from_rows(rows)?;
                Ok(t.cast())
            }
        }
    }

    /// The scene, either given directly or decoded from exact patch features.
    pub fn scene(&self) -> Option<Scene> {
        match self {
            Visual::Scene(s) => Some(s.clone()),
            Visual::Features(rows) => scene_from_patches("features", rows),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub visual: Visual,
    pub question: String,
    pub answer: Option<String>,
    pub constraint: Constraint,
    pub split: Split,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WorldConstraint {
    Triplet,
    Answer,
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub grid_size: usize,
    pub max_objects: usize,
    pub questions_per_scene: usize,
    pub subject_mask_rate: f64,
    pub constraint: WorldConstraint,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID,
            max_objects: 4,
            questions_per_scene: 1,
            subject_mask_rate: 0.25,
            constraint: WorldConstraint::Triplet,
        }
    }
}

/// Scene counts of the train / val / test split for `n` scenes (80/10/10).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Question whose answer is the object of `relation`, about the object described by `refexp`.
pub fn object_question(relation: Relation, refexp: &str) -> String {
    match relation {
        Relation::UsedFor => format!("what is {refexp} used for"),
        Relation::ReceivesAction => format!("what action does {refexp} receive"),
        Relation::HasA => format!("what part does {refexp} have"),
        Relation::Causes => format!("what does {refexp} cause"),
        Relation::HasProperty => format!("what property does {refexp} have"),
        Relation::CreatedBy => format!("who is {refexp} created by"),
        Relation::DefinedAs => format!("how is {refexp} defined"),
        Relation::AtLocation => format!("where is {refexp} usually located"),
        Relation::HasSubEvent => format!("what happens when using {refexp}"),
        Relation::MadeUpOf => format!("what is {refexp} made of"),
        Relation::HasPrerequisite => format!("what does {refexp} need first"),
        Relation::Desires => format!("what does {refexp} desire"),
        Relation::NotDesires => format!("what does {refexp} not desire"),
        Relation::IsA => format!("what kind of thing is {refexp}"),
        Relation::CapableOf => format!("what is {refexp} capable of"),
    }
}

/// Question whose answer is the subject, e.g. "which red object is used for drinking".
pub fn subject_question(description: &str, relation: Relation, object: &str) -> String {
    format!("which {description} {} {object}", relation.template())
}

/// Ground-truth question for a triplet about the object at `(row, col)`.
///
/// The question names the relation (text side) and the object's size, color
/// and position (image side), so neither modality alone determines it.
pub fn ground_truth_question(scene: &Scene, row: usize, col: usize, triplet: &KnowledgeTriplet) -> Result<String> {
    if scene.cell(row, col).is_none() {
        return Err(Error::Input(format!("no object at ({row}, {col})")));
    }
    match triplet.masked_slot {
        MaskedSlot::Subject => Ok(subject_question(
            &scene.object_description(row, col).expect("occupied"),
            triplet.relation,
            &triplet.object,
        )),
        _ => Ok(object_question(triplet.relation, &scene.referring_expression(row, col).expect("occupied"))),
    }
}

fn facts_of(category: &str) -> impl Iterator<Item = &'static (&'static str, Relation, &'static str)> + '_ {
    KNOWLEDGE.iter().filter(move |(c, _, _)| *c == category)
}

/// Deterministic synthetic corpus of `n_scenes` scenes over the first
/// `ontology_size` categories.
pub fn generate_world(seed: u64, n_scenes: usize, ontology_size: usize) -> Result<Vec<Example>> {
    generate_world_with(seed, n_scenes, ontology_size, &WorldConfig::default())
}

pub fn generate_world_with(seed: u64, n_scenes: usize, ontology_size: usize, cfg: &WorldConfig) -> Result<Vec<Example>> {
    if n_scenes == 0 {
        return Err(Error::Config("need at least one scene".into()));
    }
    if ontology_size < 2 || ontology_size > CATEGORIES.len() {
        return Err(Error::Config(format!(
            "ontology size {ontology_size} cannot keep target categories unique (need 2..={})",
            CATEGORIES.len()
        )));
    }
    let cells = cfg.grid_size * cfg.grid_size;
    let distractor_pairs = (ontology_size - 1) * COLORS.len();
    if cfg.max_objects == 0 || cfg.max_objects > cells || cfg.max_objects > distractor_pairs + 1 {
        return Err(Error::Config(format!(
            "{} objects per scene do not fit a {g}x{g} grid with {ontology_size} categories",
            cfg.max_objects,
            g = cfg.grid_size
        )));
    }
    if cfg.questions_per_scene == 0 {
        return Err(Error::Config("questions_per_scene must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, n_val, _) = split_sizes(n_scenes);
    let mut examples = Vec::with_capacity(n_scenes * cfg.questions_per_scene);
    for s in 0..n_scenes {
        let split = if s < n_train {
            Split::Train
        } else if s < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let scene_id = format!("s{s:05}");
        let scene = sample_scene(&mut rng, &scene_id, ontology_size, cfg)?;
        let mut used = HashSet::new();
        for q in 0..cfg.questions_per_scene {
            let Some(ex) = sample_question(&mut rng, &scene, q, cfg, &mut used)? else { break };
            examples.push(Example { split, ..ex });
        }
    }
    Ok(examples)
}

fn sample_scene(rng: &mut ChaCha8Rng, scene_id: &str, ontology_size: usize, cfg: &WorldConfig) -> Result<Scene> {
    let k = rng.random_range(1..=cfg.max_objects);
    let mut cells: Vec<usize> = (0..cfg.grid_size * cfg.grid_size).collect();
    cells.shuffle(rng);
    let target = rng.random_range(0..ontology_size);
    let mut pairs = HashSet::new();
    let mut objects = Vec::with_capacity(k);
    for (j, &cell) in cells.iter().take(k).enumerate() {
        let obj = loop {
            let category = if j == 0 {
                target
            } else {
                let c = rng.random_range(0..ontology_size - 1);
                if c >= target {
                    c + 1
                } else {
                    c
                }
            };
            let color = rng.random_range(0..COLORS.len());
            if pairs.insert((category, color)) {
                break SceneObject { category, color, size: rng.random_range(0..SIZES.len()) };
            }
        };
        objects.push((cell / cfg.grid_size, cell % cfg.grid_size, obj));
    }
    Scene::new(scene_id, cfg.grid_size, &objects)
}

fn sample_question(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    q: usize,
    cfg: &WorldConfig,
    used: &mut HashSet<(String, Relation)>,
) -> Result<Option<Example>> {
    let objects: Vec<(usize, usize, SceneObject)> = scene.objects().map(|(r, c, o)| (r, c, *o)).collect();
    let unique: Vec<&(usize, usize, SceneObject)> = objects
        .iter()
        .filter(|(_, _, o)| objects.iter().filter(|(_, _, p)| p.category == o.category).count() == 1)
        .collect();
    let present: HashSet<&str> = objects.iter().map(|(_, _, o)| o.category_name()).collect();

    // candidate (object, fact) pairs not asked yet in this scene
    let mut candidates = Vec::new();
    for &&(row, col, obj) in &unique {
        for fact in facts_of(obj.category_name()) {
            if !used.contains(&(fact.0.to_string(), fact.1)) {
                candidates.push((row, col, fact));
            }
        }
    }
    if candidates.is_empty() {
        return Ok(None);
    }
    let &(row, col, &(subject, relation, object)) = candidates.choose(rng).expect("non-empty");
    used.insert((subject.to_string(), relation));

    // masking the subject is only well-posed when no other present category shares the fact
    let ambiguous = KNOWLEDGE
        .iter()
        .any(|(c, r, o)| *c != subject && *r == relation && *o == object && present.contains(c));
    let slot = if !ambiguous && rng.random_bool(cfg.subject_mask_rate) { MaskedSlot::Subject } else { MaskedSlot::Object };
    let triplet = KnowledgeTriplet::new(subject, relation, object, slot);
    let answer = triplet.masked_entity().expect("masked").to_string();
    let question = ground_truth_question(scene, row, col, &triplet)?;
    let constraint = match cfg.constraint {
        WorldConstraint::Triplet => Constraint::Triplet(triplet),
        WorldConstraint::Answer => Constraint::Answer(answer.clone()),
    };
    Ok(Some(Example {
        id: format!("{}-q{q}", scene.scene_id),
        visual: Visual::Scene(scene.clone()),
        question,
        answer: Some(answer),
        constraint,
        split: Split::Train,
    }))
}

// ---------------------------------------------------------------------------
// JSONL records

/// Record layout of one of the supported source datasets.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Knowledge triplet constraints with the answer masked.
    Kvqg,
    /// Answer constraints.
    Vqa,
    /// Caption constraints, one example per caption.
    VqgCoco,
    /// Fact-sentence constraints.
    Fvqa,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kvqg" | "k-vqg" => Ok(DatasetFormat::Kvqg),
            "vqa" => Ok(DatasetFormat::Vqa),
            "vqgcoco" | "vqg-coco" => Ok(DatasetFormat::VqgCoco),
            "fvqa" => Ok(DatasetFormat::Fvqa),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

impl DatasetFormat {
    pub fn for_constraint(c: &Constraint) -> Self {
        match c {
            Constraint::Triplet(_) => DatasetFormat::Kvqg,
            Constraint::Answer(_) => DatasetFormat::Vqa,
            Constraint::Caption(_) => DatasetFormat::VqgCoco,
            Constraint::Fact(_) => DatasetFormat::Fvqa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub row: usize,
    pub col: usize,
    pub category: String,
    pub color: String,
    pub size: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub grid_size: usize,
    pub objects: Vec<ObjectRecord>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            scene_id: s.scene_id.clone(),
            grid_size: s.grid_size,
            objects: s
                .objects()
                .map(|(row, col, o)| ObjectRecord {
                    row,
                    col,
                    category: o.category_name().into(),
                    color: o.color_name().into(),
                    size: o.size_name().into(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&SceneRecord> for Scene {
    type Error = Error;

    fn try_from(r: &SceneRecord) -> Result<Self> {
        let objects = r
            .objects
            .iter()
            .map(|o| {
                Ok((
                    o.row,
                    o.col,
                    SceneObject {
                        category: index_of(&CATEGORIES, &o.category, "category")?,
                        color: index_of(&COLORS, &o.color, "color")?,
                        size: index_of(&SIZES, &o.size, "size")?,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(r.scene_id.clone(), r.grid_size, &objects)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_slot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<String>,
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f32>>>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub constraint: ConstraintRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl From<&Example> for Record {
    fn from(ex: &Example) -> Self {
        let (scene, features) = match &ex.visual {
            Visual::Scene(s) => (Some(SceneRecord::from(s)), None),
            Visual::Features(f) => (None, Some(f.clone())),
        };
        let constraint = match &ex.constraint {
            Constraint::Triplet(t) => ConstraintRecord {
                kind: "triplet".into(),
                triplet: Some(vec![t.subject.clone(), t.relation.name().into(), t.object.clone()]),
                masked_slot: Some(t.masked_slot.as_str().into()),
                ..Default::default()
            },
            Constraint::Answer(a) => {
                ConstraintRecord { kind: "answer".into(), answer: Some(a.clone()), ..Default::default() }
            }
            Constraint::Caption(c) => {
                ConstraintRecord { kind: "caption".into(), caption: Some(c.clone()), ..Default::default() }
            }
            Constraint::Fact(f) => ConstraintRecord { kind: "fact".into(), fact: Some(f.clone()), ..Default::default() },
        };
        Record {
            id: ex.id.clone(),
            scene,
            features,
            question: ex.question.clone(),
            answer: ex.answer.clone(),
            constraint,
            split: Some(ex.split.as_str().into()),
        }
    }
}

fn is_mask(s: &str) -> bool {
    let t = s.trim();
    t.eq_ignore_ascii_case(MASK_TOKEN) || t.eq_ignore_ascii_case("mask")
}

fn triplet_from_record(r: &Record, c: &ConstraintRecord) -> std::result::Result<KnowledgeTriplet, String> {
    let parts = c.triplet.as_ref().ok_or("kvqg record without a triplet")?;
    let [subject, relation, object] = parts.as_slice() else {
        return Err(format!("triplet needs 3 entries, got {}", parts.len()));
    };
    let relation: Relation = relation.parse().map_err(|e: Error| e.to_string())?;
    let answer = r.answer.as_deref().or(c.answer.as_deref());
    let slot = match &c.masked_slot {
        Some(s) => s.parse().map_err(|e: Error| e.to_string())?,
        None if is_mask(subject) => MaskedSlot::Subject,
        None if is_mask(object) => MaskedSlot::Object,
        None => match answer {
            Some(a) if a.trim().eq_ignore_ascii_case(object.trim()) => MaskedSlot::Object,
            Some(a) if a.trim().eq_ignore_ascii_case(subject.trim()) => MaskedSlot::Subject,
            _ => MaskedSlot::None,
        },
    };
    // a literal mask token in the masked slot is replaced by the answer when it is known
    let fill = |s: &String| if is_mask(s) { answer.map_or_else(|| MASK_TOKEN.to_string(), str::to_string) } else { s.clone() };
    Ok(KnowledgeTriplet { subject: fill(subject), relation, object: fill(object), masked_slot: slot })
}

/// Maps one parsed record to examples under `format`.
pub fn record_to_examples(r: &Record, format: DatasetFormat) -> std::result::Result<Vec<Example>, String> {
    if r.question.trim().is_empty() {
        return Err("empty question".into());
    }
    let visual = match (&r.scene, &r.features) {
        (Some(s), _) => Visual::Scene(Scene::try_from(s).map_err(|e| e.to_string())?),
        (None, Some(f)) => {
            if f.is_empty() || f.iter().any(|row| row.len() != f[0].len() || row.is_empty()) {
                return Err("features must be a non-empty rectangular matrix".into());
            }
            Visual::Features(f.clone())
        }
        (None, None) => return Err("record has neither scene nor features".into()),
    };
    let split = match &r.split {
        Some(s) => s.parse().map_err(|e: Error| e.to_string())?,
        None if format == DatasetFormat::Fvqa => Split::Test,
        None => Split::Train,
    };
    let c = &r.constraint;
    let constraints: Vec<Constraint> = match format {
        DatasetFormat::Kvqg => vec![Constraint::Triplet(triplet_from_record(r, c)?)],
        DatasetFormat::Vqa => {
            let a = r.answer.as_ref().or(c.answer.as_ref()).ok_or("vqa record without an answer")?;
            vec![Constraint::Answer(a.clone())]
        }
        DatasetFormat::VqgCoco => {
            let caps: Vec<String> = match (&c.captions, &c.caption) {
                (Some(list), _) if !list.is_empty() => list.clone(),
                (_, Some(one)) => vec![one.clone()],
                _ => return Err("vqgcoco record without captions".into()),
            };
            caps.into_iter().map(Constraint::Caption).collect()
        }
        DatasetFormat::Fvqa => vec![Constraint::Fact(c.fact.clone().ok_or("fvqa record without a fact")?)],
    };
    let many = constraints.len() > 1;
    Ok(constraints
        .into_iter()
        .enumerate()
        .map(|(k, constraint)| Example {
            id: if many { format!("{}#{k}", r.id) } else { r.id.clone() },
            visual: visual.clone(),
            question: r.question.clone(),
            answer: r.answer.clone(),
            constraint,
            split,
        })
        .collect())
}

pub fn parse_jsonl(reader: impl BufRead, format: DatasetFormat) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::record(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::record(lineno, e.to_string()))?;
        out.extend(record_to_examples(&rec, format).map_err(|m| Error::record(lineno, m))?);
    }
    Ok(out)
}

pub fn ingest_jsonl(path: impl AsRef<Path>, format: &str) -> Result<Vec<Example>> {
    let format: DatasetFormat = format.parse()?;
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), format)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(&Record::from(ex)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
