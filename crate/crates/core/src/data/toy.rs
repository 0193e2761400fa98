use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Instance};

/// Question families of the synthetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    /// Shape of the object with a given color.
    Attribute,
    /// Color of the object next to a referent in a given direction.
    Relational,
    /// Whether an object with a given color and shape exists.
    Existence,
    /// Number of objects with a given shape.
    Counting,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Attribute,
        Template::Relational,
        Template::Existence,
        Template::Counting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::Attribute => "attribute",
            Template::Relational => "relational",
            Template::Existence => "existence",
            Template::Counting => "counting",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DataError::InconsistentSpec(format!("unknown template `{s}`")))
    }
}

/// Grid directions. Row 0 is the top row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Above,
    Below,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Above,
        Direction::Below,
        Direction::Left,
        Direction::Right,
    ];

    fn offset(self) -> (isize, isize) {
        match self {
            Direction::Above => (-1, 0),
            Direction::Below => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub row: usize,
    pub col: usize,
}

/// Objects in region order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    fn by_color(&self, color: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.color == color)
    }

    fn at(&self, row: isize, col: isize) -> Option<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.row as isize == row && o.col as isize == col)
    }

    /// Object in the adjacent cell in direction `dir`, if any.
    pub fn neighbor(&self, of: &SceneObject, dir: Direction) -> Option<&SceneObject> {
        let (dr, dc) = dir.offset();
        self.at(of.row as isize + dr, of.col as isize + dc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Question {
    Attribute {
        color: usize,
    },
    Relational {
        dir: Direction,
        color: usize,
        shape: usize,
    },
    Existence {
        color: usize,
        shape: usize,
    },
    Counting {
        shape: usize,
    },
}

impl Question {
    pub fn template(&self) -> Template {
        match self {
            Question::Attribute { .. } => Template::Attribute,
            Question::Relational { .. } => Template::Relational,
            Question::Existence { .. } => Template::Existence,
            Question::Counting { .. } => Template::Counting,
        }
    }
}

/// Generating scene and question of one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub scene: Scene,
    pub question: Question,
}

/// Parameters of the synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub n_regions: usize,
    pub grid_size: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    pub max_count: usize,
    pub token_len: usize,
    pub region_dim: usize,
    pub word_dim: usize,
    pub noise_std: f64,
    pub templates: Vec<Template>,
    /// Head size to reserve; `None` uses exactly the answer vocabulary.
    pub n_answers: Option<usize>,
    pub seed: u64,
    /// Seed of the frozen token codebook, shared by every dataset built
    /// from the same vocabulary.
    pub codebook_seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            n_regions: 12,
            grid_size: 6,
            n_colors: 12,
            n_shapes: 4,
            max_count: 4,
            token_len: 6,
            region_dim: 64,
            word_dim: 32,
            noise_std: 0.0,
            templates: Template::ALL.to_vec(),
            n_answers: None,
            seed: 0,
            codebook_seed: 7,
        }
    }
}

const PAD: usize = 0;
const ASK: [usize; 4] = [1, 2, 3, 4];
const DIR_BASE: usize = 5;
const COLOR_BASE: usize = 9;
const QUESTION_LEN: usize = 4;

impl ToyTaskSpec {
    pub fn vocab_size(&self) -> usize {
        COLOR_BASE + self.n_colors + self.n_shapes
    }

    /// Colors, then shapes, then no/yes, then counts `0..=max_count`.
    pub fn answer_vocab_size(&self) -> usize {
        self.n_colors + self.n_shapes + 2 + self.max_count + 1
    }

    pub fn n_answers(&self) -> usize {
        self.n_answers.unwrap_or_else(|| self.answer_vocab_size())
    }

    fn color_answer(&self, c: usize) -> usize {
        c
    }

    fn shape_answer(&self, s: usize) -> usize {
        self.n_colors + s
    }

    fn bool_answer(&self, b: bool) -> usize {
        self.n_colors + self.n_shapes + usize::from(b)
    }

    fn count_answer(&self, k: usize) -> usize {
        self.n_colors + self.n_shapes + 2 + k
    }

    /// Human-readable name of an answer index.
    pub fn answer_label(&self, a: usize) -> String {
        let (c, s) = (self.n_colors, self.n_shapes);
        match a {
            a if a < c => format!("color_{a}"),
            a if a < c + s => format!("shape_{}", a - c),
            a if a == c + s => "no".into(),
            a if a == c + s + 1 => "yes".into(),
            a if a < self.answer_vocab_size() => format!("count_{}", a - c - s - 2),
            a => format!("unused_{a}"),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InconsistentSpec(m));
        let cells = self.grid_size * self.grid_size;
        if self.n_regions == 0 || self.n_shapes == 0 {
            return bad("n_regions and n_shapes must be positive".into());
        }
        if self.n_regions > cells {
            return bad(format!(
                "{} regions do not fit a {g}x{g} grid",
                self.n_regions,
                g = self.grid_size
            ));
        }
        if self.n_colors < self.n_regions {
            return bad(format!(
                "n_colors ({}) must be at least n_regions ({}) so colors identify objects",
                self.n_colors, self.n_regions
            ));
        }
        let needed = self.n_colors + self.n_shapes + 2 * self.grid_size;
        if self.region_dim < needed {
            return bad(format!(
                "region_dim {} below the {needed} one-hot channels",
                self.region_dim
            ));
        }
        if self.token_len < QUESTION_LEN {
            return bad(format!(
                "token_len {} below the longest question ({QUESTION_LEN})",
                self.token_len
            ));
        }
        if self.word_dim == 0 {
            return bad("word_dim must be positive".into());
        }
        if self.max_count > self.n_regions {
            return bad(format!(
                "max_count {} exceeds n_regions {}",
                self.max_count, self.n_regions
            ));
        }
        if self.templates.is_empty() {
            return bad("no templates selected".into());
        }
        if self.templates.contains(&Template::Relational) && self.grid_size < 2 {
            return bad("relational questions need a grid of at least 2x2".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!(
                "noise_std {} must be finite and nonnegative",
                self.noise_std
            ));
        }
        if self.n_answers() < self.answer_vocab_size() {
            return bad(format!(
                "answer vocabulary needs {} entries, the task allows {}",
                self.answer_vocab_size(),
                self.n_answers()
            ));
        }
        Ok(())
    }

    /// Frozen token embeddings, one row of `word_dim` per vocabulary symbol.
    pub fn codebook(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.codebook_seed);
        (0..self.vocab_size())
            .map(|_| {
                (0..self.word_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                    .collect()
            })
            .collect()
    }

    /// Padded token ids of a question.
    pub fn tokens(&self, q: &Question) -> Vec<usize> {
        let color = |c: usize| COLOR_BASE + c;
        let shape = |s: usize| COLOR_BASE + self.n_colors + s;
        let mut t = match *q {
            Question::Attribute { color: c } => vec![ASK[1], color(c)],
            Question::Relational {
                dir,
                color: c,
                shape: s,
            } => {
                vec![ASK[0], DIR_BASE + dir as usize, color(c), shape(s)]
            }
            Question::Existence { color: c, shape: s } => vec![ASK[2], color(c), shape(s)],
            Question::Counting { shape: s } => vec![ASK[3], shape(s)],
        };
        t.resize(self.token_len, PAD);
        t.truncate(self.token_len);
        t
    }

    /// The symbolic answer to `q` on `scene`.
    pub fn oracle(&self, scene: &Scene, q: &Question) -> Result<usize, DataError> {
        let missing =
            || DataError::InconsistentSpec(format!("question {q:?} has no answer on this scene"));
        Ok(match *q {
            Question::Attribute { color } => {
                self.shape_answer(scene.by_color(color).ok_or_else(missing)?.shape)
            }
            Question::Relational { dir, color, shape } => {
                let referent = scene
                    .by_color(color)
                    .filter(|o| o.shape == shape)
                    .ok_or_else(missing)?;
                self.color_answer(scene.neighbor(referent, dir).ok_or_else(missing)?.color)
            }
            Question::Existence { color, shape } => self.bool_answer(
                scene
                    .objects
                    .iter()
                    .any(|o| o.color == color && o.shape == shape),
            ),
            Question::Counting { shape } => {
                let k = scene.objects.iter().filter(|o| o.shape == shape).count();
                if k > self.max_count {
                    return Err(missing());
                }
                self.count_answer(k)
            }
        })
    }

    fn sample_scene<R: Rng>(&self, rng: &mut R) -> Scene {
        let cells = self.grid_size * self.grid_size;
        let mut cell_ids: Vec<usize> = (0..cells).collect();
        cell_ids.shuffle(rng);
        let mut colors: Vec<usize> = (0..self.n_colors).collect();
        colors.shuffle(rng);
        let objects = (0..self.n_regions)
            .map(|i| SceneObject {
                color: colors[i],
                shape: rng.random_range(0..self.n_shapes),
                row: cell_ids[i] / self.grid_size,
                col: cell_ids[i] % self.grid_size,
            })
            .collect();
        Scene { objects }
    }

    fn sample_question<R: Rng>(
        &self,
        template: Template,
        scene: &mut Scene,
        rng: &mut R,
    ) -> Question {
        match template {
            Template::Attribute => Question::Attribute {
                color: scene.objects.choose(rng).unwrap().color,
            },
            Template::Relational => loop {
                let current: &Scene = scene;
                let pairs: Vec<(usize, Direction)> = current
                    .objects
                    .iter()
                    .enumerate()
                    .flat_map(|(i, o)| {
                        Direction::ALL
                            .into_iter()
                            .filter(move |&d| current.neighbor(o, d).is_some())
                            .map(move |d| (i, d))
                    })
                    .collect();
                if let Some(&(i, dir)) = pairs.choose(rng) {
                    let o = current.objects[i];
                    break Question::Relational {
                        dir,
                        color: o.color,
                        shape: o.shape,
                    };
                }
                *scene = self.sample_scene(rng);
            },
            Template::Existence => {
                let o = *scene.objects.choose(rng).unwrap();
                if rng.random_bool(0.5) || self.n_shapes == 1 {
                    Question::Existence {
                        color: o.color,
                        shape: o.shape,
                    }
                } else {
                    let other = (o.shape + rng.random_range(1..self.n_shapes)) % self.n_shapes;
                    Question::Existence {
                        color: o.color,
                        shape: other,
                    }
                }
            }
            Template::Counting => {
                // Rewrite shapes so that the asked shape occurs exactly k times.
                let k = rng.random_range(0..=self.max_count);
                let shape = rng.random_range(0..self.n_shapes);
                let mut order: Vec<usize> = (0..scene.objects.len()).collect();
                order.shuffle(rng);
                for (rank, &i) in order.iter().enumerate() {
                    let o = &mut scene.objects[i];
                    if rank < k {
                        o.shape = shape;
                    } else if o.shape == shape {
                        o.shape = if self.n_shapes == 1 {
                            shape
                        } else {
                            (shape + rng.random_range(1..self.n_shapes)) % self.n_shapes
                        };
                    }
                }
                Question::Counting { shape }
            }
        }
    }

    fn region_features<R: Rng>(&self, scene: &Scene, rng: &mut R) -> Vec<f64> {
        let d = self.region_dim;
        let mut out = vec![0.0; scene.objects.len() * d];
        for (row, o) in out.chunks_mut(d).zip(&scene.objects) {
            row[o.color] = 1.0;
            row[self.n_colors + o.shape] = 1.0;
            let grid = self.n_colors + self.n_shapes;
            row[grid + o.row] = 1.0;
            row[grid + self.grid_size + o.col] = 1.0;
        }
        if self.noise_std > 0.0 {
            for x in &mut out {
                let z: f64 = StandardNormal.sample(rng);
                *x += self.noise_std * z;
            }
        }
        out
    }

    /// Builds one instance from a scene and question, embedding tokens with
    /// `codebook`.
    pub fn build_instance<R: Rng>(
        &self,
        scene: Scene,
        question: Question,
        codebook: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<Instance, DataError> {
        let answer = self.oracle(&scene, &question)?;
        let regions = self.region_features(&scene, rng);
        let words = self
            .tokens(&question)
            .into_iter()
            .flat_map(|t| codebook[t].iter().copied())
            .collect();
        Ok(Instance {
            regions,
            words,
            answer,
            template: Some(question.template()),
            meta: Some(InstanceMeta { scene, question }),
        })
    }
}

/// `n` instances, templates drawn uniformly from `spec.templates`.
/// Deterministic given `spec.seed`.
pub fn generate_toy_dataset(spec: &ToyTaskSpec, n: usize) -> Result<Dataset, DataError> {
    spec.validate()?;
    let codebook = spec.codebook();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let instances = (0..n)
        .map(|_| {
            let template = *spec.templates.choose(&mut rng).unwrap();
            let mut scene = spec.sample_scene(&mut rng);
            let question = spec.sample_question(template, &mut scene, &mut rng);
            spec.build_instance(scene, question, &codebook, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        n_regions: spec.n_regions,
        token_len: spec.token_len,
        region_dim: spec.region_dim,
        word_dim: spec.word_dim,
        n_answers: spec.n_answers(),
        instances,
    })
}
