//! Multiple-choice question answering over CCA-embedded network features.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cca::{fit_cca, CcaModel, DEFAULT_DIM, DEFAULT_POWER, DEFAULT_REG_GRID};
use crate::data::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::layers::Roi;
use crate::metrics::choice_accuracy;
use crate::model::Network;
use crate::tensor::Tensor;

pub const WORD_DIM: usize = 300;
pub const TEST_CHOICES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QType {
    Activity,
    Relationship,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
    FilteredHard,
}

mod roi_serde {
    use super::Roi;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    fn arr(r: &Roi) -> [f64; 4] {
        [r.x0, r.y0, r.x1, r.y1]
    }

    fn roi(a: [f64; 4]) -> Roi {
        Roi::new(a[0], a[1], a[2], a[3])
    }

    pub mod list {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[Roi], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(arr).collect::<Vec<_>>().serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Roi>, D::Error> {
            Ok(Vec::<[f64; 4]>::deserialize(d)?
                .into_iter()
                .map(roi)
                .collect())
        }
    }

    pub mod opt {
        use super::*;
        pub fn serialize<S: Serializer>(v: &Option<Roi>, s: S) -> Result<S::Ok, S::Error> {
            v.as_ref().map(arr).serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Roi>, D::Error> {
            Ok(Option::<[f64; 4]>::deserialize(d)?.map(roi))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub image_id: String,
    pub qtype: QType,
    #[serde(with = "roi_serde::list")]
    pub target_person_boxes: Vec<Roi>,
    /// Carried through but never used for features.
    #[serde(default, with = "roi_serde::opt")]
    pub target_object_box: Option<Roi>,
    pub choices: Vec<String>,
    pub correct: usize,
    pub difficulty: Difficulty,
}

impl Question {
    pub fn validate(&self, test: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("question {}: {m}", self.id)));
        if self.target_person_boxes.is_empty() {
            return bad("no target person box".into());
        }
        if self.choices.is_empty() || self.correct >= self.choices.len() {
            return bad(format!(
                "correct index {} of {} choices",
                self.correct,
                self.choices.len()
            ));
        }
        if test && self.choices.len() != TEST_CHOICES {
            return bad(format!(
                "test questions need {TEST_CHOICES} choices, got {}",
                self.choices.len()
            ));
        }
        Ok(())
    }

    pub fn answer_text(&self) -> &str {
        &self.choices[self.correct]
    }
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let qs: Vec<Question> = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Validation(format!("question file: {e}")))?;
    for q in &qs {
        q.validate(false)?;
    }
    Ok(qs)
}

pub fn save_questions(path: impl AsRef<Path>, qs: &[Question]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(qs)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// text side

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Unknown tokens are zero vectors that still count in the mean.
    #[default]
    Zero,
    /// Unknown tokens are dropped before averaging.
    Skip,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordVecTable {
    vectors: HashMap<String, Vec<f64>>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl WordVecTable {
    pub fn insert(&mut self, token: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != WORD_DIM {
            return Err(Error::Validation(format!(
                "vector for {token:?} has {} dims, expected {WORD_DIM}",
                v.len()
            )));
        }
        self.vectors.insert(token.to_lowercase(), v);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Deterministic Gaussian vectors (variance `1 / WORD_DIM`) for `tokens`.
    pub fn synthetic<'a>(tokens: impl IntoIterator<Item = &'a str>, seed: u64) -> Self {
        let scale = 1.0 / (WORD_DIM as f64).sqrt();
        let mut t = WordVecTable::default();
        for tok in tokens {
            let tok = tok.to_lowercase();
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&tok) ^ seed);
            let v = (0..WORD_DIM)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            t.vectors.insert(tok, v);
        }
        t
    }

    /// Parses lines of `token v1 ... v300`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = WordVecTable::default();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Validation(format!("word vectors line {}: {e}", i + 1)))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "word vectors line {}: non-finite value",
                    i + 1
                )));
            }
            t.insert(tok, v)
                .map_err(|e| Error::Validation(format!("word vectors line {}: {e}", i + 1)))?;
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sorted: BTreeMap<_, _> = self.vectors.iter().collect();
        for (tok, v) in sorted {
            s.push_str(tok);
            for x in v {
                let _ = write!(s, " {x:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Mean word vector of a choice.
pub fn embed_choice(choice: &str, table: &WordVecTable, oov: OovPolicy) -> Result<Vec<f64>> {
    let tokens = tokenize(choice);
    if tokens.is_empty() {
        return Err(Error::Validation(format!(
            "choice {choice:?} has no tokens"
        )));
    }
    let mut sum = vec![0.0; WORD_DIM];
    let mut count = 0usize;
    for t in &tokens {
        match table.get(t) {
            Some(v) => {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                count += 1;
            }
            None if oov == OovPolicy::Zero => count += 1,
            None => {}
        }
    }
    if count > 0 {
        sum.iter_mut().for_each(|s| *s /= count as f64);
    }
    Ok(sum)
}

// ---------------------------------------------------------------------------
// image side

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Classifier logits, before the sigmoid.
    #[default]
    ClsScore,
    /// Input of the classifier.
    Hidden,
}

/// Per network, the max over target people of each person's feature;
/// concatenated across networks in order.
pub fn image_feature(
    nets: &[Network],
    image: &Tensor,
    boxes: &[Roi],
    kind: FeatureKind,
) -> Result<Vec<f64>> {
    if nets.is_empty() {
        return Err(Error::Validation(
            "image_feature needs at least one network".into(),
        ));
    }
    let mut out = Vec::new();
    for net in nets {
        let f = net.forward(image, boxes)?;
        let rows: Vec<&[f64]> = match kind {
            FeatureKind::ClsScore => (0..f.scores.num_instances())
                .map(|i| f.scores.row(i))
                .collect(),
            FeatureKind::Hidden => f.hidden.iter().map(Tensor::data).collect(),
        };
        let mut m = rows[0].to_vec();
        for r in &rows[1..] {
            m.iter_mut().zip(*r).for_each(|(a, &b)| *a = a.max(b));
        }
        out.extend(m);
    }
    Ok(out)
}

pub struct ImageIndex<'a>(HashMap<&'a str, &'a Sample>);

impl<'a> ImageIndex<'a> {
    pub fn new(corpora: &[&'a Corpus]) -> Self {
        ImageIndex(
            corpora
                .iter()
                .flat_map(|c| c.samples.iter())
                .map(|s| (s.id.as_str(), s))
                .collect(),
        )
    }

    pub fn get(&self, id: &str) -> Result<&'a Sample> {
        self.0
            .get(id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown image id {id}")))
    }
}

pub fn question_feature(
    nets: &[Network],
    images: &ImageIndex,
    q: &Question,
    kind: FeatureKind,
) -> Result<Vec<f64>> {
    let s = images.get(&q.image_id)?;
    image_feature(nets, &s.image, &q.target_person_boxes, kind)
}

// ---------------------------------------------------------------------------
// fitting and answering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOptions {
    pub reg_grid: Vec<f64>,
    pub d_emb: usize,
    pub power: f64,
    pub kind: FeatureKind,
    pub oov: OovPolicy,
    /// Share of Easy training questions held out to pick the regularizer.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for QaOptions {
    fn default() -> Self {
        Self {
            reg_grid: DEFAULT_REG_GRID.to_vec(),
            d_emb: DEFAULT_DIM,
            power: DEFAULT_POWER,
            kind: FeatureKind::ClsScore,
            oov: OovPolicy::Zero,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// One training question reduced to vectors.
#[derive(Debug, Clone)]
pub struct QaItem {
    pub feature: Vec<f64>,
    pub answer: Vec<f64>,
    pub choices: Vec<Vec<f64>>,
    pub correct: usize,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone)]
pub struct QaFit {
    pub model: CcaModel,
    pub reg: f64,
    /// `(reg, validation accuracy)` per grid point.
    pub grid_scores: Vec<(f64, f64)>,
    pub val_accuracy: Option<f64>,
}

fn fit_items(items: &[&QaItem], reg: f64, opts: &QaOptions) -> Result<CcaModel> {
    let dx = items[0].feature.len();
    let x = Tensor::new(
        vec![items.len(), dx],
        items
            .iter()
            .flat_map(|i| i.feature.iter().cloned())
            .collect(),
    )?;
    let y = Tensor::new(
        vec![items.len(), WORD_DIM],
        items
            .iter()
            .flat_map(|i| i.answer.iter().cloned())
            .collect(),
    )?;
    let d = opts.d_emb.min(dx).min(WORD_DIM).min(items.len());
    Ok(fit_cca(&x, &y, reg, d)?.with_power(opts.power))
}

fn item_accuracy(model: &CcaModel, items: &[&QaItem]) -> Result<f64> {
    let answers = items
        .iter()
        .map(|i| Ok((model.rank_choices(&i.feature, &i.choices)?, i.correct)))
        .collect::<Result<Vec<_>>>()?;
    choice_accuracy(&answers)
}

/// Fits the joint space on `items`; with more than one regularizer the
/// choice is made on a held-out share of the Easy items, then the model is
/// refit on everything.
pub fn train_qa_from_items(items: &[QaItem], opts: &QaOptions) -> Result<QaFit> {
    if items.len() < 2 {
        return Err(Error::Validation(
            "QA training needs at least two pairs".into(),
        ));
    }
    if opts.reg_grid.is_empty() {
        return Err(Error::Config("empty regularization grid".into()));
    }
    let all: Vec<&QaItem> = items.iter().collect();
    if opts.reg_grid.len() == 1 {
        let reg = opts.reg_grid[0];
        return Ok(QaFit {
            model: fit_items(&all, reg, opts)?,
            reg,
            grid_scores: Vec::new(),
            val_accuracy: None,
        });
    }
    let mut easy: Vec<usize> = (0..items.len())
        .filter(|&i| items[i].difficulty == Difficulty::Easy && items[i].choices.len() > 1)
        .collect();
    easy.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_val = ((easy.len() as f64) * opts.val_fraction).round() as usize;
    if n_val == 0 || n_val >= items.len() - 1 {
        return Err(Error::Validation(
            "not enough Easy multiple-choice training questions to select the regularizer".into(),
        ));
    }
    let val_set: std::collections::HashSet<usize> = easy[..n_val].iter().copied().collect();
    let fit: Vec<&QaItem> = (0..items.len())
        .filter(|i| !val_set.contains(i))
        .map(|i| &items[i])
        .collect();
    let val: Vec<&QaItem> = easy[..n_val].iter().map(|&i| &items[i]).collect();
    let mut grid_scores = Vec::with_capacity(opts.reg_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &reg in &opts.reg_grid {
        let acc = item_accuracy(&fit_items(&fit, reg, opts)?, &val)?;
        grid_scores.push((reg, acc));
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((reg, acc));
        }
    }
    let (reg, acc) = best.expect("non-empty grid");
    Ok(QaFit {
        model: fit_items(&all, reg, opts)?,
        reg,
        grid_scores,
        val_accuracy: Some(acc),
    })
}

pub fn build_items(
    nets: &[Network],
    images: &ImageIndex,
    questions: &[Question],
    table: &WordVecTable,
    opts: &QaOptions,
) -> Result<Vec<QaItem>> {
    questions
        .iter()
        .map(|q| {
            q.validate(false)?;
            let choices = q
                .choices
                .iter()
                .map(|c| embed_choice(c, table, opts.oov))
                .collect::<Result<Vec<_>>>()?;
            Ok(QaItem {
                feature: question_feature(nets, images, q, opts.kind)?,
                answer: choices[q.correct].clone(),
                choices,
                correct: q.correct,
                difficulty: q.difficulty,
            })
        })
        .collect()
}

pub fn train_qa(
    nets: &[Network],
    images: &ImageIndex,
    questions: &[Question],
    table: &WordVecTable,
    opts: &QaOptions,
) -> Result<QaFit> {
    train_qa_from_items(&build_items(nets, images, questions, table, opts)?, opts)
}

pub fn answer(
    model: &CcaModel,
    nets: &[Network],
    images: &ImageIndex,
    q: &Question,
    table: &WordVecTable,
    opts: &QaOptions,
) -> Result<usize> {
    let f = question_feature(nets, images, q, opts.kind)?;
    let choices = q
        .choices
        .iter()
        .map(|c| embed_choice(c, table, opts.oov))
        .collect::<Result<Vec<_>>>()?;
    model.rank_choices(&f, &choices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub question: String,
    pub predicted: usize,
    pub correct: usize,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub accuracy: f64,
    pub per_difficulty: BTreeMap<String, f64>,
    pub rows: Vec<AnswerRow>,
}

impl QaReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("question,predicted,correct\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.question, r.predicted, r.correct);
        }
        s
    }
}

pub fn evaluate_qa(
    model: &CcaModel,
    nets: &[Network],
    images: &ImageIndex,
    questions: &[Question],
    table: &WordVecTable,
    opts: &QaOptions,
) -> Result<QaReport> {
    let rows = questions
        .iter()
        .map(|q| {
            Ok(AnswerRow {
                question: q.id.clone(),
                predicted: answer(model, nets, images, q, table, opts)?,
                correct: q.correct,
                difficulty: q.difficulty,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report(rows)
}

fn report(rows: Vec<AnswerRow>) -> Result<QaReport> {
    let pairs = |f: &dyn Fn(&AnswerRow) -> bool| -> Vec<(usize, usize)> {
        rows.iter()
            .filter(|r| f(r))
            .map(|r| (r.predicted, r.correct))
            .collect()
    };
    let mut per_difficulty = BTreeMap::new();
    for d in [Difficulty::Easy, Difficulty::Hard, Difficulty::FilteredHard] {
        let p = pairs(&|r| r.difficulty == d);
        if !p.is_empty() {
            per_difficulty.insert(format!("{d:?}"), choice_accuracy(&p)?);
        }
    }
    Ok(QaReport {
        accuracy: choice_accuracy(&pairs(&|_| true))?,
        per_difficulty,
        rows,
    })
}

// ---------------------------------------------------------------------------
// synthetic questions

/// Answer phrase of a `verb_object` class name, e.g. `riding the horse`.
pub fn answer_phrase(class: &str) -> String {
    let (verb, object) = class.split_once('_').unwrap_or((class, "thing"));
    let gerund = match verb {
        "ride" => "riding".to_string(),
        "hold" => "holding".to_string(),
        v if v.ends_with('e') => format!("{}ing", &v[..v.len() - 1]),
        v => format!("{v}ing"),
    };
    format!("{gerund} the {}", object.replace('_', " "))
}

/// Every token the synthetic answers of `classes` use.
pub fn answer_vocabulary(classes: &[String]) -> Vec<String> {
    let mut v: Vec<String> = classes
        .iter()
        .flat_map(|c| tokenize(&answer_phrase(c)))
        .collect();
    v.sort();
    v.dedup();
    v
}

fn shared_words(a: &str, b: &str) -> usize {
    let (a, b) = (tokenize(a), tokenize(b));
    a.iter().filter(|t| *t != "the" && b.contains(t)).count()
}

/// Questions about the people of `corpus`, one per person group (people
/// doing the same thing are asked about together), up to `n`.
///
/// Easy distractors share no content word with the answer; Hard ones
/// share exactly one.
pub fn synth_questions(
    corpus: &Corpus,
    n: usize,
    choices: usize,
    difficulty: Difficulty,
    seed: u64,
) -> Result<Vec<Question>> {
    if choices == 0 {
        return Err(Error::Config("questions need at least one choice".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrases: Vec<String> = corpus.classes.iter().map(|c| answer_phrase(c)).collect();
    let mut out = Vec::with_capacity(n);
    'outer: for s in &corpus.samples {
        let Some(truth) = s.person_labels() else {
            return Err(Error::Validation(format!(
                "sample {} has no per-person labels",
                s.id
            )));
        };
        let mut groups: BTreeMap<usize, Vec<Roi>> = BTreeMap::new();
        for (b, row) in s.boxes.iter().zip(truth) {
            if let Some(c) = row.iter().position(|&v| v == 1) {
                groups.entry(c).or_default().push(*b);
            }
        }
        for (class, boxes) in groups {
            if out.len() == n {
                break 'outer;
            }
            let answer = &phrases[class];
            let wanted = if difficulty == Difficulty::Easy { 0 } else { 1 };
            let mut near: Vec<&String> = phrases
                .iter()
                .filter(|p| *p != answer && shared_words(p, answer) == wanted)
                .collect();
            let mut rest: Vec<&String> = phrases
                .iter()
                .filter(|p| *p != answer && !near.contains(p))
                .collect();
            near.shuffle(&mut rng);
            rest.shuffle(&mut rng);
            let distractors: Vec<&String> =
                near.into_iter().chain(rest).take(choices - 1).collect();
            if distractors.len() + 1 < choices {
                return Err(Error::Config(format!(
                    "{} classes cannot fill {choices} choices",
                    phrases.len()
                )));
            }
            let correct = rng.random_range(0..choices);
            let mut list: Vec<String> = distractors.into_iter().cloned().collect();
            list.insert(correct, answer.clone());
            let qtype = if rng.random::<bool>() {
                QType::Activity
            } else {
                QType::Relationship
            };
            out.push(Question {
                id: format!("q{:05}", out.len()),
                image_id: s.id.clone(),
                qtype,
                target_person_boxes: boxes,
                target_object_box: (qtype == QType::Relationship)
                    .then(|| Roi::full(s.width(), s.height())),
                choices: list,
                correct,
                difficulty,
            });
        }
    }
    if out.len() < n {
        return Err(Error::Validation(format!(
            "corpus yields {} questions, {n} requested",
            out.len()
        )));
    }
    Ok(out)
}
