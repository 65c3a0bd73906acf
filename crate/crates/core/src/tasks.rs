//! Synthetic task families, their exact-match checker, and the dispatch
//! classification dataset.
//!
//! Training families:
//! - `mod10-add` (math): `37+45=` → `2`, the last digit of the sum.
//! - `token-reverse` (code): `abcd→` → `dcba`.
//! - `parity-choice` (reasoning): `37+45?` → `A` if the sum is even, else `B`.
//!
//! Each has a harder unseen sibling built from the same skill:
//! `mod10-add-3op` (`a+b+c=`), `token-reverse-6` (six letters) and
//! `majority-choice` (`a+b+c?` → `A` if at least two operands are even).

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::model::vocab::{self, Token, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mod10Add,
    TokenReverse,
    ParityChoice,
    #[serde(rename = "mod10-add-3op")]
    Mod10Add3Op,
    #[serde(rename = "token-reverse-6")]
    TokenReverse6,
    MajorityChoice,
}

impl Family {
    pub const TRAINING: [Family; 3] = [Family::Mod10Add, Family::TokenReverse, Family::ParityChoice];
    pub const UNSEEN: [Family; 3] = [
        Family::Mod10Add3Op,
        Family::TokenReverse6,
        Family::MajorityChoice,
    ];
    pub const ALL: [Family; 6] = [
        Family::Mod10Add,
        Family::TokenReverse,
        Family::ParityChoice,
        Family::Mod10Add3Op,
        Family::TokenReverse6,
        Family::MajorityChoice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mod10Add => "mod10-add",
            Family::TokenReverse => "token-reverse",
            Family::ParityChoice => "parity-choice",
            Family::Mod10Add3Op => "mod10-add-3op",
            Family::TokenReverse6 => "token-reverse-6",
            Family::MajorityChoice => "majority-choice",
        }
    }

    pub fn category(self) -> Category {
        match self {
            Family::Mod10Add | Family::Mod10Add3Op => Category::Math,
            Family::TokenReverse | Family::TokenReverse6 => Category::Code,
            Family::ParityChoice | Family::MajorityChoice => Category::Reasoning,
        }
    }

    pub fn is_unseen(self) -> bool {
        Family::UNSEEN.contains(&self)
    }

    /// The training family an unseen family is derived from (itself for
    /// training families).
    pub fn training_sibling(self) -> Family {
        match self {
            Family::Mod10Add3Op => Family::Mod10Add,
            Family::TokenReverse6 => Family::TokenReverse,
            Family::MajorityChoice => Family::ParityChoice,
            f => f,
        }
    }

    /// Answer length in tokens, excluding the end-of-answer token.
    pub fn answer_len(self) -> usize {
        match self {
            Family::TokenReverse => 4,
            Family::TokenReverse6 => 6,
            _ => 1,
        }
    }

    /// Generation budget: the answer plus its end token.
    pub fn max_new_tokens(self) -> usize {
        self.answer_len() + 1
    }

    /// One random `(prompt, reference)` pair.
    fn sample(self, rng: &mut SeededRng) -> (Vec<Token>, Vec<Token>) {
        let mut prompt = Vec::new();
        match self {
            Family::Mod10Add | Family::Mod10Add3Op => {
                let ops = if self == Family::Mod10Add { 2 } else { 3 };
                let mut total = 0;
                for i in 0..ops {
                    if i > 0 {
                        prompt.push(vocab::PLUS);
                    }
                    let n = rng.below(100) as u32;
                    total += n;
                    push_number(&mut prompt, n);
                }
                prompt.push(vocab::EQUALS);
                (prompt, vec![vocab::digit(total % 10)])
            }
            Family::TokenReverse | Family::TokenReverse6 => {
                let n = self.answer_len();
                for _ in 0..n {
                    prompt.push(vocab::letter(rng.below(8) as u32));
                }
                let mut reference = prompt.clone();
                reference.reverse();
                prompt.push(vocab::ARROW);
                (prompt, reference)
            }
            Family::ParityChoice | Family::MajorityChoice => {
                let ops = if self == Family::ParityChoice { 2 } else { 3 };
                let mut operands = Vec::with_capacity(ops);
                for i in 0..ops {
                    if i > 0 {
                        prompt.push(vocab::PLUS);
                    }
                    let n = rng.below(100) as u32;
                    operands.push(n);
                    push_number(&mut prompt, n);
                }
                prompt.push(vocab::QUERY);
                let choose_a = if self == Family::ParityChoice {
                    operands.iter().sum::<u32>() % 2 == 0
                } else {
                    2 * operands.iter().filter(|&&n| n % 2 == 0).count() > ops
                };
                let answer = if choose_a {
                    vocab::CHOICE_A
                } else {
                    vocab::CHOICE_B
                };
                (prompt, vec![answer])
            }
        }
    }
}

fn push_number(out: &mut Vec<Token>, n: u32) {
    if n >= 10 {
        out.push(vocab::digit(n / 10));
    }
    out.push(vocab::digit(n % 10));
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

/// Dispatch categories: one per expert domain plus the fallback.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Math,
    Code,
    Reasoning,
    Others,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Math,
        Category::Code,
        Category::Reasoning,
        Category::Others,
    ];
    pub const EXPERTS: [Category; 3] = [Category::Math, Category::Code, Category::Reasoning];

    pub fn name(self) -> &'static str {
        match self {
            Category::Math => "math",
            Category::Code => "code",
            Category::Reasoning => "reasoning",
            Category::Others => "others",
        }
    }

    pub fn token(self) -> Token {
        match self {
            Category::Math => vocab::CAT_MATH,
            Category::Code => vocab::CAT_CODE,
            Category::Reasoning => vocab::CAT_REASONING,
            Category::Others => vocab::CAT_OTHERS,
        }
    }

    pub fn from_token(t: Token) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.token() == t)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: TokenSequence,
    /// Answer tokens without the end-of-answer token.
    pub reference: TokenSequence,
    pub family: Family,
}

impl TaskInstance {
    pub fn new(prompt: Vec<Token>, reference: Vec<Token>, family: Family) -> Self {
        Self {
            prompt: TokenSequence::prompt(prompt),
            reference: TokenSequence::answer(reference),
            family,
        }
    }

    /// Prompt, reference and end token as one training sequence.
    pub fn full_sequence(&self) -> TokenSequence {
        let mut answer = self.reference.tokens.clone();
        answer.push(vocab::EOS);
        self.prompt.with_answer(&answer)
    }

    pub fn max_new_tokens(&self) -> usize {
        self.reference.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub few_shot_holdout: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 512,
            validation: 512,
            test: 256,
            few_shot_holdout: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Portion {
    Train,
    Validation,
    Test,
    FewShotHoldout,
}

impl Portion {
    pub const ALL: [Portion; 4] = [
        Portion::Train,
        Portion::Validation,
        Portion::Test,
        Portion::FewShotHoldout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Portion::Train => "train",
            Portion::Validation => "validation",
            Portion::Test => "test",
            Portion::FewShotHoldout => "few_shot_holdout",
        }
    }
}

impl FromStr for Portion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Portion::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split portion `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub family: Family,
    pub seed: u64,
    pub train: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub few_shot_holdout: Vec<TaskInstance>,
}

impl TaskSplit {
    pub fn portion(&self, p: Portion) -> &[TaskInstance] {
        match p {
            Portion::Train => &self.train,
            Portion::Validation => &self.validation,
            Portion::Test => &self.test,
            Portion::FewShotHoldout => &self.few_shot_holdout,
        }
    }

    /// Writes one JSON object per instance:
    /// `{"family", "prompt", "reference", "split"}`.
    pub fn dump_jsonl<W: Write>(&self, out: &mut W) -> Result<()> {
        for p in Portion::ALL {
            for inst in self.portion(p) {
                let line = serde_json::json!({
                    "family": self.family.name(),
                    "prompt": inst.prompt.text(),
                    "reference": inst.reference.text(),
                    "split": p.name(),
                });
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Generates disjoint splits of unique prompts, deterministically from
/// `(family, seed)`.
pub fn generate_family(family: Family, seed: u64, sizes: SplitSizes) -> Result<TaskSplit> {
    let counts = [
        sizes.train,
        sizes.validation,
        sizes.test,
        sizes.few_shot_holdout,
    ];
    if counts.contains(&0) {
        return Err(Error::EmptySplit(format!(
            "every split of {family} needs at least one instance"
        )));
    }
    let total: usize = counts.iter().sum();
    let mut rng = SeededRng::new(seed, "task-family", &[family as u64]);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        if attempts > 200 * total {
            return Err(Error::Range(format!(
                "{family} cannot supply {total} unique prompts"
            )));
        }
        let (prompt, reference) = family.sample(&mut rng);
        if seen.insert(prompt.clone()) {
            all.push(TaskInstance::new(prompt, reference, family));
        }
    }
    let mut rest = all.into_iter();
    let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<_>>();
    Ok(TaskSplit {
        family,
        seed,
        train: take(sizes.train),
        validation: take(sizes.validation),
        test: take(sizes.test),
        few_shot_holdout: take(sizes.few_shot_holdout),
    })
}

pub fn generate_family_by_name(name: &str, seed: u64, sizes: SplitSizes) -> Result<TaskSplit> {
    generate_family(name.parse()?, seed, sizes)
}

/// `+1` iff the generated answer equals the reference exactly, ignoring a
/// trailing end-of-answer token on either side; `-1` otherwise.
pub fn reward(generated: &[Token], reference: &[Token]) -> f64 {
    let strip = |s: &[Token]| match s.last() {
        Some(&vocab::EOS) => s[..s.len() - 1].to_vec(),
        _ => s.to_vec(),
    };
    let g = strip(generated);
    if !g.is_empty() && g == strip(reference) {
        1.0
    } else {
        -1.0
    }
}

/// Wraps a task prompt in the dispatch question: `<task> prompt <cat>`. The
/// expected continuation is a single category token.
pub fn dispatch_template(prompt: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(prompt.len() + 2);
    out.push(vocab::TASK_MARKER);
    out.extend_from_slice(prompt);
    out.push(vocab::CATEGORY_QUERY);
    out
}

/// Maps the first generated token to a category; anything unparsable is
/// "others".
pub fn parse_category(generated: &[Token]) -> Category {
    generated
        .first()
        .and_then(|&t| Category::from_token(t))
        .unwrap_or(Category::Others)
}

/// A dispatch example: the templated prompt with the category token as the
/// reference answer.
pub fn classification_instance(inst: &TaskInstance, label: Category) -> TaskInstance {
    TaskInstance::new(
        dispatch_template(inst.prompt.prompt_tokens()),
        vec![label.token()],
        inst.family,
    )
}

/// Off-task prompts made of filler letters, used as "others" material.
pub fn others_prompts(seed: u64, n: usize) -> Vec<Vec<Token>> {
    let mut rng = SeededRng::new(seed, "others-prompts", &[]);
    (0..n)
        .map(|_| {
            let len = 3 + rng.below(4);
            (0..len).map(|_| vocab::filler(rng.below(8) as u32)).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationExample {
    pub instance: TaskInstance,
    pub label: Category,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationDataset {
    pub examples: Vec<ClassificationExample>,
    pub categories: Vec<Category>,
}

impl ClassificationDataset {
    pub fn instances(&self) -> Vec<TaskInstance> {
        self.examples.iter().map(|e| e.instance.clone()).collect()
    }

    pub fn count(&self, c: Category) -> usize {
        self.examples.iter().filter(|e| e.label == c).count()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Balanced dispatch dataset with `per_class` prompts from each split's
/// training portion, labeled by the family's category.
pub fn build_classification_dataset(
    splits: &[TaskSplit],
    per_class: usize,
    seed: u64,
) -> Result<ClassificationDataset> {
    classification_from(splits, Portion::Train, per_class, seed)
}

/// As [`build_classification_dataset`] but drawing from any portion (used for
/// the classifier's validation set).
pub fn classification_from(
    splits: &[TaskSplit],
    portion: Portion,
    per_class: usize,
    seed: u64,
) -> Result<ClassificationDataset> {
    if splits.len() < 2 {
        return Err(Error::Config(
            "classification needs at least two task families".into(),
        ));
    }
    let mut examples = Vec::with_capacity(per_class * splits.len());
    let mut categories = Vec::new();
    for split in splits {
        let source = split.portion(portion);
        if source.is_empty() {
            return Err(Error::EmptySplit(format!("{} {}", split.family, portion.name())));
        }
        let label = split.family.category();
        if !categories.contains(&label) {
            categories.push(label);
        }
        let mut idx: Vec<usize> = (0..source.len()).collect();
        SeededRng::new(seed, "classification", &[split.family as u64]).shuffle(&mut idx);
        for i in (0..per_class).map(|k| idx[k % idx.len()]) {
            examples.push(ClassificationExample {
                instance: classification_instance(&source[i], label),
                label,
            });
        }
    }
    Ok(ClassificationDataset {
        examples,
        categories,
    })
}
