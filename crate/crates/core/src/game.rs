// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dictator-game harness: factorial trial sampling, prompt rendering and
//! response checking.
//!
//! The dictator and the recipient each hold $20 and a further $20 can be
//! moved. A transfer of `D` dollars leaves the dictator with `20 + (20 - D)`
//! and the recipient with `20 + D`. Give framing allows `D` in `[0, 20]`,
//! take framing allows `D` in `[-20, 20]`.

use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::CaptureSet;

pub const ENDOWMENT: i32 = 20;
pub const TRANSFERABLE: i32 = 20;
pub const MIN_AGE: u32 = 20;
pub const MAX_AGE: u32 = 60;

const TEMPLATE_SOURCE: &str = include_str!("../assets/prompt_template_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    Give,
    Take,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Meeting {
    Meet,
    Stranger,
}

impl Gender {
    pub fn word(self) -> &'static str {
        match self {
            Self::Male => "male",
            Self::Female => "female",
        }
    }
}

impl Instruction {
    /// Inclusive range of admissible transfers.
    pub fn bounds(self) -> (i32, i32) {
        match self {
            Self::Give => (0, TRANSFERABLE),
            Self::Take => (-TRANSFERABLE, TRANSFERABLE),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::Give => "give",
            Self::Take => "take",
        }
    }
}

impl Meeting {
    pub fn word(self) -> &'static str {
        match self {
            Self::Meet => "meet",
            Self::Stranger => "stranger",
        }
    }
}

/// The four manipulated variables, in canonical conditioning order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    GiveTake,
    Meet,
    Female,
    Age,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Self::GiveTake, Self::Meet, Self::Female, Self::Age];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GiveTake => "give_take",
            Self::Meet => "meet_stranger",
            Self::Female => "female",
            Self::Age => "age",
        }
    }

    /// Default two-level contrast `(from, to)`; steering vectors point from
    /// the first level's mean to the second's.
    pub fn default_contrast(self) -> (Level, Level) {
        match self {
            Self::GiveTake => (
                Level::Instruction(Instruction::Take),
                Level::Instruction(Instruction::Give),
            ),
            Self::Meet => (
                Level::Meeting(Meeting::Stranger),
                Level::Meeting(Meeting::Meet),
            ),
            Self::Female => (Level::Gender(Gender::Male), Level::Gender(Gender::Female)),
            Self::Age => (Level::Age(20), Level::Age(40)),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s || format!("{f:?}").eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One level of one factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Gender(Gender),
    Age(u32),
    Instruction(Instruction),
    Meeting(Meeting),
}

impl Level {
    pub fn factor(self) -> Factor {
        match self {
            Self::Gender(_) => Factor::Female,
            Self::Age(_) => Factor::Age,
            Self::Instruction(_) => Factor::GiveTake,
            Self::Meeting(_) => Factor::Meet,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gender(g) => f.write_str(g.word()),
            Self::Age(a) => write!(f, "{a}"),
            Self::Instruction(i) => f.write_str(i.word()),
            Self::Meeting(m) => f.write_str(m.word()),
        }
    }
}

/// Factor levels of one trial plus the seed that drives its generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialConfig {
    pub gender: Gender,
    pub age: u32,
    pub instruction: Instruction,
    pub meeting: Meeting,
    pub trial_seed: u64,
}

impl TrialConfig {
    pub fn has_level(&self, level: Level) -> bool {
        match level {
            Level::Gender(g) => self.gender == g,
            Level::Age(a) => self.age == a,
            Level::Instruction(i) => self.instruction == i,
            Level::Meeting(m) => self.meeting == m,
        }
    }
}

/// Draws the factor levels of trial `index`.
///
/// Each trial has its own ChaCha stream keyed by `index`, so draws are
/// independent of evaluation order and of how many other trials exist.
pub fn sample_config(design_seed: u64, index: u64) -> TrialConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(design_seed);
    rng.set_stream(index);
    let gender = if rng.gen::<bool>() { Gender::Female } else { Gender::Male };
    let age = rng.gen_range(MIN_AGE..=MAX_AGE);
    let instruction = if rng.gen::<bool>() { Instruction::Give } else { Instruction::Take };
    let meeting = if rng.gen::<bool>() { Meeting::Meet } else { Meeting::Stranger };
    TrialConfig {
        gender,
        age,
        instruction,
        meeting,
        trial_seed: rng.next_u64(),
    }
}

/// Parsed prompt template asset.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub version: u32,
    body: String,
    give: String,
    take: String,
    meet: String,
    stranger: String,
}

impl PromptTemplate {
    /// The template compiled into the crate.
    pub fn builtin() -> &'static PromptTemplate {
        static TEMPLATE: OnceLock<PromptTemplate> = OnceLock::new();
        TEMPLATE.get_or_init(|| {
            Self::parse(TEMPLATE_SOURCE).expect("built-in prompt template is well formed")
        })
    }

    pub fn parse(source: &str) -> Result<Self, String> {
        let mut fields = std::collections::HashMap::new();
        for line in source.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| format!("template line without key: {line:?}"))?;
            fields.insert(key.trim().to_owned(), value.trim().to_owned());
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| format!("template lacks {k:?}"));
        let version = take("version")?
            .parse()
            .map_err(|e| format!("bad template version: {e}"))?;
        Ok(Self {
            version,
            body: take("body")?,
            give: take("give")?,
            take: take("take")?,
            meet: take("meet")?,
            stranger: take("stranger")?,
        })
    }

    pub fn render(&self, config: &TrialConfig) -> String {
        let framing = match config.instruction {
            Instruction::Give => &self.give,
            Instruction::Take => &self.take,
        };
        let meeting = match config.meeting {
            Meeting::Meet => &self.meet,
            Meeting::Stranger => &self.stranger,
        };
        self.body
            .replace("{gender}", config.gender.word())
            .replace("{age}", &config.age.to_string())
            .replace("{framing}", framing)
            .replace("{meeting}", meeting)
    }

    /// Every word any rendering can contain, excluding ages.
    pub fn words(&self) -> Vec<&str> {
        [&self.body, &self.give, &self.take, &self.meet, &self.stranger]
            .into_iter()
            .flat_map(|s| s.split_whitespace())
            .filter(|w| !w.starts_with('{'))
            .collect()
    }
}

/// Renders the trial prompt from the built-in template.
pub fn build_prompt(config: &TrialConfig) -> String {
    PromptTemplate::builtin().render(config)
}

/// Header words of the structured response.
pub const TRANSFER_KEY: &str = "TRANSFER:";
pub const DICTATOR_KEY: &str = "DICTATOR:";
pub const RECIPIENT_KEY: &str = "RECIPIENT:";

/// Final allocations `(dictator, recipient)` implied by a transfer.
pub fn payoffs(transfer: i32) -> (i32, i32) {
    (ENDOWMENT + (TRANSFERABLE - transfer), ENDOWMENT + transfer)
}

/// Renders a well-formed response for a transfer and stated allocations.
pub fn format_response(transfer: i32, dictator: i32, recipient: i32) -> String {
    format!("{TRANSFER_KEY} {transfer}\n{DICTATOR_KEY} {dictator} {RECIPIENT_KEY} {recipient}")
}

/// Outcome of reading a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckedResponse {
    /// `None` when the response did not follow the grammar.
    pub decision: Option<i32>,
    pub stated: Option<(i32, i32)>,
    pub logic_pass: bool,
}

/// Parses `TRANSFER: <D>` / `DICTATOR: <x> RECIPIENT: <y>` (any whitespace
/// between fields) and applies the logic check.
pub fn parse_and_check(config: &TrialConfig, response: &str) -> CheckedResponse {
    static GRAMMAR: OnceLock<Regex> = OnceLock::new();
    let re = GRAMMAR.get_or_init(|| {
        Regex::new(
            r"^\s*TRANSFER:\s*([+-]?\d{1,4})\s+DICTATOR:\s*([+-]?\d{1,4})\s+RECIPIENT:\s*([+-]?\d{1,4})\s*$",
        )
        .expect("response grammar compiles")
    });
    let Some(caps) = re.captures(response) else {
        return CheckedResponse {
            decision: None,
            stated: None,
            logic_pass: false,
        };
    };
    let num = |i: usize| caps[i].parse::<i32>().ok();
    let (Some(d), Some(x), Some(y)) = (num(1), num(2), num(3)) else {
        return CheckedResponse {
            decision: None,
            stated: None,
            logic_pass: false,
        };
    };
    let (lo, hi) = config.instruction.bounds();
    let logic_pass = (lo..=hi).contains(&d) && (x, y) == payoffs(d);
    CheckedResponse {
        decision: Some(d),
        stated: Some((x, y)),
        logic_pass,
    }
}

/// One completed trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: u64,
    pub config: TrialConfig,
    pub response_text: String,
    /// Parsed transfer; `None` marks a parse failure.
    pub decision: Option<i32>,
    pub logic_pass: bool,
    pub captures: CaptureSet,
}
