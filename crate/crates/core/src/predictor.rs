//! Future-class prediction with a text-completion model.
//!
//! The initial-step class names are placed in a fixed completion prompt, the
//! prompt is sent several times, each transcript is parsed into class names,
//! and names are ranked by how many transcripts mention them. Restriction
//! levels keep only names predicted at least `min_count` times.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::normalize_name;

/// Completion prompt listing the initial classes. The count "100" is part
/// of the template and does not track the number of names.
pub fn build_future_prompt<S: AsRef<str>>(initial_names: &[S]) -> Result<String> {
    if initial_names.is_empty() {
        return Err(Error::Prompt("at least one initial class name is required".into()));
    }
    let mut prompt = String::from("The dataset contains the following 100 classes:");
    for name in initial_names {
        let name = name.as_ref().trim();
        if name.is_empty() {
            return Err(Error::Validation("empty class name in prompt".into()));
        }
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Validation(format!("class name {name:?} contains a list delimiter")));
        }
        prompt.push(' ');
        prompt.push_str(name);
        prompt.push(',');
    }
    Ok(prompt)
}

const MAX_TOKEN_CHARS: usize = 60;
const MAX_TOKEN_WORDS: usize = 4;

/// Strip one layer of list decoration: `12.`, `3)`, `-`, `*` or `•` prefixes,
/// trailing punctuation, surrounding quotes and whitespace.
fn strip_once(token: &str) -> &str {
    let mut t = token.trim();
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(after) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if after.is_empty() || after.starts_with(char::is_whitespace) {
                t = after.trim_start();
            }
        }
    }
    for bullet in ['-', '*', '•'] {
        if let Some(after) = t.strip_prefix(bullet) {
            t = after.trim_start();
        }
    }
    t = t.trim_end_matches(['.', ';', ':', '!', '?']);
    t.trim_matches(['"', '\'', '`']).trim()
}

fn clean_token(raw: &str) -> Option<String> {
    let mut t = raw;
    loop {
        let next = strip_once(t);
        if next == t {
            break;
        }
        t = next;
    }
    let t = t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if t.is_empty() || t.chars().count() > MAX_TOKEN_CHARS {
        return None;
    }
    if !t.chars().any(char::is_alphabetic) {
        return None;
    }
    if t.split(' ').count() > MAX_TOKEN_WORDS {
        return None;
    }
    if t.contains("://") || t.starts_with("www.") {
        return None;
    }
    Some(t)
}

/// Extract normalized class names from one completion transcript.
///
/// Splits on commas and newlines, strips numbering and bullets, drops
/// narrative fragments (more than four words), over-long tokens, tokens
/// without letters and URLs, and removes duplicates. With a vocabulary,
/// only names in it are kept.
pub fn parse_transcript(completion_text: &str, known_vocabulary: Option<&HashSet<String>>) -> Vec<String> {
    let mut seen = HashSet::new();
    completion_text
        .split([',', '\n'])
        .filter_map(clean_token)
        .filter(|t| known_vocabulary.is_none_or(|v| v.contains(t)))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "full")]
    Full,
    R1,
    R2,
}

impl Level {
    pub fn label(&self) -> &'static str {
        match self {
            Level::Full => "FPCIL-GPT",
            Level::R1 => "FPCIL-GPT R1",
            Level::R2 => "FPCIL-GPT R2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictionLevel {
    pub level: Level,
    pub min_count: u32,
}

/// Thresholds for the three restriction levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictionThresholds {
    pub full: u32,
    pub r1: u32,
    pub r2: u32,
}

impl Default for RestrictionThresholds {
    fn default() -> Self {
        Self { full: 1, r1: 4, r2: 7 }
    }
}

impl RestrictionThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.full <= self.r1 && self.r1 <= self.r2 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "restriction thresholds must be nondecreasing: full {} <= R1 {} <= R2 {}",
                self.full, self.r1, self.r2
            )))
        }
    }

    pub fn levels(&self) -> [RestrictionLevel; 3] {
        [
            RestrictionLevel {
                level: Level::Full,
                min_count: self.full,
            },
            RestrictionLevel {
                level: Level::R1,
                min_count: self.r1,
            },
            RestrictionLevel {
                level: Level::R2,
                min_count: self.r2,
            },
        ]
    }
}

/// How many transcripts predicted each name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionTally {
    pub counts: BTreeMap<String, u32>,
    pub repeats: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_transcripts: Vec<String>,
}

impl PredictionTally {
    /// Count names across parsed transcripts. Each transcript contributes at
    /// most one vote per name.
    pub fn from_names(transcript_names: &[Vec<String>]) -> Self {
        let mut counts = BTreeMap::new();
        for names in transcript_names {
            let distinct: BTreeSet<String> = names.iter().map(|n| normalize_name(n)).collect();
            for n in distinct {
                *counts.entry(n).or_insert(0) += 1;
            }
        }
        Self {
            counts,
            repeats: transcript_names.len() as u32,
            source_transcripts: Vec::new(),
        }
    }

    /// Names by decreasing count, then alphabetically.
    pub fn ranked(&self) -> Vec<(&str, u32)> {
        let mut v: Vec<(&str, u32)> = self.counts.iter().map(|(k, c)| (k.as_str(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }

    pub fn select(&self, level: &RestrictionLevel, exclude: &HashSet<String>) -> BTreeSet<String> {
        self.counts
            .iter()
            .filter(|(n, c)| **c >= level.min_count && !exclude.contains(*n))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Tally the transcripts and select the names passing `level`, never
/// returning an excluded (initial-step) name.
pub fn aggregate_and_restrict(
    transcript_names: &[Vec<String>],
    level: &RestrictionLevel,
    exclude: &HashSet<String>,
) -> (PredictionTally, BTreeSet<String>) {
    let tally = PredictionTally::from_names(transcript_names);
    let exclude: HashSet<String> = exclude.iter().map(|n| normalize_name(n)).collect();
    let selection = tally.select(level, &exclude);
    (tally, selection)
}

/// Number and fraction of `truth` names present in `selection`.
pub fn overlap(selection: &BTreeSet<String>, truth: &BTreeSet<String>) -> (usize, f64) {
    let hits = selection.intersection(truth).count();
    let ratio = if truth.is_empty() {
        0.0
    } else {
        hits as f64 / truth.len() as f64
    };
    (hits, ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub repeats: u32,
    pub max_output: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl CompletionRequest {
    pub fn new(prompt: String) -> Self {
        Self {
            prompt,
            repeats: 10,
            max_output: 1024,
            temperature: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// A source of completion transcripts.
pub trait CompletionService {
    /// Return `request.repeats` independent completions of the prompt.
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>>;
}

/// Replays transcripts stored one per file in a directory (sorted by file
/// name). Files named `golden_*` or starting with a dot are ignored.
#[derive(Debug, Clone)]
pub struct FixtureReplayer {
    dir: PathBuf,
}

impl FixtureReplayer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn transcript_paths(&self) -> Result<Vec<PathBuf>> {
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if path.is_file() && name.ends_with(".txt") && !name.starts_with('.') && !name.starts_with("golden") {
                paths.push(path);
            }
        }
        paths.sort();
        Ok(paths)
    }
}

impl CompletionService for FixtureReplayer {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        request.validate()?;
        let paths = self.transcript_paths()?;
        if paths.len() < request.repeats as usize {
            return Err(Error::Service(format!(
                "fixture {} holds {} transcripts, {} requested",
                self.dir.display(),
                paths.len(),
                request.repeats
            )));
        }
        paths
            .iter()
            .take(request.repeats as usize)
            .map(|p| fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .collect()
    }
}

/// Golden tally file: `{"repeats": N, "counts": {"name": count, ...}}`.
pub fn read_golden_tally(path: &Path) -> Result<PredictionTally> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub const ENV_ENDPOINT: &str = "FPCIL_COMPLETION_ENDPOINT";
pub const ENV_API_KEY: &str = "FPCIL_COMPLETION_API_KEY";
pub const ENV_MODEL: &str = "FPCIL_COMPLETION_MODEL";

/// HTTP completion client. Each repeat is one POST of
/// `{"model", "prompt", "max_tokens"}`; the transcript is read from
/// `choices[0].text` (or a top-level `text`). Failed calls are retried with
/// exponential backoff.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub log_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct RemoteBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            log_dir: None,
        }
    }

    /// Endpoint, key and model from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| Error::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-3.5-turbo-instruct".into());
        let mut client = Self::new(endpoint, model);
        client.api_key = std::env::var(ENV_API_KEY).ok();
        Ok(client)
    }

    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    fn call_once(&self, agent: &ureq::Agent, request: &CompletionRequest) -> std::result::Result<String, String> {
        let body = RemoteBody {
            model: &self.model,
            prompt: &request.prompt,
            max_tokens: request.max_output,
            temperature: request.temperature,
        };
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = response.body_mut().read_json().map_err(|e| e.to_string())?;
        extract_text(&value).ok_or_else(|| format!("response has no completion text: {value}"))
    }

    fn call_with_retry(&self, agent: &ureq::Agent, request: &CompletionRequest) -> Result<String> {
        let mut delay = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts.max(1) {
            match self.call_once(agent, request) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("completion attempt {attempt}/{} failed: {e}", self.attempts);
                    last = e;
                    if attempt < self.attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(Error::Service(format!(
            "completion failed after {} attempts: {last}",
            self.attempts
        )))
    }
}

fn extract_text(value: &serde_json::Value) -> Option<String> {
    value
        .pointer("/choices/0/text")
        .or_else(|| value.get("text"))
        .and_then(|t| t.as_str())
        .map(str::to_owned)
}

impl CompletionService for RemoteClient {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        request.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(true)
            .build()
            .into();
        let mut out = Vec::with_capacity(request.repeats as usize);
        for i in 0..request.repeats {
            let text = self.call_with_retry(&agent, request)?;
            if let Some(dir) = &self.log_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("transcript_{i:02}.txt"));
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            out.push(text);
        }
        Ok(out)
    }
}

/// Selections at every restriction level for one set of transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuturePrediction {
    pub prompt: String,
    pub tally: PredictionTally,
    pub selections: BTreeMap<Level, BTreeSet<String>>,
}

/// Prompt the service, parse every transcript and select at each level.
pub fn predict_future<S: AsRef<str>>(
    service: &dyn CompletionService,
    initial_names: &[S],
    repeats: u32,
    thresholds: &RestrictionThresholds,
    vocabulary: Option<&HashSet<String>>,
) -> Result<FuturePrediction> {
    thresholds.validate()?;
    let prompt = build_future_prompt(initial_names)?;
    let mut request = CompletionRequest::new(prompt.clone());
    request.repeats = repeats;
    let transcripts = service.complete(&request)?;
    let names: Vec<Vec<String>> = transcripts.iter().map(|t| parse_transcript(t, vocabulary)).collect();
    let exclude: HashSet<String> = initial_names.iter().map(|n| normalize_name(n.as_ref())).collect();
    let mut tally = PredictionTally::from_names(&names);
    tally.source_transcripts = transcripts;
    let selections = thresholds
        .levels()
        .iter()
        .map(|l| (l.level, tally.select(l, &exclude)))
        .collect();
    Ok(FuturePrediction {
        prompt,
        tally,
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_template() {
        assert_eq!(
            build_future_prompt(&["apple", "bear"]).unwrap(),
            "The dataset contains the following 100 classes: apple, bear,"
        );
        assert_eq!(
            build_future_prompt(&["otter"]).unwrap(),
            "The dataset contains the following 100 classes: otter,"
        );
        assert!(matches!(build_future_prompt::<&str>(&[]), Err(Error::Prompt(_))));
        assert!(matches!(build_future_prompt(&["pine, tree"]), Err(Error::Validation(_))));
    }

    #[test]
    fn parses_mixed_list() {
        assert_eq!(
            parse_transcript("lion, tiger, 3. zebra\n- otter", None),
            vec!["lion", "tiger", "zebra", "otter"]
        );
        assert!(parse_transcript("", None).is_empty());
        assert!(parse_transcript("The dataset can be downloaded at http://example.org/data.", None).is_empty());
    }

    #[test]
    fn parser_drops_noise_and_duplicates() {
        let text = "1. Maple Tree\n2) Lion.\n42\n Lion ,\"rose\"\n* sweet pepper;\nwww.data.org";
        assert_eq!(parse_transcript(text, None), vec!["maple tree", "lion", "rose", "sweet pepper"]);
        let long = "a".repeat(61);
        assert!(parse_transcript(&long, None).is_empty());
    }

    #[test]
    fn vocabulary_filter() {
        let vocab: HashSet<String> = ["lion".to_string()].into_iter().collect();
        assert_eq!(parse_transcript("lion, unicorn", Some(&vocab)), vec!["lion"]);
    }

    #[test]
    fn threshold_selection() {
        let mut transcripts = vec![vec!["a".to_string()]; 10];
        for t in transcripts.iter_mut().take(3) {
            t.push("b".into());
        }
        transcripts[0].push("c".into());
        let none = HashSet::new();
        let lvl = |m| RestrictionLevel {
            level: Level::Full,
            min_count: m,
        };
        let (tally, sel) = aggregate_and_restrict(&transcripts, &lvl(7), &none);
        assert_eq!(tally.counts["a"], 10);
        assert_eq!(tally.counts["b"], 3);
        assert_eq!(sel, ["a".to_string()].into_iter().collect());
        let exclude: HashSet<String> = ["B".to_string()].into_iter().collect();
        let (_, all) = aggregate_and_restrict(&transcripts, &lvl(1), &exclude);
        assert_eq!(all, ["a".to_string(), "c".to_string()].into_iter().collect());
    }

    #[test]
    fn ranking_orders_by_count() {
        let t = vec![vec!["x".to_string(), "y".into()], vec!["y".to_string()]];
        let tally = PredictionTally::from_names(&t);
        assert_eq!(tally.ranked(), vec![("y", 2), ("x", 1)]);
    }

    #[test]
    fn thresholds_must_nest() {
        assert!(RestrictionThresholds::default().validate().is_ok());
        assert!(RestrictionThresholds { full: 5, r1: 4, r2: 7 }.validate().is_err());
    }

    #[test]
    fn extracts_completion_text() {
        let v: serde_json::Value = serde_json::from_str(r#"{"choices":[{"text":" lion, tiger"}]}"#).unwrap();
        assert_eq!(extract_text(&v).unwrap(), " lion, tiger");
        let v: serde_json::Value = serde_json::from_str(r#"{"text":"a"}"#).unwrap();
        assert_eq!(extract_text(&v).unwrap(), "a");
        assert!(extract_text(&serde_json::json!({"x": 1})).is_none());
    }
}
