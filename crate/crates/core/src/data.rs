//! Synthetic pretraining language, the synthetic downstream task, and JSONL
//! dataset I/O.
//!
//! Content tokens are split into topics. Each token has a fixed successor
//! inside its topic; a sequence follows the successor with probability
//! `p_follow`, jumps to a random token of the same topic with probability
//! `p_topic`, and otherwise jumps anywhere.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FIRST_CONTENT_TOKEN;
use crate::error::{Error, Result};
use crate::pipeline::TaskSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageConfig {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub p_follow: f64,
    pub p_topic: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        LanguageConfig {
            vocab_size: 64,
            num_topics: 4,
            p_follow: 0.7,
            p_topic: 0.2,
            min_len: 8,
            max_len: 16,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    pub config: LanguageConfig,
    topics: Vec<Vec<usize>>,
    topic_of: Vec<usize>,
    successor: Vec<usize>,
}

impl SyntheticLanguage {
    pub fn new(config: LanguageConfig) -> Result<Self> {
        let content = config.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN);
        if config.num_topics == 0 || content < 2 * config.num_topics {
            return Err(Error::InvalidConfig(format!(
                "{content} content tokens cannot form {} topics of two or more",
                config.num_topics
            )));
        }
        let probs_ok = (0.0..=1.0).contains(&config.p_follow)
            && (0.0..=1.0).contains(&config.p_topic)
            && config.p_follow + config.p_topic <= 1.0;
        if !probs_ok {
            return Err(Error::InvalidConfig("p_follow and p_topic must be probabilities summing to at most 1".into()));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::InvalidConfig("need 1 <= min_len <= max_len".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut topic_of = vec![usize::MAX; config.vocab_size];
        let mut topics = vec![Vec::new(); config.num_topics];
        for tok in FIRST_CONTENT_TOKEN..config.vocab_size {
            let topic = (tok - FIRST_CONTENT_TOKEN) * config.num_topics / content;
            topic_of[tok] = topic;
            topics[topic].push(tok);
        }
        // a random cycle through each topic
        let mut successor = vec![usize::MAX; config.vocab_size];
        for members in &topics {
            let mut cycle = members.clone();
            cycle.shuffle(&mut rng);
            for (i, &tok) in cycle.iter().enumerate() {
                successor[tok] = cycle[(i + 1) % cycle.len()];
            }
        }
        Ok(SyntheticLanguage {
            config,
            topics,
            topic_of,
            successor,
        })
    }

    pub fn topic_of(&self, token: usize) -> Option<usize> {
        self.topic_of.get(token).copied().filter(|&t| t != usize::MAX)
    }

    pub fn topic_tokens(&self, topic: usize) -> &[usize] {
        &self.topics[topic]
    }

    pub fn successor(&self, token: usize) -> usize {
        self.successor[token]
    }

    fn content_range(&self) -> std::ops::Range<usize> {
        FIRST_CONTENT_TOKEN..self.config.vocab_size
    }

    /// `P(next | prev)`.
    pub fn transition_prob(&self, prev: usize, next: usize) -> f64 {
        let c = &self.config;
        let n_content = self.content_range().len() as f64;
        let topic = &self.topics[self.topic_of[prev]];
        let mut p = (1.0 - c.p_follow - c.p_topic) / n_content;
        if self.topic_of[next] == self.topic_of[prev] {
            p += c.p_topic / topic.len() as f64;
        }
        if self.successor[prev] == next {
            p += c.p_follow;
        }
        p
    }

    pub fn next_token<R: Rng + ?Sized>(&self, prev: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        if u < self.config.p_follow {
            self.successor[prev]
        } else if u < self.config.p_follow + self.config.p_topic {
            let topic = &self.topics[self.topic_of[prev]];
            topic[rng.random_range(0..topic.len())]
        } else {
            rng.random_range(self.content_range())
        }
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let mut seq = Vec::with_capacity(len);
        seq.push(rng.random_range(self.content_range()));
        while seq.len() < len {
            let next = self.next_token(*seq.last().expect("non-empty"), rng);
            seq.push(next);
        }
        seq
    }

    pub fn corpus(&self, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_sequence(&mut rng)).collect()
    }

    /// Bayes-optimal guess for the token at `pos` given its neighbours.
    pub fn bayes_guess(&self, seq: &[usize], pos: usize) -> usize {
        let score = |x: usize| {
            let left = if pos > 0 { self.transition_prob(seq[pos - 1], x) } else { 1.0 };
            let right = if pos + 1 < seq.len() { self.transition_prob(x, seq[pos + 1]) } else { 1.0 };
            left * right
        };
        self.content_range()
            .fold((FIRST_CONTENT_TOKEN, f64::NEG_INFINITY), |best, x| {
                let s = score(x);
                if s > best.1 {
                    (x, s)
                } else {
                    best
                }
            })
            .0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// The two topics whose tokens make up task sequences.
    pub topics: [usize; 2],
    /// Probability that a token comes from the sequence's dominant topic.
    pub dominance: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            topics: [0, 1],
            dominance: 0.65,
            min_len: 9,
            max_len: 15,
        }
    }
}

/// Binary task: which of two topics contributes more tokens. The label word of
/// each class is the first token of its topic.
#[derive(Clone, Debug)]
pub struct TopicTask {
    pub language: SyntheticLanguage,
    pub config: TaskConfig,
}

impl TopicTask {
    pub fn new(language: SyntheticLanguage, config: TaskConfig) -> Result<Self> {
        let n = language.config.num_topics;
        if config.topics[0] == config.topics[1] || config.topics.iter().any(|&t| t >= n) {
            return Err(Error::InvalidConfig(format!("task topics {:?} invalid for {n} topics", config.topics)));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::InvalidConfig("need 1 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&config.dominance) {
            return Err(Error::InvalidConfig("dominance must be a probability".into()));
        }
        Ok(TopicTask { language, config })
    }

    pub fn label_words(&self) -> [usize; 2] {
        self.config.topics.map(|t| self.language.topic_tokens(t)[0])
    }

    /// The deterministic labelling rule: majority topic, ties to the first.
    pub fn label_of(&self, tokens: &[usize]) -> usize {
        let [a, b] = self.config.topics;
        let count = |t| tokens.iter().filter(|&&x| self.language.topic_of(x) == Some(t)).count();
        let words = self.label_words();
        if count(b) > count(a) {
            words[1]
        } else {
            words[0]
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSample {
        let cls = rng.random_range(0..2);
        let (major, minor) = (self.config.topics[cls], self.config.topics[1 - cls]);
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        while tokens.len() < len {
            let topic = if rng.random::<f64>() < self.config.dominance { major } else { minor };
            let members = self.language.topic_tokens(topic);
            let next = match tokens.last() {
                Some(&prev) if self.language.topic_of(prev) == Some(topic) && rng.random::<f64>() < self.language.config.p_follow => {
                    self.language.successor(prev)
                }
                _ => members[rng.random_range(0..members.len())],
            };
            tokens.push(next);
        }
        let label = self.label_of(&tokens);
        TaskSample::new(tokens, label)
    }

    pub fn dataset(&self, n: usize, seed: u64) -> Vec<TaskSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

/// Masked-token samples from a corpus: one uniformly chosen position per
/// sequence, with the original token as the target.
pub fn masked_samples(corpus: &[Vec<usize>], seed: u64) -> Vec<TaskSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|seq| {
            let pos = rng.random_range(0..seq.len());
            TaskSample {
                tokens: seq.clone(),
                label_word: seq[pos],
                mask_position: Some(pos),
            }
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON object per non-blank line; errors name the line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

/// Checks token ids and lengths against a vocabulary before training.
pub fn validate_samples(samples: &[TaskSample], vocab_size: usize, max_len: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if let Some(&id) = s.tokens.iter().chain([&s.label_word]).find(|&&t| t >= vocab_size) {
            return Err(Error::Data(format!("sample {i}: token {id} outside vocabulary of {vocab_size}")));
        }
        let (tokens, _) = s.model_input().map_err(|e| Error::Data(format!("sample {i}: {e}")))?;
        if tokens.len() > max_len {
            return Err(Error::Data(format!("sample {i}: length {} exceeds {max_len}", tokens.len())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_rows_sum_to_one() {
        let lang = SyntheticLanguage::new(LanguageConfig::default()).unwrap();
        for prev in 2..64 {
            let total: f64 = (2..64).map(|n| lang.transition_prob(prev, n)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn successors_stay_in_topic_and_cycle() {
        let lang = SyntheticLanguage::new(LanguageConfig::default()).unwrap();
        for tok in 2..64 {
            assert_eq!(lang.topic_of(lang.successor(tok)), lang.topic_of(tok));
        }
        assert_eq!(lang.topic_of(0), None);
        let sizes: usize = (0..4).map(|t| lang.topic_tokens(t).len()).sum();
        assert_eq!(sizes, 62);
    }

    #[test]
    fn bayes_guess_beats_chance_by_far() {
        let lang = SyntheticLanguage::new(LanguageConfig::default()).unwrap();
        let samples = masked_samples(&lang.corpus(2000, 5), 6);
        let hits = samples
            .iter()
            .filter(|s| lang.bayes_guess(&s.tokens, s.mask_position.unwrap()) == s.label_word)
            .count();
        assert!(hits as f64 / 2000.0 > 0.5);
    }

    #[test]
    fn task_labels_follow_the_rule() {
        let lang = SyntheticLanguage::new(LanguageConfig::default()).unwrap();
        let task = TopicTask::new(lang, TaskConfig::default()).unwrap();
        let words = task.label_words();
        let data = task.dataset(500, 3);
        assert!(data.iter().all(|s| words.contains(&s.label_word) && task.label_of(&s.tokens) == s.label_word));
        let ones = data.iter().filter(|s| s.label_word == words[1]).count();
        assert!((150..350).contains(&ones));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let rows = vec![TaskSample::new(vec![2, 3], 4), TaskSample { mask_position: Some(0), ..TaskSample::new(vec![5], 5) }];
        write_jsonl(&path, &rows).unwrap();
        assert_eq!(read_jsonl::<TaskSample>(&path).unwrap(), rows);
        std::fs::write(&path, "{\"tokens\": [1]}\n").unwrap();
        let err = read_jsonl::<TaskSample>(&path).unwrap_err();
        assert!(matches!(err, Error::Data(m) if m.contains(":1:")));
        assert!(validate_samples(&[TaskSample::new(vec![70], 2)], 64, 32).is_err());
        assert!(validate_samples(&[TaskSample::new(vec![3; 40], 2)], 64, 32).is_err());
    }
}
