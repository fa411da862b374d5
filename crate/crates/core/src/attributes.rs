//! Attribute enumeration over the corpus: prompt rendering, tolerant
//! response parsing, name normalization, and the frequency-thresholded
//! attribute pool.

use std::collections::BTreeMap;

use crate::backend::{map_bounded, ChatBackend, ChatRequest};
use crate::prompts::render_attribute_enumeration;
use crate::types::{AttributeMention, AttributePool, PoolEntry, UserText};
use crate::{Error, Result};

#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct EnumerationStats {
    pub texts: usize,
    pub mentions: usize,
    pub parse_failures: usize,
    pub empty_responses: usize,
}

/// Render the enumeration prompt for every text, collect responses with
/// bounded concurrency, and parse them into mentions in corpus order.
/// Backend failures are fatal; per-text parse failures only count.
pub fn enumerate_attributes(
    texts: &[UserText],
    backend: &dyn ChatBackend,
    concurrency: usize,
) -> Result<(Vec<AttributeMention>, EnumerationStats)> {
    if texts.is_empty() {
        return Err(Error::Precondition("no texts to enumerate".into()));
    }
    let responses = map_bounded(texts, concurrency, |_, text| {
        let request = ChatRequest::new(render_attribute_enumeration(&text.text));
        backend.chat(&request)
    });
    let mut stats = EnumerationStats {
        texts: texts.len(),
        ..Default::default()
    };
    let mut mentions = Vec::new();
    for (text, response) in texts.iter().zip(responses) {
        let response = response?;
        if response.trim().is_empty() {
            stats.empty_responses += 1;
            continue;
        }
        let (parsed, failures) = parse_attribute_response(&response, &text.id);
        if failures > 0 {
            log::warn!(
                "text {}: {} unparseable attribute block(s) skipped",
                text.id,
                failures
            );
        }
        stats.mentions += parsed.len();
        stats.parse_failures += failures;
        mentions.extend(parsed);
    }
    Ok((mentions, stats))
}

/// Parse one enumeration response into mentions. Returns the mentions in
/// response order plus the count of detected-but-unusable blocks.
pub fn parse_attribute_response(response: &str, text_id: &str) -> (Vec<AttributeMention>, usize) {
    struct Block {
        name: String,
        description: String,
        value: String,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for line in response.lines() {
        let stripped = strip_list_markers(line);
        if let Some(rest) = label_value(stripped, &["attribute description", "description"]) {
            if let Some(block) = blocks.last_mut() {
                if block.description.is_empty() {
                    block.description = rest.to_string();
                }
            }
        } else if let Some(rest) = label_value(stripped, &["attribute value", "value"]) {
            if let Some(block) = blocks.last_mut() {
                if block.value.is_empty() {
                    block.value = rest.to_string();
                }
            }
        } else if let Some(rest) = label_value(stripped, &["attribute"]) {
            blocks.push(Block {
                name: rest.to_string(),
                description: String::new(),
                value: String::new(),
            });
        }
    }
    let mut mentions = Vec::new();
    let mut failures = 0;
    for block in blocks {
        let name = normalize_attribute(&block.name);
        if name.is_empty() {
            failures += 1;
            continue;
        }
        mentions.push(AttributeMention {
            id: format!("{text_id}#{}", mentions.len()),
            name,
            description: block.description.trim().to_string(),
            value: block.value.trim().to_string(),
            text_id: text_id.to_string(),
        });
    }
    (mentions, failures)
}

/// Remove leading list markers: numbering ("3."), bullets, markdown bold.
fn strip_list_markers(line: &str) -> &str {
    let mut s = line.trim_start();
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            s = rest.trim_start();
        }
    }
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = s.strip_prefix(marker) {
            s = rest.trim_start();
        }
    }
    s.trim_start_matches("**").trim_start()
}

/// If `line` starts with one of `labels` followed by ':', return the value
/// part. Labels are ASCII and matched case-insensitively, longest first by
/// caller ordering.
fn label_value<'a>(line: &'a str, labels: &[&str]) -> Option<&'a str> {
    for label in labels {
        let Some(head) = line.get(..label.len()) else {
            continue;
        };
        if head.eq_ignore_ascii_case(label) {
            let rest = line[label.len()..].trim_start_matches("**").trim_start();
            if let Some(value) = rest.strip_prefix(':') {
                return Some(value.trim().trim_matches('*').trim());
            }
        }
    }
    None
}

/// Canonical attribute name: lowercase, Unicode whitespace collapsed to
/// single spaces, non-alphanumeric characters stripped from both ends.
/// Idempotent; may return an empty string (callers reject those).
pub fn normalize_attribute(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

/// Aggregate normalized mentions into the pool, keeping only names whose
/// count is at least `min_keep` (equivalently: dropping count <= min_keep-1).
pub fn build_pool(mentions: &[AttributeMention], min_keep: u64) -> AttributePool {
    let mut counts: BTreeMap<String, PoolEntry> = BTreeMap::new();
    for mention in mentions {
        let entry = counts.entry(mention.name.clone()).or_insert_with(|| PoolEntry {
            count: 0,
            mention_ids: Vec::new(),
        });
        entry.count += 1;
        entry.mention_ids.push(mention.id.clone());
    }
    counts.retain(|_, entry| entry.count >= min_keep);
    AttributePool { entries: counts }
}

/// Frequency weight y = 1 + ln(1 + count).
pub fn frequency_weight(count: f64) -> f64 {
    1.0 + (1.0 + count).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::types::TextSource;
    use proptest::prelude::*;

    fn mention(name: &str, idx: usize) -> AttributeMention {
        AttributeMention {
            id: format!("t#{idx}"),
            name: name.to_string(),
            description: String::new(),
            value: String::new(),
            text_id: "t".into(),
        }
    }

    #[test]
    fn parses_single_block() {
        let response =
            "Attribute: sarcasm\nAttribute Description: mocking tone\nAttribute Value: present";
        let (mentions, failures) = parse_attribute_response(response, "t1");
        assert_eq!(failures, 0);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].name, "sarcasm");
        assert_eq!(mentions[0].description, "mocking tone");
        assert_eq!(mentions[0].value, "present");
        assert_eq!(mentions[0].id, "t1#0");
        assert_eq!(mentions[0].text_id, "t1");
    }

    #[test]
    fn parses_five_blocks_in_order() {
        let names = ["tone", "sarcasm", "urgency", "humor", "trust"];
        let response: String = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                format!(
                    "{}. Attribute: {n}\nAttribute Description: d{i}\nAttribute Value: v{i}\n\n",
                    i + 1
                )
            })
            .collect();
        let (mentions, failures) = parse_attribute_response(&response, "t2");
        assert_eq!(failures, 0);
        let got: Vec<&str> = mentions.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(got, names);
        let ids: Vec<&str> = mentions.iter().map(|m| m.id.as_str()).collect();
        assert_eq!(ids, ["t2#0", "t2#1", "t2#2", "t2#3", "t2#4"]);
    }

    #[test]
    fn empty_response_yields_nothing() {
        let (mentions, failures) = parse_attribute_response("", "t3");
        assert!(mentions.is_empty());
        assert_eq!(failures, 0);
    }

    #[test]
    fn unusable_block_is_counted_not_guessed() {
        let response = "Attribute: !!!\nAttribute Value: x\n\nAttribute: tone\nAttribute Value: warm";
        let (mentions, failures) = parse_attribute_response(response, "t4");
        assert_eq!(failures, 1);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].name, "tone");
    }

    #[test]
    fn tolerates_markdown_and_short_labels() {
        let response = "1) **Attribute**: Tone of Voice\n   - Description: how it sounds\n   - Value: harsh";
        let (mentions, failures) = parse_attribute_response(response, "t5");
        assert_eq!(failures, 0);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].name, "tone of voice");
        assert_eq!(mentions[0].description, "how it sounds");
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_attribute(" Tone of Voice "), "tone of voice");
        assert_eq!(normalize_attribute("EMOTIONAL INTENSITY!!"), "emotional intensity");
        assert_eq!(normalize_attribute("tone"), "tone");
        assert_eq!(normalize_attribute("  spaced\t\nout  "), "spaced out");
        assert_eq!(normalize_attribute("!!!"), "");
    }

    #[test]
    fn pool_threshold_boundary() {
        let mut mentions = Vec::new();
        for i in 0..10 {
            mentions.push(mention("dropped attr", i));
        }
        for i in 10..21 {
            mentions.push(mention("kept attr", i));
        }
        let pool = build_pool(&mentions, 11);
        assert!(pool.entries.get("dropped attr").is_none(), "count 10 removed");
        let kept = pool.entries.get("kept attr").expect("count 11 kept");
        assert_eq!(kept.count, 11);
        assert_eq!(kept.mention_ids.len(), 11);
    }

    #[test]
    fn empty_mentions_empty_pool() {
        assert!(build_pool(&[], 11).entries.is_empty());
    }

    #[test]
    fn frequency_weight_values() {
        assert!((frequency_weight(0.0) - 1.0).abs() < 1e-15);
        assert!((frequency_weight(1.718281828459045) - 2.0).abs() < 1e-12);
        assert!((frequency_weight(100.0) - 5.61512051684126).abs() < 1e-12);
    }

    #[test]
    fn enumeration_over_mock_is_deterministic() {
        let texts: Vec<UserText> = (0..6)
            .map(|i| UserText {
                id: format!("t{i}"),
                text: format!("Review number {i}: the battery life is dreadful."),
                source: TextSource::Amazon,
            })
            .collect();
        let backend = MockBackend::new(42);
        let (a, stats) = enumerate_attributes(&texts, &backend, 3).unwrap();
        let backend2 = MockBackend::new(42);
        let (b, _) = enumerate_attributes(&texts, &backend2, 1).unwrap();
        assert_eq!(a, b, "concurrency must not affect output order");
        assert!(stats.mentions >= texts.len(), "mock yields >= 2 per text");
        assert_eq!(stats.parse_failures, 0);
        assert!(a.iter().all(|m| m.name == normalize_attribute(&m.name)));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in ".{0,64}") {
            let once = normalize_attribute(&raw);
            prop_assert_eq!(normalize_attribute(&once), once);
        }

        #[test]
        fn pool_counts_match_brute_force(names in proptest::collection::vec(0..6usize, 0..80)) {
            let vocab = ["tone", "sarcasm", "urgency", "humor", "trust", "regret"];
            let mentions: Vec<AttributeMention> =
                names.iter().enumerate().map(|(i, &n)| mention(vocab[n], i)).collect();
            let pool = build_pool(&mentions, 1);
            let mut brute: std::collections::HashMap<&str, u64> = Default::default();
            for &n in &names {
                *brute.entry(vocab[n]).or_default() += 1;
            }
            prop_assert_eq!(pool.entries.len(), brute.len());
            for (name, count) in brute {
                prop_assert_eq!(pool.entries.get(name).unwrap().count, count);
            }
        }

        #[test]
        fn frequency_weight_monotone(count in 0u64..10_000) {
            let y = frequency_weight(count as f64);
            prop_assert!(y >= 1.0);
            prop_assert!(frequency_weight((count + 1) as f64) > y);
        }
    }
}
