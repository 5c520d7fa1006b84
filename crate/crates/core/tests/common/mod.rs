#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use medqa_rag::dataset::{McqRecord, OptionKey};
use medqa_rag::providers::mock::{HashEmbedder, MockChat, MockPages, MockSearch};
use medqa_rag::providers::{
    CallRuntime, ChatRequest, EmbedBackend, PageBackend, Providers, SearchBackend,
};
use medqa_rag::textcorpus::Chunk;
use medqa_rag::vecindex::{self, VectorIndex};

/// Which prompt template a chat request was rendered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Call {
    Router,
    Summarize,
    Terms,
    SelfCheck,
    ZeroShot,
    Local,
    Web,
}

pub fn classify(req: &ChatRequest) -> Call {
    let text = req.user_text();
    if text.contains("রাউটার মডেল") {
        Call::Router
    } else if text.contains("bullet points") {
        Call::Summarize
    } else if text.contains("key terms") {
        Call::Terms
    } else if text.contains("Is the proposed answer correct?") {
        Call::SelfCheck
    } else if text.contains("Textbook passages:") {
        Call::Local
    } else if text.contains("Web notes:") {
        Call::Web
    } else {
        Call::ZeroShot
    }
}

pub fn answer_json(option: &str, rationale: &str) -> String {
    serde_json::json!({ "O": option, "R": rationale }).to_string()
}

pub fn record(id: &str, question: &str, answer: OptionKey) -> McqRecord {
    McqRecord {
        id: id.into(),
        question: question.into(),
        options: ["মাইটোকন্ড্রিয়া", "রাইবোজোম", "গলজি বস্তু", "লাইসোজোম"].map(String::from),
        answer_key: answer,
        rationale: None,
        metadata: BTreeMap::new(),
    }
}

pub fn providers_with(
    chat: MockChat,
    search: impl SearchBackend + 'static,
    pages: impl PageBackend + 'static,
) -> Providers {
    providers_full(
        Arc::new(chat),
        Arc::new(HashEmbedder::new(16)),
        search,
        pages,
    )
}

pub fn providers_full(
    chat: Arc<MockChat>,
    embed: Arc<dyn EmbedBackend>,
    search: impl SearchBackend + 'static,
    pages: impl PageBackend + 'static,
) -> Providers {
    Providers::with_runtime(
        Arc::new(CallRuntime::instant()),
        chat,
        embed,
        Arc::new(search),
        Arc::new(pages),
    )
}

pub fn offline(chat: MockChat) -> Providers {
    providers_with(chat, MockSearch::with_hits(0), MockPages::new())
}

/// Index over the given passage texts, embedded by the providers' embedder.
pub fn index_of(providers: &Providers, texts: &[String]) -> VectorIndex {
    let chunks: Vec<Chunk> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Chunk {
            chunk_id: format!("doc#{i:04}"),
            text: t.clone(),
            char_start: 0,
            char_len: t.chars().count(),
        })
        .collect();
    vecindex::build_index(&chunks, &providers.embedder, None).unwrap()
}

/// Bangla filler of exactly `n` chars.
pub fn text_of_len(n: usize) -> String {
    "কোষ".chars().cycle().take(n).collect()
}

/// Writes a corpus manifest plus one document and returns the manifest path.
pub fn write_corpus(dir: &Path, body: &str) -> PathBuf {
    fs::write(dir.join("biology.txt"), body).unwrap();
    let manifest = dir.join("corpus.toml");
    fs::write(
        &manifest,
        "[[documents]]\npath = \"biology.txt\"\ndoc_id = \"bio\"\nsource_label = \"Biology\"\n",
    )
    .unwrap();
    manifest
}

/// Gold answer of synthetic question `i`.
pub fn synthetic_gold(i: usize) -> OptionKey {
    OptionKey::ALL[i % 4]
}

/// Writes `n` synthetic questions as CSV. Every question carries its number
/// as "প্রশ্ন নং {i}:" so mocks can key their replies on it.
pub fn write_synthetic_dataset(path: &Path, n: usize) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record([
        "id",
        "question",
        "option_a",
        "option_b",
        "option_c",
        "option_d",
        "answer",
        "rationale",
    ])
    .unwrap();
    for i in 0..n {
        let q = format!("প্রশ্ন নং {i}: কোন অঙ্গাণু শক্তি উৎপাদন করে?");
        let opts = [0, 1, 2, 3].map(|j| format!("বিকল্প {i}-{j}"));
        let rationale = if i % 5 == 4 {
            String::new()
        } else {
            format!("মাইটোকন্ড্রিয়া কোষের শক্তিঘর, প্রশ্ন {i}")
        };
        w.write_record([
            format!("q{i:02}"),
            q,
            opts[0].clone(),
            opts[1].clone(),
            opts[2].clone(),
            opts[3].clone(),
            synthetic_gold(i).as_str().to_string(),
            rationale,
        ])
        .unwrap();
    }
    w.flush().unwrap();
}

/// Question number embedded by [`write_synthetic_dataset`].
pub fn question_number(req: &ChatRequest) -> Option<usize> {
    let text = req.user_text();
    let at = text.find("প্রশ্ন নং ")? + "প্রশ্ন নং ".len();
    let digits: String = text[at..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

/// Scripted chat for the synthetic dataset: questions 0..15 are answered
/// correctly, 15..20 with the next option over. Router says yes, summaries
/// and term lists are fixed strings.
pub fn synthetic_chat() -> MockChat {
    MockChat::from_fn(|req| {
        Ok(match classify(req) {
            Call::Router => "Yes".into(),
            Call::Summarize => format!("- {}", text_of_len(260)),
            Call::Terms => "মাইটোকন্ড্রিয়া, শ্বসন".into(),
            Call::SelfCheck => "Yes".into(),
            _ => {
                let i = question_number(req).expect("synthetic question number");
                let gold = synthetic_gold(i);
                let pick = if i < 15 {
                    gold
                } else {
                    OptionKey::ALL[(gold.index() + 1) % 4]
                };
                answer_json(pick.as_str(), &format!("মাইটোকন্ড্রিয়া কোষের শক্তিঘর {i}"))
            }
        })
    })
}
