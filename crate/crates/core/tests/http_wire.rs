//! Real HTTP round trips against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use medqa_rag::providers::http::{HttpPages, OpenAiCompatChat, OpenAiCompatEmbed, SerperSearch};
use medqa_rag::providers::{
    CallLog, CallRuntime, ChatBackend, ChatClient, ChatMessage, ChatRequest, EmbedBackend,
    ErrorClass, PageBackend, ProviderError, RecordingSleeper, RetryPolicy, SearchBackend,
};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    request_line: String,
    headers: Vec<(String, String)>,
    body: String,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap()
    }
}

/// Serves one canned response per connection, in order, and records what
/// it was sent.
fn serve(responses: Vec<(u16, &'static str, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, content_type, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

fn request() -> ChatRequest {
    ChatRequest::new(
        "llama-3.3-70b",
        vec![ChatMessage::system("sys"), ChatMessage::user("প্রশ্ন")],
    )
}

const CHAT_OK: &str =
    r#"{"choices":[{"message":{"role":"assistant","content":"{\"O\":\"B\",\"R\":\"ব্যাখ্যা\"}"}}]}"#;

#[test]
fn chat_round_trip() {
    let (base, seen) = serve(vec![(200, "application/json", CHAT_OK.into())]);
    let chat = OpenAiCompatChat::new(&format!("{base}/openai/v1"), Some("secret".into()));
    let reply = chat.send(&request().with_temperature(0.7)).unwrap();
    assert_eq!(reply, r#"{"O":"B","R":"ব্যাখ্যা"}"#);

    let seen = seen.lock().unwrap();
    assert_eq!(
        seen[0].request_line,
        "POST /openai/v1/chat/completions HTTP/1.1"
    );
    assert_eq!(seen[0].header("authorization"), Some("Bearer secret"));
    let body = seen[0].json();
    assert_eq!(body["model"], "llama-3.3-70b");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["messages"][1]["content"], "প্রশ্ন");
    assert_eq!(body["messages"][0]["role"], "system");
}

#[test]
fn status_codes_map_to_error_classes() {
    let cases: [(u16, ErrorClass); 4] = [
        (429, ErrorClass::RateLimit),
        (503, ErrorClass::Server),
        (401, ErrorClass::Auth),
        (400, ErrorClass::BadRequest),
    ];
    for (status, class) in cases {
        let (base, _) = serve(vec![(status, "application/json", "{}".into())]);
        let err = OpenAiCompatChat::new(&base, None)
            .send(&request())
            .unwrap_err();
        assert_eq!(err.class(), class, "{status}");
    }
}

#[test]
fn malformed_body_is_malformed() {
    let (base, _) = serve(vec![(200, "application/json", r#"{"choices":[]}"#.into())]);
    let err = OpenAiCompatChat::new(&base, None)
        .send(&request())
        .unwrap_err();
    assert!(matches!(err, ProviderError::Malformed(_)));
}

#[test]
fn connection_refused_is_connection_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = OpenAiCompatChat::new(&format!("http://127.0.0.1:{port}"), None)
        .send(&request())
        .unwrap_err();
    assert_eq!(err.class(), ErrorClass::Connection);
}

#[test]
fn retries_over_the_wire_then_succeeds() {
    let (base, seen) = serve(vec![
        (503, "application/json", "{}".into()),
        (429, "application/json", "{}".into()),
        (200, "application/json", CHAT_OK.into()),
    ]);
    let sleeper = Arc::new(RecordingSleeper::default());
    let runtime = Arc::new(CallRuntime::new(
        RetryPolicy::default(),
        sleeper.clone(),
        Duration::ZERO,
        Arc::new(CallLog::in_memory()),
    ));
    let client = ChatClient::new(Arc::new(OpenAiCompatChat::new(&base, None)), runtime);
    let c = client.chat_complete(&request()).unwrap();
    assert_eq!(c.attempts, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(
        sleeper.delays(),
        vec![Duration::from_secs(1), Duration::from_secs(2)]
    );
}

#[test]
fn embeddings_round_trip() {
    let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
    let (base, seen) = serve(vec![(200, "application/json", body.into())]);
    let embed = OpenAiCompatEmbed::new(&base, "bge-m3", None);
    let v = embed.embed_batch(&["ক".into(), "খ".into()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let seen = seen.lock().unwrap();
    assert!(seen[0].request_line.starts_with("POST /embeddings "));
    assert_eq!(seen[0].json()["input"][1], "খ");
    assert_eq!(seen[0].json()["model"], "bge-m3");
}

#[test]
fn search_round_trip() {
    let body = r#"{"organic":[
        {"title":"b","link":"https://b.test","snippet":"","position":2},
        {"title":"a","link":"https://a.test","snippet":"s","position":1}
    ]}"#;
    let (base, seen) = serve(vec![(200, "application/json", body.into())]);
    let search = SerperSearch::new(&format!("{base}/search"), "k".into());
    let hits = search.search("মাইটোকন্ড্রিয়া", 8).unwrap();
    assert_eq!(
        hits.iter().map(|h| h.url.as_str()).collect::<Vec<_>>(),
        ["https://a.test", "https://b.test"]
    );
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].header("x-api-key"), Some("k"));
    assert_eq!(seen[0].json()["q"], "মাইটোকন্ড্রিয়া");
    assert_eq!(seen[0].json()["num"], 8);
}

#[test]
fn page_fetch_round_trip() {
    let html = "<html><body><p>কোষ</p></body></html>".to_string();
    let (base, _) = serve(vec![
        (200, "text/html; charset=utf-8", html.clone()),
        (404, "text/html", "gone".into()),
    ]);
    let page = HttpPages
        .fetch(&format!("{base}/p"), Duration::from_secs(5))
        .unwrap();
    assert_eq!(page.status, 200);
    assert_eq!(page.body, html);
    assert!(page.content_type.unwrap().starts_with("text/html"));
    let err = HttpPages
        .fetch(&format!("{base}/q"), Duration::from_secs(5))
        .unwrap_err();
    assert_eq!(err.class(), ErrorClass::BadRequest);
}
