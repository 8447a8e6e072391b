use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};
use urag_core::provider::{HttpConfig, HttpProvider, LogprobProvider};
use urag_core::uncertainty::self_information_seq;
use urag_core::ProviderError;

/// Serves one canned (status, body) per connection and records request bodies.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn completion(tokens: &[&str], lps: &[Option<f64>]) -> String {
    json!({"choices": [{"text": "", "logprobs": {"tokens": tokens, "token_logprobs": lps}}]}).to_string()
}

fn provider(url: String) -> HttpProvider {
    let mut cfg = HttpConfig::new(url, "stub-model");
    cfg.initial_backoff = Duration::from_millis(1);
    cfg.timeout = Duration::from_secs(10);
    HttpProvider::new(cfg).unwrap()
}

#[test]
fn echoed_logprobs_become_self_information() {
    let body = completion(&["a", " b", " c"], &[Some(-0.1), Some(-2.3), Some(-0.7)]);
    let (url, seen, h) = stub(vec![(200, body)]);
    let scored = provider(url).score_text("a b c").unwrap();
    h.join().unwrap();
    let lps: Vec<f64> = scored.tokens.iter().map(|t| t.logprob).collect();
    assert_eq!(lps, vec![-0.1, -2.3, -0.7]);
    let si = self_information_seq(&lps).unwrap();
    assert_eq!(si, vec![0.1, 2.3, 0.7]);
    let req = &seen.lock().unwrap()[0];
    assert_eq!(req["prompt"], "a b c");
    assert_eq!(req["echo"], true);
    assert_eq!(req["max_tokens"], 0);
    assert_eq!(req["model"], "stub-model");
}

#[test]
fn unscored_first_token_gets_floor() {
    let body = completion(&["x", " y"], &[None, Some(-1.0)]);
    let (url, _, h) = stub(vec![(200, body)]);
    let scored = provider(url).score_text("x y").unwrap();
    h.join().unwrap();
    assert_eq!(scored.tokens[0].logprob, -20.0);
    assert_eq!(scored.tokens[1].logprob, -1.0);
}

#[test]
fn server_errors_are_retried() {
    let ok = completion(&["q"], &[Some(-0.5)]);
    let (url, seen, h) = stub(vec![(503, "{}".into()), (429, "{}".into()), (200, ok)]);
    let scored = provider(url).score_text("q").unwrap();
    h.join().unwrap();
    assert_eq!(scored.tokens.len(), 1);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_report_transport_error() {
    let (url, _, h) = stub(vec![(500, "{}".into()); 3]);
    let err = provider(url).score_text("q").unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, ProviderError::Transport { attempts: 3, .. }), "{err:?}");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, h) = stub(vec![(400, "bad prompt".into())]);
    let err = provider(url).score_text("q").unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn mismatched_logprob_count_is_rejected() {
    let body = completion(&["a", " b"], &[Some(-0.1)]);
    let (url, _, h) = stub(vec![(200, body)]);
    let err = provider(url).score_text("a b").unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err:?}");
}
