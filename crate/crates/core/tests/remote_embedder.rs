use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use pathwise_core::embedding::{EmbedRequest, EmbedResponse, Embedder, RemoteEmbedder};
use pathwise_core::Error;

/// Serves `requests` POSTs, answering each with `reply(texts)`.
fn serve<F>(requests: usize, reply: F) -> String
where
    F: Fn(&[String]) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            assert!(request_line.starts_with("POST /embed "), "{request_line}");
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let req: EmbedRequest = serde_json::from_slice(&body).unwrap();
            let (status, payload) = reply(&req.texts);
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    format!("http://{addr}")
}

/// Deterministic fake model: vector from text length and first byte.
fn fake_vectors(texts: &[String], dim: usize) -> Vec<Vec<f64>> {
    texts
        .iter()
        .map(|t| {
            let mut v = vec![0.0; dim];
            v[t.len() % dim] += 3.0;
            v[usize::from(t.bytes().next().unwrap_or(0)) % dim] += 4.0;
            v
        })
        .collect()
}

#[test]
fn batches_preserve_order_and_normalize() {
    let endpoint = serve(3, |texts| {
        let resp = EmbedResponse { vectors: fake_vectors(texts, 8), model: "fake".into(), dimension: 8 };
        (200, serde_json::to_string(&resp).unwrap())
    });
    let e = RemoteEmbedder::new(&endpoint, 8, Duration::from_secs(5)).with_batch_size(2);
    let texts = ["alpha", "be", "alpha", "gamma ray", "d"];
    let out = e.embed_batch(&texts).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|v| (v.norm() - 1.0).abs() < 1e-4));
    assert_eq!(out[0], out[2]);
    let owned: Vec<String> = texts.iter().map(|s| s.to_string()).collect();
    for (got, raw) in out.iter().zip(fake_vectors(&owned, 8)) {
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in got.as_slice().iter().zip(&raw) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }
}

#[test]
fn wrong_dimension_is_reported() {
    let endpoint = serve(1, |texts| {
        let resp = EmbedResponse { vectors: fake_vectors(texts, 4), model: "fake".into(), dimension: 4 };
        (200, serde_json::to_string(&resp).unwrap())
    });
    let e = RemoteEmbedder::new(&endpoint, 8, Duration::from_secs(5));
    assert!(matches!(e.embed_batch(&["x"]), Err(Error::DimensionMismatch { expected: 8, actual: 4 })));
}

#[test]
fn short_response_and_server_errors_are_service_errors() {
    let endpoint = serve(2, |texts| {
        if texts.len() > 1 {
            let resp = EmbedResponse { vectors: fake_vectors(&texts[..1], 8), model: "fake".into(), dimension: 8 };
            (200, serde_json::to_string(&resp).unwrap())
        } else {
            (500, "{\"detail\":\"model failure\"}".into())
        }
    });
    let e = RemoteEmbedder::new(&endpoint, 8, Duration::from_secs(5));
    assert!(matches!(e.embed_batch(&["a", "b"]), Err(Error::EmbeddingService(_))));
    assert!(matches!(e.embed_batch(&["a"]), Err(Error::EmbeddingService(_))));
}

#[test]
fn unreachable_endpoint_is_a_service_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let e = RemoteEmbedder::new(&format!("http://127.0.0.1:{port}"), 8, Duration::from_millis(500));
    assert!(matches!(e.embed("x"), Err(Error::EmbeddingService(_))));
}
