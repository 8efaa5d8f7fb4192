#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Cosine distance straight from the definition, on raw vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
}

/// Average-linkage clustering that recomputes every inter-cluster mean
/// from the point distances at every step.
pub fn naive_average_linkage(vectors: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| cosine_distance(&vectors[i], &vectors[j])).collect())
        .collect();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut sum = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += d[i][j];
                    }
                }
                let avg = sum / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(_, _, bd)| avg < bd) {
                    best = Some((a, b, avg));
                }
            }
        }
        match best {
            Some((a, b, avg)) if avg <= threshold => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }
    canonical(clusters)
}

/// Partition with sorted members, ordered by smallest member.
pub fn canonical(mut p: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in &mut p {
        c.sort_unstable();
    }
    p.sort();
    p
}

/// Unit-scale points scattered around a few random centers, each scaled by
/// a random positive factor.
pub fn clustered_instance(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=n.div_ceil(3).max(1)))
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let spread: f64 = rng.random_range(0.05..0.9);
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            let norm = c.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            let scale: f64 = rng.random_range(0.1..10.0);
            c.iter()
                .map(|x| {
                    let noise: f64 = rng.sample(StandardNormal);
                    scale * (x / norm + spread * noise / (dim as f64).sqrt())
                })
                .collect()
        })
        .collect()
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture_dir() -> PathBuf {
    workspace_root().join("fixtures/two_questions")
}

/// A recorded HTTP request.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: serde_json::Value,
}

/// Minimal HTTP/1.1 server answering each request with `respond`. Runs
/// until the process exits.
pub fn mock_server<F>(respond: F) -> (String, Arc<Mutex<Vec<Recorded>>>)
where
    F: Fn(usize, &Recorded) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let log: Arc<Mutex<Vec<Recorded>>> = Arc::default();
    let log2 = Arc::clone(&log);
    let respond = Arc::new(respond);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let log = Arc::clone(&log2);
            let respond = Arc::clone(&respond);
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    return;
                }
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut headers = Vec::new();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                        if k == "content-length" {
                            len = v.parse().unwrap();
                        }
                        headers.push((k, v));
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let rec = Recorded {
                    path,
                    headers,
                    body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                };
                let idx = {
                    let mut l = log.lock().unwrap();
                    l.push(rec.clone());
                    l.len() - 1
                };
                let (status, body) = respond(idx, &rec);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            });
        }
    });
    (url, log)
}
