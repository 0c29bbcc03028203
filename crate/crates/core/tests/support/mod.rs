//! A local HTTP server that speaks the adapters' wire format and answers
//! from a simulated world.
#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::Engine;
use opt2i_core::backends::http::{EndpointConfig, HttpChat, HttpClient, HttpEmbedder, HttpImages, HttpVqa, Semaphore};
use opt2i_core::backends::{Backends, Embedder, GenerationParams, ImageGenerator, QuestionAnswerer, TextGenerator};
use opt2i_core::scoring::LlmGraphGenerator;
use opt2i_core::simulation::{SimBackend, SimWorld};
use opt2i_core::ImageRef;
use serde_json::{json, Value};

/// Scripted failure for the next requests, consumed one per request.
#[derive(Debug, Clone)]
pub enum Fault {
    Status(u16, &'static str),
    Garbage,
}

pub struct MockServer {
    server: Arc<tiny_http::Server>,
    pub requests: Arc<AtomicU64>,
    pub faults: Arc<Mutex<Vec<Fault>>>,
    /// Value of the last Authorization header received.
    pub last_auth: Arc<Mutex<Option<String>>>,
    workers: Vec<JoinHandle<()>>,
    port: u16,
}

impl MockServer {
    pub fn start(world: Arc<SimWorld>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let requests = Arc::new(AtomicU64::new(0));
        let faults = Arc::new(Mutex::new(Vec::new()));
        let last_auth = Arc::new(Mutex::new(None));
        let sim = Arc::new(SimBackend::new(world));
        let workers = (0..4)
            .map(|_| {
                let server = server.clone();
                let requests = requests.clone();
                let faults = faults.clone();
                let last_auth = last_auth.clone();
                let sim = sim.clone();
                std::thread::spawn(move || {
                    for mut req in server.incoming_requests() {
                        requests.fetch_add(1, Ordering::SeqCst);
                        let auth = req
                            .headers()
                            .iter()
                            .find(|h| h.field.equiv("Authorization"))
                            .map(|h| h.value.to_string());
                        *last_auth.lock().unwrap() = auth;
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        let fault = {
                            let mut f = faults.lock().unwrap();
                            (!f.is_empty()).then(|| f.remove(0))
                        };
                        let (status, text) = match fault {
                            Some(Fault::Status(s, msg)) => (s, msg.to_string()),
                            Some(Fault::Garbage) => (200, "not json".to_string()),
                            None => match handle(&sim, req.url(), &body) {
                                Ok(v) => (200, v.to_string()),
                                Err(e) => (400, json!({ "error": e }).to_string()),
                            },
                        };
                        let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status));
                    }
                })
            })
            .collect();
        Self {
            server,
            requests,
            faults,
            last_auth,
            workers,
            port,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://127.0.0.1:{}{path}", self.port)
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn inject(&self, faults: impl IntoIterator<Item = Fault>) {
        self.faults.lock().unwrap().extend(faults);
    }

    pub fn endpoint(&self, path: &str, model: &str) -> EndpointConfig {
        let mut ep = EndpointConfig::new(self.url(path));
        ep.model = Some(model.to_string());
        ep.timeout_secs = 10;
        ep
    }

    /// HTTP adapters for all four roles, with graphs generated over chat.
    pub fn backends(&self, image_dir: &Path) -> Backends {
        let limit = Arc::new(Semaphore::new(8));
        let client = |path: &str, model: &str| {
            HttpClient::new(self.endpoint(path, model), limit.clone())
                .expect("client")
                .with_backoff(std::time::Duration::from_millis(1))
        };
        let llm: Arc<dyn TextGenerator> = Arc::new(HttpChat::new(client("/chat", "mock-llm")));
        Backends {
            llm: llm.clone(),
            images: Arc::new(HttpImages::new(client("/images", "mock-t2i"), image_dir)),
            embedder: Arc::new(HttpEmbedder::new(client("/embed", "mock-clip"))),
            vqa: Arc::new(HttpVqa::new(client("/vqa", "mock-vqa"))),
            graphs: Arc::new(LlmGraphGenerator::new(llm)),
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn str_field<'a>(v: &'a Value, name: &str) -> Result<&'a str, String> {
    v.get(name).and_then(Value::as_str).ok_or_else(|| format!("missing {name}"))
}

fn sim_image(id: &str) -> ImageRef {
    ImageRef {
        backend_id: "mock".into(),
        prompt_digest: String::new(),
        seed: 0,
        payload: id.to_string(),
    }
}

fn handle(sim: &SimBackend, url: &str, body: &str) -> Result<Value, String> {
    let req: Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    match url {
        "/chat" => {
            let messages = req.get("messages").and_then(Value::as_array).ok_or("missing messages")?;
            let text_of = |role: &str| {
                messages
                    .iter()
                    .find(|m| m.get("role").and_then(Value::as_str) == Some(role))
                    .and_then(|m| m.get("content"))
                    .and_then(Value::as_str)
            };
            let params = GenerationParams {
                temperature: req.get("temperature").and_then(Value::as_f64).unwrap_or(1.0),
                max_tokens: req.get("max_tokens").and_then(Value::as_u64).unwrap_or(2048) as u32,
                seed: req.get("seed").and_then(Value::as_u64),
            };
            let reply = TextGenerator::generate(sim, text_of("system"), text_of("user").ok_or("no user message")?, &params)
                .map_err(|e| e.to_string())?;
            Ok(json!({ "choices": [{ "message": { "role": "assistant", "content": reply } }] }))
        }
        "/images" => {
            let prompt = str_field(&req, "prompt")?;
            let seed = req.get("seed").and_then(Value::as_u64).ok_or("missing seed")?;
            let img = ImageGenerator::generate(sim, prompt, seed).map_err(|e| e.to_string())?;
            let bytes = base64::engine::general_purpose::STANDARD.encode(img.payload.as_bytes());
            Ok(json!({ "id": img.payload, "image": bytes }))
        }
        "/embed" => {
            let image = sim_image(str_field(&req, "image_id")?);
            let cos = sim.similarity(str_field(&req, "text")?, &image).map_err(|e| e.to_string())?;
            Ok(json!({ "cosine": cos }))
        }
        "/vqa" => {
            let image = sim_image(str_field(&req, "image_id")?);
            let p = sim.answer(str_field(&req, "question")?, &image).map_err(|e| e.to_string())?;
            Ok(json!({ "yes_probability": p }))
        }
        other => Err(format!("no route {other}")),
    }
}
