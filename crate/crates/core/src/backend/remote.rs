//! HTTP client for the inference-server protocol.
//!
//! `GET /v1/meta` -> `{"dims":[ch,H,W],"num_classes":k,"softmax":bool}`
//! `POST /v1/classify` with `{"dims":[n,ch,H,W],"data_b64":"..."}` ->
//! `{"scores":[[...],...]}`, the payload being little-endian `f32`.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{check_dims, to_scores, Backend, BackendError, ClassScores};
use crate::tensor::Tensor;

const BACKOFF_BASE_MS: u64 = 50;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetaResponse {
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub softmax: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifyRequest {
    pub dims: [usize; 4],
    pub data_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifyResponse {
    pub scores: Vec<Vec<f64>>,
}

/// Base64 of the concatenated little-endian `f32` payloads.
pub fn encode_payload(images: &[&Tensor]) -> String {
    let bytes: Vec<u8> = images
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    STANDARD.encode(bytes)
}

/// Inverse of [`encode_payload`]; checks the length against `dims`.
pub fn decode_payload(req: &ClassifyRequest) -> Result<Vec<Tensor>, String> {
    let bytes = STANDARD.decode(&req.data_b64).map_err(|e| format!("bad base64: {e}"))?;
    let [n, ch, h, w] = req.dims;
    let per = ch * h * w;
    if bytes.len() != 4 * n * per {
        return Err(format!("payload has {} bytes, dims {:?} need {}", bytes.len(), req.dims, 4 * n * per));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    values
        .chunks(per.max(1))
        .take(n)
        .map(|c| Tensor::new(vec![ch, h, w], c.to_vec()).map_err(|e| e.to_string()))
        .collect()
}

pub struct RemoteBackend {
    agent: ureq::Agent,
    base_url: String,
    meta: MetaResponse,
    max_retries: u32,
    batch_size: usize,
    softmax_applied: bool,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl RemoteBackend {
    /// Probes `/v1/meta` and fails fast when the server is unreachable.
    pub fn connect(
        base_url: &str,
        timeout_ms: u64,
        max_retries: u32,
        batch_size: usize,
        softmax_applied_by_model: bool,
    ) -> Result<Self, BackendError> {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build();
        let agent = ureq::Agent::new_with_config(config);
        let base_url = base_url.trim_end_matches('/').to_string();
        let url = format!("{base_url}/v1/meta");
        let meta: MetaResponse = with_retries(max_retries, || {
            let resp = agent.get(&url).call().map_err(|e| Failure::Retry(e.to_string()))?;
            read_json(resp)
        })
        .map_err(|e| BackendError::Config(format!("probe of {url} failed: {e}")))?;
        Ok(Self {
            agent,
            base_url,
            softmax_applied: softmax_applied_by_model || meta.softmax,
            meta,
            max_retries,
            batch_size: batch_size.max(1),
        })
    }

    pub fn meta(&self) -> &MetaResponse {
        &self.meta
    }

    fn post_batch(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>, BackendError> {
        let [ch, h, w] = self.meta.dims;
        let req = ClassifyRequest {
            dims: [images.len(), ch, h, w],
            data_b64: encode_payload(images),
        };
        let url = format!("{}/v1/classify", self.base_url);
        let resp: ClassifyResponse = with_retries(self.max_retries, || {
            let resp = self
                .agent
                .post(&url)
                .send_json(&req)
                .map_err(|e| Failure::Retry(e.to_string()))?;
            read_json(resp)
        })?;
        if resp.scores.len() != images.len() {
            return Err(BackendError::Model(format!(
                "server returned {} score rows for {} images",
                resp.scores.len(),
                images.len()
            )));
        }
        Ok(resp.scores)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(resp: ureq::http::Response<ureq::Body>) -> Result<T, Failure> {
    let status = resp.status().as_u16();
    let mut body = resp.into_body();
    if status >= 500 {
        return Err(Failure::Retry(format!("http status {status}")));
    }
    if status >= 400 {
        let text = body.read_to_string().unwrap_or_default();
        return Err(Failure::Fatal(format!("http status {status}: {text}")));
    }
    body.read_json::<T>().map_err(|e| Failure::Fatal(format!("bad response body: {e}")))
}

/// Exponential backoff: 50 ms, 100 ms, 200 ms, ...
fn with_retries<T>(max_retries: u32, mut f: impl FnMut() -> Result<T, Failure>) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match f() {
            Ok(v) => return Ok(v),
            Err(Failure::Fatal(message)) => {
                return Err(BackendError::Transport {
                    attempts: attempt + 1,
                    message,
                })
            }
            Err(Failure::Retry(message)) => {
                if attempt >= max_retries {
                    return Err(BackendError::Transport {
                        attempts: attempt + 1,
                        message,
                    });
                }
                thread::sleep(Duration::from_millis(BACKOFF_BASE_MS << attempt.min(10)));
                attempt += 1;
            }
        }
    }
}

impl Backend for RemoteBackend {
    fn input_dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn classify(&self, images: &[Tensor]) -> Vec<Result<ClassScores, BackendError>> {
        let mut out: Vec<Option<Result<ClassScores, BackendError>>> = vec![None; images.len()];
        let mut valid = Vec::new();
        for (i, img) in images.iter().enumerate() {
            match check_dims(self.meta.dims, i, img) {
                Ok(()) => valid.push(i),
                Err(e) => out[i] = Some(Err(e)),
            }
        }
        for chunk in valid.chunks(self.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            match self.post_batch(&batch) {
                Ok(rows) => {
                    for (&i, row) in chunk.iter().zip(rows) {
                        out[i] = Some(if row.len() == self.meta.num_classes {
                            to_scores(&row, self.softmax_applied)
                        } else {
                            Err(BackendError::Model(format!(
                                "score row has {} entries, expected {}",
                                row.len(),
                                self.meta.num_classes
                            )))
                        });
                    }
                }
                Err(e) => chunk.iter().for_each(|&i| out[i] = Some(Err(e.clone()))),
            }
        }
        out.into_iter().map(|r| r.expect("every index filled")).collect()
    }
}
