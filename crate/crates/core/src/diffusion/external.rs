//! Bridge to an out-of-process denoiser.
//!
//! The transport is newline-delimited JSON over a byte stream (normally the
//! stdin/stdout of a child process). Each request is one object with an
//! `op` field; each response is one object with `ok` and either the payload
//! or an `error` message.
//!
//! ```text
//! {"op":"info"}
//!   -> {"ok":true,"info":{"width":..,"height":..,"channels":..,"betas":[..],"camera_conditioned":..}}
//! {"op":"predict","model":null,"t":412,"x":[..],"cond":{..}}
//!   -> {"ok":true,"eps":[..]}
//! {"op":"finetune","model":null,"iters":200,"batch":8,"lr":2e-6,"seed":7,"data":[{"x":[..],"cond":{..}}]}
//!   -> {"ok":true,"model":"m1"}
//! ```
//!
//! Images travel as flat row-major `(y, x, channel)` arrays in `[0, 1]`.
//! `model` selects a previously fine-tuned model (`null` is the base). The
//! learning rate is the nominal one from the configuration; interpreting it
//! is the server's business.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::seeded;

use super::backend::{DenoiserBackend, TuneParams};
use super::condition::Condition;
use super::schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub betas: Vec<f64>,
    pub camera_conditioned: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneSample {
    pub x: Vec<f64>,
    pub cond: Condition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Predict { model: Option<String>, t: usize, x: Vec<f64>, cond: Condition },
    Finetune { model: Option<String>, iters: usize, batch: usize, lr: f64, seed: u64, data: Vec<TuneSample> },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<BackendInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn call(&mut self, req: &Request) -> Result<Response> {
        let line = serde_json::to_string(req).map_err(|e| Error::External(e.to_string()))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf)? == 0 {
            return Err(Error::External("backend closed the connection".into()));
        }
        let resp: Response =
            serde_json::from_str(&buf).map_err(|e| Error::External(format!("malformed response: {e}")))?;
        if !resp.ok {
            return Err(Error::External(resp.error.unwrap_or_else(|| "unspecified failure".into())));
        }
        Ok(resp)
    }
}

/// Client side of the bridge. Clones share the connection; requests are
/// serialized through it.
#[derive(Clone)]
pub struct ExternalBackend {
    label: String,
    model: Option<String>,
    info: BackendInfo,
    schedule: DiffusionSchedule,
    conn: Arc<Mutex<Connection>>,
}

impl fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalBackend").field("label", &self.label).field("model", &self.model).finish()
    }
}

impl ExternalBackend {
    /// Launches the executable at `path` and talks to it over its stdio.
    pub fn spawn(path: &Path) -> Result<Self> {
        let mut child = Command::new(path)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot launch {}: {e}", path.display())))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let conn = Connection { reader: Box::new(BufReader::new(stdout)), writer: Box::new(stdin), child: Some(child) };
        Self::handshake(path.display().to_string(), conn)
    }

    /// Uses an already-open byte stream pair.
    pub fn from_streams(
        label: impl Into<String>,
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self> {
        let conn = Connection { reader: Box::new(BufReader::new(reader)), writer: Box::new(writer), child: None };
        Self::handshake(label.into(), conn)
    }

    fn handshake(label: String, mut conn: Connection) -> Result<Self> {
        let info = conn.call(&Request::Info)?.info.ok_or_else(|| Error::External("info response without info".into()))?;
        if info.width == 0 || info.height == 0 || info.channels == 0 {
            return Err(Error::External("backend reported an empty image shape".into()));
        }
        let schedule = DiffusionSchedule::from_betas(info.betas.clone())
            .map_err(|e| Error::External(format!("backend schedule: {e}")))?;
        Ok(Self { label, model: None, info, schedule, conn: Arc::new(Mutex::new(conn)) })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn identity(&self) -> String {
        format!("external:{}#{}", self.label, self.model.as_deref().unwrap_or("base"))
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.info.width, self.info.height, self.info.channels)
    }

    pub fn camera_conditioned(&self) -> bool {
        self.info.camera_conditioned
    }

    fn call(&self, req: &Request) -> Result<Response> {
        self.conn.lock().map_err(|_| Error::External("connection poisoned".into()))?.call(req)
    }

    fn check_shape(&self, x: &Image) -> Result<()> {
        let (w, h, c) = self.image_shape();
        if (x.width(), x.height(), x.channels()) != (w, h, c) {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}x{h}x{c}"),
                got: format!("{}x{}x{}", x.width(), x.height(), x.channels()),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        self.schedule.check_t(t)?;
        self.check_shape(x_t)?;
        let resp = self.call(&Request::Predict { model: self.model.clone(), t, x: x_t.data().to_vec(), cond: *cond })?;
        let eps = resp.eps.ok_or_else(|| Error::External("predict response without eps".into()))?;
        Image::from_vec(x_t.width(), x_t.height(), x_t.channels(), eps)
            .map_err(|_| Error::External("predict response has the wrong length".into()))
    }

    pub fn finetune(&self, data: &[(Image, Condition)], params: &TuneParams, seed: u64) -> Result<Self> {
        for (img, _) in data {
            self.check_shape(img)?;
        }
        let resp = self.call(&Request::Finetune {
            model: self.model.clone(),
            iters: params.iters,
            batch: params.batch,
            lr: params.lr,
            seed,
            data: data.iter().map(|(x, c)| TuneSample { x: x.data().to_vec(), cond: *c }).collect(),
        })?;
        let model = resp.model.ok_or_else(|| Error::External("finetune response without model id".into()))?;
        Ok(Self { model: Some(model), ..self.clone() })
    }
}

/// Serves a local backend over the bridge protocol until the reader hits
/// end of stream. Fine-tuning requests train with `lr * lr_multiplier`.
pub fn serve(base: DenoiserBackend, lr_multiplier: f64, reader: impl BufRead, mut writer: impl Write) -> Result<()> {
    let mut models: HashMap<String, DenoiserBackend> = HashMap::new();
    let (w, h, c) = base.image_shape();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Err(e) => Response { ok: false, error: Some(format!("bad request: {e}")), ..Default::default() },
            Ok(req) => {
                let lookup = |m: &Option<String>| -> Result<&DenoiserBackend> {
                    match m {
                        None => Ok(&base),
                        Some(id) => models.get(id).ok_or_else(|| Error::External(format!("unknown model '{id}'"))),
                    }
                };
                let result: Result<Response> = match req {
                    Request::Info => Ok(Response {
                        ok: true,
                        info: Some(BackendInfo {
                            width: w,
                            height: h,
                            channels: c,
                            betas: base.schedule().betas.clone(),
                            camera_conditioned: base.camera_conditioned(),
                        }),
                        ..Default::default()
                    }),
                    Request::Predict { model, t, x, cond } => lookup(&model).and_then(|b| {
                        let img = Image::from_vec(w, h, c, x)?;
                        let eps = b.predict(&img, t, &cond)?;
                        Ok(Response { ok: true, eps: Some(eps.into_vec()), ..Default::default() })
                    }),
                    Request::Finetune { model, iters, batch, lr, seed, data } => lookup(&model)
                        .and_then(|b| {
                            let data = data
                                .into_iter()
                                .map(|s| Ok((Image::from_vec(w, h, c, s.x)?, s.cond)))
                                .collect::<Result<Vec<_>>>()?;
                            let params = TuneParams { iters, batch, lr, lr_multiplier };
                            b.finetune(&data, &params, &mut seeded(seed))
                        })
                        .map(|tuned| {
                            let id = format!("m{}", models.len() + 1);
                            models.insert(id.clone(), tuned);
                            Response { ok: true, model: Some(id), ..Default::default() }
                        }),
                };
                result.unwrap_or_else(|e| Response { ok: false, error: Some(e.to_string()), ..Default::default() })
            }
        };
        let out = serde_json::to_string(&resp).map_err(|e| Error::External(e.to_string()))?;
        writer.write_all(out.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
