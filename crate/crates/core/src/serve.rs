//! Line-delimited JSON protocol used by the heatmap viewer.
//!
//! Each request is one JSON object on one line; each response is one line.
//! Responses depend only on the stored sessions and the request, so the
//! handler can serve any number of clients without shared mutable state
//! beyond a read-through session cache.
//!
//! ```text
//! {"id":1,"method":"list_sessions"}
//! {"id":2,"method":"get_frame","session":"demo","index":4,"kind":"sample_delta"}
//! {"id":3,"method":"detect","session":"demo","index":4,"params":{"z":2.0}}
//! {"id":4,"method":"deposit_events","session":"demo","mode":"streaming"}
//! {"id":5,"method":"overlay","session":"demo","index":4,"window":3}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::{apply_compensation, CompensationMap};
use crate::detection::{
    container_features, deposit_events_in, deposit_events_streaming, detect_droplets, ContainerFeatures,
    DetectionParams, FrameDetections, TriggerParams,
};
use crate::error::{Error, Result};
use crate::heatmap::{load_session, temporal_average, Frame, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    /// The delta frame exactly as stored.
    Raw,
    Measured,
    #[default]
    SampleDelta,
    /// Sample delta scaled by the store's compensation map.
    Compensated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    #[default]
    Batch,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Request {
    ListSessions,
    GetFrame {
        session: String,
        index: usize,
        #[serde(default)]
        kind: FrameKind,
        #[serde(default)]
        window: Option<usize>,
    },
    Detect {
        session: String,
        index: usize,
        #[serde(default)]
        kind: FrameKind,
        #[serde(default)]
        window: Option<usize>,
        #[serde(default)]
        params: DetectionParams,
    },
    DepositEvents {
        session: String,
        #[serde(default)]
        params: TriggerParams,
        #[serde(default)]
        mode: TriggerMode,
    },
    Overlay {
        session: String,
        index: usize,
        #[serde(default)]
        kind: FrameKind,
        #[serde(default)]
        window: Option<usize>,
        #[serde(default)]
        params: DetectionParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub session: String,
    pub index: usize,
    pub kind: FrameKind,
    pub rows: usize,
    pub cols: usize,
    pub timestamp_s: f64,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayPayload {
    pub detections: FrameDetections,
    pub container: ContainerFeatures,
}

/// Read-only view over a directory of sessions. A session is either a
/// `<id>.json` file or a `<id>/session.json` file; each may hold a full
/// JSON session or a CSV sidecar. A top-level `manifest.json` is never
/// treated as a session.
#[derive(Debug)]
pub struct SessionStore {
    root: PathBuf,
    compensation: Option<CompensationMap>,
    cache: Mutex<HashMap<String, Arc<Session>>>,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>, compensation: Option<CompensationMap>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::io(
                &root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "session directory not found"),
            ));
        }
        Ok(Self {
            root,
            compensation,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Session ids in sorted order.
    pub fn ids(&self) -> Result<Vec<String>> {
        let entries = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.root, e))?.path();
            let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
            match stem {
                Some(s) if s == "manifest" => {}
                Some(s) if path.is_file() && path.extension().is_some_and(|e| e == "json") => ids.push(s),
                Some(s) if path.is_dir() && path.join("session.json").is_file() => ids.push(s),
                _ => {}
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::InvalidParameter(format!("bad session id {id:?}")));
        }
        if let Some(s) = self.cache.lock().expect("cache lock").get(id) {
            return Ok(Arc::clone(s));
        }
        let file = self.root.join(format!("{id}.json"));
        let sidecar = self.root.join(id).join("session.json");
        let session = if file.is_file() {
            load_session(&file)?
        } else if sidecar.is_file() {
            load_session(&sidecar)?
        } else {
            return Err(Error::InvalidParameter(format!("unknown session {id:?}")));
        };
        let session = Arc::new(session);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(id.to_string(), Arc::clone(&session));
        Ok(session)
    }

    fn single_frame(&self, session: &Session, index: usize, kind: FrameKind) -> Result<Frame> {
        match kind {
            FrameKind::Raw => session
                .deltas
                .get(index)
                .cloned()
                .ok_or(Error::IndexOutOfRange {
                    index,
                    len: session.len(),
                }),
            FrameKind::Measured => session.measured(index),
            FrameKind::SampleDelta => session.sample_delta(index),
            FrameKind::Compensated => {
                let map = self
                    .compensation
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("no compensation map loaded".into()))?;
                apply_compensation(&session.sample_delta(index)?, map)
            }
        }
    }

    /// Frame `index` of the given kind, optionally averaged over the
    /// `window` frames ending at `index`.
    pub fn frame(&self, id: &str, index: usize, kind: FrameKind, window: Option<usize>) -> Result<Frame> {
        let session = self.get(id)?;
        let w = window.unwrap_or(1);
        if w == 0 || w > index + 1 {
            return Err(Error::InvalidParameter(format!(
                "window {w} must lie in 1..={} for frame {index}",
                index + 1
            )));
        }
        let frames = (index + 1 - w..=index)
            .map(|n| self.single_frame(&session, n, kind))
            .collect::<Result<Vec<_>>>()?;
        let mut avg = temporal_average(&frames, w)?;
        avg.timestamp_s = frames.last().expect("window >= 1").timestamp_s;
        Ok(avg)
    }
}

fn detections(store: &SessionStore, id: &str, index: usize, kind: FrameKind, window: Option<usize>, params: &DetectionParams) -> Result<(Frame, FrameDetections)> {
    let frame = store.frame(id, index, kind, window)?;
    let regions = detect_droplets(&frame, params)?;
    Ok((
        frame,
        FrameDetections {
            frame_index: index,
            regions,
        },
    ))
}

/// Executes one request.
pub fn dispatch(store: &SessionStore, request: &Request) -> Result<Value> {
    Ok(match request {
        Request::ListSessions => {
            let mut out = Vec::new();
            for id in store.ids()? {
                let s = store.get(&id)?;
                out.push(SessionSummary {
                    frames: s.len(),
                    rows: s.profile.rows,
                    cols: s.profile.cols,
                    metadata: s.metadata.clone(),
                    id,
                });
            }
            serde_json::to_value(out)?
        }
        Request::GetFrame {
            session,
            index,
            kind,
            window,
        } => {
            let f = store.frame(session, *index, *kind, *window)?;
            serde_json::to_value(FramePayload {
                session: session.clone(),
                index: *index,
                kind: *kind,
                rows: f.rows(),
                cols: f.cols(),
                timestamp_s: f.timestamp_s,
                grid: f.into_values(),
            })?
        }
        Request::Detect {
            session,
            index,
            kind,
            window,
            params,
        } => serde_json::to_value(detections(store, session, *index, *kind, *window, params)?.1)?,
        Request::DepositEvents { session, params, mode } => {
            let s = store.get(session)?;
            let frames = (0..s.len()).map(|n| s.measured(n)).collect::<Result<Vec<_>>>()?;
            let events = match mode {
                TriggerMode::Batch => deposit_events_in(&frames, params)?,
                TriggerMode::Streaming => deposit_events_streaming(&frames, params)?,
            };
            json!({ "session": session, "mode": mode, "events": events })
        }
        Request::Overlay {
            session,
            index,
            kind,
            window,
            params,
        } => {
            let (frame, det) = detections(store, session, *index, *kind, *window, params)?;
            serde_json::to_value(OverlayPayload {
                container: container_features(&frame),
                detections: det,
            })?
        }
    })
}

/// Handles one request line and returns one response line (no newline).
/// Errors carry a stable `code`.
pub fn handle_line(store: &SessionStore, line: &str) -> String {
    let parsed: std::result::Result<Value, _> = serde_json::from_str(line);
    let (id, result) = match parsed {
        Err(e) => (Value::Null, Err(Error::from(e))),
        Ok(v) => {
            let id = v.get("id").cloned().unwrap_or(Value::Null);
            let result = serde_json::from_value::<Request>(v)
                .map_err(Error::from)
                .and_then(|req| dispatch(store, &req));
            (id, result)
        }
    };
    let body = match result {
        Ok(result) => json!({ "id": id, "ok": true, "result": result }),
        Err(e) => json!({ "id": id, "ok": false, "error": { "code": e.code(), "message": e.to_string() } }),
    };
    body.to_string()
}

/// Answers requests on one connection until the client closes it.
pub fn serve_connection(store: &SessionStore, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut resp = handle_line(store, &line);
        resp.push('\n');
        writer.write_all(resp.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections one at a time, forever. Stored sessions are never
/// modified.
pub fn serve(store: &SessionStore, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        if let Err(e) = serve_connection(store, stream?) {
            log::warn!("connection ended with error: {e}");
        }
    }
    Ok(())
}
