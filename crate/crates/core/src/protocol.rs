//! Newline-delimited JSON protocol between the engine and an external
//! evaluator process.
//!
//! Every line is one [`Message`]: `{"id": <int>, "kind": <kind>, ...}`. The
//! engine opens with `hello` (answered by `hello` carrying the schema version
//! and the evaluate window), sends the `space` document (answered by a
//! `result` carrying the player count), and then issues `train` and
//! `evaluate` requests. Each request id gets exactly one `result` or `error`
//! with the same id. Coalition masks travel as base64 of little-endian bytes,
//! bit `i` = player `i`. Accuracies are fractions in `[0, 1]`; anything else
//! is a protocol error.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Coalition, EvalError, PopcountGame, ValueFunction};
use crate::scalar::Scalar;
use crate::space::{SearchSpace, SpaceDoc};
use crate::synthetic::{make_game, GameSpec, InteractionGame};

pub const PROTOCOL_VERSION: u32 = 1;

const TAIL_LINES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: i64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Hello {
        version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        meta: Option<serde_json::Value>,
    },
    Space {
        space: SpaceDoc,
    },
    Train {
        steps: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        alpha_trainable: bool,
    },
    Evaluate {
        mask: String,
        players: usize,
    },
    Result {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        accuracy: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batches_used: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        players: Option<usize>,
    },
    Error {
        message: String,
    },
    Shutdown,
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "hello",
            Body::Space { .. } => "space",
            Body::Train { .. } => "train",
            Body::Evaluate { .. } => "evaluate",
            Body::Result { .. } => "result",
            Body::Error { .. } => "error",
            Body::Shutdown => "shutdown",
        }
    }

    fn ack() -> Self {
        Body::Result {
            accuracy: None,
            batches_used: None,
            players: None,
        }
    }
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("messages serialize");
        line.push('\n');
        line
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

pub fn encode_mask(coalition: &Coalition) -> String {
    BASE64.encode(coalition.to_le_bytes())
}

pub fn decode_mask(players: usize, mask: &str) -> Option<Coalition> {
    let bytes = BASE64.decode(mask).ok()?;
    Coalition::from_le_bytes(players, &bytes)
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("could not launch evaluator `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error("evaluator pipe failed: {0}")]
    Io(String),
    #[error("{what} request {id} timed out after {after:?}")]
    Timeout {
        id: i64,
        what: &'static str,
        after: Duration,
    },
    #[error("evaluator speaks protocol version {got}, expected {expected}")]
    Version { expected: u32, got: u32 },
    #[error("evaluator reports {got} players, space has {expected}")]
    PlayerMismatch { expected: usize, got: usize },
    #[error("response id {got} does not match any outstanding request{}", format_expected(.expected))]
    MismatchedId { expected: Option<i64>, got: i64 },
    #[error("request {id}: accuracy {accuracy} outside [0, 1]")]
    AccuracyOutOfRange { id: i64, accuracy: f64 },
    #[error("malformed evaluator line `{line}`: {reason}")]
    Malformed { line: String, reason: String },
    #[error("request {id}: unexpected `{kind}` reply")]
    UnexpectedKind { id: i64, kind: String },
    #[error("evaluator error on request {id}: {message}")]
    Remote { id: i64, message: String },
    #[error("evaluator exited{}", format_tail(.tail))]
    ChildExited { tail: Vec<String> },
}

fn format_expected(expected: &Option<i64>) -> String {
    match expected {
        Some(id) => format!(" (expected id {id})"),
        None => String::new(),
    }
}

fn format_tail(tail: &[String]) -> String {
    if tail.is_empty() {
        String::new()
    } else {
        format!("; last output:\n{}", tail.join("\n"))
    }
}

#[derive(Debug, Clone)]
pub struct SpawnOptions {
    /// Limit for the handshake and each evaluate request.
    pub timeout: Duration,
    /// Limit for a train request.
    pub train_timeout: Duration,
}

impl Default for SpawnOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            train_timeout: Duration::from_secs(3600),
        }
    }
}

type Reply = Result<Body, ProtocolError>;

struct Shared {
    pending: Mutex<HashMap<i64, mpsc::Sender<Reply>>>,
    broken: Mutex<Option<ProtocolError>>,
    tail: Mutex<VecDeque<String>>,
    stderr_done: (Mutex<bool>, Condvar),
}

impl Shared {
    fn tail(&self) -> Vec<String> {
        let (done, cv) = &self.stderr_done;
        let guard = done.lock().unwrap();
        let _ = cv.wait_timeout_while(guard, Duration::from_millis(500), |d| !*d);
        self.tail.lock().unwrap().iter().cloned().collect()
    }

    /// Marks the connection dead and fails every outstanding request.
    fn break_with(&self, err: ProtocolError) {
        let mut broken = self.broken.lock().unwrap();
        if broken.is_none() {
            *broken = Some(err.clone());
        }
        let err = broken.clone().unwrap();
        drop(broken);
        for (_, tx) in self.pending.lock().unwrap().drain() {
            let _ = tx.send(Err(err.clone()));
        }
    }

    fn check(&self) -> Result<(), ProtocolError> {
        match &*self.broken.lock().unwrap() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }
}

fn read_responses(stdout: impl BufRead, shared: Arc<Shared>) {
    for line in stdout.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                shared.break_with(ProtocolError::Io(e.to_string()));
                return;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let msg = match Message::parse(&line) {
            Ok(m) => m,
            Err(e) => {
                shared.break_with(ProtocolError::Malformed {
                    line,
                    reason: e.to_string(),
                });
                return;
            }
        };
        let tx = shared.pending.lock().unwrap().remove(&msg.id);
        match tx {
            Some(tx) => {
                let _ = tx.send(Ok(msg.body));
            }
            None => {
                let expected = shared.pending.lock().unwrap().keys().min().copied();
                shared.break_with(ProtocolError::MismatchedId { expected, got: msg.id });
                return;
            }
        }
    }
    let tail = shared.tail();
    shared.break_with(ProtocolError::ChildExited { tail });
}

struct Window {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Window {
    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
    }
}

/// Value function backed by an evaluator subprocess.
pub struct EvaluatorHandle {
    child: Child,
    stdin: Mutex<Option<ChildStdin>>,
    shared: Arc<Shared>,
    next_id: AtomicI64,
    window: Window,
    players: usize,
    options: SpawnOptions,
    generation: u64,
    architecture: Option<(Vec<f64>, bool)>,
    meta: Option<serde_json::Value>,
}

/// Launches `command`, performs the handshake and sends `space`.
pub fn spawn_evaluator(
    command: &[String],
    space: &SearchSpace,
    options: SpawnOptions,
) -> Result<EvaluatorHandle, ProtocolError> {
    let (program, args) = command.split_first().ok_or_else(|| ProtocolError::Spawn {
        command: String::new(),
        reason: "empty command".into(),
    })?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ProtocolError::Spawn {
            command: command.join(" "),
            reason: e.to_string(),
        })?;

    let shared = Arc::new(Shared {
        pending: Mutex::new(HashMap::new()),
        broken: Mutex::new(None),
        tail: Mutex::new(VecDeque::new()),
        stderr_done: (Mutex::new(false), Condvar::new()),
    });
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    {
        let shared = shared.clone();
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                let mut tail = shared.tail.lock().unwrap();
                if tail.len() == TAIL_LINES {
                    tail.pop_front();
                }
                tail.push_back(line);
            }
            let (done, cv) = &shared.stderr_done;
            *done.lock().unwrap() = true;
            cv.notify_all();
        });
    }
    {
        let shared = shared.clone();
        thread::spawn(move || read_responses(BufReader::new(stdout), shared));
    }

    let mut handle = EvaluatorHandle {
        stdin: Mutex::new(child.stdin.take()),
        child,
        shared,
        next_id: AtomicI64::new(1),
        window: Window {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            limit: 1,
        },
        players: space.players(),
        options,
        generation: 0,
        architecture: None,
        meta: None,
    };
    handle.handshake(space)?;
    Ok(handle)
}

impl EvaluatorHandle {
    fn handshake(&mut self, space: &SearchSpace) -> Result<(), ProtocolError> {
        let timeout = self.options.timeout;
        let reply = self.request(
            Body::Hello {
                version: PROTOCOL_VERSION,
                window: None,
                meta: None,
            },
            timeout,
            "hello",
        )?;
        match reply {
            (_, Body::Hello { version, window, meta }) => {
                if version != PROTOCOL_VERSION {
                    return Err(ProtocolError::Version {
                        expected: PROTOCOL_VERSION,
                        got: version,
                    });
                }
                self.window.limit = window.unwrap_or(1).max(1);
                self.meta = meta;
            }
            (id, other) => return Err(unexpected(id, other)),
        }
        match self.request(
            Body::Space {
                space: space.doc().clone(),
            },
            timeout,
            "space",
        )? {
            (_, Body::Result { players: Some(got), .. }) if got == self.players => Ok(()),
            (_, Body::Result { players: Some(got), .. }) => Err(ProtocolError::PlayerMismatch {
                expected: self.players,
                got,
            }),
            (id, other) => Err(unexpected(id, other)),
        }
    }

    fn request(&self, body: Body, timeout: Duration, what: &'static str) -> Result<(i64, Body), ProtocolError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        {
            // checked under the pending lock so a concurrent break cannot miss us
            let mut pending = self.shared.pending.lock().unwrap();
            self.shared.check()?;
            pending.insert(id, tx);
        }
        let line = Message { id, body }.to_line();
        let written = {
            let mut stdin = self.stdin.lock().unwrap();
            match stdin.as_mut() {
                Some(w) => w.write_all(line.as_bytes()).and_then(|_| w.flush()),
                None => Err(std::io::Error::other("evaluator input closed")),
            }
        };
        if let Err(e) = written {
            self.shared.pending.lock().unwrap().remove(&id);
            // a dead child shows up here first; prefer the reader's diagnosis
            thread::sleep(Duration::from_millis(50));
            self.shared.check()?;
            return Err(ProtocolError::Io(e.to_string()));
        }
        match rx.recv_timeout(timeout) {
            Ok(Ok(Body::Error { message })) => Err(ProtocolError::Remote { id, message }),
            Ok(reply) => reply.map(|b| (id, b)),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.shared.pending.lock().unwrap().remove(&id);
                Err(ProtocolError::Timeout {
                    id,
                    what,
                    after: timeout,
                })
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                self.shared.check()?;
                Err(ProtocolError::ChildExited {
                    tail: self.shared.tail(),
                })
            }
        }
    }

    /// Declared evaluate window from the evaluator's hello.
    pub fn window(&self) -> usize {
        self.window.limit
    }

    /// Metadata the evaluator attached to its hello.
    pub fn meta(&self) -> Option<&serde_json::Value> {
        self.meta.as_ref()
    }

    pub fn evaluate_accuracy(&self, coalition: &Coalition) -> Result<f64, ProtocolError> {
        self.window.acquire();
        let reply = self.request(
            Body::Evaluate {
                mask: encode_mask(coalition),
                players: coalition.universe(),
            },
            self.options.timeout,
            "evaluate",
        );
        self.window.release();
        match reply? {
            (id, Body::Result { accuracy: Some(a), .. }) => {
                if (0.0..=1.0).contains(&a) {
                    Ok(a)
                } else {
                    Err(ProtocolError::AccuracyOutOfRange { id, accuracy: a })
                }
            }
            (id, other) => Err(unexpected(id, other)),
        }
    }

    /// Asks the evaluator to train; the cache generation moves on
    /// acknowledgment. `steps == 0` is acknowledged without a generation bump.
    pub fn request_train(&mut self, steps: u32) -> Result<(), ProtocolError> {
        let (alpha, alpha_trainable) = match &self.architecture {
            Some((a, t)) => (Some(a.clone()), *t),
            None => (None, false),
        };
        match self.request(
            Body::Train {
                steps,
                alpha,
                alpha_trainable,
            },
            self.options.train_timeout,
            "train",
        )? {
            (_, Body::Result { .. }) => {
                if steps > 0 {
                    self.generation += 1;
                }
                Ok(())
            }
            (id, other) => Err(unexpected(id, other)),
        }
    }

    /// Sends `shutdown` and waits for the child to exit.
    pub fn shutdown(mut self) -> Result<(), ProtocolError> {
        self.close();
        Ok(())
    }

    fn close(&mut self) {
        if self.shared.check().is_ok() {
            let id = self.next_id.fetch_add(1, Ordering::SeqCst);
            if let Some(w) = self.stdin.lock().unwrap().as_mut() {
                let _ = w.write_all(
                    Message {
                        id,
                        body: Body::Shutdown,
                    }
                    .to_line()
                    .as_bytes(),
                );
                let _ = w.flush();
            }
        }
        self.stdin.lock().unwrap().take();
        for _ in 0..50 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(20));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn unexpected(id: i64, body: Body) -> ProtocolError {
    ProtocolError::UnexpectedKind {
        id,
        kind: body.kind().to_string(),
    }
}

impl Drop for EvaluatorHandle {
    fn drop(&mut self) {
        if self.stdin.lock().map(|s| s.is_some()).unwrap_or(false) {
            self.close();
        }
    }
}

impl<T: Scalar> ValueFunction<T> for EvaluatorHandle {
    fn players(&self) -> usize {
        self.players
    }

    fn evaluate(&self, coalition: &Coalition) -> Result<T, EvalError> {
        Ok(T::of(self.evaluate_accuracy(coalition)?))
    }

    fn train(&mut self, steps: u32) -> Result<(), EvalError> {
        Ok(self.request_train(steps)?)
    }

    fn generation(&self) -> u64 {
        self.generation
    }

    fn concurrent(&self) -> bool {
        self.window.limit > 1
    }

    fn set_architecture(&mut self, alpha: &[T], trainable: bool) -> Result<(), EvalError> {
        self.architecture = Some((alpha.iter().map(|a| a.as_f64()).collect(), trainable));
        Ok(())
    }
}

/// What the bundled evaluator computes.
#[derive(Debug, Clone)]
pub enum Backend {
    /// Synthetic interaction game generated over the received space.
    Game(GameSpec),
    /// `V(S) = |S| / n`.
    Echo,
}

/// Deliberate misbehavior for exercising the engine's error paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Answer evaluate requests with `id + 1000`.
    WrongId,
    /// Answer evaluate requests with accuracy 1.5.
    BadAccuracy,
    /// Report one player too many during the handshake.
    BadPlayers,
    /// Exit when the n-th train request arrives.
    DieOnTrain(u32),
    /// Never answer train requests.
    HangOnTrain,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wrong-id" => Ok(Fault::WrongId),
            "bad-accuracy" => Ok(Fault::BadAccuracy),
            "bad-players" => Ok(Fault::BadPlayers),
            "hang-on-train" => Ok(Fault::HangOnTrain),
            other => match other.strip_prefix("die-on-train:").map(str::parse) {
                Some(Ok(n)) => Ok(Fault::DieOnTrain(n)),
                _ => Err(format!("unknown fault `{other}`")),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub window: usize,
    pub fault: Option<Fault>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { window: 1, fault: None }
    }
}

enum Loaded {
    Game(InteractionGame<f64>),
    Echo(PopcountGame),
}

impl Loaded {
    fn players(&self) -> usize {
        match self {
            Loaded::Game(g) => g.players(),
            Loaded::Echo(g) => ValueFunction::<f64>::players(g),
        }
    }

    fn value(&self, c: &Coalition) -> f64 {
        match self {
            Loaded::Game(g) => g.value(c),
            Loaded::Echo(g) => g.value(c),
        }
    }

    fn train(&mut self, steps: u32) {
        let _ = match self {
            Loaded::Game(g) => ValueFunction::<f64>::train(g, steps),
            Loaded::Echo(g) => ValueFunction::<f64>::train(g, steps),
        };
    }
}

/// Evaluator side of the protocol: answers requests from `input` on
/// `output` until `shutdown` or end of input. Malformed lines are answered
/// with an error carrying id -1.
pub fn serve(
    backend: &Backend,
    input: impl BufRead,
    mut output: impl Write,
    options: &ServeOptions,
) -> std::io::Result<()> {
    let mut loaded: Option<Loaded> = None;
    let mut trains = 0u32;
    let reply = |out: &mut dyn Write, id: i64, body: Body| -> std::io::Result<()> {
        out.write_all(Message { id, body }.to_line().as_bytes())?;
        out.flush()
    };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = match Message::parse(&line) {
            Ok(m) => m,
            Err(e) => {
                reply(
                    &mut output,
                    -1,
                    Body::Error {
                        message: format!("malformed line: {e}"),
                    },
                )?;
                continue;
            }
        };
        let id = msg.id;
        match msg.body {
            Body::Hello { .. } => reply(
                &mut output,
                id,
                Body::Hello {
                    version: PROTOCOL_VERSION,
                    window: Some(options.window.max(1)),
                    meta: Some(serde_json::json!({ "evaluator": "shapnas-loopback" })),
                },
            )?,
            Body::Space { space } => match SearchSpace::from_doc(space) {
                Ok(space) => {
                    let built = match backend {
                        Backend::Echo => Ok(Loaded::Echo(PopcountGame::new(space.players()))),
                        Backend::Game(spec) => make_game(&space, spec).map(Loaded::Game),
                    };
                    match built {
                        Ok(game) => {
                            let mut players = game.players();
                            if options.fault == Some(Fault::BadPlayers) {
                                players += 1;
                            }
                            loaded = Some(game);
                            reply(
                                &mut output,
                                id,
                                Body::Result {
                                    accuracy: None,
                                    batches_used: None,
                                    players: Some(players),
                                },
                            )?;
                        }
                        Err(e) => reply(&mut output, id, Body::Error { message: e.to_string() })?,
                    }
                }
                Err(e) => reply(&mut output, id, Body::Error { message: e.to_string() })?,
            },
            Body::Train { steps, .. } => {
                trains += 1;
                match options.fault {
                    Some(Fault::DieOnTrain(n)) if trains >= n => {
                        eprintln!("injected fault: exiting on train request {trains}");
                        return Err(std::io::Error::other("injected fault"));
                    }
                    Some(Fault::HangOnTrain) => continue,
                    _ => {}
                }
                match loaded.as_mut() {
                    Some(game) => {
                        game.train(steps);
                        reply(&mut output, id, Body::ack())?;
                    }
                    None => reply(
                        &mut output,
                        id,
                        Body::Error {
                            message: "train before space".into(),
                        },
                    )?,
                }
            }
            Body::Evaluate { mask, players } => {
                let Some(game) = loaded.as_ref() else {
                    reply(
                        &mut output,
                        id,
                        Body::Error {
                            message: "evaluate before space".into(),
                        },
                    )?;
                    continue;
                };
                let coalition = (players == game.players())
                    .then(|| decode_mask(players, &mask))
                    .flatten();
                let Some(coalition) = coalition else {
                    reply(
                        &mut output,
                        id,
                        Body::Error {
                            message: format!("bad mask for {players} players"),
                        },
                    )?;
                    continue;
                };
                let (id, accuracy) = match options.fault {
                    Some(Fault::WrongId) => (id + 1000, game.value(&coalition)),
                    Some(Fault::BadAccuracy) => (id, 1.5),
                    _ => (id, game.value(&coalition)),
                };
                reply(
                    &mut output,
                    id,
                    Body::Result {
                        accuracy: Some(accuracy),
                        batches_used: Some(1),
                        players: None,
                    },
                )?;
            }
            Body::Shutdown => {
                reply(&mut output, id, Body::ack())?;
                return Ok(());
            }
            Body::Result { .. } | Body::Error { .. } => {
                reply(
                    &mut output,
                    id,
                    Body::Error {
                        message: "unexpected reply-kind message".into(),
                    },
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_wire_format() {
        let m = Message {
            id: 4,
            body: Body::Evaluate {
                mask: "BQ==".into(),
                players: 3,
            },
        };
        assert_eq!(
            m.to_line(),
            "{\"id\":4,\"kind\":\"evaluate\",\"mask\":\"BQ==\",\"players\":3}\n"
        );
        assert_eq!(Message::parse(m.to_line().trim()).unwrap(), m);
        let r = Message::parse(r#"{"id":9,"kind":"result","accuracy":0.25,"batches_used":3}"#).unwrap();
        assert_eq!(
            r.body,
            Body::Result {
                accuracy: Some(0.25),
                batches_used: Some(3),
                players: None
            }
        );
        assert_eq!(
            Message {
                id: 1,
                body: Body::Shutdown
            }
            .to_line(),
            "{\"id\":1,\"kind\":\"shutdown\"}\n"
        );
    }

    #[test]
    fn mask_is_little_endian_base64() {
        let c = Coalition::from_players(10, [0, 2, 9]);
        let encoded = encode_mask(&c);
        assert_eq!(BASE64.decode(&encoded).unwrap(), vec![0b0000_0101, 0b0000_0010]);
        assert_eq!(decode_mask(10, &encoded), Some(c));
        assert_eq!(decode_mask(9, &encoded), None);
        assert_eq!(decode_mask(10, "!!"), None);
    }

    #[test]
    fn accuracy_roundtrips_exactly() {
        for x in [0.1, 1.0 / 3.0, 0.12345678901234568, 5e-324, 0.9999999999999999] {
            let m = Message {
                id: 1,
                body: Body::Result {
                    accuracy: Some(x),
                    batches_used: None,
                    players: None,
                },
            };
            match Message::parse(&m.to_line()).unwrap().body {
                Body::Result { accuracy: Some(y), .. } => assert_eq!(x.to_bits(), y.to_bits()),
                other => panic!("{other:?}"),
            }
        }
    }

    fn run_serve(backend: Backend, lines: &[&str], options: ServeOptions) -> Vec<Message> {
        let input = lines.join("\n");
        let mut out = Vec::new();
        let _ = serve(&backend, input.as_bytes(), &mut out, &options);
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| Message::parse(l).unwrap())
            .collect()
    }

    #[test]
    fn serve_transcript() {
        let space = SearchSpace::nasbench201().to_json();
        let full = encode_mask(&Coalition::full(30));
        let lines = [
            r#"{"id":1,"kind":"hello","version":1}"#.to_string(),
            format!(r#"{{"id":2,"kind":"space","space":{space}}}"#),
            format!(r#"{{"id":3,"kind":"evaluate","mask":"{full}","players":30}}"#),
            "not json".to_string(),
            r#"{"id":4,"kind":"train","steps":0}"#.to_string(),
            r#"{"id":5,"kind":"shutdown"}"#.to_string(),
        ];
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let replies = run_serve(Backend::Echo, &refs, ServeOptions::default());
        let ids: Vec<i64> = replies.iter().map(|m| m.id).collect();
        assert_eq!(ids, vec![1, 2, 3, -1, 4, 5]);
        assert!(matches!(
            replies[0].body,
            Body::Hello {
                version: 1,
                window: Some(1),
                ..
            }
        ));
        assert!(matches!(replies[1].body, Body::Result { players: Some(30), .. }));
        assert!(matches!(replies[2].body, Body::Result { accuracy: Some(a), .. } if a == 1.0));
        assert!(matches!(replies[3].body, Body::Error { .. }));
    }

    #[test]
    fn evaluate_before_space_is_an_error() {
        let replies = run_serve(
            Backend::Echo,
            &[r#"{"id":7,"kind":"evaluate","mask":"AA==","players":3}"#],
            ServeOptions::default(),
        );
        assert_eq!(replies[0].id, 7);
        assert!(matches!(replies[0].body, Body::Error { .. }));
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!("die-on-train:3".parse::<Fault>(), Ok(Fault::DieOnTrain(3)));
        assert_eq!("wrong-id".parse::<Fault>(), Ok(Fault::WrongId));
        assert!("explode".parse::<Fault>().is_err());
    }
}
