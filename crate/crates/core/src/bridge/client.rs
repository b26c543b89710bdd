use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::{check_response, encode_query, parse_response_line, ProbeQuery, ProbeResponse, ProtocolError};

/// Where the backend lives: a child process speaking on its standard
/// streams, or a TCP socket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Command(Vec<String>),
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = String;

    /// `tcp://HOST:PORT` and bare `HOST:PORT` are sockets; anything else is
    /// split shell-style into a command line.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(addr) = s.strip_prefix("tcp://") {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let looks_like_socket = !s.contains(char::is_whitespace)
            && s.rsplit_once(':')
                .is_some_and(|(host, port)| !host.is_empty() && !host.contains('/') && port.parse::<u16>().is_ok());
        if looks_like_socket {
            return Ok(Endpoint::Tcp(s.to_string()));
        }
        match shlex::split(s) {
            Some(argv) if !argv.is_empty() => Ok(Endpoint::Command(argv)),
            _ => Err(format!("cannot parse bridge endpoint {s:?}")),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Command(argv) => {
                f.write_str(&shlex::try_join(argv.iter().map(String::as_str)).unwrap_or_default())
            }
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClientOptions {
    /// Queries sent but not yet answered.
    pub max_in_flight: usize,
    /// Per-query deadline, measured from when the query is written.
    pub timeout: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 64,
            timeout: Duration::from_secs(30),
        }
    }
}

/// The single outcome for one query id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub id: String,
    pub result: Result<ProbeResponse, ProtocolError>,
}

/// A pipelining client. Responses are read on a background thread and
/// matched to pending queries by id.
pub struct BridgeClient {
    writer: Option<Box<dyn Write + Send>>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    opts: ClientOptions,
    closed: Option<String>,
    orphans: Vec<ProtocolError>,
}

impl BridgeClient {
    pub fn connect(endpoint: &Endpoint, opts: ClientOptions) -> std::io::Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                Ok(Self::from_streams(reader, BufWriter::new(stream), opts))
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("stdin is piped");
                let stdout = child.stdout.take().expect("stdout is piped");
                let mut client = Self::from_streams(BufReader::new(stdout), BufWriter::new(stdin), opts);
                client.child = Some(child);
                Ok(client)
            }
        }
    }

    pub fn from_streams<R, W>(reader: R, writer: W, opts: ClientOptions) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            writer: Some(Box::new(writer)),
            lines: rx,
            child: None,
            opts: ClientOptions {
                max_in_flight: opts.max_in_flight.max(1),
                ..opts
            },
            closed: None,
            orphans: Vec::new(),
        }
    }

    /// Errors on response lines that matched no pending query.
    pub fn orphans(&self) -> &[ProtocolError] {
        &self.orphans
    }

    /// Sends every query, keeping at most `max_in_flight` outstanding, and
    /// returns exactly one outcome per query, in query order.
    pub fn run(&mut self, queries: &[ProbeQuery]) -> Vec<QueryOutcome> {
        let mut results: Vec<Option<Result<ProbeResponse, ProtocolError>>> = vec![None; queries.len()];
        let mut pending: HashMap<&str, usize> = HashMap::new();
        let mut deadlines: VecDeque<(Instant, usize)> = VecDeque::new();
        let mut seen_ids: HashMap<&str, usize> = HashMap::new();
        let mut next = 0;

        while next < queries.len() || !pending.is_empty() {
            let mut wrote = false;
            while next < queries.len() && pending.len() < self.opts.max_in_flight {
                let idx = next;
                next += 1;
                let query = &queries[idx];
                if seen_ids.insert(&query.id, idx).is_some() {
                    results[idx] = Some(Err(ProtocolError::DuplicateId(query.id.clone())));
                    continue;
                }
                if let Err(e) = query.validate() {
                    results[idx] = Some(Err(e));
                    continue;
                }
                if let Some(reason) = &self.closed {
                    results[idx] = Some(Err(ProtocolError::Disconnected(reason.clone())));
                    continue;
                }
                match self.send(query) {
                    Ok(()) => {
                        wrote = true;
                        pending.insert(&query.id, idx);
                        deadlines.push_back((Instant::now() + self.opts.timeout, idx));
                    }
                    Err(e) => {
                        self.closed = Some(e.to_string());
                        results[idx] = Some(Err(ProtocolError::Disconnected(e.to_string())));
                    }
                }
            }
            if wrote {
                if let Err(e) = self.writer.as_mut().map_or(Ok(()), |w| w.flush()) {
                    self.closed = Some(e.to_string());
                }
            }
            if pending.is_empty() {
                continue;
            }
            if let Some(reason) = self.closed.clone() {
                for (_, idx) in pending.drain() {
                    results[idx] = Some(Err(ProtocolError::Disconnected(reason.clone())));
                }
                continue;
            }

            while deadlines.front().is_some_and(|&(_, idx)| results[idx].is_some()) {
                deadlines.pop_front();
            }
            let wait = deadlines.front().map_or(self.opts.timeout, |&(at, _)| {
                at.saturating_duration_since(Instant::now())
            });
            match self.lines.recv_timeout(wait) {
                Ok(Ok(line)) => self.accept(&line, queries, &mut pending, &mut results),
                Ok(Err(e)) => self.closed = Some(e.to_string()),
                Err(RecvTimeoutError::Disconnected) => self.closed = Some("backend closed its output".into()),
                Err(RecvTimeoutError::Timeout) => {
                    let now = Instant::now();
                    while let Some(&(at, idx)) = deadlines.front() {
                        if at > now {
                            break;
                        }
                        deadlines.pop_front();
                        if results[idx].is_none() {
                            pending.remove(queries[idx].id.as_str());
                            results[idx] = Some(Err(ProtocolError::Timeout(self.opts.timeout)));
                        }
                    }
                }
            }
        }

        queries
            .iter()
            .zip(results)
            .map(|(q, r)| QueryOutcome {
                id: q.id.clone(),
                result: r.expect("every query is resolved before the loop ends"),
            })
            .collect()
    }

    fn send(&mut self, query: &ProbeQuery) -> std::io::Result<()> {
        let writer = self
            .writer
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "writer closed"))?;
        writer.write_all(encode_query(query).as_bytes())?;
        writer.write_all(b"\n")
    }

    fn accept(
        &mut self,
        line: &str,
        queries: &[ProbeQuery],
        pending: &mut HashMap<&str, usize>,
        results: &mut [Option<Result<ProbeResponse, ProtocolError>>],
    ) {
        if line.trim().is_empty() {
            return;
        }
        let raw = parse_response_line(line);
        let Some(idx) = raw.id.as_deref().and_then(|id| pending.remove(id)) else {
            let err = match (raw.id, raw.body) {
                (Some(id), _) => ProtocolError::UnknownId(id),
                (None, Err(e)) => e,
                (None, Ok(_)) => ProtocolError::Malformed("response has no id".into()),
            };
            log::warn!("unattributed response: {err}");
            self.orphans.push(err);
            return;
        };
        results[idx] = Some(raw.body.and_then(|value| check_response(&queries[idx], &value)));
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        // Closing stdin asks a child backend to exit.
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(20));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
