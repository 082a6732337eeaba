//! Client for external detectors speaking the wire protocol over a TCP
//! stream or a spawned subprocess's stdio.

use super::protocol::{encode_request, parse_response};
use super::{Detector, DetectorError, DetectorInput, Proposal};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::Duration;

/// Connection policy for an external detector.
#[derive(Debug, Clone)]
pub struct ExternalConfig {
    pub timeout: Duration,
    /// Reconnect-and-resend attempts after a transport failure.
    pub retries: u32,
    /// Operating threshold reported for this detector.
    pub threshold: f64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 1,
            threshold: 0.3,
        }
    }
}

/// Where the external detector lives.
///
/// `tcp://host:port` dials a socket; `cmd:<program> <args...>` (or a bare
/// command line) spawns a subprocess and speaks over its stdio.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Tcp(String),
    Subprocess(Vec<String>),
}

impl Endpoint {
    pub fn parse(spec: &str) -> Result<Self, DetectorError> {
        let spec = spec.trim();
        if let Some(addr) = spec.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(DetectorError::Connection {
                    endpoint: spec.to_string(),
                    reason: "empty tcp address".into(),
                });
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let cmd = spec.strip_prefix("cmd:").unwrap_or(spec);
        let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err(DetectorError::Connection {
                endpoint: spec.to_string(),
                reason: "empty command".into(),
            });
        }
        Ok(Endpoint::Subprocess(argv))
    }
}

enum Transport {
    Tcp {
        stream: TcpStream,
        reader: BufReader<TcpStream>,
    },
    Child {
        child: Child,
        stdin: std::process::ChildStdin,
        lines: Receiver<std::io::Result<String>>,
    },
}

/// A connected external detector. One request in flight at a time;
/// parallelism across frames uses one client per worker.
pub struct ExternalDetector {
    endpoint_text: String,
    endpoint: Endpoint,
    config: ExternalConfig,
    transport: Option<Transport>,
}

impl ExternalDetector {
    /// Parses the endpoint and prepares a client; the connection itself is
    /// established lazily on the first request.
    pub fn new(endpoint: &str, config: ExternalConfig) -> Result<Self, DetectorError> {
        Ok(Self {
            endpoint_text: endpoint.to_string(),
            endpoint: Endpoint::parse(endpoint)?,
            config,
            transport: None,
        })
    }

    fn connection_err(&self, reason: impl ToString) -> DetectorError {
        DetectorError::Connection {
            endpoint: self.endpoint_text.clone(),
            reason: reason.to_string(),
        }
    }

    fn connect(&mut self) -> Result<(), DetectorError> {
        if self.transport.is_some() {
            return Ok(());
        }
        let transport = match &self.endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| self.connection_err(e))?;
                stream
                    .set_read_timeout(Some(self.config.timeout))
                    .map_err(|e| self.connection_err(e))?;
                stream
                    .set_write_timeout(Some(self.config.timeout))
                    .map_err(|e| self.connection_err(e))?;
                let reader =
                    BufReader::new(stream.try_clone().map_err(|e| self.connection_err(e))?);
                Transport::Tcp { stream, reader }
            }
            Endpoint::Subprocess(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| self.connection_err(e))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                // A reader thread turns blocking pipe reads into timeouts.
                let (tx, rx) = std::sync::mpsc::channel();
                std::thread::spawn(move || {
                    let reader = BufReader::new(stdout);
                    for line in reader.lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Transport::Child {
                    child,
                    stdin,
                    lines: rx,
                }
            }
        };
        self.transport = Some(transport);
        Ok(())
    }

    fn disconnect(&mut self) {
        if let Some(Transport::Child { mut child, .. }) = self.transport.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    fn request_once(&mut self, line: &str) -> Result<Vec<Proposal>, DetectorError> {
        self.connect()?;
        let endpoint = self.endpoint_text.clone();
        let timeout = self.config.timeout;
        let transport = self.transport.as_mut().expect("connected");
        let response = match transport {
            Transport::Tcp { stream, reader } => {
                stream
                    .write_all(line.as_bytes())
                    .map_err(|e| DetectorError::Connection {
                        endpoint: endpoint.clone(),
                        reason: format!("write: {e}"),
                    })?;
                stream.flush().map_err(|e| DetectorError::Connection {
                    endpoint: endpoint.clone(),
                    reason: format!("flush: {e}"),
                })?;
                let mut buf = String::new();
                let n = reader.read_line(&mut buf).map_err(|e| {
                    if matches!(
                        e.kind(),
                        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                    ) {
                        DetectorError::Timeout {
                            endpoint: endpoint.clone(),
                            timeout_ms: timeout.as_millis() as u64,
                        }
                    } else {
                        DetectorError::Connection {
                            endpoint: endpoint.clone(),
                            reason: format!("read: {e}"),
                        }
                    }
                })?;
                if n == 0 {
                    return Err(DetectorError::Connection {
                        endpoint,
                        reason: "connection closed".into(),
                    });
                }
                buf
            }
            Transport::Child { stdin, lines, .. } => {
                stdin
                    .write_all(line.as_bytes())
                    .and_then(|_| stdin.flush())
                    .map_err(|e| DetectorError::Connection {
                        endpoint: endpoint.clone(),
                        reason: format!("write: {e}"),
                    })?;
                match lines.recv_timeout(timeout) {
                    Ok(Ok(l)) => l,
                    Ok(Err(e)) => {
                        return Err(DetectorError::Connection {
                            endpoint,
                            reason: format!("read: {e}"),
                        })
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(DetectorError::Timeout {
                            endpoint,
                            timeout_ms: timeout.as_millis() as u64,
                        })
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(DetectorError::Connection {
                            endpoint,
                            reason: "detector process exited".into(),
                        })
                    }
                }
            }
        };
        parse_response(&response)
    }

    /// Sends one request, reconnecting and retrying transport failures
    /// according to the config. Protocol errors are not retried.
    pub fn request(&mut self, input: &DetectorInput<'_>) -> Result<Vec<Proposal>, DetectorError> {
        let line = encode_request(input);
        let mut last = None;
        for _attempt in 0..=self.config.retries {
            match self.request_once(&line) {
                Ok(p) => return Ok(p),
                Err(e @ (DetectorError::Connection { .. } | DetectorError::Timeout { .. })) => {
                    self.disconnect();
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        self.disconnect();
    }
}

impl Detector for ExternalDetector {
    fn detect(&mut self, input: &DetectorInput<'_>) -> Result<Vec<Proposal>, DetectorError> {
        self.request(input)
    }

    fn operating_threshold(&self) -> f64 {
        self.config.threshold
    }
}

/// One-shot detection against an endpoint.
pub fn external_detect(
    endpoint: &str,
    input: &DetectorInput<'_>,
    config: ExternalConfig,
) -> Result<Vec<Proposal>, DetectorError> {
    ExternalDetector::new(endpoint, config)?.request(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::protocol::{encode_response, parse_request};
    use crate::geometry::Box3D;
    use crate::kitti::{LidarPoint, PointCloud};
    use std::net::TcpListener;

    fn fixture_proposal() -> Proposal {
        Proposal {
            box3d: Box3D::new(20.0, 0.0, -0.9, 3.9, 1.6, 1.56, 0.0),
            confidence: 0.77,
        }
    }

    /// Serves `responses` lines on a fresh port, one per request line.
    fn spawn_stub(responses: Vec<String>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((stream, _)) = listener.accept() {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut stream = stream;
                for resp in responses {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    assert!(parse_request(&line).is_ok(), "stub got bad request");
                    stream.write_all(resp.as_bytes()).unwrap();
                }
            }
        });
        format!("tcp://{addr}")
    }

    #[test]
    fn echo_stub_round_trip() {
        let endpoint = spawn_stub(vec![encode_response(&[fixture_proposal()])]);
        let cloud = PointCloud::new(vec![LidarPoint {
            x: 1.0,
            y: 0.0,
            z: 0.0,
            intensity: 0.5,
        }]);
        let input = DetectorInput::cloud_only(&cloud);
        let proposals = external_detect(&endpoint, &input, ExternalConfig::default()).unwrap();
        assert_eq!(proposals, vec![fixture_proposal()]);
    }

    #[test]
    fn missing_score_is_malformed_response() {
        let endpoint = spawn_stub(vec![
            "{\"v\":1,\"proposals\":[{\"x\":1,\"y\":0,\"z\":0,\"dx\":1,\"dy\":1,\"dz\":1,\"yaw\":0}]}\n"
                .to_string(),
        ]);
        let cloud = PointCloud::default();
        let input = DetectorInput::cloud_only(&cloud);
        let mut det = ExternalDetector::new(&endpoint, ExternalConfig::default()).unwrap();
        assert!(matches!(
            det.request(&input),
            Err(DetectorError::MalformedResponse { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_protocol_error() {
        let endpoint = spawn_stub(vec!["{\"v\":3,\"proposals\":[]}\n".to_string()]);
        let cloud = PointCloud::default();
        let input = DetectorInput::cloud_only(&cloud);
        let mut det = ExternalDetector::new(&endpoint, ExternalConfig::default()).unwrap();
        assert!(matches!(
            det.request(&input),
            Err(DetectorError::ProtocolVersion { got: 3, .. })
        ));
    }

    #[test]
    fn unreachable_endpoint_names_itself() {
        // Port 9 (discard) is virtually never listening locally.
        let cloud = PointCloud::default();
        let input = DetectorInput::cloud_only(&cloud);
        let cfg = ExternalConfig {
            timeout: Duration::from_millis(200),
            retries: 0,
            threshold: 0.3,
        };
        match external_detect("tcp://127.0.0.1:9", &input, cfg) {
            Err(DetectorError::Connection { endpoint, .. }) => {
                assert!(endpoint.contains("127.0.0.1:9"))
            }
            other => panic!("expected connection error, got {other:?}"),
        }
    }
}
