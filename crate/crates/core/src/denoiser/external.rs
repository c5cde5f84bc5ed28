//! Client for a denoiser running as a child process speaking the `SSDX`
//! protocol over its standard input and output.

use std::io::{BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::Duration;

use super::protocol::{self, Frame, ProtocolError, TensorMessage, VERSION};
use super::Denoiser;
use crate::error::{Result, SsdError};
use crate::tensor::Tensor;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

type Incoming = std::result::Result<Option<Frame>, ProtocolError>;

struct Channel {
    stdin: BufWriter<ChildStdin>,
    responses: Receiver<Incoming>,
    /// Set once a request fails in a way that leaves the stream out of sync.
    broken: Option<String>,
}

pub struct ExternalDenoiserClient {
    child: Child,
    channel: Mutex<Channel>,
    reader: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl ExternalDenoiserClient {
    /// Spawns `argv[0]` with the remaining arguments.
    pub fn spawn(argv: &[String], timeout_ms: u64) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| SsdError::invalid("external denoiser command is empty"))?;
        if timeout_ms == 0 {
            return Err(SsdError::invalid("request timeout must be positive"));
        }
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SsdError::io(program, e))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");

        let (tx, rx) = mpsc::channel();
        let reader = std::thread::Builder::new()
            .name("ssd-denoiser-reader".into())
            .spawn(move || {
                let mut r = BufReader::new(stdout);
                loop {
                    let item = protocol::read_frame(&mut r);
                    let done = !matches!(item, Ok(Some(_)));
                    if tx.send(item).is_err() || done {
                        break;
                    }
                }
            })
            .map_err(|e| SsdError::Denoiser(format!("cannot start reader thread: {e}")))?;

        Ok(Self {
            child,
            channel: Mutex::new(Channel {
                stdin: BufWriter::new(stdin),
                responses: rx,
                broken: None,
            }),
            reader: Some(reader),
            timeout: Duration::from_millis(timeout_ms),
        })
    }

    pub fn protocol_version(&self) -> u16 {
        VERSION
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout.as_millis() as u64
    }

    fn round_trip(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let dims = x_t
            .shape()
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| SsdError::invalid("dimension exceeds u32")))
            .collect::<Result<Vec<_>>>()?;
        let timestep = u32::try_from(t).map_err(|_| SsdError::invalid("timestep exceeds u32"))?;
        let payload = x_t.data().iter().map(|&v| v as f32).collect();
        let request = TensorMessage::new(timestep, dims, payload)?;

        let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(reason) = &ch.broken {
            return Err(SsdError::Denoiser(format!("connection unusable: {reason}")));
        }
        let outcome = exchange(&mut ch, &request, self.timeout);
        if let Err(e) = &outcome {
            if !matches!(e, SsdError::Denoiser(_)) {
                ch.broken = Some(e.to_string());
            }
        }
        let response = outcome?;
        let data = response.payload.iter().map(|&v| v as f64).collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

fn exchange(ch: &mut Channel, request: &TensorMessage, timeout: Duration) -> Result<TensorMessage> {
    Frame::EpsRequest(request.clone())
        .write_to(&mut ch.stdin)
        .map_err(|e| ProtocolError::Io(format!("cannot write request: {e}")))?;
    let frame = match ch.responses.recv_timeout(timeout) {
        Ok(Ok(Some(frame))) => frame,
        Ok(Ok(None)) | Err(RecvTimeoutError::Disconnected) => {
            return Err(ProtocolError::Io("denoiser closed its output".into()).into())
        }
        Ok(Err(e)) => return Err(e.into()),
        Err(RecvTimeoutError::Timeout) => return Err(SsdError::Timeout(timeout.as_millis() as u64)),
    };
    match frame {
        Frame::EpsResponse(resp) => {
            if resp.timestep != request.timestep {
                return Err(ProtocolError::TimestepMismatch {
                    sent: request.timestep,
                    got: resp.timestep,
                }
                .into());
            }
            if resp.dims != request.dims {
                return Err(ProtocolError::DimsMismatch {
                    sent: request.dims.clone(),
                    got: resp.dims,
                }
                .into());
            }
            Ok(resp)
        }
        Frame::Error(msg) => Err(SsdError::Denoiser(format!("server reported: {msg}"))),
        other => Err(ProtocolError::Unexpected {
            expected: "eps-response",
            got: other.kind(),
        }
        .into()),
    }
}

impl Denoiser for ExternalDenoiserClient {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.round_trip(x_t, t)
    }
}

impl Drop for ExternalDenoiserClient {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = Frame::Shutdown.write_to(&mut ch.stdin);
            let _ = ch.stdin.flush();
        }
        // Give a well-behaved server a moment to exit on its own.
        for _ in 0..20 {
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
