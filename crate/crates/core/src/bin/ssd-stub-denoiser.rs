//! Minimal `SSDX` server used to exercise the external-denoiser client.
//!
//! Usage: `ssd-stub-denoiser <mode>` where mode is one of
//! `echo`, `zero`, `bad-magic`, `error`, `sleep`, `wrong-dims`.

use std::io::{self, BufReader, BufWriter, Write};
use std::process::ExitCode;

use ssd_core::denoiser::protocol::{read_frame, Frame, TensorMessage};

fn main() -> ExitCode {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "echo".into());
    if !["echo", "zero", "bad-magic", "error", "sleep", "wrong-dims"].contains(&mode.as_str()) {
        eprintln!("unknown mode {mode:?}");
        return ExitCode::from(2);
    }
    let mut input = BufReader::new(io::stdin().lock());
    let mut out = BufWriter::new(io::stdout().lock());
    loop {
        let frame = match read_frame(&mut input) {
            Ok(Some(f)) => f,
            Ok(None) => return ExitCode::SUCCESS,
            Err(e) => {
                let _ = Frame::Error(format!("bad request: {e}")).write_to(&mut out);
                continue;
            }
        };
        let req = match frame {
            Frame::EpsRequest(req) => req,
            Frame::Shutdown => return ExitCode::SUCCESS,
            other => {
                let _ = Frame::Error(format!("unexpected {} frame", other.kind())).write_to(&mut out);
                continue;
            }
        };
        let result = match mode.as_str() {
            "echo" => Frame::EpsResponse(req).write_to(&mut out),
            "zero" => {
                let n = req.payload.len();
                Frame::EpsResponse(TensorMessage {
                    payload: vec![0.0; n],
                    ..req
                })
                .write_to(&mut out)
            }
            "wrong-dims" => {
                let n = req.payload.len() as u32;
                Frame::EpsResponse(TensorMessage { dims: vec![n], ..req }).write_to(&mut out)
            }
            "bad-magic" => {
                let mut bytes = Frame::EpsResponse(req).encode().expect("valid request");
                bytes[..4].copy_from_slice(b"XDSS");
                out.write_all(&bytes).and_then(|_| out.flush())
            }
            "error" => Frame::Error("stub failure".into()).write_to(&mut out),
            _ => {
                std::thread::sleep(std::time::Duration::from_secs(30));
                Ok(())
            }
        };
        if result.is_err() {
            return ExitCode::from(1);
        }
    }
}
