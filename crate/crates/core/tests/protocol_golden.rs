use std::path::PathBuf;

use ssd_core::denoiser::protocol::{read_frame, Frame, ProtocolError};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn manifest() -> serde_json::Value {
    let text = std::fs::read_to_string(golden_dir().join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn read(name: &str) -> Vec<u8> {
    std::fs::read(golden_dir().join(name)).unwrap()
}

fn error_class(e: &ProtocolError) -> &'static str {
    match e {
        ProtocolError::BadMagic { .. } => "bad_magic",
        ProtocolError::UnsupportedVersion(_) => "unsupported_version",
        ProtocolError::UnknownMessageType(_) => "unknown_message_type",
        ProtocolError::Truncated { .. } => "truncated",
        ProtocolError::BadRank(_) => "bad_rank",
        ProtocolError::TrailingBytes(_) => "trailing_bytes",
        ProtocolError::InvalidUtf8 => "invalid_utf8",
        _ => "other",
    }
}

#[test]
fn valid_frames_round_trip_byte_exactly() {
    let m = manifest();
    let valid = m["valid"].as_array().unwrap();
    assert_eq!(valid.len(), 20);
    for entry in valid {
        let bytes = read(entry["file"].as_str().unwrap());
        assert_eq!(bytes.len() as u64, entry["len"].as_u64().unwrap());
        let frame = Frame::decode(&bytes).unwrap_or_else(|e| panic!("{entry}: {e}"));
        assert_eq!(frame.kind().replace('-', "_"), entry["kind"].as_str().unwrap());
        match &frame {
            Frame::EpsRequest(t) | Frame::EpsResponse(t) => {
                assert_eq!(t.timestep as u64, entry["timestep"].as_u64().unwrap());
                let dims: Vec<u32> = serde_json::from_value(entry["dims"].clone()).unwrap();
                assert_eq!(t.dims, dims);
            }
            Frame::Error(msg) => assert_eq!(msg, entry["message"].as_str().unwrap()),
            Frame::Shutdown => {}
        }
        assert_eq!(frame.encode().unwrap(), bytes, "{}", entry["file"]);
    }
}

#[test]
fn malformed_frames_map_to_error_classes() {
    let m = manifest();
    for entry in m["malformed"].as_array().unwrap() {
        let bytes = read(entry["file"].as_str().unwrap());
        let err = Frame::decode(&bytes).expect_err(entry["file"].as_str().unwrap());
        assert_eq!(
            error_class(&err),
            entry["error"].as_str().unwrap(),
            "{}: {err}",
            entry["file"]
        );
    }
}

#[test]
fn concatenated_stream_decodes_in_order() {
    let m = manifest();
    let mut stream = Vec::new();
    let mut expected = Vec::new();
    for entry in m["valid"].as_array().unwrap() {
        let bytes = read(entry["file"].as_str().unwrap());
        expected.push(Frame::decode(&bytes).unwrap().encode().unwrap());
        stream.extend(bytes);
    }
    let mut r = &stream[..];
    let mut got = Vec::new();
    while let Some(frame) = read_frame(&mut r).unwrap() {
        got.push(frame.encode().unwrap());
    }
    assert_eq!(got, expected);
}
