use std::time::Instant;

use ssd_core::denoiser::gmm::GmmDenoiser;
use ssd_core::denoiser::protocol::ProtocolError;
use ssd_core::denoiser::{Denoiser, ExternalDenoiserClient};
use ssd_core::generation::{ssd_restore, RestorationConfig};
use ssd_core::operators::{build_operator, Degradation};
use ssd_core::schedule::NoiseSchedule;
use ssd_core::toy::{toy_mixture, ToyConfig};
use ssd_core::{SsdError, Tensor};

fn stub(mode: &str, timeout_ms: u64) -> ExternalDenoiserClient {
    let argv = vec![env!("CARGO_BIN_EXE_ssd-stub-denoiser").to_string(), mode.to_string()];
    ExternalDenoiserClient::spawn(&argv, timeout_ms).unwrap()
}

fn probe() -> Tensor {
    Tensor::from_fn(&[4, 3, 1], |i| (i as f32 * 0.37 - 1.1) as f64)
}

#[test]
fn echo_server_returns_input_bit_exactly() {
    let client = stub("echo", 5_000);
    let x = probe();
    for t in [1, 550, 999] {
        assert_eq!(client.predict_eps(&x, t).unwrap(), x);
    }
}

#[test]
fn zero_server_returns_zeros() {
    let client = stub("zero", 5_000);
    let out = client.predict_eps(&probe(), 10).unwrap();
    assert_eq!(out, Tensor::zeros(&[4, 3, 1]));
}

#[test]
fn bad_magic_is_a_protocol_error_naming_the_bytes() {
    let client = stub("bad-magic", 5_000);
    match client.predict_eps(&probe(), 3) {
        Err(SsdError::Protocol(e @ ProtocolError::BadMagic { .. })) => {
            assert!(e.to_string().contains("58, 44, 53, 53"), "{e}");
        }
        other => panic!("expected bad magic, got {other:?}"),
    }
    // The stream is out of sync afterwards; later requests fail fast.
    assert!(client.predict_eps(&probe(), 3).is_err());
}

#[test]
fn server_error_frames_surface_as_denoiser_errors() {
    let client = stub("error", 5_000);
    let err = client.predict_eps(&probe(), 3).unwrap_err();
    assert!(
        matches!(&err, SsdError::Denoiser(m) if m.contains("stub failure")),
        "{err}"
    );
}

#[test]
fn echoed_dims_are_checked() {
    let client = stub("wrong-dims", 5_000);
    let err = client.predict_eps(&probe(), 3).unwrap_err();
    assert!(
        matches!(err, SsdError::Protocol(ProtocolError::DimsMismatch { .. })),
        "{err}"
    );
}

#[test]
fn slow_server_times_out() {
    let client = stub("sleep", 200);
    let start = Instant::now();
    let err = client.predict_eps(&probe(), 3).unwrap_err();
    assert!(matches!(err, SsdError::Timeout(200)), "{err}");
    assert!(start.elapsed().as_secs() < 5);
}

#[test]
fn missing_program_is_an_io_error() {
    let argv = vec!["/nonexistent/denoiser".to_string()];
    assert!(matches!(
        ExternalDenoiserClient::spawn(&argv, 100),
        Err(SsdError::Io { .. })
    ));
    assert!(ExternalDenoiserClient::spawn(&[], 100).is_err());
}

/// A client that answers with the in-process mixture prediction routed
/// through an echo server, so every value crosses the wire.
struct Routed<'a> {
    inner: GmmDenoiser<'a>,
    wire: ExternalDenoiserClient,
}

impl Denoiser for Routed<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> ssd_core::Result<Tensor> {
        let eps = self.inner.predict_eps(x_t, t)?;
        let rounded = eps.map(|v| v as f32 as f64);
        let back = self.wire.predict_eps(&rounded, t)?;
        assert_eq!(back, rounded);
        Ok(back)
    }
}

#[test]
fn restoration_through_the_wire_matches_in_process_run() {
    let schedule = NoiseSchedule::default();
    let gmm = toy_mixture(&ToyConfig {
        size: 8,
        ..Default::default()
    })
    .unwrap();
    let op = build_operator(&Degradation::SrBicubic { scale: 2 }, &gmm.shape).unwrap();
    let x = gmm.sample(&mut ssd_core::rng::seeded(5));
    let y = op.apply(&x).unwrap();
    let cfg = RestorationConfig {
        steps_gen: 10,
        ..Default::default()
    };

    struct Local<'a>(GmmDenoiser<'a>);
    impl Denoiser for Local<'_> {
        fn predict_eps(&self, x_t: &Tensor, t: usize) -> ssd_core::Result<Tensor> {
            Ok(self.0.predict_eps(x_t, t)?.map(|v| v as f32 as f64))
        }
    }
    let local = ssd_restore(&schedule, &Local(GmmDenoiser::new(&gmm, &schedule)), &op, &y, &cfg).unwrap();
    let routed = Routed {
        inner: GmmDenoiser::new(&gmm, &schedule),
        wire: stub("echo", 5_000),
    };
    let remote = ssd_restore(&schedule, &routed, &op, &y, &cfg).unwrap();
    assert_eq!(local.x, remote.x);
}
