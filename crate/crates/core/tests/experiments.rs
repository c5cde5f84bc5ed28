use ssd_core::denoiser::gmm::GmmDenoiser;
use ssd_core::diagnostics::compare_inversions;
use ssd_core::inversion::InversionConfig;
use ssd_core::operators::{build_operator, Degradation};
use ssd_core::rng::substream;
use ssd_core::schedule::NoiseSchedule;
use ssd_core::toy::{toy_mixture, ToyConfig};

#[test]
fn inversion_comparison_orders_faithfulness() {
    let s = NoiseSchedule::default();
    let seeds = 20;
    let (mut ddim_best, mut ddpm_worst) = (0, 0);
    for seed in 0..seeds {
        let gmm = toy_mixture(&ToyConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let den = GmmDenoiser::new(&gmm, &s);
        let op = build_operator(&Degradation::SrBicubic { scale: 4 }, &gmm.shape).unwrap();
        let y = op.apply(&gmm.sample(&mut substream(seed, 0))).unwrap();
        let rows = compare_inversions(
            &s,
            &den,
            Some(&gmm),
            &op,
            &y,
            &InversionConfig::default(),
            85,
            0.0,
            seed,
        )
        .unwrap();
        let l2: Vec<f64> = rows.iter().map(|r| r.l2.unwrap()).collect();
        assert_eq!(
            rows.iter().map(|r| r.condition.as_str()).collect::<Vec<_>>(),
            ["ddim", "ddpm", "da"]
        );
        if l2[0] < l2[1] && l2[0] < l2[2] {
            ddim_best += 1;
        }
        if l2[1] > l2[0] && l2[1] > l2[2] {
            ddpm_worst += 1;
        }
    }
    assert!(2 * ddim_best > seeds, "ddim most faithful in {ddim_best}/{seeds}");
    assert!(2 * ddpm_worst > seeds, "ddpm least faithful in {ddpm_worst}/{seeds}");
}
